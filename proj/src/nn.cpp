#include "fedkd/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "fedkd/errors.hpp"

namespace fedkd {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kCheckpointMagic[4] = {'F', 'K', 'D', 'P'};
constexpr std::uint16_t kCheckpointVersion = 1;
constexpr const char* kConfigRecord = "__config__";

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

Vector softmax(const Vector& z) {
    const double max_z = z.maxCoeff();
    Vector e = (z.array() - max_z).exp();
    return e / e.sum();
}

// Row-wise softmax backward: ds_i = a_i * (da_i - <da, a>) per row.
Matrix softmax_rows_backward(const Matrix& probs, const Matrix& d_probs) {
    Matrix out(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const double dot = probs.row(r).dot(d_probs.row(r));
        out.row(r) = probs.row(r).array() * (d_probs.row(r).array() - dot);
    }
    return out;
}

Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta, LayerNormCache& cache) {
    cache.normalized.resize(x.rows(), x.cols());
    cache.inv_std.resize(x.rows());
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std(r) = inv_std;
        cache.normalized.row(r) = (x.row(r).array() - mean) * inv_std;
        out.row(r) = cache.normalized.row(r).array() * gamma.col(0).transpose().array() +
                     beta.col(0).transpose().array();
    }
    return out;
}

// Returns the gradient w.r.t. the pre-norm input and accumulates the
// gain/shift gradients.
Matrix layer_norm_backward(const Matrix& d_out, const LayerNormCache& cache, const Matrix& gamma,
                           Matrix& d_gamma, Matrix& d_beta) {
    d_gamma.col(0) += (d_out.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
    d_beta.col(0) += d_out.colwise().sum().transpose();
    Matrix dx(d_out.rows(), d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        Eigen::ArrayXd d_hat = d_out.row(r).transpose().array() * gamma.col(0).array();
        const double mean_d_hat = d_hat.mean();
        const double mean_d_hat_x = (d_hat * cache.normalized.row(r).transpose().array()).mean();
        dx.row(r) = (cache.inv_std(r) *
                     (d_hat - mean_d_hat - cache.normalized.row(r).transpose().array() * mean_d_hat_x))
                        .transpose();
    }
    return dx;
}

Matrix add_row_bias(const Matrix& x, const Matrix& bias) {
    return x.rowwise() + bias.col(0).transpose();
}

std::string layer_prefix(int l) {
    return "layer." + std::to_string(l) + ".";
}

struct ParamShape {
    int rows;
    int cols;
};

std::map<std::string, ParamShape> parameter_shapes(const ModelConfig& c) {
    std::map<std::string, ParamShape> shapes;
    shapes["embed.w"] = {c.input_dim, c.hidden_dim};
    shapes["embed.b"] = {c.hidden_dim, 1};
    for (int l = 0; l < c.num_layers; ++l) {
        const std::string p = layer_prefix(l);
        shapes[p + "attn.wq"] = {c.hidden_dim, c.hidden_dim};
        shapes[p + "attn.bq"] = {c.hidden_dim, 1};
        shapes[p + "attn.wk"] = {c.hidden_dim, c.hidden_dim};
        shapes[p + "attn.bk"] = {c.hidden_dim, 1};
        shapes[p + "attn.wv"] = {c.hidden_dim, c.hidden_dim};
        shapes[p + "attn.bv"] = {c.hidden_dim, 1};
        shapes[p + "attn.wo"] = {c.hidden_dim, c.hidden_dim};
        shapes[p + "attn.bo"] = {c.hidden_dim, 1};
        shapes[p + "ln1.gamma"] = {c.hidden_dim, 1};
        shapes[p + "ln1.beta"] = {c.hidden_dim, 1};
        shapes[p + "ffn.w1"] = {c.hidden_dim, c.ffn_dim()};
        shapes[p + "ffn.b1"] = {c.ffn_dim(), 1};
        shapes[p + "ffn.w2"] = {c.ffn_dim(), c.hidden_dim};
        shapes[p + "ffn.b2"] = {c.hidden_dim, 1};
        shapes[p + "ln2.gamma"] = {c.hidden_dim, 1};
        shapes[p + "ln2.beta"] = {c.hidden_dim, 1};
    }
    shapes["head.w"] = {c.hidden_dim, c.num_classes};
    shapes["head.b"] = {c.num_classes, 1};
    return shapes;
}

void write_u16(std::ostream& out, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    }
    return v;
}

double read_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    double v = 0.0;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

void ModelConfig::validate() const {
    if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || input_dim < 1 || seq_len < 1) {
        throw ConfigError("model config: all dimensions must be >= 1");
    }
    if (num_classes < 2) {
        throw ConfigError("model config: num_classes must be >= 2");
    }
    if (hidden_dim % num_heads != 0) {
        throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    }
}

ParamSet::ParamSet(ModelConfig config, GradSet values)
    : config_(config), values_(std::move(values)) {}

const Matrix& ParamSet::at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) {
        throw ShapeError("no parameter named '" + name + "'");
    }
    return it->second;
}

Matrix& ParamSet::at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) {
        throw ShapeError("no parameter named '" + name + "'");
    }
    return it->second;
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : values_) {
        n += static_cast<std::size_t>(m.size());
    }
    return n;
}

ParamSet init_model(const ModelConfig& config, Rng& rng) {
    config.validate();
    GradSet values;
    for (const auto& [name, shape] : parameter_shapes(config)) {
        if (name.find("gamma") != std::string::npos) {
            values[name] = Matrix::Ones(shape.rows, shape.cols);
        } else if (name.find(".b") != std::string::npos || name.find("beta") != std::string::npos) {
            values[name] = Matrix::Zero(shape.rows, shape.cols);
        } else {
            const double bound = 1.0 / std::sqrt(static_cast<double>(shape.rows));
            values[name] = rng.uniform_matrix(shape.rows, shape.cols, -bound, bound);
        }
    }
    return ParamSet(config, std::move(values));
}

ForwardTrace forward(const ParamSet& params, const Matrix& input) {
    const ModelConfig& c = params.config();
    if (input.rows() != c.seq_len || input.cols() != c.input_dim) {
        throw ShapeError("forward: input is " + shape_string(input) + ", expected " +
                         std::to_string(c.seq_len) + "x" + std::to_string(c.input_dim));
    }

    auto cache = std::make_shared<ForwardCache>();
    cache->input = input;
    cache->layers.resize(c.num_layers);

    ForwardTrace trace;
    trace.hidden_states.reserve(c.num_layers);
    trace.attentions.reserve(c.num_layers);

    const int S = c.seq_len;
    const int d_head = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    Matrix z = add_row_bias(input * params.at("embed.w"), params.at("embed.b"));

    for (int l = 0; l < c.num_layers; ++l) {
        LayerCache& lc = cache->layers[l];
        const std::string p = layer_prefix(l);
        lc.input = z;

        lc.q = add_row_bias(z * params.at(p + "attn.wq"), params.at(p + "attn.bq"));
        lc.k = add_row_bias(z * params.at(p + "attn.wk"), params.at(p + "attn.bk"));
        lc.v = add_row_bias(z * params.at(p + "attn.wv"), params.at(p + "attn.bv"));

        Matrix attn_stack(c.num_heads * S, S);
        lc.concat_heads.resize(S, c.hidden_dim);
        for (int h = 0; h < c.num_heads; ++h) {
            const auto qh = lc.q.middleCols(h * d_head, d_head);
            const auto kh = lc.k.middleCols(h * d_head, d_head);
            const auto vh = lc.v.middleCols(h * d_head, d_head);
            Matrix scores = scale * (qh * kh.transpose());
            for (Eigen::Index r = 0; r < scores.rows(); ++r) {
                const double mx = scores.row(r).maxCoeff();
                Eigen::ArrayXd e = (scores.row(r).transpose().array() - mx).exp();
                attn_stack.row(h * S + r) = (e / e.sum()).transpose();
            }
            lc.concat_heads.middleCols(h * d_head, d_head) = attn_stack.middleRows(h * S, S) * vh;
        }

        Matrix attn_out = add_row_bias(lc.concat_heads * params.at(p + "attn.wo"), params.at(p + "attn.bo"));
        lc.resid1 = z + attn_out;
        lc.post_ln1 = layer_norm_forward(lc.resid1, params.at(p + "ln1.gamma"), params.at(p + "ln1.beta"), lc.ln1);

        lc.ffn_pre = add_row_bias(lc.post_ln1 * params.at(p + "ffn.w1"), params.at(p + "ffn.b1"));
        lc.ffn_act = lc.ffn_pre.unaryExpr([](double x) { return gelu(x); });
        Matrix ffn_out = add_row_bias(lc.ffn_act * params.at(p + "ffn.w2"), params.at(p + "ffn.b2"));

        lc.resid2 = lc.post_ln1 + ffn_out;
        z = layer_norm_forward(lc.resid2, params.at(p + "ln2.gamma"), params.at(p + "ln2.beta"), lc.ln2);

        trace.hidden_states.push_back(z);
        trace.attentions.push_back(std::move(attn_stack));
    }

    cache->pooled = z.colwise().mean().transpose();
    trace.logits = params.at("head.w").transpose() * cache->pooled + params.at("head.b").col(0);
    trace.probs = softmax(trace.logits);
    trace.cache = std::move(cache);
    return trace;
}

GradSet zeros_like(const ParamSet& params) {
    GradSet grads;
    for (const auto& [name, m] : params.values()) {
        grads[name] = Matrix::Zero(m.rows(), m.cols());
    }
    return grads;
}

GradSet backward(const ParamSet& params, const Matrix& input, const ForwardTrace& trace,
                 const LossGradBundle& bundle) {
    const ModelConfig& c = params.config();
    if (!trace.cache) {
        throw Error("backward: trace has no cached intermediates");
    }
    const ForwardCache& cache = *trace.cache;
    const int S = c.seq_len;
    const int d_head = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    if (bundle.d_probs.size() != 0 && bundle.d_probs.size() != c.num_classes) {
        throw ShapeError("backward: d_probs has wrong length");
    }
    if (!bundle.d_hidden.empty() && bundle.d_hidden.size() != static_cast<std::size_t>(c.num_layers)) {
        throw ShapeError("backward: d_hidden must have one entry per layer");
    }
    if (!bundle.d_attn.empty() && bundle.d_attn.size() != static_cast<std::size_t>(c.num_layers)) {
        throw ShapeError("backward: d_attn must have one entry per layer");
    }

    GradSet grads = zeros_like(params);

    // Head: probs -> logits -> pooled -> last hidden state.
    Matrix d_z = Matrix::Zero(S, c.hidden_dim);
    if (bundle.d_probs.size() != 0) {
        const Vector& p = trace.probs;
        const double dot = bundle.d_probs.dot(p);
        Vector d_logits = p.array() * (bundle.d_probs.array() - dot);
        grads["head.w"] += cache.pooled * d_logits.transpose();
        grads["head.b"].col(0) += d_logits;
        Vector d_pooled = params.at("head.w") * d_logits;
        d_z += Vector::Ones(S) * (d_pooled.transpose() / static_cast<double>(S));
    }

    for (int l = c.num_layers - 1; l >= 0; --l) {
        const LayerCache& lc = cache.layers[l];
        const std::string p = layer_prefix(l);

        Matrix d_out = d_z;
        if (!bundle.d_hidden.empty() && bundle.d_hidden[l].size() != 0) {
            require_same_shape(bundle.d_hidden[l], trace.hidden_states[l], "backward: d_hidden[" + std::to_string(l) + "]");
            d_out += bundle.d_hidden[l];
        }

        // LN2 then feed-forward.
        Matrix d_resid2 = layer_norm_backward(d_out, lc.ln2, params.at(p + "ln2.gamma"),
                                              grads[p + "ln2.gamma"], grads[p + "ln2.beta"]);
        Matrix d_post_ln1 = d_resid2;

        grads[p + "ffn.w2"] += lc.ffn_act.transpose() * d_resid2;
        grads[p + "ffn.b2"].col(0) += d_resid2.colwise().sum().transpose();
        Matrix d_act = d_resid2 * params.at(p + "ffn.w2").transpose();
        Matrix d_pre = d_act.array() * lc.ffn_pre.unaryExpr([](double x) { return gelu_grad(x); }).array();
        grads[p + "ffn.w1"] += lc.post_ln1.transpose() * d_pre;
        grads[p + "ffn.b1"].col(0) += d_pre.colwise().sum().transpose();
        d_post_ln1 += d_pre * params.at(p + "ffn.w1").transpose();

        // LN1 then attention.
        Matrix d_resid1 = layer_norm_backward(d_post_ln1, lc.ln1, params.at(p + "ln1.gamma"),
                                              grads[p + "ln1.gamma"], grads[p + "ln1.beta"]);
        Matrix d_input = d_resid1;

        grads[p + "attn.wo"] += lc.concat_heads.transpose() * d_resid1;
        grads[p + "attn.bo"].col(0) += d_resid1.colwise().sum().transpose();
        Matrix d_concat = d_resid1 * params.at(p + "attn.wo").transpose();

        Matrix d_q = Matrix::Zero(S, c.hidden_dim);
        Matrix d_k = Matrix::Zero(S, c.hidden_dim);
        Matrix d_v = Matrix::Zero(S, c.hidden_dim);
        const Matrix& attn_stack = trace.attentions[l];
        for (int h = 0; h < c.num_heads; ++h) {
            const auto ah = attn_stack.middleRows(h * S, S);
            const auto vh = lc.v.middleCols(h * d_head, d_head);
            const auto qh = lc.q.middleCols(h * d_head, d_head);
            const auto kh = lc.k.middleCols(h * d_head, d_head);

            Matrix d_ah = d_concat.middleCols(h * d_head, d_head) * vh.transpose();
            if (!bundle.d_attn.empty() && bundle.d_attn[l].size() != 0) {
                if (bundle.d_attn[l].rows() != attn_stack.rows() || bundle.d_attn[l].cols() != attn_stack.cols()) {
                    throw ShapeError("backward: d_attn[" + std::to_string(l) + "] is " +
                                     shape_string(bundle.d_attn[l]) + ", expected " + shape_string(attn_stack));
                }
                d_ah += bundle.d_attn[l].middleRows(h * S, S);
            }
            d_v.middleCols(h * d_head, d_head) += ah.transpose() * d_concat.middleCols(h * d_head, d_head);

            Matrix d_scores = softmax_rows_backward(ah, d_ah);
            d_q.middleCols(h * d_head, d_head) += scale * (d_scores * kh);
            d_k.middleCols(h * d_head, d_head) += scale * (d_scores.transpose() * qh);
        }

        grads[p + "attn.wq"] += lc.input.transpose() * d_q;
        grads[p + "attn.bq"].col(0) += d_q.colwise().sum().transpose();
        grads[p + "attn.wk"] += lc.input.transpose() * d_k;
        grads[p + "attn.bk"].col(0) += d_k.colwise().sum().transpose();
        grads[p + "attn.wv"] += lc.input.transpose() * d_v;
        grads[p + "attn.bv"].col(0) += d_v.colwise().sum().transpose();

        d_input += d_q * params.at(p + "attn.wq").transpose();
        d_input += d_k * params.at(p + "attn.wk").transpose();
        d_input += d_v * params.at(p + "attn.wv").transpose();
        d_z = std::move(d_input);
    }

    grads["embed.w"] += input.transpose() * d_z;
    grads["embed.b"].col(0) += d_z.colwise().sum().transpose();
    return grads;
}

void apply_sgd(ParamSet& params, const GradSet& grads, double lr) {
    if (lr < 0.0) {
        throw ConfigError("apply_sgd: negative learning rate");
    }
    if (grads.size() != params.values().size()) {
        throw ShapeError("apply_sgd: gradient name set does not match parameters");
    }
    for (const auto& [name, g] : grads) {
        Matrix& value = params.at(name);
        require_same_shape(value, g, "apply_sgd: '" + name + "'");
        value -= lr * g;
    }
}

void apply_adam(ParamSet& params, const GradSet& grads, double lr, AdamState& state) {
    if (grads.size() != params.values().size()) {
        throw ShapeError("apply_adam: gradient name set does not match parameters");
    }
    if (state.m.empty()) {
        for (const auto& [name, value] : params.values()) {
            state.m[name] = Matrix::Zero(value.rows(), value.cols());
            state.v[name] = Matrix::Zero(value.rows(), value.cols());
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& [name, g] : grads) {
        Matrix& value = params.at(name);
        require_same_shape(value, g, "apply_adam: '" + name + "'");
        Matrix& m = state.m[name];
        Matrix& v = state.v[name];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.array().square().matrix();
        value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.epsilon);
    }
}

void save_params(const ParamSet& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("save_params: cannot open " + path.string());
    }
    out.write(kCheckpointMagic, 4);
    write_u16(out, kCheckpointVersion);
    write_u32(out, static_cast<std::uint32_t>(params.values().size() + 1));

    auto write_record = [&out](const std::string& name, const Matrix& m) {
        write_u16(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<std::uint32_t>(m.rows()));
        write_u32(out, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                write_f64(out, m(r, c));
            }
        }
    };

    const ModelConfig& c = params.config();
    Matrix config_record(6, 1);
    config_record << static_cast<double>(c.num_layers), static_cast<double>(c.hidden_dim),
        static_cast<double>(c.num_heads), static_cast<double>(c.input_dim),
        static_cast<double>(c.num_classes), static_cast<double>(c.seq_len);
    write_record(kConfigRecord, config_record);
    for (const auto& [name, m] : params.values()) {
        write_record(name, m);
    }
    if (!out) {
        throw IoError("save_params: write failed for " + path.string());
    }
}

ParamSet load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("load_params: cannot open " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw ParseError("load_params: bad magic in " + path.string());
    }
    const std::uint16_t version = read_u16(in);
    if (version != kCheckpointVersion) {
        throw ParseError("load_params: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = read_u32(in);

    GradSet values;
    Matrix config_record;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = read_u16(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rows = read_u32(in);
        const std::uint32_t cols = read_u32(in);
        if (!in) {
            throw ParseError("load_params: truncated record header");
        }
        Matrix m(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r) {
            for (std::uint32_t cc = 0; cc < cols; ++cc) {
                m(r, cc) = read_f64(in);
            }
        }
        if (!in) {
            throw ParseError("load_params: truncated payload for '" + name + "'");
        }
        if (name == kConfigRecord) {
            config_record = std::move(m);
        } else {
            values[name] = std::move(m);
        }
    }
    if (config_record.size() != 6) {
        throw ParseError("load_params: missing model geometry record");
    }
    ModelConfig config;
    config.num_layers = static_cast<int>(config_record(0, 0));
    config.hidden_dim = static_cast<int>(config_record(1, 0));
    config.num_heads = static_cast<int>(config_record(2, 0));
    config.input_dim = static_cast<int>(config_record(3, 0));
    config.num_classes = static_cast<int>(config_record(4, 0));
    config.seq_len = static_cast<int>(config_record(5, 0));
    config.validate();

    const auto expected = parameter_shapes(config);
    if (expected.size() != values.size()) {
        throw ParseError("load_params: parameter set does not match model geometry");
    }
    for (const auto& [name, shape] : expected) {
        auto it = values.find(name);
        if (it == values.end()) {
            throw ParseError("load_params: missing parameter '" + name + "'");
        }
        if (it->second.rows() != shape.rows || it->second.cols() != shape.cols) {
            throw ParseError("load_params: bad shape for '" + name + "'");
        }
    }
    return ParamSet(config, std::move(values));
}

} // namespace fedkd
