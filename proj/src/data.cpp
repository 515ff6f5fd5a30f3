#include "fedkd/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedkd/errors.hpp"

namespace fedkd {

namespace {

double parse_double_token(const std::string& token, std::size_t line_no) {
    double value = 0.0;
    const char* begin = token.data();
    const char* end = begin + token.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr != end) {
        throw ParseError("csv line " + std::to_string(line_no) + ": bad number '" + token + "'");
    }
    if (!std::isfinite(value)) {
        throw ParseError("csv line " + std::to_string(line_no) + ": non-finite value '" + token + "'");
    }
    return value;
}

} // namespace

std::vector<Sample> gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
    if (spec.num_classes < 2 || spec.seq_len < 1 || spec.input_dim < 1) {
        throw ConfigError("gen_synthetic: invalid dimensions");
    }
    if (spec.num_samples < spec.num_classes) {
        throw ConfigError("gen_synthetic: need at least one sample per class");
    }
    if (spec.noise < 0.0) {
        throw ConfigError("gen_synthetic: negative noise");
    }

    std::vector<Matrix> anchors;
    anchors.reserve(spec.num_classes);
    for (int c = 0; c < spec.num_classes; ++c) {
        anchors.push_back(rng.normal_matrix(spec.seq_len, spec.input_dim));
    }

    std::vector<Sample> samples;
    samples.reserve(spec.num_samples);
    for (int i = 0; i < spec.num_samples; ++i) {
        Sample s;
        s.label = i % spec.num_classes; // round-robin keeps classes balanced within one
        s.features = anchors[s.label];
        if (spec.noise > 0.0) {
            s.features += spec.noise * rng.normal_matrix(spec.seq_len, spec.input_dim);
        }
        samples.push_back(std::move(s));
    }
    rng.shuffle(samples);
    return samples;
}

std::vector<ClientShard> partition(const std::vector<Sample>& samples, int n_clients, Rng& rng) {
    if (n_clients < 1) {
        throw ConfigError("partition: n_clients must be >= 1");
    }
    if (static_cast<std::size_t>(n_clients) > samples.size()) {
        throw ConfigError("partition: more clients than samples");
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    std::vector<ClientShard> shards(n_clients);
    const std::size_t base = samples.size() / n_clients;
    const std::size_t extra = samples.size() % n_clients;
    std::size_t pos = 0;
    for (int c = 0; c < n_clients; ++c) {
        shards[c].client_id = c;
        const std::size_t count = base + (static_cast<std::size_t>(c) < extra ? 1 : 0);
        shards[c].samples.reserve(count);
        for (std::size_t k = 0; k < count; ++k) {
            shards[c].samples.push_back(samples[order[pos++]]);
        }
    }
    return shards;
}

std::vector<ClientShard> partition_dirichlet(const std::vector<Sample>& samples, int n_clients,
                                             double alpha, Rng& rng) {
    if (n_clients < 1) {
        throw ConfigError("partition_dirichlet: n_clients must be >= 1");
    }
    if (alpha <= 0.0) {
        throw ConfigError("partition_dirichlet: alpha must be > 0");
    }
    int num_classes = 0;
    for (const auto& s : samples) {
        num_classes = std::max(num_classes, s.label + 1);
    }

    // Gamma(alpha) draws via Marsaglia-Tsang (with boost for alpha < 1),
    // normalized per class to a Dirichlet sample over clients.
    auto draw_gamma = [&rng](double shape) {
        double boost = 1.0;
        double k = shape;
        if (k < 1.0) {
            boost = std::pow(rng.uniform(), 1.0 / k);
            k += 1.0;
        }
        const double d = k - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = rng.normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) {
                continue;
            }
            v = v * v * v;
            const double u = rng.uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x || std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
                return boost * d * v;
            }
        }
    };

    std::vector<std::vector<double>> class_cdf(num_classes);
    for (int c = 0; c < num_classes; ++c) {
        std::vector<double> w(n_clients);
        double total = 0.0;
        for (int j = 0; j < n_clients; ++j) {
            w[j] = draw_gamma(alpha);
            total += w[j];
        }
        class_cdf[c].resize(n_clients);
        double cum = 0.0;
        for (int j = 0; j < n_clients; ++j) {
            cum += w[j] / total;
            class_cdf[c][j] = cum;
        }
    }

    std::vector<ClientShard> shards(n_clients);
    for (int j = 0; j < n_clients; ++j) {
        shards[j].client_id = j;
    }
    for (const auto& s : samples) {
        const double u = rng.uniform();
        const auto& cdf = class_cdf[s.label];
        int j = 0;
        while (j + 1 < n_clients && u > cdf[j]) {
            ++j;
        }
        shards[j].samples.push_back(s);
    }
    return shards;
}

std::vector<Sample> load_csv(const std::filesystem::path& path, int seq_len, int input_dim) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("load_csv: cannot open " + path.string());
    }
    const std::size_t feature_count = static_cast<std::size_t>(seq_len) * static_cast<std::size_t>(input_dim);

    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError("csv line 1: missing header");
    }
    if (line.rfind("label,", 0) != 0 && line != "label") {
        throw ParseError("csv line 1: header must start with 'label,'");
    }

    std::vector<Sample> samples;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> tokens;
        std::stringstream ss(line);
        std::string token;
        while (std::getline(ss, token, ',')) {
            tokens.push_back(token);
        }
        if (tokens.size() != feature_count + 1) {
            throw ParseError("csv line " + std::to_string(line_no) + ": expected " +
                             std::to_string(feature_count + 1) + " fields, got " +
                             std::to_string(tokens.size()));
        }
        Sample s;
        const double label = parse_double_token(tokens[0], line_no);
        s.label = static_cast<int>(label);
        if (s.label < 0 || static_cast<double>(s.label) != label) {
            throw ParseError("csv line " + std::to_string(line_no) + ": label must be a non-negative integer");
        }
        s.features.resize(seq_len, input_dim);
        for (std::size_t k = 0; k < feature_count; ++k) {
            s.features(static_cast<Eigen::Index>(k / input_dim), static_cast<Eigen::Index>(k % input_dim)) =
                parse_double_token(tokens[k + 1], line_no);
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

void save_csv(const std::filesystem::path& path, const std::vector<Sample>& samples) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("save_csv: cannot open " + path.string());
    }
    std::size_t feature_count = 0;
    if (!samples.empty()) {
        feature_count = static_cast<std::size_t>(samples.front().features.size());
    }
    out << "label";
    for (std::size_t k = 0; k < feature_count; ++k) {
        out << ",f" << k;
    }
    out << "\n";
    out.precision(17);
    for (const auto& s : samples) {
        out << s.label;
        for (Eigen::Index r = 0; r < s.features.rows(); ++r) {
            for (Eigen::Index c = 0; c < s.features.cols(); ++c) {
                out << "," << s.features(r, c);
            }
        }
        out << "\n";
    }
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_train_eval(const std::vector<Sample>& samples,
                                                                     double eval_fraction, Rng& rng) {
    if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
        throw ConfigError("split_train_eval: eval fraction must be in [0, 1)");
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const std::size_t eval_count =
        static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(samples.size())));
    std::vector<Sample> eval_set;
    std::vector<Sample> train_set;
    eval_set.reserve(eval_count);
    train_set.reserve(samples.size() - eval_count);
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < eval_count) {
            eval_set.push_back(samples[order[i]]);
        } else {
            train_set.push_back(samples[order[i]]);
        }
    }
    return {std::move(train_set), std::move(eval_set)};
}

} // namespace fedkd
