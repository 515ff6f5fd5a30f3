#include "fedkd/distill.hpp"

#include <algorithm>
#include <cmath>

#include "fedkd/errors.hpp"

namespace fedkd {

namespace {

void check_same_length(const Vector& a, const Vector& b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
}

// d/d pred of -sum(target * log(clamp(pred))). Entries at the clamp floor
// carry no gradient.
Vector cross_entropy_grad(const Vector& target, const Vector& pred) {
    Vector g = Vector::Zero(pred.size());
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        if (pred(i) > kProbFloor) {
            g(i) = -target(i) / pred(i);
        }
    }
    return g;
}

// d/d learner of KL(reference || learner); the reference is detached.
Vector kl_learner_grad(const Vector& reference, const Vector& learner) {
    Vector g = Vector::Zero(learner.size());
    for (Eigen::Index i = 0; i < learner.size(); ++i) {
        if (learner(i) > kProbFloor) {
            g(i) = -reference(i) / learner(i);
        }
    }
    return g;
}

struct HiddenResiduals {
    std::vector<Matrix> hidden;    // H_t - proj(H_s), per mapped pair
    std::vector<Matrix> attention; // A_t - A_s, per mapped pair
    double mse_hidden = 0.0;       // averaged over pairs and entries
    double mse_attention = 0.0;
};

HiddenResiduals hidden_residuals(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                                 const Matrix& w_h, const LayerMap& map) {
    if (map.pairs.empty()) {
        throw ConfigError("layer map is empty");
    }
    HiddenResiduals rs;
    rs.hidden.reserve(map.pairs.size());
    rs.attention.reserve(map.pairs.size());
    for (const auto& [sj, tl] : map.pairs) {
        if (sj < 0 || static_cast<std::size_t>(sj) >= trace_s.hidden_states.size() || tl < 0 ||
            static_cast<std::size_t>(tl) >= trace_t.hidden_states.size()) {
            throw ShapeError("layer map index out of range");
        }
        const Matrix& h_t = trace_t.hidden_states[tl];
        const Matrix& h_s = trace_s.hidden_states[sj];
        if (h_s.cols() != w_h.cols() || h_t.cols() != w_h.rows()) {
            throw ShapeError("projection is " + shape_string(w_h) + ", hidden states are " +
                             shape_string(h_t) + " and " + shape_string(h_s));
        }
        if (h_t.rows() != h_s.rows()) {
            throw ShapeError("hidden states disagree on sequence length");
        }
        Matrix residual_h = h_t - h_s * w_h.transpose();
        rs.mse_hidden += residual_h.array().square().mean();
        rs.hidden.push_back(std::move(residual_h));

        const Matrix& a_t = trace_t.attentions[tl];
        const Matrix& a_s = trace_s.attentions[sj];
        require_same_shape(a_t, a_s, "attention heatmaps");
        Matrix residual_a = a_t - a_s;
        rs.mse_attention += residual_a.array().square().mean();
        rs.attention.push_back(std::move(residual_a));
    }
    rs.mse_hidden /= static_cast<double>(map.pairs.size());
    rs.mse_attention /= static_cast<double>(map.pairs.size());
    return rs;
}

} // namespace

LayerMap uniform_layer_map(int student_layers, int teacher_layers) {
    if (student_layers < 1 || teacher_layers < student_layers) {
        throw ConfigError("layer map needs 1 <= student_layers <= teacher_layers");
    }
    LayerMap map;
    map.pairs.reserve(student_layers);
    for (int j = 0; j < student_layers; ++j) {
        const int t = ((j + 1) * teacher_layers + student_layers - 1) / student_layers - 1;
        map.pairs.emplace_back(j, t);
    }
    return map;
}

double cross_entropy(const Vector& target, const Vector& pred) {
    check_same_length(target, pred, "cross_entropy");
    double loss = 0.0;
    for (Eigen::Index i = 0; i < target.size(); ++i) {
        loss -= target(i) * std::log(std::max(pred(i), kProbFloor));
    }
    return loss;
}

double kl_divergence(const Vector& reference, const Vector& learner) {
    check_same_length(reference, learner, "kl_divergence");
    double div = 0.0;
    for (Eigen::Index i = 0; i < reference.size(); ++i) {
        const double r = reference(i);
        if (r > 0.0) {
            div += r * (std::log(std::max(r, kProbFloor)) - std::log(std::max(learner(i), kProbFloor)));
        }
    }
    return div;
}

AdaptiveDistill adaptive_distill_losses(const Vector& y_t, const Vector& y_s, const Vector& onehot) {
    const double task_t = cross_entropy(onehot, y_t);
    const double task_s = cross_entropy(onehot, y_s);
    const double denom = std::max(task_t + task_s, kTaskSumFloor);
    AdaptiveDistill out;
    out.teacher_loss = kl_divergence(y_s, y_t) / denom;
    out.student_loss = kl_divergence(y_t, y_s) / denom;
    out.weight = 1.0 / denom;
    return out;
}

double adaptive_hidden_loss(const ForwardTrace& trace_t, const ForwardTrace& trace_s, const Matrix& w_h,
                            const LayerMap& map, double task_sum) {
    const HiddenResiduals rs = hidden_residuals(trace_t, trace_s, w_h, map);
    return (rs.mse_hidden + rs.mse_attention) / std::max(task_sum, kTaskSumFloor);
}

LossBreakdown compose_losses(double task_teacher, double task_student, double distill_teacher,
                             double distill_student, double hidden) {
    LossBreakdown b;
    b.task_teacher = task_teacher;
    b.task_student = task_student;
    b.distill_teacher = distill_teacher;
    b.distill_student = distill_student;
    b.hidden = hidden;
    b.total_teacher = task_teacher + distill_teacher + hidden;
    b.total_student = task_student + distill_student + hidden;
    return b;
}

Vector one_hot(int label, int num_classes) {
    if (label < 0 || label >= num_classes) {
        throw ConfigError("label " + std::to_string(label) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    Vector v = Vector::Zero(num_classes);
    v(label) = 1.0;
    return v;
}

Matrix init_projection(int teacher_hidden, int student_hidden) {
    Matrix w = Matrix::Zero(teacher_hidden, student_hidden);
    const int k = std::min(teacher_hidden, student_hidden);
    for (int i = 0; i < k; ++i) {
        w(i, i) = 1.0;
    }
    return w;
}

LossBreakdown sample_losses(const ForwardTrace& trace_t, const ForwardTrace& trace_s, const Vector& onehot,
                            const Matrix& w_h, const LayerMap& map, const DistillOptions& opt,
                            std::optional<double> frozen_task_sum) {
    const double task_t = cross_entropy(onehot, trace_t.probs);
    const double task_s = cross_entropy(onehot, trace_s.probs);
    const double task_sum = frozen_task_sum.value_or(task_t + task_s);
    const double denom = opt.adaptive_weighting ? std::max(task_sum, kTaskSumFloor) : 1.0;

    double distill_t = 0.0;
    double distill_s = 0.0;
    if (opt.mutual_distillation) {
        distill_t = kl_divergence(trace_s.probs, trace_t.probs) / denom;
        distill_s = kl_divergence(trace_t.probs, trace_s.probs) / denom;
    }
    double hidden = 0.0;
    if (opt.hidden_alignment) {
        const HiddenResiduals rs = hidden_residuals(trace_t, trace_s, w_h, map);
        hidden = (rs.mse_hidden + rs.mse_attention) / denom;
    }
    return compose_losses(task_t, task_s, distill_t, distill_s, hidden);
}

LocalGradients local_gradients(const ParamSet& teacher, const ParamSet& student, const Matrix& w_h,
                               const LayerMap& map, std::span<const Sample> batch,
                               const DistillOptions& opt) {
    if (batch.empty()) {
        throw ConfigError("local_gradients: empty batch");
    }
    const ModelConfig& tc = teacher.config();
    const ModelConfig& sc = student.config();
    if (tc.seq_len != sc.seq_len || tc.input_dim != sc.input_dim || tc.num_classes != sc.num_classes) {
        throw ShapeError("teacher and student disagree on input geometry");
    }
    if (opt.hidden_alignment && tc.num_heads != sc.num_heads) {
        throw ShapeError("attention alignment requires matching head counts");
    }
    if (w_h.rows() != tc.hidden_dim || w_h.cols() != sc.hidden_dim) {
        throw ShapeError("projection is " + shape_string(w_h) + ", expected " +
                         std::to_string(tc.hidden_dim) + "x" + std::to_string(sc.hidden_dim));
    }

    LocalGradients out;
    out.teacher = zeros_like(teacher);
    out.student = zeros_like(student);
    out.w_h = Matrix::Zero(w_h.rows(), w_h.cols());

    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    const int pairs = static_cast<int>(map.pairs.size());

    for (const Sample& sample : batch) {
        const ForwardTrace trace_t = forward(teacher, sample.features);
        const ForwardTrace trace_s = forward(student, sample.features);
        const Vector target = one_hot(sample.label, tc.num_classes);

        const double task_t = cross_entropy(target, trace_t.probs);
        const double task_s = cross_entropy(target, trace_s.probs);
        const double denom = opt.adaptive_weighting ? std::max(task_t + task_s, kTaskSumFloor) : 1.0;

        LossGradBundle bundle_t;
        LossGradBundle bundle_s;
        bundle_t.d_probs = cross_entropy_grad(target, trace_t.probs);
        bundle_s.d_probs = cross_entropy_grad(target, trace_s.probs);

        double distill_t = 0.0;
        double distill_s = 0.0;
        if (opt.mutual_distillation) {
            distill_t = kl_divergence(trace_s.probs, trace_t.probs) / denom;
            distill_s = kl_divergence(trace_t.probs, trace_s.probs) / denom;
            bundle_t.d_probs += kl_learner_grad(trace_s.probs, trace_t.probs) / denom;
            bundle_s.d_probs += kl_learner_grad(trace_t.probs, trace_s.probs) / denom;
        }

        double hidden = 0.0;
        if (opt.hidden_alignment) {
            const HiddenResiduals rs = hidden_residuals(trace_t, trace_s, w_h, map);
            hidden = (rs.mse_hidden + rs.mse_attention) / denom;

            bundle_t.d_hidden.assign(tc.num_layers, Matrix());
            bundle_t.d_attn.assign(tc.num_layers, Matrix());
            bundle_s.d_hidden.assign(sc.num_layers, Matrix());
            bundle_s.d_attn.assign(sc.num_layers, Matrix());
            for (int pi = 0; pi < pairs; ++pi) {
                const auto& [sj, tl] = map.pairs[pi];
                const Matrix& rh = rs.hidden[pi];
                const Matrix& ra = rs.attention[pi];
                const double ch = 2.0 / (static_cast<double>(rh.size()) * pairs * denom);
                const double ca = 2.0 / (static_cast<double>(ra.size()) * pairs * denom);

                bundle_t.d_hidden[tl] = ch * rh;
                bundle_t.d_attn[tl] = ca * ra;

                Matrix d_proj = -ch * rh; // gradient w.r.t. proj(H_s)
                bundle_s.d_hidden[sj] = d_proj * w_h;
                bundle_s.d_attn[sj] = -ca * ra;
                out.w_h += inv_batch * (d_proj.transpose() * trace_s.hidden_states[sj]);
            }
        }

        GradSet g_t = backward(teacher, sample.features, trace_t, bundle_t);
        GradSet g_s = backward(student, sample.features, trace_s, bundle_s);
        for (auto& [name, g] : g_t) {
            out.teacher[name] += inv_batch * g;
        }
        for (auto& [name, g] : g_s) {
            out.student[name] += inv_batch * g;
        }

        const LossBreakdown b = compose_losses(task_t, task_s, distill_t, distill_s, hidden);
        out.losses.task_teacher += inv_batch * b.task_teacher;
        out.losses.task_student += inv_batch * b.task_student;
        out.losses.distill_teacher += inv_batch * b.distill_teacher;
        out.losses.distill_student += inv_batch * b.distill_student;
        out.losses.hidden += inv_batch * b.hidden;
        out.losses.total_teacher += inv_batch * b.total_teacher;
        out.losses.total_student += inv_batch * b.total_student;
    }
    return out;
}

TaskGradients task_gradients(const ParamSet& params, std::span<const Sample> batch) {
    if (batch.empty()) {
        throw ConfigError("task_gradients: empty batch");
    }
    TaskGradients out;
    out.grads = zeros_like(params);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (const Sample& sample : batch) {
        const ForwardTrace trace = forward(params, sample.features);
        const Vector target = one_hot(sample.label, params.config().num_classes);
        out.loss += inv_batch * cross_entropy(target, trace.probs);
        LossGradBundle bundle;
        bundle.d_probs = cross_entropy_grad(target, trace.probs);
        GradSet g = backward(params, sample.features, trace, bundle);
        for (auto& [name, grad] : g) {
            out.grads[name] += inv_batch * grad;
        }
    }
    return out;
}

} // namespace fedkd
