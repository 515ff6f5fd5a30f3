#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fedkd/data.hpp"
#include "fedkd/matrix.hpp"
#include "fedkd/nn.hpp"

namespace fedkd {

// One sample's (or one batch-mean) loss decomposition. The totals are
// exact sums of their three components, and `hidden` is the same scalar on
// both sides.
struct LossBreakdown {
    double task_teacher = 0.0;
    double task_student = 0.0;
    double distill_teacher = 0.0;
    double distill_student = 0.0;
    double hidden = 0.0;
    double total_teacher = 0.0;
    double total_student = 0.0;
};

// Student-to-teacher layer alignment: one (student_layer, teacher_layer)
// pair per student layer, teacher indices strictly increasing.
struct LayerMap {
    std::vector<std::pair<int, int>> pairs;
};

// Uniform strided mapping: student layer j aligns to teacher layer
// ceil((j+1) * teacher_layers / student_layers) - 1.
LayerMap uniform_layer_map(int student_layers, int teacher_layers);

struct DistillOptions {
    bool mutual_distillation = true; // KL terms
    bool hidden_alignment = true;    // hidden-state/attention MSE term
    bool adaptive_weighting = true;  // divide by the task-loss sum
};

// Probabilities are clamped to >= 1e-12 inside logs; the clamp also zeroes
// the corresponding gradient path.
inline constexpr double kProbFloor = 1e-12;
// The adaptive denominator is clamped to >= 1e-8 before dividing.
inline constexpr double kTaskSumFloor = 1e-8;

double cross_entropy(const Vector& target, const Vector& pred);

// KL(reference || learner). The reference is a detached constant: gradient
// flows only through the learner.
double kl_divergence(const Vector& reference, const Vector& learner);

struct AdaptiveDistill {
    double teacher_loss = 0.0; // KL(y_s || y_t) / (task_t + task_s)
    double student_loss = 0.0; // KL(y_t || y_s) / (task_t + task_s)
    double weight = 0.0;       // 1 / (task_t + task_s), for diagnostics
};

AdaptiveDistill adaptive_distill_losses(const Vector& y_t, const Vector& y_s, const Vector& onehot);

// (MSE(H_t, proj(H_s)) + MSE(A_t, A_s)) / task_sum, with the MSE terms
// averaged over mapped layer pairs and over entries. task_sum is a detached
// scalar weight.
double adaptive_hidden_loss(const ForwardTrace& trace_t, const ForwardTrace& trace_s, const Matrix& w_h,
                            const LayerMap& map, double task_sum);

LossBreakdown compose_losses(double task_teacher, double task_student, double distill_teacher,
                             double distill_student, double hidden);

Vector one_hot(int label, int num_classes);

// w_h starts as the identity on the leading diagonal, so the hidden loss
// begins as a plain distance between hidden states.
Matrix init_projection(int teacher_hidden, int student_hidden);

// Full per-sample loss composition from two forward traces. When
// frozen_task_sum is set the adaptive denominator is pinned to it instead
// of the live task-loss sum; finite-difference checks use this to hold the
// detached weight constant while perturbing parameters.
LossBreakdown sample_losses(const ForwardTrace& trace_t, const ForwardTrace& trace_s, const Vector& onehot,
                            const Matrix& w_h, const LayerMap& map, const DistillOptions& opt,
                            std::optional<double> frozen_task_sum = std::nullopt);

struct LocalGradients {
    GradSet teacher;     // d total_teacher / d teacher params
    GradSet student;     // d total_student / d student params
    Matrix w_h;          // d hidden / d projection, updated teacher-side
    LossBreakdown losses; // batch mean
};

// Both models' gradients for one batch, mean-reduced over samples. The
// adaptive denominators and KL references are treated as detached values.
LocalGradients local_gradients(const ParamSet& teacher, const ParamSet& student, const Matrix& w_h,
                               const LayerMap& map, std::span<const Sample> batch,
                               const DistillOptions& opt);

struct TaskGradients {
    GradSet grads;
    double loss = 0.0;
};

// Plain task-loss gradient of a single model (baseline modes and the
// centralized reference trainer).
TaskGradients task_gradients(const ParamSet& params, std::span<const Sample> batch);

} // namespace fedkd
