#pragma once

// Shared helpers for the test suites: independent oracles (triple-loop
// product, Jacobi eigensolver, central finite differences) and small
// comparison utilities. Everything here must stay independent of the
// library code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fedkd/matrix.hpp"
#include "fedkd/nn.hpp"

namespace testutil {

// Naive three-loop matrix product.
inline fedkd::Matrix matmul_oracle(const fedkd::Matrix& a, const fedkd::Matrix& b) {
    fedkd::Matrix out = fedkd::Matrix::Zero(a.rows(), b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            double sum = 0.0;
            for (Eigen::Index k = 0; k < a.cols(); ++k) {
                sum += a(i, k) * b(k, j);
            }
            out(i, j) = sum;
        }
    }
    return out;
}

// Eigenvalues of a symmetric matrix via classical two-sided Jacobi
// rotations, returned in descending order.
inline std::vector<double> jacobi_eigenvalues(fedkd::Matrix a, int sweeps = 100) {
    const Eigen::Index n = a.rows();
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                off += a(p, q) * a(p, q);
            }
        }
        if (off < 1e-26) {
            break;
        }
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eigenvalues(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        eigenvalues[static_cast<std::size_t>(i)] = a(i, i);
    }
    std::sort(eigenvalues.begin(), eigenvalues.end(), std::greater<>());
    return eigenvalues;
}

// Central finite differences of a scalar function of one ParamSet. The
// function is evaluated with the perturbed parameters in place.
inline fedkd::GradSet finite_difference(fedkd::ParamSet& params,
                                        const std::function<double()>& loss_fn,
                                        double eps = 1e-5) {
    fedkd::GradSet grads = fedkd::zeros_like(params);
    for (auto& [name, grad] : grads) {
        fedkd::Matrix& value = params.at(name);
        for (Eigen::Index r = 0; r < value.rows(); ++r) {
            for (Eigen::Index c = 0; c < value.cols(); ++c) {
                const double original = value(r, c);
                value(r, c) = original + eps;
                const double up = loss_fn();
                value(r, c) = original - eps;
                const double down = loss_fn();
                value(r, c) = original;
                grad(r, c) = (up - down) / (2.0 * eps);
            }
        }
    }
    return grads;
}

// Central finite differences w.r.t. a bare matrix.
inline fedkd::Matrix finite_difference_matrix(fedkd::Matrix& value,
                                              const std::function<double()>& loss_fn,
                                              double eps = 1e-5) {
    fedkd::Matrix grad = fedkd::Matrix::Zero(value.rows(), value.cols());
    for (Eigen::Index r = 0; r < value.rows(); ++r) {
        for (Eigen::Index c = 0; c < value.cols(); ++c) {
            const double original = value(r, c);
            value(r, c) = original + eps;
            const double up = loss_fn();
            value(r, c) = original - eps;
            const double down = loss_fn();
            value(r, c) = original;
            grad(r, c) = (up - down) / (2.0 * eps);
        }
    }
    return grad;
}

struct GradCompare {
    double worst_rel = 0.0;
    std::string worst_name;
    bool ok = true;
};

// Elementwise |a-b| <= max(abs_floor, rtol * max(|a|, |b|)).
inline GradCompare compare_gradients(const fedkd::GradSet& analytic, const fedkd::GradSet& numeric,
                                     double rtol = 1e-4, double abs_floor = 1e-6) {
    GradCompare result;
    for (const auto& [name, a] : analytic) {
        const fedkd::Matrix& b = numeric.at(name);
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            for (Eigen::Index c = 0; c < a.cols(); ++c) {
                const double diff = std::abs(a(r, c) - b(r, c));
                const double scale = std::max(std::abs(a(r, c)), std::abs(b(r, c)));
                const double rel = diff / std::max(scale, abs_floor);
                if (rel > result.worst_rel) {
                    result.worst_rel = rel;
                    result.worst_name = name;
                }
                if (diff > std::max(abs_floor, rtol * scale)) {
                    result.ok = false;
                }
            }
        }
    }
    return result;
}

inline double max_abs_diff(const fedkd::Matrix& a, const fedkd::Matrix& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

inline bool bitwise_equal(const fedkd::Matrix& a, const fedkd::Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

inline bool params_bitwise_equal(const fedkd::ParamSet& a, const fedkd::ParamSet& b) {
    if (a.values().size() != b.values().size()) {
        return false;
    }
    for (const auto& [name, value] : a.values()) {
        if (!b.has(name) || !bitwise_equal(value, b.at(name))) {
            return false;
        }
    }
    return true;
}

} // namespace testutil
