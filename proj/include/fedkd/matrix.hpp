#pragma once

#include <Eigen/Dense>

#include <map>
#include <string>

#include "fedkd/errors.hpp"

namespace fedkd {

// Dense row-major double matrix: the universal value type for parameters,
// activations and gradients. Row-major storage matches the wire and
// checkpoint formats, so serialization is a flat copy.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Named gradient collection mirroring a ParamSet's name/shape structure.
// std::map keeps iteration order deterministic.
using GradSet = std::map<std::string, Matrix>;

inline bool is_finite(const Matrix& m) {
    return m.allFinite();
}

inline std::string shape_string(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const std::string& what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(what + ": " + shape_string(a) + " vs " + shape_string(b));
    }
}

} // namespace fedkd
