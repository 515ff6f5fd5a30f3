#pragma once

#include "fedkd/matrix.hpp"

namespace fedkd {

// Thin SVD of a P x Q matrix: u is P x K, sigma holds K singular values in
// descending order, vt is K x Q, with K = min(P, Q). Singular values below
// 1e-12 * sigma[0] are clamped to zero so energy accounting never picks up
// spurious rank.
struct SvdResult {
    Matrix u;
    Vector sigma;
    Matrix vt;

    Matrix reconstruct() const { return u * sigma.asDiagonal() * vt; }
};

// Shape-checked matrix product.
Matrix matmul(const Matrix& a, const Matrix& b);

SvdResult svd(const Matrix& m);

double frobenius_norm(const Matrix& m);

} // namespace fedkd
