#include "fedkd/numerics.hpp"

#include <Eigen/SVD>

namespace fedkd {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a) + " and " + shape_string(b));
    }
    return a * b;
}

SvdResult svd(const Matrix& m) {
    if (!is_finite(m)) {
        throw NumericError("svd: input contains non-finite values");
    }
    Eigen::JacobiSVD<Matrix> solver(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    SvdResult result;
    result.u = solver.matrixU();
    result.sigma = solver.singularValues();
    result.vt = solver.matrixV().transpose();
    if (result.sigma.size() > 0) {
        const double floor = 1e-12 * result.sigma(0);
        for (Eigen::Index i = 0; i < result.sigma.size(); ++i) {
            if (result.sigma(i) < floor) {
                result.sigma(i) = 0.0;
            }
        }
    }
    return result;
}

double frobenius_norm(const Matrix& m) {
    return m.norm();
}

} // namespace fedkd
