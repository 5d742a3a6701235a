#pragma once

// Thin layer over Eigen: row-major dynamic matrices (token-major layouts
// throughout), column vectors, and the couple of scalar nonlinearities the
// model needs with their exact derivatives.

#include <cmath>

#include <Eigen/Dense>

namespace mechlab {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using VecF = Vec<float>;
using MatD = Mat<double>;
using VecD = Vec<double>;

// Exact GELU, x * Phi(x), and its derivative Phi(x) + x * phi(x).
template <class S>
inline S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865476)));
}

template <class S>
inline S gelu_grad(S x) {
    const S phi_cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865476)));
    const S phi_pdf = S(0.3989422804014327) * std::exp(S(-0.5) * x * x);
    return phi_cdf + x * phi_pdf;
}

}  // namespace mechlab
