#pragma once

#include <vector>

#include "vble/tensor.hpp"

namespace vble {

enum class UnaryOp { exp, log, square, sqrt, softplus, sigmoid, negate };
enum class BinaryOp { add, sub, mul, div };
enum class Reduction { sum, mean };
enum class Padding { zero, circular };

// Elementwise. Binary ops broadcast extents of 1 (shapes are right-aligned).
Tensor elementwise(UnaryOp op, const Tensor& t);
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& t);
Tensor log(const Tensor& t);
Tensor square(const Tensor& t);
Tensor sqrt(const Tensor& t);
Tensor softplus(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor scale(const Tensor& t, double factor);
Tensor add_scalar(const Tensor& t, double offset);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& t);
Tensor operator*(double c, const Tensor& t);
Tensor operator*(const Tensor& t, double c);
Tensor operator+(const Tensor& t, double c);

Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor broadcast_to(const Tensor& t, const Shape& shape);
Tensor reshape(const Tensor& t, Shape shape);

/// Sum or mean over all elements (scalar result) or over the given axes
/// (those axes are dropped from the result).
Tensor reduce(Reduction op, const Tensor& t);
Tensor reduce(Reduction op, const Tensor& t, std::vector<std::size_t> axes);
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of an NCHW input with an OIKK kernel. The input is
/// padded by (K-1)/2 on every side, so stride 1 with an odd kernel keeps the
/// spatial extent.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, Padding padding);

/// Adjoint of conv2d(., kernel, stride, Padding::zero). The kernel is laid
/// out [in, out, K, K]; an HxW input yields (H*stride)x(W*stride).
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, std::size_t stride);

/// Generalized divisive normalization over channels:
/// y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), or the multiplicative
/// form when `inverse` is set. beta has C entries, gamma is CxC.
Tensor gdn(const Tensor& input, const Tensor& beta, const Tensor& gamma, bool inverse);

/// log P(|X - z| <= 1/2 shifted), i.e. log[Phi((z-mu+1/2)/sigma) - Phi((z-mu-1/2)/sigma)]
/// per coefficient. All three tensors share one shape.
Tensor log_gaussian_bin_mass(const Tensor& z, const Tensor& mu, const Tensor& sigma);

/// Logistic counterpart: log[S((z-loc+1/2)/s) - S((z-loc-1/2)/s)], S the
/// logistic sigmoid and s = exp(log_scale).
Tensor log_logistic_bin_mass(const Tensor& z, const Tensor& loc, const Tensor& log_scale);

double inner_product(const Tensor& a, const Tensor& b);

namespace special {
double log_ndtr(double x);
double log_gaussian_bin_mass(double d, double sigma);
double log_logistic_bin_mass(double d, double scale);
}  // namespace special

}  // namespace vble
