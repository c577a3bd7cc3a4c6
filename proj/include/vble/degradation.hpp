#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "vble/tensor.hpp"

namespace vble {

enum class OperatorKind { identity, blur, downsample, mask };

std::string to_string(OperatorKind k);
OperatorKind parse_operator_kind(const std::string& s);

/// Normalized, centered size x size Gaussian kernel (row-major).
std::vector<double> gaussian_kernel(double sigma_k, std::size_t size);

/// Keys cubic convolution weight (a = -0.5).
double cubic_weight(double t);

/// 2-D antialiasing kernel used before decimation by `factor`: the cubic
/// kernel stretched by the factor, normalized. Size 4*factor - 1.
std::vector<double> downsample_kernel(std::size_t factor);

/// JSON 2-D array of floats, normalized to unit sum on load.
std::vector<double> load_kernel_json(const std::filesystem::path& path, std::size_t& size);

/// Linear degradation A acting on batched NCHW images (intensities in [0,1]).
/// Blur and downsampling use circular boundaries.
class DegradationOperator {
 public:
  DegradationOperator() = default;

  static DegradationOperator identity();
  /// `kernel` is size x size row-major; it is normalized to unit sum.
  static DegradationOperator blur(std::vector<double> kernel, std::size_t size);
  static DegradationOperator gaussian_blur(double sigma_k, std::size_t size);
  static DegradationOperator downsample(std::size_t factor);
  /// Binary mask of shape [H,W], [C,H,W] or [1,C,H,W]; 1 marks observed pixels.
  static DegradationOperator mask(const Tensor& mask);

  OperatorKind kind() const { return kind_; }
  std::size_t factor() const { return factor_; }
  std::size_t kernel_size() const { return kernel_size_; }
  const std::vector<double>& kernel() const { return kernel_; }
  const Tensor& mask_tensor() const { return mask_; }

  /// Differentiable A(x).
  Tensor apply(const Tensor& x) const;
  /// A^T(y), computed directly (not through the tape).
  Tensor adjoint(const Tensor& y) const;

  Shape output_shape(const Shape& input) const;
  Shape input_shape(const Shape& output) const;

  /// Operator description. Masks are described by shape only; the caller
  /// stores the mask pixels alongside.
  nlohmann::json to_json() const;

 private:
  OperatorKind kind_ = OperatorKind::identity;
  std::vector<double> kernel_;
  std::size_t kernel_size_ = 0;
  std::size_t factor_ = 1;
  Tensor mask_;
};

/// Converts a noise level quoted on the 8-bit scale (e.g. 7.65) to [0,1] units.
constexpr double sigma_from_8bit(double sigma8) { return sigma8 / 255.0; }

/// y = A(x) + sigma * n, n ~ N(0, I) drawn from `seed`.
Tensor degrade(const DegradationOperator& op, const Tensor& x, double sigma, std::uint64_t seed);

/// Random binary mask with the given observed fraction, shape [1,1,H,W].
Tensor random_mask(std::size_t height, std::size_t width, double observed_fraction, std::uint64_t seed);

/// Bicubic interpolation by an integer factor (circular boundaries).
Tensor bicubic_upsample(const Tensor& y, std::size_t factor);

struct ObservationProblem {
  DegradationOperator op;
  Tensor y;      // [1,C,h,w]
  double sigma;  // noise std in [0,1] units

  void validate() const;
  Shape image_shape() const { return op.input_shape(y.shape()); }
};

/// ||A(x) - y||^2 / (2 sigma^2) over observed pixels, summed over the batch.
Tensor neg_log_likelihood(const ObservationProblem& problem, const Tensor& x);

/// Starting image for latent initialisation.
Tensor init_guess(const ObservationProblem& problem);

}  // namespace vble
