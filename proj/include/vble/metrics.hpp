#pragma once

#include <filesystem>
#include <vector>

#include "vble/tensor.hpp"

namespace vble {

/// 10 log10(1 / MSE) for intensities in [0, 1], capped at 100 dB.
double psnr(const Tensor& x, const Tensor& ref);

/// Mean SSIM over 'valid' windows, averaged over channels. Images are
/// [..., H, W]; leading extents count as channels. Gaussian window 11x11,
/// sigma 1.5 (shrunk to the largest odd size that fits smaller images),
/// K1 = 0.01, K2 = 0.03, data range 1.
double ssim(const Tensor& x, const Tensor& ref);

/// Type-7 (linear interpolation) quantile of sorted data.
double sorted_quantile(const std::vector<double>& sorted, double q);

struct IntervalMap {
  Tensor lower, upper;  // [1, C, H, W]
  double level = 0.95;
};

/// Equal-tailed pixelwise intervals from samples [n, C, H, W], n >= 2.
IntervalMap interval_map(const Tensor& samples, double level);

/// Fraction of pixels with lower <= truth <= upper.
double icp(const IntervalMap& intervals, const Tensor& truth);

struct CoverageCurve {
  std::vector<double> levels;
  std::vector<double> empirical;
};

/// 0.05, 0.10, ..., 0.95, 0.99.
std::vector<double> default_coverage_levels();

CoverageCurve coverage_curve(const Tensor& samples, const Tensor& truth,
                             const std::vector<double>& levels = default_coverage_levels());

/// Pixelwise q-quantile of |sample - estimate|.
Tensor error_quantile_map(const Tensor& samples, const Tensor& estimate, double q);

/// CSV with header `level,empirical`, six decimals.
void write_coverage_csv(const std::filesystem::path& path, const CoverageCurve& curve);

}  // namespace vble
