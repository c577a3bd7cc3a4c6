#include "vble/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "vble/degradation.hpp"

namespace vble {

namespace {

void require_same_size(const char* who, const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(who) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
  }
}

// Per-pixel sorted samples, pixel-major.
std::vector<std::vector<double>> sorted_pixels(const Tensor& samples) {
  if (samples.dim() < 2) throw ShapeError("expected samples with a leading sample axis");
  const std::size_t n = samples.extent(0), per = samples.size() / n;
  std::vector<std::vector<double>> px(per, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per; ++k) px[k][i] = samples[i * per + k];
  for (auto& v : px) std::sort(v.begin(), v.end());
  return px;
}

Shape single(const Tensor& samples) {
  Shape s = samples.shape();
  s[0] = 1;
  return s;
}

void check_level(double level) {
  if (!(level > 0 && level < 1)) throw DomainError("interval level must lie in (0, 1)");
}

}  // namespace

double psnr(const Tensor& x, const Tensor& ref) {
  require_same_size("psnr", x, ref);
  double mse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - ref[i]) * (x[i] - ref[i]);
  mse /= static_cast<double>(x.size());
  if (mse < 1e-10) return 100.0;
  return std::min(100.0, -10.0 * std::log10(mse));
}

double ssim(const Tensor& x, const Tensor& ref) {
  if (x.shape() != ref.shape() || x.dim() < 2) throw ShapeError("ssim: images must share a [..., H, W] shape");
  const std::size_t H = x.extent(x.dim() - 2), W = x.extent(x.dim() - 1), C = x.size() / (H * W);
  std::size_t win = std::min<std::size_t>({11, H, W});
  if (win % 2 == 0) --win;
  const std::vector<double> k = gaussian_kernel(1.5, win);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  const std::size_t oh = H - win + 1, ow = W - win + 1;
  double total = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double* a = x.values().data() + c * H * W;
    const double* b = ref.values().data() + c * H * W;
    double acc = 0;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t u = 0; u < win; ++u) {
          for (std::size_t v = 0; v < win; ++v) {
            const double w = k[u * win + v];
            const double pa = a[(i + u) * W + j + v], pb = b[(i + u) * W + j + v];
            ma += w * pa;
            mb += w * pb;
            saa += w * pa * pa;
            sbb += w * pb * pb;
            sab += w * pa * pb;
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
    total += acc / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(C);
}

double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty set");
  const double h = (static_cast<double>(sorted.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

IntervalMap interval_map(const Tensor& samples, double level) {
  check_level(level);
  if (samples.extent(0) < 2) throw std::invalid_argument("interval_map: need at least 2 samples");
  const auto px = sorted_pixels(samples);
  std::vector<double> lo(px.size()), hi(px.size());
  for (std::size_t k = 0; k < px.size(); ++k) {
    lo[k] = sorted_quantile(px[k], (1 - level) / 2);
    hi[k] = sorted_quantile(px[k], (1 + level) / 2);
  }
  return {Tensor(single(samples), std::move(lo)), Tensor(single(samples), std::move(hi)), level};
}

double icp(const IntervalMap& intervals, const Tensor& truth) {
  require_same_size("icp", intervals.lower, truth);
  std::size_t inside = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    inside += intervals.lower[k] <= truth[k] && truth[k] <= intervals.upper[k];
  }
  return static_cast<double>(inside) / static_cast<double>(truth.size());
}

std::vector<double> default_coverage_levels() {
  std::vector<double> levels;
  for (int i = 1; i <= 19; ++i) levels.push_back(0.05 * i);
  levels.push_back(0.99);
  return levels;
}

CoverageCurve coverage_curve(const Tensor& samples, const Tensor& truth, const std::vector<double>& levels) {
  if (samples.extent(0) < 2) throw std::invalid_argument("coverage_curve: need at least 2 samples");
  if (samples.size() / samples.extent(0) != truth.size()) throw ShapeError("coverage_curve: truth/sample mismatch");
  const auto px = sorted_pixels(samples);
  CoverageCurve curve;
  for (double level : levels) {
    check_level(level);
    std::size_t inside = 0;
    for (std::size_t k = 0; k < px.size(); ++k) {
      const double lo = sorted_quantile(px[k], (1 - level) / 2), hi = sorted_quantile(px[k], (1 + level) / 2);
      inside += lo <= truth[k] && truth[k] <= hi;
    }
    curve.levels.push_back(level);
    curve.empirical.push_back(static_cast<double>(inside) / static_cast<double>(px.size()));
  }
  return curve;
}

Tensor error_quantile_map(const Tensor& samples, const Tensor& estimate, double q) {
  const std::size_t n = samples.extent(0), per = samples.size() / n;
  if (estimate.size() != per) throw ShapeError("error_quantile_map: estimate/sample mismatch");
  if (!(q >= 0 && q <= 1)) throw DomainError("error_quantile_map: q must lie in [0, 1]");
  std::vector<double> out(per), dev(n);
  for (std::size_t k = 0; k < per; ++k) {
    for (std::size_t i = 0; i < n; ++i) dev[i] = std::abs(samples[i * per + k] - estimate[k]);
    std::sort(dev.begin(), dev.end());
    out[k] = sorted_quantile(dev, q);
  }
  return Tensor(single(samples), std::move(out));
}

void write_coverage_csv(const std::filesystem::path& path, const CoverageCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "level,empirical\n";
  char line[64];
  for (std::size_t i = 0; i < curve.levels.size(); ++i) {
    std::snprintf(line, sizeof line, "%.6f,%.6f\n", curve.levels[i], curve.empirical[i]);
    out << line;
  }
}

}  // namespace vble
