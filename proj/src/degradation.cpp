#include "vble/degradation.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <system_error>

#include "vble/ops.hpp"
#include "vble/random.hpp"

namespace vble {

namespace {

void normalize(std::vector<double>& k) {
  double s = 0.0;
  for (double v : k) s += v;
  if (!(s > 0)) throw DomainError("kernel must have a positive sum");
  for (double& v : k) v /= s;
}

std::vector<double> flipped(const std::vector<double>& k) { return {k.rbegin(), k.rend()}; }

Tensor depthwise(const Tensor& x, const std::vector<double>& kernel, std::size_t size, std::size_t stride) {
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const Tensor k({1, 1, size, size}, kernel);
  const Tensor out = conv2d(reshape(x, {N * C, 1, H, W}), k, stride, Padding::circular);
  return reshape(out, {N, C, out.extent(2), out.extent(3)});
}

void require_image(const char* who, const Tensor& x) {
  if (x.dim() != 4) throw ShapeError(std::string(who) + ": expected an NCHW tensor, got " + to_string(x.shape()));
}

inline std::size_t wrap_index(long i, long n) {
  i %= n;
  return static_cast<std::size_t>(i < 0 ? i + n : i);
}

}  // namespace

std::string to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::identity: return "identity";
    case OperatorKind::blur: return "blur";
    case OperatorKind::downsample: return "downsample";
    case OperatorKind::mask: return "mask";
  }
  return "?";
}

OperatorKind parse_operator_kind(const std::string& s) {
  if (s == "identity") return OperatorKind::identity;
  if (s == "blur") return OperatorKind::blur;
  if (s == "downsample") return OperatorKind::downsample;
  if (s == "mask") return OperatorKind::mask;
  throw std::invalid_argument("unknown operator variant '" + s + "'");
}

std::vector<double> gaussian_kernel(double sigma_k, std::size_t size) {
  if (!(sigma_k > 0)) throw DomainError("gaussian_kernel: sigma must be positive");
  if (size % 2 == 0) throw DomainError("gaussian_kernel: size must be odd");
  const double c = static_cast<double>(size / 2);
  std::vector<double> k(size * size);
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      k[i * size + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma_k * sigma_k));
    }
  }
  normalize(k);
  return k;
}

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

std::vector<double> downsample_kernel(std::size_t factor) {
  const std::size_t size = 4 * factor - 1;
  const long half = static_cast<long>(size / 2);
  std::vector<double> w1(size);
  for (long i = -half; i <= half; ++i) w1[i + half] = cubic_weight(static_cast<double>(i) / double(factor));
  std::vector<double> k(size * size);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) k[i * size + j] = w1[i] * w1[j];
  normalize(k);
  return k;
}

std::vector<double> load_kernel_json(const std::filesystem::path& path, std::size_t& size) {
  std::ifstream in(path);
  if (!in) throw std::filesystem::filesystem_error("cannot open kernel file", path, std::make_error_code(std::errc::no_such_file_or_directory));
  const auto j = nlohmann::json::parse(in);
  if (!j.is_array() || j.empty()) throw std::invalid_argument("kernel file must hold a 2-D array");
  size = j.size();
  if (size % 2 == 0) throw std::invalid_argument("kernel must have odd extent");
  std::vector<double> k;
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != size) throw std::invalid_argument("kernel file must hold a square 2-D array");
    for (const auto& v : row) k.push_back(v.get<double>());
  }
  normalize(k);
  return k;
}

DegradationOperator DegradationOperator::identity() { return {}; }

DegradationOperator DegradationOperator::blur(std::vector<double> kernel, std::size_t size) {
  if (size % 2 == 0 || kernel.size() != size * size) throw DomainError("blur: kernel must be odd-sized and square");
  normalize(kernel);
  DegradationOperator op;
  op.kind_ = OperatorKind::blur;
  op.kernel_ = std::move(kernel);
  op.kernel_size_ = size;
  return op;
}

DegradationOperator DegradationOperator::gaussian_blur(double sigma_k, std::size_t size) {
  return blur(gaussian_kernel(sigma_k, size), size);
}

DegradationOperator DegradationOperator::downsample(std::size_t factor) {
  if (factor != 2 && factor != 4) throw DomainError("downsample: factor must be 2 or 4");
  DegradationOperator op;
  op.kind_ = OperatorKind::downsample;
  op.factor_ = factor;
  op.kernel_ = downsample_kernel(factor);
  op.kernel_size_ = 4 * factor - 1;
  return op;
}

DegradationOperator DegradationOperator::mask(const Tensor& mask) {
  Shape s = mask.shape();
  if (s.size() == 2) s = {1, 1, s[0], s[1]};
  else if (s.size() == 3) s = {1, s[0], s[1], s[2]};
  if (s.size() != 4 || s[0] != 1) throw ShapeError("mask: expected [H,W], [C,H,W] or [1,C,H,W]");
  for (double v : mask.values()) {
    if (v != 0.0 && v != 1.0) throw DomainError("mask: values must be 0 or 1");
  }
  DegradationOperator op;
  op.kind_ = OperatorKind::mask;
  op.mask_ = Tensor(s, mask.vector());
  return op;
}

Tensor DegradationOperator::apply(const Tensor& x) const {
  require_image("apply", x);
  switch (kind_) {
    case OperatorKind::identity: return x;
    case OperatorKind::blur: return depthwise(x, kernel_, kernel_size_, 1);
    case OperatorKind::downsample:
      if (x.extent(2) % factor_ || x.extent(3) % factor_) {
        throw ShapeError("downsample: extent not divisible by factor: " + to_string(x.shape()));
      }
      return depthwise(x, kernel_, kernel_size_, factor_);
    case OperatorKind::mask:
      if (x.extent(2) != mask_.extent(2) || x.extent(3) != mask_.extent(3) ||
          (mask_.extent(1) != 1 && mask_.extent(1) != x.extent(1))) {
        throw ShapeError("mask: image " + to_string(x.shape()) + " does not match mask " + to_string(mask_.shape()));
      }
      return x * mask_;
  }
  throw std::logic_error("apply: unknown operator");
}

Tensor DegradationOperator::adjoint(const Tensor& y) const {
  require_image("adjoint", y);
  switch (kind_) {
    case OperatorKind::identity: return y.detach();
    case OperatorKind::blur: return depthwise(y.detach(), flipped(kernel_), kernel_size_, 1);
    case OperatorKind::downsample: {
      const std::size_t N = y.extent(0), C = y.extent(1), h = y.extent(2), w = y.extent(3);
      const std::size_t H = h * factor_, W = w * factor_;
      std::vector<double> up(N * C * H * W, 0.0);
      for (std::size_t p = 0; p < N * C; ++p)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            up[(p * H + i * factor_) * W + j * factor_] = y[(p * h + i) * w + j];
      return depthwise(Tensor({N, C, H, W}, std::move(up)), flipped(kernel_), kernel_size_, 1);
    }
    case OperatorKind::mask: return apply(y.detach());
  }
  throw std::logic_error("adjoint: unknown operator");
}

Shape DegradationOperator::output_shape(const Shape& input) const {
  if (kind_ != OperatorKind::downsample) return input;
  Shape s = input;
  s[s.size() - 2] /= factor_;
  s[s.size() - 1] /= factor_;
  return s;
}

Shape DegradationOperator::input_shape(const Shape& output) const {
  if (kind_ != OperatorKind::downsample) return output;
  Shape s = output;
  s[s.size() - 2] *= factor_;
  s[s.size() - 1] *= factor_;
  return s;
}

nlohmann::json DegradationOperator::to_json() const {
  nlohmann::json j = {{"type", to_string(kind_)}};
  switch (kind_) {
    case OperatorKind::identity: break;
    case OperatorKind::blur: {
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t i = 0; i < kernel_size_; ++i) {
        rows.push_back(std::vector<double>(kernel_.begin() + i * kernel_size_, kernel_.begin() + (i + 1) * kernel_size_));
      }
      j["kernel"] = rows;
      break;
    }
    case OperatorKind::downsample: j["factor"] = factor_; break;
    case OperatorKind::mask: j["mask_shape"] = mask_.shape(); break;
  }
  return j;
}

Tensor degrade(const DegradationOperator& op, const Tensor& x, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw DomainError("degrade: sigma must be non-negative");
  const Tensor clean = op.apply(x.detach());
  if (sigma == 0) return clean;
  Rng rng(seed);
  std::vector<double> y = clean.vector();
  for (auto& v : y) v += sigma * rng.normal();
  return Tensor(clean.shape(), std::move(y));
}

Tensor random_mask(std::size_t height, std::size_t width, double observed_fraction, std::uint64_t seed) {
  if (observed_fraction < 0 || observed_fraction > 1) throw DomainError("random_mask: fraction outside [0,1]");
  Rng rng(seed);
  std::vector<double> m(height * width);
  for (auto& v : m) v = rng.uniform(0.0, 1.0) < observed_fraction ? 1.0 : 0.0;
  return Tensor({1, 1, height, width}, std::move(m));
}

Tensor bicubic_upsample(const Tensor& y, std::size_t factor) {
  require_image("bicubic_upsample", y);
  const std::size_t P = y.extent(0) * y.extent(1), h = y.extent(2), w = y.extent(3);
  const std::size_t H = h * factor, W = w * factor;
  auto taps = [factor](std::size_t p, std::size_t n, auto&& visit) {
    const double u = static_cast<double>(p) / static_cast<double>(factor);
    const long base = static_cast<long>(std::floor(u));
    for (long j = base - 1; j <= base + 2; ++j) {
      const double wgt = cubic_weight(u - static_cast<double>(j));
      if (wgt != 0.0) visit(wrap_index(j, static_cast<long>(n)), wgt);
    }
  };
  std::vector<double> rows(P * h * W, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t c = 0; c < W; ++c)
        taps(c, w, [&](std::size_t j, double wt) { rows[(p * h + i) * W + c] += wt * y[(p * h + i) * w + j]; });
  std::vector<double> out(P * H * W, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t r = 0; r < H; ++r)
      taps(r, h, [&](std::size_t i, double wt) {
        for (std::size_t c = 0; c < W; ++c) out[(p * H + r) * W + c] += wt * rows[(p * h + i) * W + c];
      });
  return Tensor({y.extent(0), y.extent(1), H, W}, std::move(out));
}

void ObservationProblem::validate() const {
  if (!(sigma > 0)) throw DomainError("observation: sigma must be positive");
  if (y.dim() != 4) throw ShapeError("observation: y must be NCHW, got " + to_string(y.shape()));
  if (op.output_shape(op.input_shape(y.shape())) != y.shape()) {
    throw ShapeError("observation: y shape " + to_string(y.shape()) + " is not an operator output shape");
  }
  if (op.kind() == OperatorKind::mask && (op.mask_tensor().extent(2) != y.extent(2) ||
                                          op.mask_tensor().extent(3) != y.extent(3))) {
    throw ShapeError("observation: mask does not match y " + to_string(y.shape()));
  }
}

Tensor neg_log_likelihood(const ObservationProblem& problem, const Tensor& x) {
  if (!(problem.sigma > 0)) throw DomainError("neg_log_likelihood: sigma must be positive");
  Tensor r = problem.op.apply(x) - problem.y;
  if (problem.op.kind() == OperatorKind::mask) r = r * problem.op.mask_tensor();
  return scale(sum(square(r)), 1.0 / (2.0 * problem.sigma * problem.sigma));
}

Tensor init_guess(const ObservationProblem& problem) {
  const Tensor& y = problem.y;
  switch (problem.op.kind()) {
    case OperatorKind::identity:
    case OperatorKind::blur: return y.detach();
    case OperatorKind::downsample: return bicubic_upsample(y, problem.op.factor());
    case OperatorKind::mask: {
      const Tensor& m = problem.op.mask_tensor();
      const std::size_t N = y.extent(0), C = y.extent(1), HW = y.extent(2) * y.extent(3);
      std::vector<double> out = y.vector();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* mk = m.values().data() + (m.extent(1) == 1 ? 0 : c) * HW;
          double* px = out.data() + (n * C + c) * HW;
          double s = 0.0, cnt = 0.0;
          for (std::size_t k = 0; k < HW; ++k)
            if (mk[k] != 0.0) s += px[k], cnt += 1.0;
          const double fill = cnt > 0 ? s / cnt : 0.5;
          for (std::size_t k = 0; k < HW; ++k)
            if (mk[k] == 0.0) px[k] = fill;
        }
      }
      return Tensor(y.shape(), std::move(out));
    }
  }
  throw std::logic_error("init_guess: unknown operator");
}

}  // namespace vble
