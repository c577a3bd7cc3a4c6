#include "vble/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace vble {

namespace {

using detail::BackwardFn;
using detail::make_result;
using detail::NodePtr;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Flat source offset for every element of `out`, reading from a tensor of
// shape `src` broadcast to `out`.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - src.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    stride[i + offset] = src[i] == 1 ? 0 : s;
    s *= src[i];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < n; ++k) {
    index[k] = cur;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out[d]) {
        cur += stride[d];
        break;
      }
      cur -= stride[d] * (counter[d] - 1);
      counter[d] = 0;
    }
  }
  return index;
}

void require_shape(const char* op, const Tensor& t, std::size_t rank) {
  if (t.dim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

Tensor unary(const char* op, const Tensor& t, std::vector<double> out,
             std::function<void(std::span<const double>, std::span<const double>, std::span<const double>,
                                std::vector<double>&)>
                 rule) {
  NodePtr in = t.node();
  auto result_holder = std::make_shared<std::vector<double>>(out);
  BackwardFn bw = [in, result_holder, rule](std::span<const double> g, std::span<std::vector<double>*> gi) {
    if (gi[0]) rule(g, in->value, *result_holder, *gi[0]);
  };
  return make_result(op, t.shape(), std::move(out), {in}, std::move(bw));
}

inline double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 - exp(x)) for x < 0.
inline double log1mexp(double x) {
  return x > -std::numbers::ln2 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x));
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

inline double log_phi(double x) { return -0.5 * x * x - kHalfLog2Pi; }

}  // namespace

namespace special {

double log_ndtr(double x) {
  if (x > 0) return std::log1p(-0.5 * std::erfc(x / std::numbers::sqrt2));
  if (x > -20) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  // Asymptotic expansion of the Mills ratio; truncation error below 1e-12 here.
  const double x2 = x * x;
  const double r = 1.0 / x2;
  const double series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)));
  return -0.5 * x2 - std::log(-x) - kHalfLog2Pi + std::log(series);
}

namespace {
struct BinMass {
  double value;
  double d_delta;  // derivative w.r.t. z - location
  double d_u_l;    // -(u*g_u + l*g_l): derivative w.r.t. log of the scale
};

BinMass gaussian_bin(double d, double s) {
  const double sign = d > 0 ? -1.0 : 1.0;
  const double dd = -std::abs(d);
  const double u = (dd + 0.5) / s;
  const double l = (dd - 0.5) / s;
  double log_mass;
  if (u <= 0) {
    const double lu = log_ndtr(u);
    const double ll = log_ndtr(l);
    log_mass = lu + log1mexp(ll - lu);
  } else {
    log_mass = std::log(0.5 * (std::erf(u / std::numbers::sqrt2) + std::erf(-l / std::numbers::sqrt2)));
  }
  const double gu = std::exp(log_phi(u) - log_mass);
  const double gl = -std::exp(log_phi(l) - log_mass);
  return {log_mass, sign * (gu + gl) / s, -(u * gu + l * gl)};
}

BinMass logistic_bin(double d, double s) {
  const double sign = d > 0 ? -1.0 : 1.0;
  const double dd = -std::abs(d);
  const double u = (dd + 0.5) / s;
  const double l = (dd - 0.5) / s;
  const double log_mass = u + std::log(-std::expm1(l - u)) - softplus_scalar(u) - softplus_scalar(l);
  const double gu = std::exp(-softplus_scalar(-u) - softplus_scalar(u) - log_mass);
  const double gl = -std::exp(-softplus_scalar(-l) - softplus_scalar(l) - log_mass);
  return {log_mass, sign * (gu + gl) / s, -(u * gu + l * gl)};
}
}  // namespace

double log_gaussian_bin_mass(double d, double sigma) { return gaussian_bin(d, sigma).value; }
double log_logistic_bin_mass(double d, double scale) { return logistic_bin(d, scale).value; }

}  // namespace special

// ---------------------------------------------------------------------------
// Elementwise

Tensor elementwise(UnaryOp op, const Tensor& t) {
  const auto x = t.values();
  std::vector<double> y(x.size());
  switch (op) {
    case UnaryOp::exp:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]);
      return unary("exp", t, std::move(y), [](auto g, auto, auto out, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * out[i];
      });
    case UnaryOp::log:
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0)) throw DomainError("log: non-positive input " + std::to_string(x[i]));
        y[i] = std::log(x[i]);
      }
      return unary("log", t, std::move(y), [](auto g, auto in, auto, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / in[i];
      });
    case UnaryOp::square:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * x[i];
      return unary("square", t, std::move(y), [](auto g, auto in, auto, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += 2.0 * in[i] * g[i];
      });
    case UnaryOp::sqrt:
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0)) throw DomainError("sqrt: non-positive input " + std::to_string(x[i]));
        y[i] = std::sqrt(x[i]);
      }
      return unary("sqrt", t, std::move(y), [](auto g, auto, auto out, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / (2.0 * out[i]);
      });
    case UnaryOp::softplus:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = softplus_scalar(x[i]);
      return unary("softplus", t, std::move(y), [](auto g, auto in, auto, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * sigmoid_scalar(in[i]);
      });
    case UnaryOp::sigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
      return unary("sigmoid", t, std::move(y), [](auto g, auto, auto out, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * out[i] * (1.0 - out[i]);
      });
    case UnaryOp::negate:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = -x[i];
      return unary("negate", t, std::move(y), [](auto g, auto, auto, auto& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
      });
  }
  throw std::logic_error("elementwise: unknown unary op");
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(op)];
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  auto ia = std::make_shared<std::vector<std::size_t>>();
  auto ib = std::make_shared<std::vector<std::size_t>>();
  if (!same) {
    *ia = broadcast_index(a.shape(), out_shape);
    *ib = broadcast_index(b.shape(), out_shape);
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> y(n);
  auto at = [&](std::size_t k) { return same ? av[k] : av[(*ia)[k]]; };
  auto bt = [&](std::size_t k) { return same ? bv[k] : bv[(*ib)[k]]; };
  switch (op) {
    case BinaryOp::add: for (std::size_t k = 0; k < n; ++k) y[k] = at(k) + bt(k); break;
    case BinaryOp::sub: for (std::size_t k = 0; k < n; ++k) y[k] = at(k) - bt(k); break;
    case BinaryOp::mul: for (std::size_t k = 0; k < n; ++k) y[k] = at(k) * bt(k); break;
    case BinaryOp::div: for (std::size_t k = 0; k < n; ++k) y[k] = at(k) / bt(k); break;
  }
  NodePtr na = a.node();
  NodePtr nb = b.node();
  BackwardFn bw = [op, same, ia, ib, na, nb, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
    auto ja = [&](std::size_t k) { return same ? k : (*ia)[k]; };
    auto jb = [&](std::size_t k) { return same ? k : (*ib)[k]; };
    const auto& av = na->value;
    const auto& bv = nb->value;
    if (gi[0]) {
      auto& ga = *gi[0];
      for (std::size_t k = 0; k < n; ++k) {
        switch (op) {
          case BinaryOp::add:
          case BinaryOp::sub: ga[ja(k)] += g[k]; break;
          case BinaryOp::mul: ga[ja(k)] += g[k] * bv[jb(k)]; break;
          case BinaryOp::div: ga[ja(k)] += g[k] / bv[jb(k)]; break;
        }
      }
    }
    if (gi[1]) {
      auto& gb = *gi[1];
      for (std::size_t k = 0; k < n; ++k) {
        switch (op) {
          case BinaryOp::add: gb[jb(k)] += g[k]; break;
          case BinaryOp::sub: gb[jb(k)] -= g[k]; break;
          case BinaryOp::mul: gb[jb(k)] += g[k] * av[ja(k)]; break;
          case BinaryOp::div: {
            const double bk = bv[jb(k)];
            gb[jb(k)] -= g[k] * av[ja(k)] / (bk * bk);
            break;
          }
        }
      }
    }
  };
  return make_result(name, out_shape, std::move(y), {na, nb}, std::move(bw));
}

Tensor exp(const Tensor& t) { return elementwise(UnaryOp::exp, t); }
Tensor log(const Tensor& t) { return elementwise(UnaryOp::log, t); }
Tensor square(const Tensor& t) { return elementwise(UnaryOp::square, t); }
Tensor sqrt(const Tensor& t) { return elementwise(UnaryOp::sqrt, t); }
Tensor softplus(const Tensor& t) { return elementwise(UnaryOp::softplus, t); }
Tensor sigmoid(const Tensor& t) { return elementwise(UnaryOp::sigmoid, t); }

Tensor scale(const Tensor& t, double factor) {
  std::vector<double> y(t.values().begin(), t.values().end());
  for (auto& v : y) v *= factor;
  return unary("scale", t, std::move(y), [factor](auto g, auto, auto, auto& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += factor * g[i];
  });
}

Tensor add_scalar(const Tensor& t, double offset) {
  std::vector<double> y(t.values().begin(), t.values().end());
  for (auto& v : y) v += offset;
  return unary("add_scalar", t, std::move(y), [](auto g, auto, auto, auto& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::div, a, b); }
Tensor operator-(const Tensor& t) { return elementwise(UnaryOp::negate, t); }
Tensor operator*(double c, const Tensor& t) { return scale(t, c); }
Tensor operator*(const Tensor& t, double c) { return scale(t, c); }
Tensor operator+(const Tensor& t, double c) { return add_scalar(t, c); }

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

Tensor broadcast_to(const Tensor& t, const Shape& shape) {
  if (broadcast_shape(t.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: cannot broadcast " + to_string(t.shape()) + " to " + to_string(shape));
  }
  if (t.shape() == shape) return t;
  auto index = std::make_shared<std::vector<std::size_t>>(broadcast_index(t.shape(), shape));
  const auto x = t.values();
  std::vector<double> y(index->size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[(*index)[k]];
  BackwardFn bw = [index](std::span<const double> g, std::span<std::vector<double>*> gi) {
    if (!gi[0]) return;
    for (std::size_t k = 0; k < g.size(); ++k) (*gi[0])[(*index)[k]] += g[k];
  };
  return make_result("broadcast_to", shape, std::move(y), {t.node()}, std::move(bw));
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.size()) {
    throw ShapeError("reshape: cannot view " + to_string(t.shape()) + " as " + to_string(shape));
  }
  BackwardFn bw = [](std::span<const double> g, std::span<std::vector<double>*> gi) {
    if (!gi[0]) return;
    for (std::size_t k = 0; k < g.size(); ++k) (*gi[0])[k] += g[k];
  };
  return make_result("reshape", std::move(shape), t.vector(), {t.node()}, std::move(bw));
}

Tensor reduce(Reduction op, const Tensor& t) {
  const auto x = t.values();
  double s = 0.0;
  for (double v : x) s += v;
  const double factor = op == Reduction::mean ? 1.0 / static_cast<double>(x.size()) : 1.0;
  BackwardFn bw = [factor](std::span<const double> g, std::span<std::vector<double>*> gi) {
    if (!gi[0]) return;
    for (auto& v : *gi[0]) v += g[0] * factor;
  };
  return make_result(op == Reduction::mean ? "mean" : "sum", {}, {s * factor}, {t.node()}, std::move(bw));
}

Tensor reduce(Reduction op, const Tensor& t, std::vector<std::size_t> axes) {
  Shape keep = t.shape();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= t.dim()) {
      throw ShapeError("reduce: invalid axis " + std::to_string(ax) + " for shape " + to_string(t.shape()));
    }
    count *= keep[ax];
    keep[ax] = 1;
  }
  Shape out_shape;
  for (std::size_t d = 0; d < t.dim(); ++d) {
    if (!std::binary_search(axes.begin(), axes.end(), d)) out_shape.push_back(t.shape()[d]);
  }
  auto index = std::make_shared<std::vector<std::size_t>>(broadcast_index(keep, t.shape()));
  const double factor = op == Reduction::mean && count > 0 ? 1.0 / static_cast<double>(count) : 1.0;
  const auto x = t.values();
  std::vector<double> y(numel(keep), 0.0);
  for (std::size_t k = 0; k < x.size(); ++k) y[(*index)[k]] += x[k];
  for (auto& v : y) v *= factor;
  BackwardFn bw = [index, factor](std::span<const double> g, std::span<std::vector<double>*> gi) {
    if (!gi[0]) return;
    auto& out = *gi[0];
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += factor * g[(*index)[k]];
  };
  return make_result(op == Reduction::mean ? "mean" : "sum", std::move(out_shape), std::move(y), {t.node()},
                     std::move(bw));
}

Tensor sum(const Tensor& t) { return reduce(Reduction::sum, t); }
Tensor mean(const Tensor& t) { return reduce(Reduction::mean, t); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_shape("matmul", a, 2);
  require_shape("matmul", b, 2);
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul: inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<double> y(m * n);
  MatMap(y.data(), m, n).noalias() = ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
  NodePtr na = a.node(), nb = b.node();
  BackwardFn bw = [na, nb, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
    ConstMatMap G(g.data(), m, n);
    if (gi[0]) MatMap(gi[0]->data(), m, k).noalias() += G * ConstMatMap(nb->value.data(), k, n).transpose();
    if (gi[1]) MatMap(gi[1]->data(), k, n).noalias() += ConstMatMap(na->value.data(), m, k).transpose() * G;
  };
  return make_result("matmul", {m, n}, std::move(y), {na, nb}, std::move(bw));
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kernel, stride, pad;
  bool circular;
  std::size_t out_h, out_w;  // sliding-window side

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

inline long wrap(long i, long n) {
  i %= n;
  return i < 0 ? i + n : i;
}

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * g.cols();
        const double* plane = x + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          const bool row_out = ih < 0 || ih >= H;
          if (g.circular) ih = wrap(ih, H);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            double v = 0.0;
            if (g.circular) {
              v = plane[ih * W + wrap(iw, W)];
            } else if (!row_out && iw >= 0 && iw < W) {
              v = plane[ih * W + iw];
            }
            row[oh * g.out_w + ow] = v;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * g.cols();
        double* plane = x + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (g.circular) {
            ih = wrap(ih, H);
          } else if (ih < 0 || ih >= H) {
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (g.circular) {
              iw = wrap(iw, W);
            } else if (iw < 0 || iw >= W) {
              continue;
            }
            plane[ih * W + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, Padding padding) {
  require_shape("conv2d", input, 4);
  require_shape("conv2d", kernel, 4);
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
  const std::size_t O = kernel.extent(0), K = kernel.extent(2);
  if (kernel.extent(1) != C || kernel.extent(3) != K) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " incompatible with input " +
                     to_string(input.shape()));
  }
  const std::size_t pad = (K - 1) / 2;
  // A circular kernel wider than the period would wrap onto itself.
  if (padding == Padding::circular && (K > H || K > W)) {
    throw ShapeError("conv2d: kernel larger than periodic input " + to_string(input.shape()));
  }
  ConvGeometry geo{C, H, W, K, stride, pad, padding == Padding::circular, (H + 2 * pad - K) / stride + 1,
                   (W + 2 * pad - K) / stride + 1};
  std::vector<double> y(N * O * geo.cols());
  std::vector<double> cols(geo.rows() * geo.cols());
  ConstMatMap Wm(kernel.values().data(), O, geo.rows());
  for (std::size_t n = 0; n < N; ++n) {
    im2col(input.values().data() + n * C * H * W, geo, cols.data());
    MatMap(y.data() + n * O * geo.cols(), O, geo.cols()).noalias() =
        Wm * ConstMatMap(cols.data(), geo.rows(), geo.cols());
  }
  NodePtr nx = input.node(), nk = kernel.node();
  BackwardFn bw = [nx, nk, geo, N, O](std::span<const double> g, std::span<std::vector<double>*> gi) {
    const std::size_t in_plane = geo.channels * geo.height * geo.width;
    std::vector<double> cols(geo.rows() * geo.cols());
    ConstMatMap Wm(nk->value.data(), O, geo.rows());
    for (std::size_t n = 0; n < N; ++n) {
      ConstMatMap G(g.data() + n * O * geo.cols(), O, geo.cols());
      if (gi[1]) {
        im2col(nx->value.data() + n * in_plane, geo, cols.data());
        MatMap(gi[1]->data(), O, geo.rows()).noalias() +=
            G * ConstMatMap(cols.data(), geo.rows(), geo.cols()).transpose();
      }
      if (gi[0]) {
        MatMap(cols.data(), geo.rows(), geo.cols()).noalias() = Wm.transpose() * G;
        col2im_add(cols.data(), geo, gi[0]->data() + n * in_plane);
      }
    }
  };
  return make_result("conv2d", {N, O, geo.out_h, geo.out_w}, std::move(y), {nx, nk}, std::move(bw));
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, std::size_t stride) {
  require_shape("conv2d_transpose", input, 4);
  require_shape("conv2d_transpose", kernel, 4);
  if (stride < 1) throw ShapeError("conv2d_transpose: stride must be >= 1");
  const std::size_t N = input.extent(0), Ci = input.extent(1), H = input.extent(2), W = input.extent(3);
  const std::size_t Co = kernel.extent(1), K = kernel.extent(2);
  if (kernel.extent(0) != Ci || kernel.extent(3) != K) {
    throw ShapeError("conv2d_transpose: kernel " + to_string(kernel.shape()) + " incompatible with input " +
                     to_string(input.shape()));
  }
  const std::size_t pad = (K - 1) / 2;
  const std::size_t Ho = H * stride, Wo = W * stride;
  if (K > Ho + 2 * pad || (Ho + 2 * pad - K) / stride + 1 != H || (Wo + 2 * pad - K) / stride + 1 != W) {
    throw ShapeError("conv2d_transpose: kernel size " + std::to_string(K) + " with stride " + std::to_string(stride) +
                     " has no adjoint of extent " + std::to_string(Ho) + "x" + std::to_string(Wo));
  }
  // Geometry of the forward convolution this op is the adjoint of.
  ConvGeometry geo{Co, Ho, Wo, K, stride, pad, false, H, W};
  std::vector<double> y(N * Co * Ho * Wo, 0.0);
  std::vector<double> cols(geo.rows() * geo.cols());
  ConstMatMap Wm(kernel.values().data(), Ci, geo.rows());
  for (std::size_t n = 0; n < N; ++n) {
    MatMap(cols.data(), geo.rows(), geo.cols()).noalias() =
        Wm.transpose() * ConstMatMap(input.values().data() + n * Ci * H * W, Ci, H * W);
    col2im_add(cols.data(), geo, y.data() + n * Co * Ho * Wo);
  }
  NodePtr nx = input.node(), nk = kernel.node();
  BackwardFn bw = [nx, nk, geo, N, Ci](std::span<const double> g, std::span<std::vector<double>*> gi) {
    const std::size_t out_plane = geo.channels * geo.height * geo.width;
    const std::size_t hw = geo.cols();
    std::vector<double> cols(geo.rows() * hw);
    ConstMatMap Wm(nk->value.data(), Ci, geo.rows());
    for (std::size_t n = 0; n < N; ++n) {
      im2col(g.data() + n * out_plane, geo, cols.data());
      ConstMatMap Cg(cols.data(), geo.rows(), hw);
      if (gi[0]) MatMap(gi[0]->data() + n * Ci * hw, Ci, hw).noalias() += Wm * Cg;
      if (gi[1]) {
        MatMap(gi[1]->data(), Ci, geo.rows()).noalias() +=
            ConstMatMap(nx->value.data() + n * Ci * hw, Ci, hw) * Cg.transpose();
      }
    }
  };
  return make_result("conv2d_transpose", {N, Co, Ho, Wo}, std::move(y), {nx, nk}, std::move(bw));
}

Tensor gdn(const Tensor& input, const Tensor& beta, const Tensor& gamma, bool inverse) {
  require_shape("gdn", input, 4);
  const std::size_t C = input.extent(1);
  if (beta.size() != C || gamma.size() != C * C) {
    throw ShapeError("gdn: parameters " + to_string(beta.shape()) + ", " + to_string(gamma.shape()) +
                     " do not match " + std::to_string(C) + " channels");
  }
  for (double b : beta.values()) {
    if (!(b > 0)) throw DomainError("gdn: beta must be positive, got " + std::to_string(b));
  }
  for (double g : gamma.values()) {
    if (g < 0) throw DomainError("gdn: gamma must be non-negative, got " + std::to_string(g));
  }
  const Tensor norm =
      conv2d(square(input), reshape(gamma, {C, C, 1, 1}), 1, Padding::zero) + reshape(beta, {1, C, 1, 1});
  return inverse ? input * sqrt(norm) : input / sqrt(norm);
}

// ---------------------------------------------------------------------------
// Discretized densities

namespace {

template <typename Rule>
Tensor bin_mass_op(const char* op, const Tensor& z, const Tensor& loc, const Tensor& spread, bool log_spread,
                   Rule rule) {
  if (z.shape() != loc.shape() || z.shape() != spread.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ: " + to_string(z.shape()) + ", " + to_string(loc.shape()) +
                     ", " + to_string(spread.shape()));
  }
  const std::size_t n = z.size();
  const auto zv = z.values(), mv = loc.values(), sv = spread.values();
  std::vector<double> y(n);
  auto dd = std::make_shared<std::vector<double>>(n);
  auto ds = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = log_spread ? std::exp(sv[i]) : sv[i];
    if (!(s > 0)) throw DomainError(std::string(op) + ": scale must be positive, got " + std::to_string(s));
    const auto r = rule(zv[i] - mv[i], s);
    y[i] = r.value;
    (*dd)[i] = r.d_delta;
    (*ds)[i] = log_spread ? r.d_u_l : r.d_u_l / s;
  }
  BackwardFn bw = [dd, ds](std::span<const double> g, std::span<std::vector<double>*> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gi[0]) (*gi[0])[i] += g[i] * (*dd)[i];
      if (gi[1]) (*gi[1])[i] -= g[i] * (*dd)[i];
      if (gi[2]) (*gi[2])[i] += g[i] * (*ds)[i];
    }
  };
  return make_result(op, z.shape(), std::move(y), {z.node(), loc.node(), spread.node()}, std::move(bw));
}

}  // namespace

Tensor log_gaussian_bin_mass(const Tensor& z, const Tensor& mu, const Tensor& sigma) {
  return bin_mass_op("log_gaussian_bin_mass", z, mu, sigma, false, special::gaussian_bin);
}

Tensor log_logistic_bin_mass(const Tensor& z, const Tensor& loc, const Tensor& log_scale) {
  return bin_mass_op("log_logistic_bin_mass", z, loc, log_scale, true, special::logistic_bin);
}

double inner_product(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("inner_product: sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace vble
