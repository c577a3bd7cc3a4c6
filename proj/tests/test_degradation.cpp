#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "vble/degradation.hpp"
#include "vble/ops.hpp"

using namespace vble;

namespace {

std::vector<DegradationOperator> operator_zoo() {
  return {DegradationOperator::identity(), DegradationOperator::gaussian_blur(1.0, 7),
          DegradationOperator::gaussian_blur(3.0, 9), DegradationOperator::downsample(2),
          DegradationOperator::downsample(4), DegradationOperator::mask(random_mask(16, 16, 0.5, 3))};
}

double max_abs(const Tensor& t) {
  double m = 0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

TEST_CASE("gaussian kernel") {
  const auto k = gaussian_kernel(1.0, 7);
  double norm = 0;
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j) norm += std::exp(-(i * i + j * j) / 2.0);
  CHECK(k[24] == doctest::Approx(1.0 / norm).epsilon(1e-14));
  CHECK(k[24] == doctest::Approx(0.159241).epsilon(1e-5));
  CHECK(gaussian_kernel(1.0, 5)[12] == doctest::Approx(0.1621).epsilon(1e-3));
  double s = 0;
  for (double v : k) s += v;
  CHECK(std::abs(s - 1) < 1e-12);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) CHECK(k[i * 7 + j] == k[(6 - i) * 7 + (6 - j)]);
  CHECK_THROWS_AS(gaussian_kernel(1.0, 6), DomainError);
  CHECK_THROWS_AS(gaussian_kernel(0.0, 7), DomainError);
}

TEST_CASE("operator application") {
  Rng rng(1);
  const Tensor x = rng.uniform_tensor({1, 1, 16, 16}, 0, 1);
  CHECK(DegradationOperator::identity().apply(x).vector() == x.vector());
  CHECK(DegradationOperator::mask(Tensor::ones({16, 16})).apply(x).vector() == x.vector());

  const Tensor c = Tensor::full({1, 1, 16, 16}, 0.37);
  for (std::size_t f : {2u, 4u}) {
    const Tensor y = DegradationOperator::downsample(f).apply(c);
    CHECK(y.shape() == Shape{1, 1, 16 / f, 16 / f});
    for (double v : y.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-13));
  }
  std::vector<double> delta(25, 0.0);
  delta[12] = 1;
  CHECK(max_abs(DegradationOperator::blur(delta, 5).apply(x) - x) < 1e-12);
  CHECK_THROWS_AS(DegradationOperator::downsample(2).apply(Tensor::zeros({1, 1, 15, 16})), ShapeError);
  CHECK_THROWS_AS(DegradationOperator::mask(Tensor::ones({8, 8})).apply(x), ShapeError);
  CHECK_THROWS_AS(DegradationOperator::downsample(3), DomainError);
}

TEST_CASE("linearity and adjoints") {
  Rng rng(2);
  for (const auto& op : operator_zoo()) {
    CAPTURE(to_string(op.kind()));
    const Tensor x1 = rng.uniform_tensor({2, 1, 16, 16}, -1, 1), x2 = rng.uniform_tensor({2, 1, 16, 16}, -1, 1);
    const double a = 0.7, b = -1.3;
    CHECK(max_abs(op.apply(a * x1 + b * x2) - a * op.apply(x1) - b * op.apply(x2)) < 1e-10);

    const Tensor y = rng.uniform_tensor(op.output_shape(x1.shape()), -1, 1);
    CHECK(std::abs(inner_product(op.apply(x1), y) - inner_product(x1, op.adjoint(y))) < 1e-10);
    CHECK(op.input_shape(op.output_shape(x1.shape())) == x1.shape());
  }
}

TEST_CASE("degrade") {
  const auto op = DegradationOperator::gaussian_blur(1.0, 7);
  Rng rng(3);
  const Tensor x = rng.uniform_tensor({1, 1, 32, 32}, 0, 1);
  CHECK(degrade(op, x, 0.0, 5).vector() == op.apply(x).vector());
  CHECK(degrade(op, x, 0.1, 5).vector() == degrade(op, x, 0.1, 5).vector());
  CHECK(degrade(op, x, 0.1, 5).vector() != degrade(op, x, 0.1, 6).vector());
  CHECK(sigma_from_8bit(7.65) == doctest::Approx(0.03));

  const double sigma = 0.03;
  const Tensor big = Tensor::full({1, 1, 1000, 1000}, 0.5);
  const Tensor y = degrade(DegradationOperator::identity(), big, sigma, 7);
  double ss = 0, m = 0;
  for (double v : y.values()) m += v - 0.5;
  m /= double(y.size());
  for (double v : y.values()) ss += (v - 0.5 - m) * (v - 0.5 - m);
  CHECK(std::abs(std::sqrt(ss / double(y.size() - 1)) / sigma - 1) < 0.01);
  CHECK_THROWS_AS(degrade(op, x, -1.0, 1), DomainError);
}

TEST_CASE("negative log-likelihood") {
  Rng rng(4);
  const Tensor x = rng.uniform_tensor({1, 1, 8, 8}, 0, 1);
  const auto blur = DegradationOperator::gaussian_blur(1.0, 5);
  CHECK(neg_log_likelihood({blur, blur.apply(x), 0.1}, x).item() == 0.0);

  Tensor y(x.shape(), x.vector());
  y.mutable_values()[5] += 0.25;
  CHECK(neg_log_likelihood({DegradationOperator::identity(), y, 1.0}, x).item() ==
        doctest::Approx(0.25 * 0.25 / 2).epsilon(1e-12));
  CHECK_THROWS_AS(neg_log_likelihood({blur, y, 0.0}, x), DomainError);

  for (const auto& op : {blur, DegradationOperator::downsample(2), DegradationOperator::mask(random_mask(8, 8, 0.5, 1))}) {
    const ObservationProblem p{op, degrade(op, x, 0.05, 9), 0.05};
    const auto r = testing::check_gradient(
        [&](const std::vector<Tensor>& in) { return neg_log_likelihood(p, in[0]); }, {rng.uniform_tensor(x.shape(), 0, 1)},
        10);
    CHECK(r.max_rel_err < 1e-6);
  }
}

TEST_CASE("mask likelihood ignores unobserved pixels") {
  Rng rng(5);
  const Tensor m = random_mask(16, 16, 0.5, 11);
  const auto op = DegradationOperator::mask(m);
  const Tensor x = rng.uniform_tensor({1, 1, 16, 16}, 0, 1);
  const ObservationProblem p{op, degrade(op, x, 0.02, 12), 0.02};
  Tensor x2(x.shape(), x.vector());
  for (std::size_t i = 0; i < x2.size(); ++i)
    if (m[i] == 0.0) x2.mutable_values()[i] = rng.uniform(-5, 5);
  CHECK(neg_log_likelihood(p, x).item() == neg_log_likelihood(p, x2).item());
}

TEST_CASE("initial guess") {
  const Tensor c = Tensor::full({1, 1, 16, 16}, 0.6);
  Rng rng(6);
  const Tensor y = rng.uniform_tensor({1, 1, 16, 16}, 0, 1);
  CHECK(init_guess({DegradationOperator::identity(), y, 0.01}).vector() == y.vector());

  const auto mop = DegradationOperator::mask(random_mask(16, 16, 0.5, 13));
  const Tensor filled = init_guess({mop, mop.apply(c), 0.01});
  for (double v : filled.values()) CHECK(v == doctest::Approx(0.6).epsilon(1e-14));

  const auto down = DegradationOperator::downsample(2);
  const Tensor up = init_guess({down, down.apply(y), 0.01});
  CHECK(up.shape() == Shape{1, 1, 16, 16});

  // Antialiased decimation of a bicubic upsampling keeps constants.
  const Tensor back = down.apply(bicubic_upsample(Tensor::full({1, 1, 8, 8}, 0.3), 2));
  for (double v : back.values()) CHECK(std::abs(v - 0.3) < 1e-10);
}

TEST_CASE("kernel file") {
  const auto path = std::filesystem::temp_directory_path() / "vble_kernel.json";
  std::ofstream(path) << "[[0,1,0],[1,4,1],[0,1,0]]";
  std::size_t size = 0;
  const auto k = load_kernel_json(path, size);
  CHECK(size == 3);
  CHECK(k[4] == doctest::Approx(0.5));
  std::ofstream(path) << "[[1,2],[3,4]]";
  CHECK_THROWS(load_kernel_json(path, size));
  std::filesystem::remove(path);
}
