#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "domadapt/errors.hpp"
#include "domadapt/matrix.hpp"
#include "domadapt/numdiff.hpp"
#include "domadapt/rng.hpp"

using namespace domadapt;

TEST_CASE("matmul identity leaves a matrix unchanged") {
  SeededRng rng(7);
  Matrix a(3, 5);
  for (auto& v : a.data()) v = rng.next_gaussian();
  const Matrix out = matmul(Matrix::identity(3), a);
  CHECK(out == a);
}

TEST_CASE("matmul hand-checked 2x2 times 2x1") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0}, {1}});
  const Matrix out = matmul(a, b);
  CHECK(out.at(0, 0) == doctest::Approx(2.0));
  CHECK(out.at(1, 0) == doctest::Approx(4.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 2)), ShapeError);
}

TEST_CASE("matmul is associative on random 4x4 matrices") {
  SeededRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a(4, 4), b(4, 4), c(4, 4);
    for (auto& v : a.data()) v = rng.next_gaussian();
    for (auto& v : b.data()) v = rng.next_gaussian();
    for (auto& v : c.data()) v = rng.next_gaussian();
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      const double denom = std::max(1.0, std::abs(left.data()[i]));
      CHECK(std::abs(left.data()[i] - right.data()[i]) / denom < 1e-10);
    }
  }
}

TEST_CASE("matmul reports overflow instead of emitting inf") {
  Matrix a(1, 1);
  a.at(0, 0) = 1e308;
  Matrix b(1, 1);
  b.at(0, 0) = 1e10;
  CHECK_THROWS_AS(matmul(a, b), NumericError);
}

TEST_CASE("gaussian_sample with zero std is the constant mean") {
  SeededRng rng(1);
  const auto v = gaussian_sample(rng, 4, 3.0, 0.0);
  for (const double x : v) CHECK(x == 3.0);
}

TEST_CASE("gaussian_sample is reproducible for a fixed seed") {
  SeededRng a(42);
  SeededRng b(42);
  const auto va = gaussian_sample(a, 100, 0.0, 1.0);
  const auto vb = gaussian_sample(b, 100, 0.0, 1.0);
  CHECK(va == vb);
}

TEST_CASE("gaussian_sample matches its moments at n = 1e5") {
  SeededRng rng(3);
  const auto v = gaussian_sample(rng, 100000, 0.0, 1.0);
  double mean = 0.0;
  for (const double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (const double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 0.02);
}

TEST_CASE("gaussian_sample rejects negative std") {
  SeededRng rng(1);
  CHECK_THROWS_AS(gaussian_sample(rng, 4, 0.0, -1.0), ParameterError);
}

TEST_CASE("rng forks are independent and deterministic") {
  SeededRng root(99);
  SeededRng a = root.fork(1);
  SeededRng b = root.fork(2);
  SeededRng a2 = root.fork(1);
  CHECK(a.next_u64() != b.next_u64());
  SeededRng a3 = root.fork(1);
  CHECK(a2.next_u64() == a3.next_u64());
}

TEST_CASE("finite_diff_grad recovers the gradient of |x|^2") {
  const auto f = [](const std::vector<double>& x) {
    double s = 0.0;
    for (const double v : x) s += v * v;
    return s;
  };
  const auto g = finite_diff_grad(f, {1.0, 2.0}, 1e-5);
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("finite_diff_grad of a constant is zero") {
  const auto f = [](const std::vector<double>&) { return 5.0; };
  for (const double g : finite_diff_grad(f, {1.0, -2.0, 0.5}, 1e-5)) {
    CHECK(g == 0.0);
  }
}

TEST_CASE("finite_diff_grad of a sum is all ones") {
  const auto f = [](const std::vector<double>& x) {
    double s = 0.0;
    for (const double v : x) s += v;
    return s;
  };
  for (const double g : finite_diff_grad(f, {0.3, -1.0, 2.0}, 1e-5)) {
    CHECK(g == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("finite_diff_grad matches analytic gradients of random cubics") {
  SeededRng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    // f(x) = sum_i a_i x^3 + b_i x^2 + c_i x
    std::vector<double> a(4), b(4), c(4), x(4);
    for (std::size_t i = 0; i < 4; ++i) {
      a[i] = rng.next_gaussian();
      b[i] = rng.next_gaussian();
      c[i] = rng.next_gaussian();
      x[i] = rng.next_gaussian();
    }
    const auto f = [&](const std::vector<double>& p) {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        s += a[i] * p[i] * p[i] * p[i] + b[i] * p[i] * p[i] + c[i] * p[i];
      }
      return s;
    };
    const auto g = finite_diff_grad(f, x, 1e-5);
    for (std::size_t i = 0; i < 4; ++i) {
      const double analytic = 3.0 * a[i] * x[i] * x[i] + 2.0 * b[i] * x[i] +
                              c[i];
      const double denom = std::max(1.0, std::abs(analytic));
      CHECK(std::abs(g[i] - analytic) / denom < 1e-6);
    }
  }
}

TEST_CASE("finite_diff_grad validates inputs") {
  const auto f = [](const std::vector<double>& x) { return x[0]; };
  CHECK_THROWS_AS(finite_diff_grad(f, {1.0}, 0.0), ParameterError);
  const auto bad = [](const std::vector<double>& x) {
    return std::log(x[0]);  // non-finite at the probe x[0] - h < 0
  };
  CHECK_THROWS_AS(finite_diff_grad(bad, {1e-9}, 1e-5), NumericError);
}

TEST_CASE("take_rows and vstack shape checks") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK_THROWS_AS(take_rows(a, {5}), ShapeError);
  CHECK_THROWS_AS(vstack(a, Matrix(1, 3)), ShapeError);
  const Matrix s = vstack(a, a);
  CHECK(s.rows() == 4);
  CHECK(s.at(3, 1) == 4.0);
}
