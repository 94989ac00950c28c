#include <doctest.h>

#include <cmath>
#include <set>

#include "medtrace/error.hpp"
#include "medtrace/numerics.hpp"
#include "medtrace/random.hpp"

using namespace medtrace;

TEST_CASE("matmul against a hand product") {
  const Matrix a(2, 3, {1, 2, 3, 4, 5, 6});
  const Matrix b(3, 2, {7, 8, 9, 10, 11, 12});
  const Matrix c = matmul(a, b);
  CHECK(c == Matrix(2, 2, {58, 64, 139, 154}));
  CHECK(matmul_nt(a, transpose(b)) == c);
  CHECK(matmul_tn(transpose(a), b) == c);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(Matrix(2, 2, {1, 2, 3}), ShapeError);
}

TEST_CASE("partial row recomputation is bit identical") {
  Rng rng(5);
  Matrix a(7, 13), b(13, 9);
  for (double& v : a.values()) v = rng.normal();
  for (double& v : b.values()) v = rng.normal();
  const Matrix full = matmul(a, b);
  Matrix part = full;
  for (std::size_t r = 4; r < 7; ++r)
    for (double& v : part.row(r)) v = 123.0;
  kernels::matmul_rows(a, b, part, 4);
  CHECK(part == full);
}

TEST_CASE("softmax and log_softmax") {
  const Vector z = {1000.0, 1001.0, 999.0};
  const Vector p = softmax(z);
  const double e0 = std::exp(-1.0), e2 = std::exp(-2.0);
  CHECK(p[1] == doctest::Approx(1.0 / (1.0 + e0 + e2)).epsilon(1e-14));
  CHECK(sum(p) == doctest::Approx(1.0).epsilon(1e-15));
  const Vector lp = log_softmax(z);
  for (std::size_t i = 0; i < 3; ++i) CHECK(lp[i] == doctest::Approx(std::log(p[i])).epsilon(1e-13));
  CHECK(all_finite(p));
}

TEST_CASE("activations") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(2.0) == doctest::Approx(0.8807970779778823));
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(1.0) == doctest::Approx(0.8411919906082768).epsilon(1e-12));
  CHECK(gelu(-3.0) == doctest::Approx(-0.0036373920817729943).epsilon(1e-9));
  const double h = 1e-6;
  for (double x : {-2.0, -0.3, 0.0, 0.7, 2.5})
    CHECK(gelu_derivative(x) == doctest::Approx((gelu(x + h) - gelu(x - h)) / (2 * h)).epsilon(1e-8));
}

TEST_CASE("small vector helpers") {
  const Vector v = {3, -4, 1};
  CHECK(dot(v, v) == 26);
  CHECK(norm(Vector{3, 4}) == 5);
  CHECK(argmax(v) == 0);
  CHECK_FALSE(all_finite(Vector{1, NAN}));
  Vector y = {1, 1, 1};
  kernels::axpy(2.0, v, y);
  CHECK(y == Vector{7, -7, 3});
}

TEST_CASE("rng streams are reproducible and bounded") {
  Rng a(42, 3), b(42, 3), c(42, 4);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.uniform_int(-3, 5);
    CHECK(x == b.uniform_int(-3, 5));
    CHECK(x >= -3);
    CHECK(x <= 5);
    differs |= x != c.uniform_int(-3, 5);
  }
  CHECK(differs);
  Rng r(1);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) seen.insert(r.uniform_int(0, 9));
  CHECK(seen.size() == 10);
  double mean = 0;
  for (int i = 0; i < 20000; ++i) mean += r.normal();
  CHECK(std::abs(mean / 20000) < 0.03);
}
