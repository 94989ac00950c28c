#include "medtrace/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "medtrace/error.hpp"

namespace medtrace {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    std::ostringstream msg;
    msg << "matrix data has " << data_.size() << " entries, expected " << rows << "x" << cols;
    throw ShapeError(msg.str());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) m.set_row(r, rows[r]);
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  auto span = row(r);
  return Vector(span.begin(), span.end());
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
  if (values.size() != cols_) {
    throw ShapeError("row of length " + std::to_string(values.size()) + " does not fit " +
                     shape_string());
  }
  std::copy(values.begin(), values.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

namespace kernels {

void matmul_rows(const Matrix& a, const Matrix& b, Matrix& out, std::size_t row_begin,
                 bool accumulate) {
  const std::size_t k_dim = a.cols();
  const std::size_t m = b.cols();
  const double* bp = b.data();
  for (std::size_t i = row_begin; i < a.rows(); ++i) {
    double* __restrict orow = out.data() + i * m;
    if (!accumulate) std::fill(orow, orow + m, 0.0);
    const double* arow = a.data() + i * k_dim;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double aik = arow[k];
      const double* __restrict brow = bp + k * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
}

void add_matmul_tn(const Matrix& a, const Matrix& b, Matrix& out, std::size_t n_rows) {
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t t = 0; t < n_rows; ++t) {
    const double* arow = a.data() + t * n;
    const double* __restrict brow = b.data() + t * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double ati = arow[i];
      if (ati == 0.0) continue;
      double* __restrict orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += ati * brow[j];
    }
  }
}

void add_matmul_nt(const Matrix& a, const Matrix& b, Matrix& out, std::size_t n_rows) {
  const Matrix bt = transpose(b);
  const std::size_t k_dim = a.cols();
  const std::size_t m = bt.cols();
  for (std::size_t i = 0; i < n_rows; ++i) {
    double* __restrict orow = out.data() + i * m;
    const double* arow = a.data() + i * k_dim;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double aik = arow[k];
      const double* __restrict brow = bt.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace kernels

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  kernels::matmul_rows(a, b, out, 0);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt shape mismatch: " + a.shape_string() + " x " + b.shape_string() +
                     "^T");
  }
  Matrix out(a.rows(), b.rows());
  kernels::add_matmul_nt(a, b, out, a.rows());
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn shape mismatch: " + a.shape_string() + "^T x " +
                     b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  kernels::add_matmul_tn(a, b, out, a.rows());
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Vector softmax(std::span<const double> v) {
  Vector out(v.size());
  if (v.empty()) return out;
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

Vector log_softmax(std::span<const double> v) {
  Vector out(v.size());
  if (v.empty()) return out;
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  const double lse = mx + std::log(total);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

double sigmoid(double x) {
  // Branch keeps exp() argument non-positive so large |x| never overflows.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  const double inner = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_derivative(double x) {
  const double inner = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Vector sigmoid(std::span<const double> v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = sigmoid(v[i]);
  return out;
}

Vector gelu(std::span<const double> v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gelu(v[i]);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot of lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double sum(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace medtrace
