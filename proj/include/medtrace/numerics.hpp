#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace medtrace {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  // Throws ShapeError unless data.size() == rows * cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<Vector>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector row_vector(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> values);

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);
  std::string shape_string() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a (n x k) times b (k x m). The inner accumulation for every output entry
// runs over k in increasing order, so results are reproducible bit for bit.
Matrix matmul(const Matrix& a, const Matrix& b);
// a (n x k) times transpose(b) where b is (m x k).
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// transpose(a) times b, with a (k x n) and b (k x m).
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Vector softmax(std::span<const double> v);
// log of softmax, computed without forming the probabilities.
Vector log_softmax(std::span<const double> v);
Vector sigmoid(std::span<const double> v);
Vector gelu(std::span<const double> v);

double sigmoid(double x);
// tanh approximation.
double gelu(double x);
double gelu_derivative(double x);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
double sum(std::span<const double> v);
std::size_t argmax(std::span<const double> v);
bool all_finite(std::span<const double> v);

namespace kernels {

// out[r, :] (+)= a[r, :] * b for rows r in [row_begin, a.rows()).
// Each output row is produced by the same instruction sequence regardless of
// the row range requested, so partial recomputation matches a full pass.
void matmul_rows(const Matrix& a, const Matrix& b, Matrix& out, std::size_t row_begin,
                 bool accumulate = false);
// out += transpose(a) * b, restricted to rows [0, n_rows) of a and b.
void add_matmul_tn(const Matrix& a, const Matrix& b, Matrix& out, std::size_t n_rows);
// out[r, :] += a[r, :] * transpose(b) for rows r in [0, n_rows).
void add_matmul_nt(const Matrix& a, const Matrix& b_transposed_source, Matrix& out,
                   std::size_t n_rows);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

}  // namespace kernels

}  // namespace medtrace
