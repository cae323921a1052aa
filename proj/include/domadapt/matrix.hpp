#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace domadapt {

// Dense row-major matrix of doubles. Values are immutable in spirit: every
// operation returns a fresh matrix and validates that no NaN/Inf escapes.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool all_finite() const;
  // Throws NumericError mentioning the context if any entry is non-finite.
  void require_finite(const char* context) const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Standard product with fixed left-to-right accumulation over the inner
// dimension, so results are bit-stable across runs.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double factor);
Matrix hadamard(const Matrix& a, const Matrix& b);

// Stacks b on top of a; column counts must match.
Matrix vstack(const Matrix& a, const Matrix& b);
Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& indices);

std::vector<double> column_means(const Matrix& m);
std::vector<double> column_sums(const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

}  // namespace domadapt
