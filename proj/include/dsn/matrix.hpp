#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace dsn {

/// Dense row-major matrix of doubles. Rows are frames, columns are features.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// Rows [begin, begin + count).
  Matrix slice_rows(std::size_t begin, std::size_t count) const;
  /// Columns [begin, begin + count).
  Matrix slice_cols(std::size_t begin, std::size_t count) const;
  Matrix transposed() const;

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Stack `top` above `bottom`; column counts must agree.
Matrix vstack(const Matrix& top, const Matrix& bottom);
/// Place `left` beside `right`; row counts must agree.
Matrix hstack(const Matrix& left, const Matrix& right);

/// Elementwise a += scale * b.
void add_scaled(Matrix& a, const Matrix& b, double scale);

/// Sum of squared entries.
double squared_frobenius(const Matrix& m) noexcept;

}  // namespace dsn
