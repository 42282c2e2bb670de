#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace vebhmm {

// Dense row-major matrix of doubles. Small K x K and T x K blocks only,
// so no expression templates.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix& operator+=(Matrix& lhs, const Matrix& rhs) {
  assert(lhs.rows() == rhs.rows() && lhs.cols() == rhs.cols());
  auto l = lhs.values();
  auto r = rhs.values();
  for (std::size_t i = 0; i < l.size(); ++i) l[i] += r[i];
  return lhs;
}

inline Matrix operator-(const Matrix& lhs, const Matrix& rhs) {
  assert(lhs.rows() == rhs.rows() && lhs.cols() == rhs.cols());
  Matrix out = lhs;
  auto o = out.values();
  auto r = rhs.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= r[i];
  return out;
}

}  // namespace vebhmm
