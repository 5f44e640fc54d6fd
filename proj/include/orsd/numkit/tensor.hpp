#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "orsd/error.hpp"

namespace orsd::numkit {

// Dense row-major matrix of doubles.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw NumericError("tensor data length " + std::to_string(data_.size()) +
                         " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Tensor2D(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw NumericError("ragged tensor initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Tensor2D row_vector(std::span<const double> v) {
    return Tensor2D(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }
  static Tensor2D identity(std::size_t n) {
    Tensor2D t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }
  static Tensor2D scalar(double v) { return Tensor2D(1, 1, v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor2D& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  double item() const {
    if (data_.size() != 1) throw NumericError("item() on non-scalar tensor");
    return data_[0];
  }

  Tensor2D& operator+=(const Tensor2D& o) {
    if (!same_shape(o)) throw NumericError("shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajor> as_eigen(Tensor2D& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline Eigen::Map<const RowMajor> as_eigen(const Tensor2D& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline Tensor2D transpose(const Tensor2D& a) {
  Tensor2D out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// Plain product without autodiff; the kernel behind the recorded matmul.
inline Tensor2D matmul_values(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw NumericError("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
  }
  Tensor2D out(a.rows(), b.cols());
  if (a.rows() == 0 || b.cols() == 0) return out;
  as_eigen(out).noalias() = as_eigen(a) * as_eigen(b);
  return out;
}

inline Tensor2D uniform_tensor(std::size_t rows, std::size_t cols, double lo, double hi,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor2D t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor2D normal_tensor(std::size_t rows, std::size_t cols, double stddev,
                              std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor2D t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace orsd::numkit
