#pragma once

// Dense row-major tensor of doubles. Everything in the library is rank <= 2
// in practice: scalars have shape {}, vectors {n}, batches {rows, cols}.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotd {

/// Shape or arity mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition (non-scalar loss, bad action, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf during training, or an optimizer state that cannot continue.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor: shape " + shape_str(shape_) + " does not hold " +
                           std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  /// One row, taken from a span.
  static Tensor row(std::span<const double> v) {
    return Tensor(Shape{1, v.size()}, std::vector<double>(v.begin(), v.end()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1 && shape_.size() <= 2 &&
                                  std::all_of(shape_.begin(), shape_.end(), [](auto d) { return d == 1; }); }

  /// Rows/cols with vectors treated as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    return shape_.back();
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap view(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

/// C = A · B for A [m,k], B [k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c(Shape{a.rows(), b.cols()});
  view(c).noalias() = view(a) * view(b);
  return c;
}

/// A^T · B
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor c(Shape{a.cols(), b.cols()});
  view(c).noalias() = view(a).transpose() * view(b);
  return c;
}

/// A · B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tensor c(Shape{a.rows(), b.rows()});
  view(c).noalias() = view(a) * view(b).transpose();
  return c;
}

}  // namespace kernels

/// Concatenate along columns; both operands must have the same row count.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out(Shape{r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().begin() + i * ca, ca, out.data().begin() + i * (ca + cb));
    std::copy_n(b.data().begin() + i * cb, cb, out.data().begin() + i * (ca + cb) + ca);
  }
  return out;
}

/// Columns [begin, end).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols())
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of " + shape_str(a.shape()));
  const std::size_t r = a.rows(), w = end - begin;
  Tensor out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.data().begin() + i * a.cols() + begin, w, out.data().begin() + i * w);
  return out;
}

/// Stack equally sized rows into a [n, d] batch.
inline Tensor stack_rows(std::span<const std::vector<double>> rows) {
  if (rows.empty()) return Tensor(Shape{0, 0});
  const std::size_t d = rows.front().size();
  Tensor out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw DimensionError("stack_rows: ragged input");
    std::copy(rows[i].begin(), rows[i].end(), out.data().begin() + i * d);
  }
  return out;
}

}  // namespace cotd
