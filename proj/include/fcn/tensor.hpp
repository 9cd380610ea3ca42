#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fcn/errors.hpp"

namespace fcn {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
// Non-deduced: Scalar comes from the tensor arguments.
template <typename Scalar>
using MatRef = std::type_identity_t<Eigen::Ref<Matrix<Scalar>>>;
template <typename Scalar>
using ConstMatRef = std::type_identity_t<Eigen::Ref<const Matrix<Scalar>>>;

/// Character ids of a padded batch, one row per sequence.
using IdMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

template <typename Derived>
std::string shape_string(const Eigen::DenseBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Dense (batch, time, channels) activations, row-major with channels
/// contiguous. Stored as a (batch*time) x channels matrix so that a single
/// sequence is a contiguous block of rows.
template <typename Scalar>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(Index batch, Index time, Index channels)
      : batch_(batch), time_(time), data_(Matrix<Scalar>::Zero(batch * time, channels)) {}
  Tensor3(Index batch, Index time, Matrix<Scalar> data)
      : batch_(batch), time_(time), data_(std::move(data)) {
    if (data_.rows() != batch * time) {
      throw ShapeError("Tensor3: " + shape_string(data_) + " does not hold " +
                       std::to_string(batch) + " x " + std::to_string(time) + " rows");
    }
  }

  Index batch() const { return batch_; }
  Index time() const { return time_; }
  Index channels() const { return data_.cols(); }
  Index size() const { return data_.size(); }

  Matrix<Scalar>& matrix() { return data_; }
  const Matrix<Scalar>& matrix() const { return data_; }

  /// time x channels view of one sequence.
  auto slice(Index b) { return data_.middleRows(b * time_, time_); }
  auto slice(Index b) const { return data_.middleRows(b * time_, time_); }

  Scalar& operator()(Index b, Index t, Index c) { return data_(b * time_ + t, c); }
  Scalar operator()(Index b, Index t, Index c) const { return data_(b * time_ + t, c); }

  bool same_shape(const Tensor3& other) const {
    return batch_ == other.batch_ && time_ == other.time_ && channels() == other.channels();
  }
  std::string shape() const {
    std::ostringstream os;
    os << '(' << batch_ << ", " << time_ << ", " << channels() << ')';
    return os.str();
  }
  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor3<Other> cast() const {
    return Tensor3<Other>(batch_, time_, data_.template cast<Other>().eval());
  }

 private:
  Index batch_ = 0;
  Index time_ = 0;
  Matrix<Scalar> data_;
};

/// Valid length of each batch row; positions at or beyond a row's length
/// are padding.
struct LengthMask {
  std::vector<Index> lengths;
  Index max_time = 0;

  static LengthMask full(Index batch, Index time) {
    return LengthMask{std::vector<Index>(static_cast<std::size_t>(batch), time), time};
  }
  Index batch() const { return static_cast<Index>(lengths.size()); }
  Index length(Index b) const { return lengths[static_cast<std::size_t>(b)]; }

  void validate(Index batch, Index time) const {
    if (this->batch() != batch || max_time != time) {
      throw ShapeError("length mask for " + std::to_string(this->batch()) + " rows of " +
                       std::to_string(max_time) + " does not match input " +
                       shape_string(batch, time));
    }
    for (Index b = 0; b < batch; ++b) {
      if (length(b) < 1 || length(b) > time) {
        throw InputError("sequence " + std::to_string(b) + " has length " +
                         std::to_string(length(b)) + ", expected 1.." + std::to_string(time));
      }
    }
  }
};

template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                         const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_string(a) + " x " +
                     shape_string(b));
  }
  return a * b;
}

/// Accumulates the gradients of c = a * b given dc.
template <typename DerivedA, typename DerivedB, typename DerivedC, typename DerivedDA,
          typename DerivedDB>
void matmul_backward(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                     const Eigen::MatrixBase<DerivedC>& dc, const Eigen::MatrixBase<DerivedDA>& da_,
                     const Eigen::MatrixBase<DerivedDB>& db_) {
  // Eigen's idiom for writable block arguments.
  auto& da = const_cast<Eigen::MatrixBase<DerivedDA>&>(da_);
  auto& db = const_cast<Eigen::MatrixBase<DerivedDB>&>(db_);
  da.noalias() += dc * b.transpose();
  db.noalias() += a.transpose() * dc;
}

/// Axis along which softmax normalizes. `row`: every row sums to one.
enum class Axis { row, col };

template <typename Derived>
Matrix<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& x,
                                         Axis axis = Axis::row) {
  Matrix<typename Derived::Scalar> y = x;
  if (axis == Axis::row) {
    for (Index i = 0; i < y.rows(); ++i) {
      y.row(i).array() = (y.row(i).array() - y.row(i).maxCoeff()).exp();
      y.row(i) /= y.row(i).sum();
    }
  } else {
    for (Index j = 0; j < y.cols(); ++j) {
      y.col(j).array() = (y.col(j).array() - y.col(j).maxCoeff()).exp();
      y.col(j) /= y.col(j).sum();
    }
  }
  return y;
}

/// dx = y * (dy - <dy, y>) along the normalized axis.
template <typename DerivedY, typename DerivedDY>
Matrix<typename DerivedY::Scalar> softmax_backward(const Eigen::MatrixBase<DerivedY>& y,
                                                   const Eigen::MatrixBase<DerivedDY>& dy,
                                                   Axis axis = Axis::row) {
  Matrix<typename DerivedY::Scalar> dx(y.rows(), y.cols());
  if (axis == Axis::row) {
    for (Index i = 0; i < y.rows(); ++i) {
      dx.row(i) = y.row(i).array() * (dy.row(i).array() - y.row(i).dot(dy.row(i)));
    }
  } else {
    for (Index j = 0; j < y.cols(); ++j) {
      dx.col(j) = y.col(j).array() * (dy.col(j).array() - y.col(j).dot(dy.col(j)));
    }
  }
  return dx;
}

}  // namespace fcn
