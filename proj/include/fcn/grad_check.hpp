#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fcn/errors.hpp"
#include "fcn/tensor.hpp"

namespace fcn {

/// A scalar-valued function of some 64-bit buffers together with its
/// analytic gradient. `objective` reads the buffers in `inputs` as they are
/// at call time; `gradient` returns d objective / d input, one vector per
/// input buffer, at the current point.
struct DifferentiableOp {
  std::vector<std::span<double>> inputs;
  std::function<double()> objective;
  std::function<std::vector<Eigen::VectorXd>()> gradient;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the analytic gradient with central differences
/// (f(x+h) - f(x-h)) / 2h over every input coordinate. The error at one
/// coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult grad_check_detailed(const DifferentiableOp& op, double eps = 1e-5) {
  if (!(eps > 0.0)) throw InputError("grad_check: eps must be positive");
  const std::vector<Eigen::VectorXd> analytic = op.gradient();
  if (analytic.size() != op.inputs.size()) {
    throw ShapeError("grad_check: gradient has " + std::to_string(analytic.size()) +
                     " buffers for " + std::to_string(op.inputs.size()) + " inputs");
  }
  GradCheckResult result;
  for (std::size_t i = 0; i < op.inputs.size(); ++i) {
    std::span<double> x = op.inputs[i];
    if (static_cast<std::size_t>(analytic[i].size()) != x.size()) {
      throw ShapeError("grad_check: gradient of input " + std::to_string(i) + " has " +
                       std::to_string(analytic[i].size()) + " entries, expected " +
                       std::to_string(x.size()));
    }
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double saved = x[j];
      x[j] = saved + eps;
      const double up = op.objective();
      x[j] = saved - eps;
      const double down = op.objective();
      x[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double exact = analytic[i][static_cast<Index>(j)];
      if (!std::isfinite(numeric) || !std::isfinite(exact)) {
        throw NumericError("grad_check: non-finite gradient at input " + std::to_string(i) +
                           " coordinate " + std::to_string(j));
      }
      const double err = std::abs(exact - numeric) /
                         std::max({1.0, std::abs(exact), std::abs(numeric)});
      if (err > result.max_rel_err || (i == 0 && j == 0)) {
        result = GradCheckResult{err, i, j, exact, numeric};
      }
    }
  }
  return result;
}

inline double grad_check(const DifferentiableOp& op, double eps = 1e-5) {
  return grad_check_detailed(op, eps).max_rel_err;
}

template <typename Derived>
std::span<double> as_span(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename Derived>
Eigen::VectorXd flatten(const Eigen::DenseBase<Derived>& m) {
  Matrix<double> dense = m;
  return Eigen::Map<const Eigen::VectorXd>(dense.data(), dense.size());
}

/// Random probe used to reduce a tensor-valued output to the scalar
/// sum(probe * output).
inline Matrix<double> random_probe(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Matrix<double> r(rows, cols);
  for (Index i = 0; i < r.size(); ++i) r.data()[i] = dist(rng);
  return r;
}

}  // namespace fcn
