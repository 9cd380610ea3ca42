#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fcn/errors.hpp"
#include "fcn/tensor.hpp"

namespace fcn {

// ---------------------------------------------------------------------------
// Embedding

/// ids (batch x time) -> rows of `table` (vocab x embed_dim). The pad row is
/// expected to be zero; the lookup itself does not special-case it.
template <typename Scalar>
Tensor3<Scalar> embed(const IdMatrix& ids, const ConstMatRef<Scalar>& table) {
  Tensor3<Scalar> out(ids.rows(), ids.cols(), table.cols());
  for (Index b = 0; b < ids.rows(); ++b) {
    for (Index t = 0; t < ids.cols(); ++t) {
      const std::int32_t id = ids(b, t);
      if (id < 0 || id >= table.rows()) {
        throw VocabError("embed: id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(table.rows()),
                         id);
      }
      out.matrix().row(b * ids.cols() + t) = table.row(id);
    }
  }
  return out;
}

/// Scatter-adds dy into dtable. The pad row never receives gradient.
template <typename Scalar>
void embed_backward(const IdMatrix& ids, std::int32_t pad_id, const Tensor3<Scalar>& dy,
                    MatRef<Scalar> dtable) {
  for (Index b = 0; b < ids.rows(); ++b) {
    for (Index t = 0; t < ids.cols(); ++t) {
      const std::int32_t id = ids(b, t);
      if (id == pad_id) continue;
      dtable.row(id) += dy.matrix().row(b * ids.cols() + t);
    }
  }
}

// ---------------------------------------------------------------------------
// Causal dilated convolution

/// Kernel rows are tap-major: rows [j*c_in, (j+1)*c_in) hold tap j, which
/// reads the input `j * dilation` steps in the past.
template <typename Scalar>
struct ConvParams {
  ConstMatRef<Scalar> kernel;  // (kernel_size * c_in) x c_out
  ConstMatRef<Scalar> bias;    // 1 x c_out
  Index kernel_size = 1;
  Index dilation = 1;
};

template <typename Scalar>
struct ConvGrads {
  MatRef<Scalar> kernel;
  MatRef<Scalar> bias;
};

namespace detail {
template <typename Scalar>
Index conv_input_channels(const ConvParams<Scalar>& p) {
  if (p.kernel_size < 1 || p.dilation < 1 || p.kernel.rows() % p.kernel_size != 0) {
    throw ShapeError("conv: kernel " + shape_string(p.kernel) + " is not " +
                     std::to_string(p.kernel_size) + " taps");
  }
  if (p.bias.rows() != 1 || p.bias.cols() != p.kernel.cols()) {
    throw ShapeError("conv: bias " + shape_string(p.bias) + " does not match kernel " +
                     shape_string(p.kernel));
  }
  return p.kernel.rows() / p.kernel_size;
}
}  // namespace detail

/// y[t] = bias + sum_j x[t - j*dilation] * W_j, with x zero before t = 0.
template <typename Scalar>
Tensor3<Scalar> causal_dilated_conv(const Tensor3<Scalar>& x, const ConvParams<Scalar>& p) {
  const Index c_in = detail::conv_input_channels(p);
  if (x.channels() != c_in) {
    throw ShapeError("causal_dilated_conv: input " + x.shape() + " has " +
                     std::to_string(x.channels()) + " channels, kernel expects " +
                     std::to_string(c_in));
  }
  const Index time = x.time();
  Tensor3<Scalar> y(x.batch(), time, p.kernel.cols());
  y.matrix().rowwise() = p.bias.row(0);
  for (Index b = 0; b < x.batch(); ++b) {
    auto in = x.slice(b);
    auto out = y.slice(b);
    for (Index j = 0; j < p.kernel_size; ++j) {
      const Index shift = j * p.dilation;
      if (shift >= time) break;
      out.bottomRows(time - shift).noalias() +=
          in.topRows(time - shift) * p.kernel.middleRows(j * c_in, c_in);
    }
  }
  return y;
}

/// Accumulates kernel/bias gradients into `g` and returns dL/dx.
template <typename Scalar>
Tensor3<Scalar> causal_dilated_conv_backward(const Tensor3<Scalar>& x,
                                             const ConvParams<Scalar>& p,
                                             const Tensor3<Scalar>& dy, ConvGrads<Scalar> g) {
  const Index c_in = detail::conv_input_channels(p);
  const Index time = x.time();
  Tensor3<Scalar> dx(x.batch(), time, c_in);
  g.bias.row(0) += dy.matrix().colwise().sum();
  for (Index b = 0; b < x.batch(); ++b) {
    auto in = x.slice(b);
    auto din = dx.slice(b);
    auto dout = dy.slice(b);
    for (Index j = 0; j < p.kernel_size; ++j) {
      const Index shift = j * p.dilation;
      if (shift >= time) break;
      auto tap = p.kernel.middleRows(j * c_in, c_in);
      din.topRows(time - shift).noalias() += dout.bottomRows(time - shift) * tap.transpose();
      g.kernel.middleRows(j * c_in, c_in).noalias() +=
          in.topRows(time - shift).transpose() * dout.bottomRows(time - shift);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Local response normalization + ReLU

/// Cross-channel LRN: a_c / (k + alpha/n * sum_{|c'-c| <= n/2} a_c'^2)^beta.
struct LrnParams {
  Index n = 5;
  double k = 2.0;
  double alpha = 1e-4;
  double beta = 0.75;

  void validate() const {
    if (n < 1 || n % 2 == 0) throw ConfigError("lrn: window size must be odd and positive");
    if (!(k > 0.0)) throw ConfigError("lrn: k must be positive");
    if (!(beta > 0.0)) throw ConfigError("lrn: beta must be positive");
  }
};

namespace detail {
/// Per-position denominators base = k + alpha/n * windowed sum of squares.
template <typename Scalar>
Matrix<Scalar> lrn_base(const Matrix<Scalar>& a, const LrnParams& p) {
  const Index channels = a.cols();
  const Index half = p.n / 2;
  const Scalar scale = static_cast<Scalar>(p.alpha / static_cast<double>(p.n));
  Matrix<Scalar> base(a.rows(), channels);
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index c = 0; c < channels; ++c) {
      const Index lo = std::max<Index>(0, c - half);
      const Index hi = std::min<Index>(channels - 1, c + half);
      base(r, c) = static_cast<Scalar>(p.k) +
                   scale * a.row(r).segment(lo, hi - lo + 1).squaredNorm();
    }
  }
  return base;
}
}  // namespace detail

template <typename Scalar>
Tensor3<Scalar> lrn_relu(const Tensor3<Scalar>& x, const LrnParams& p) {
  const Matrix<Scalar> base = detail::lrn_base(x.matrix(), p);
  const Scalar beta = static_cast<Scalar>(p.beta);
  Matrix<Scalar> y =
      (x.matrix().array() * base.array().pow(-beta)).cwiseMax(Scalar(0)).matrix();
  return Tensor3<Scalar>(x.batch(), x.time(), std::move(y));
}

template <typename Scalar>
Tensor3<Scalar> lrn_relu_backward(const Tensor3<Scalar>& x, const LrnParams& p,
                                  const Tensor3<Scalar>& dy) {
  const Matrix<Scalar>& a = x.matrix();
  const Matrix<Scalar> base = detail::lrn_base(a, p);
  const Scalar beta = static_cast<Scalar>(p.beta);
  const Scalar scale = static_cast<Scalar>(p.alpha / static_cast<double>(p.n));
  const Index channels = a.cols();
  const Index half = p.n / 2;
  // ReLU passes gradient where the normalized value is positive, i.e. a > 0.
  const Matrix<Scalar> g = (a.array() > Scalar(0)).select(dy.matrix().array(), Scalar(0)).matrix();
  const Matrix<Scalar> direct = (g.array() * base.array().pow(-beta)).matrix();
  // coupling_c = g_c * a_c * (-beta) * base_c^(-beta-1) * scale * 2
  const Matrix<Scalar> coupling =
      (g.array() * a.array() * base.array().pow(-beta - Scalar(1)) *
       (Scalar(-2) * beta * scale))
          .matrix();
  Matrix<Scalar> dx = direct;
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index i = 0; i < channels; ++i) {
      const Index lo = std::max<Index>(0, i - half);
      const Index hi = std::min<Index>(channels - 1, i + half);
      dx(r, i) += a(r, i) * coupling.row(r).segment(lo, hi - lo + 1).sum();
    }
  }
  return Tensor3<Scalar>(x.batch(), x.time(), std::move(dx));
}

// ---------------------------------------------------------------------------
// Pointwise (size-1) convolution

template <typename Scalar>
Tensor3<Scalar> pointwise_conv(const Tensor3<Scalar>& x, const ConstMatRef<Scalar>& weight,
                               const ConstMatRef<Scalar>& bias) {
  if (weight.rows() != x.channels() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ShapeError("pointwise_conv: input " + x.shape() + ", weight " + shape_string(weight) +
                     ", bias " + shape_string(bias));
  }
  Matrix<Scalar> y = x.matrix() * weight;
  y.rowwise() += bias.row(0);
  return Tensor3<Scalar>(x.batch(), x.time(), std::move(y));
}

template <typename Scalar>
Tensor3<Scalar> pointwise_conv_backward(const Tensor3<Scalar>& x,
                                        const ConstMatRef<Scalar>& weight,
                                        const Tensor3<Scalar>& dy, MatRef<Scalar> dweight,
                                        MatRef<Scalar> dbias) {
  dweight.noalias() += x.matrix().transpose() * dy.matrix();
  dbias.row(0) += dy.matrix().colwise().sum();
  Matrix<Scalar> dx = dy.matrix() * weight.transpose();
  return Tensor3<Scalar>(x.batch(), x.time(), std::move(dx));
}

// ---------------------------------------------------------------------------
// Residual dilated block

template <typename Scalar>
struct ResidualBlockParams {
  ConvParams<Scalar> dilated;
  ConstMatRef<Scalar> proj;       // c x c
  ConstMatRef<Scalar> proj_bias;  // 1 x c
};

template <typename Scalar>
struct ResidualBlockGrads {
  ConvGrads<Scalar> dilated;
  MatRef<Scalar> proj;
  MatRef<Scalar> proj_bias;
};

template <typename Scalar>
struct ResidualBlockOutput {
  Tensor3<Scalar> residual;
  Tensor3<Scalar> skip;
  Tensor3<Scalar> pre_activation;  // dilated conv output, before LRN+ReLU
};

/// d = lrn_relu(conv(x)); skip = d; residual = d + proj(x).
template <typename Scalar>
ResidualBlockOutput<Scalar> residual_dilated_block(const Tensor3<Scalar>& x,
                                                   const ResidualBlockParams<Scalar>& p,
                                                   const LrnParams& lrn) {
  ResidualBlockOutput<Scalar> out;
  out.pre_activation = causal_dilated_conv(x, p.dilated);
  out.skip = lrn_relu(out.pre_activation, lrn);
  out.residual = pointwise_conv(x, p.proj, p.proj_bias);
  out.residual.matrix() += out.skip.matrix();
  return out;
}

template <typename Scalar>
Tensor3<Scalar> residual_dilated_block_backward(const Tensor3<Scalar>& x,
                                                const ResidualBlockOutput<Scalar>& fwd,
                                                const ResidualBlockParams<Scalar>& p,
                                                const LrnParams& lrn,
                                                const Tensor3<Scalar>& d_residual,
                                                const Tensor3<Scalar>& d_skip,
                                                ResidualBlockGrads<Scalar> g) {
  Tensor3<Scalar> dd = d_residual;
  dd.matrix() += d_skip.matrix();
  const Tensor3<Scalar> dpre = lrn_relu_backward(fwd.pre_activation, lrn, dd);
  Tensor3<Scalar> dx = causal_dilated_conv_backward(x, p.dilated, dpre, g.dilated);
  dx.matrix() += pointwise_conv_backward(x, p.proj, d_residual, g.proj, g.proj_bias).matrix();
  return dx;
}

// ---------------------------------------------------------------------------
// Skip aggregation

/// ReLU of the elementwise sum.
template <typename Scalar>
Tensor3<Scalar> skip_aggregate(std::span<const Tensor3<Scalar>> skips) {
  if (skips.empty()) throw ShapeError("skip_aggregate: no inputs");
  Tensor3<Scalar> sum = skips.front();
  for (std::size_t i = 1; i < skips.size(); ++i) {
    if (!skips[i].same_shape(sum)) {
      throw ShapeError("skip_aggregate: input " + std::to_string(i) + " is " +
                       skips[i].shape() + ", expected " + sum.shape());
    }
    sum.matrix() += skips[i].matrix();
  }
  sum.matrix() = sum.matrix().cwiseMax(Scalar(0));
  return sum;
}

/// Gradient w.r.t. each summand (identical for all of them).
template <typename Scalar>
Tensor3<Scalar> skip_aggregate_backward(const Tensor3<Scalar>& out, const Tensor3<Scalar>& dy) {
  Matrix<Scalar> d = (out.matrix().array() > Scalar(0)).select(dy.matrix().array(), Scalar(0));
  return Tensor3<Scalar>(out.batch(), out.time(), std::move(d));
}

// ---------------------------------------------------------------------------
// Spatial dropout

/// Per (batch, channel) multiplier: 0 for dropped channels, 1/(1-p) for kept.
template <typename Scalar>
struct DropoutMask {
  Matrix<Scalar> scale;  // batch x channels; empty means identity
};

template <typename Scalar>
Tensor3<Scalar> spatial_dropout(const Tensor3<Scalar>& x, double p, bool training,
                                std::mt19937_64& rng, DropoutMask<Scalar>* mask_out = nullptr) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("spatial_dropout: probability " + std::to_string(p) + " not in [0, 1)");
  }
  if (mask_out) mask_out->scale.resize(0, 0);
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution drop(p);
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
  Matrix<Scalar> scale(x.batch(), x.channels());
  for (Index b = 0; b < x.batch(); ++b) {
    for (Index c = 0; c < x.channels(); ++c) scale(b, c) = drop(rng) ? Scalar(0) : keep_scale;
  }
  Tensor3<Scalar> y = x;
  for (Index b = 0; b < x.batch(); ++b) {
    y.slice(b).array().rowwise() *= scale.row(b).array();
  }
  if (mask_out) mask_out->scale = std::move(scale);
  return y;
}

template <typename Scalar>
Tensor3<Scalar> spatial_dropout_backward(const DropoutMask<Scalar>& mask,
                                         const Tensor3<Scalar>& dy) {
  if (mask.scale.size() == 0) return dy;
  Tensor3<Scalar> dx = dy;
  for (Index b = 0; b < dy.batch(); ++b) {
    dx.slice(b).array().rowwise() *= mask.scale.row(b).array();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Global masked max pooling over time

template <typename Scalar>
struct PoolResult {
  Matrix<Scalar> values;  // batch x channels
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax;
};

/// out[b][c] = max over t < length(b) of x[b][t][c]; ties resolve to the
/// earliest time step.
template <typename Scalar>
PoolResult<Scalar> global_masked_max_pool(const Tensor3<Scalar>& x, const LengthMask& mask) {
  mask.validate(x.batch(), x.time());
  PoolResult<Scalar> r;
  r.values.resize(x.batch(), x.channels());
  r.argmax.resize(x.batch(), x.channels());
  for (Index b = 0; b < x.batch(); ++b) {
    auto seq = x.slice(b);
    for (Index c = 0; c < x.channels(); ++c) {
      Index best = 0;
      for (Index t = 1; t < mask.length(b); ++t) {
        if (seq(t, c) > seq(best, c)) best = t;
      }
      r.values(b, c) = seq(best, c);
      r.argmax(b, c) = best;
    }
  }
  return r;
}

template <typename Scalar>
Tensor3<Scalar> global_masked_max_pool_backward(const PoolResult<Scalar>& pooled, Index time,
                                                const ConstMatRef<Scalar>& dy) {
  Tensor3<Scalar> dx(pooled.values.rows(), time, pooled.values.cols());
  for (Index b = 0; b < dx.batch(); ++b) {
    for (Index c = 0; c < dx.channels(); ++c) dx(b, pooled.argmax(b, c), c) = dy(b, c);
  }
  return dx;
}

}  // namespace fcn
