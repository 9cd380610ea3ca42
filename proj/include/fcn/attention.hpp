#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fcn/errors.hpp"
#include "fcn/tensor.hpp"

namespace fcn {

enum class AttentionVariant { none, scaled_dot, simplified, local };

inline std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::none: return "none";
    case AttentionVariant::scaled_dot: return "scaled_dot";
    case AttentionVariant::simplified: return "simplified";
    case AttentionVariant::local: return "local";
  }
  return "unknown";
}

inline AttentionVariant attention_variant_from_string(const std::string& s) {
  if (s == "none") return AttentionVariant::none;
  if (s == "scaled_dot") return AttentionVariant::scaled_dot;
  if (s == "simplified") return AttentionVariant::simplified;
  if (s == "local") return AttentionVariant::local;
  throw ConfigError("unknown attention variant '" + s + "'");
}

/// Weights of one attention layer. Per-head projections are stored side by
/// side: head i owns columns [i*d_head, (i+1)*d_head) of wq, wk, wv, ws and
/// of the local kernel. Groups a variant does not use are null.
template <typename Scalar>
struct AttentionParams {
  AttentionVariant variant = AttentionVariant::none;
  Index heads = 1;
  Index local_kernel = 1;
  const Matrix<Scalar>* wq = nullptr;           // d_model x d_model
  const Matrix<Scalar>* wk = nullptr;           // d_model x d_model
  const Matrix<Scalar>* wv = nullptr;           // d_model x d_model
  const Matrix<Scalar>* wo = nullptr;           // d_model x d_model
  const Matrix<Scalar>* ws = nullptr;           // d_model x d_model (simplified)
  const Matrix<Scalar>* ws_bias = nullptr;      // 1 x d_model (simplified)
  const Matrix<Scalar>* local_w = nullptr;      // (local_kernel * d_model) x d_model
  const Matrix<Scalar>* local_bias = nullptr;   // 1 x d_model (local)
};

template <typename Scalar>
struct AttentionGrads {
  Matrix<Scalar>* wq = nullptr;
  Matrix<Scalar>* wk = nullptr;
  Matrix<Scalar>* wv = nullptr;
  Matrix<Scalar>* wo = nullptr;
  Matrix<Scalar>* ws = nullptr;
  Matrix<Scalar>* ws_bias = nullptr;
  Matrix<Scalar>* local_w = nullptr;
  Matrix<Scalar>* local_bias = nullptr;
};

inline Index head_width(Index d_model, Index heads) {
  if (heads < 1 || d_model % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return d_model / heads;
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention on one sequence

template <typename Scalar>
struct DotAttention {
  Matrix<Scalar> out;      // T_q x d_v
  Matrix<Scalar> weights;  // T_q x T_k, rows sum to one, masked keys zero
};

/// softmax(Q K^T / sqrt(d_k)) V over the first `valid_keys` key rows.
template <typename Scalar>
DotAttention<Scalar> scaled_dot_attention(const ConstMatRef<Scalar>& q,
                                          const ConstMatRef<Scalar>& k,
                                          const ConstMatRef<Scalar>& v, Index valid_keys) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("scaled_dot_attention: Q " + shape_string(q) + ", K " + shape_string(k) +
                     ", V " + shape_string(v));
  }
  if (valid_keys < 1) throw InputError("scaled_dot_attention: every key position is masked");
  valid_keys = std::min(valid_keys, k.rows());
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  DotAttention<Scalar> r;
  Matrix<Scalar> scores = (q * k.topRows(valid_keys).transpose()) * scale;
  r.weights = Matrix<Scalar>::Zero(q.rows(), k.rows());
  r.weights.leftCols(valid_keys) = softmax(scores, Axis::row);
  r.out.noalias() = r.weights.leftCols(valid_keys) * v.topRows(valid_keys);
  return r;
}

template <typename Scalar>
struct DotAttentionGrads {
  Matrix<Scalar> dq, dk, dv;
};

template <typename Scalar>
DotAttentionGrads<Scalar> scaled_dot_attention_backward(const ConstMatRef<Scalar>& q,
                                                        const ConstMatRef<Scalar>& k,
                                                        const ConstMatRef<Scalar>& v,
                                                        const ConstMatRef<Scalar>& weights,
                                                        const ConstMatRef<Scalar>& dout) {
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  DotAttentionGrads<Scalar> g;
  g.dv.noalias() = weights.transpose() * dout;
  const Matrix<Scalar> dweights = dout * v.transpose();
  // Masked columns have zero weight, so their score gradient is zero too.
  const Matrix<Scalar> dscores = softmax_backward(weights, dweights, Axis::row) * scale;
  g.dq.noalias() = dscores * k;
  g.dk.noalias() = dscores.transpose() * q;
  return g;
}

// ---------------------------------------------------------------------------
// Per-position channel softmax within head blocks

template <typename Scalar>
Matrix<Scalar> head_softmax(const Matrix<Scalar>& logits, Index heads) {
  const Index width = head_width(logits.cols(), heads);
  Matrix<Scalar> w(logits.rows(), logits.cols());
  for (Index h = 0; h < heads; ++h) {
    w.middleCols(h * width, width) = softmax(logits.middleCols(h * width, width), Axis::row);
  }
  return w;
}

template <typename Scalar>
Matrix<Scalar> head_softmax_backward(const Matrix<Scalar>& w, const Matrix<Scalar>& dw,
                                     Index heads) {
  const Index width = head_width(w.cols(), heads);
  Matrix<Scalar> dl(w.rows(), w.cols());
  for (Index h = 0; h < heads; ++h) {
    dl.middleCols(h * width, width) = softmax_backward(
        w.middleCols(h * width, width), dw.middleCols(h * width, width), Axis::row);
  }
  return dl;
}

// ---------------------------------------------------------------------------
// Self-attention layers over (batch, time, d_model)

/// Intermediates kept for the backward pass.
template <typename Scalar>
struct AttentionCache {
  Matrix<Scalar> q, k, v;       // (B*T) x d_model projections
  Matrix<Scalar> heads_out;     // (B*T) x d_model, concatenated head outputs
  std::vector<Matrix<Scalar>> dot_weights;  // B*heads matrices, T x T
  Matrix<Scalar> channel_weights;           // simplified/local weights
  Matrix<Scalar> masked_input;              // local: input with padding zeroed
};

namespace detail {

template <typename Scalar>
void check_square(const Matrix<Scalar>* w, Index d_model, const char* name) {
  if (!w) throw ConfigError(std::string("attention: missing parameter ") + name);
  if (w->rows() != d_model || w->cols() != d_model) {
    throw ShapeError(std::string("attention: ") + name + " is " + shape_string(*w) +
                     ", expected " + shape_string(d_model, d_model));
  }
}

template <typename Scalar>
void check_bias(const Matrix<Scalar>* b, Index d_model, const char* name) {
  if (!b) throw ConfigError(std::string("attention: missing parameter ") + name);
  if (b->rows() != 1 || b->cols() != d_model) {
    throw ShapeError(std::string("attention: ") + name + " is " + shape_string(*b) +
                     ", expected " + shape_string(1, d_model));
  }
}

/// Zeroes rows at or beyond each sequence's length.
template <typename Scalar>
Matrix<Scalar> zero_padding(const Tensor3<Scalar>& x, const LengthMask& mask) {
  Matrix<Scalar> m = x.matrix();
  for (Index b = 0; b < x.batch(); ++b) {
    const Index len = mask.length(b);
    m.middleRows(b * x.time() + len, x.time() - len).setZero();
  }
  return m;
}

/// Same-padded window over time of width local_kernel, centered: tap j reads
/// position t + j - (local_kernel - 1) / 2. The center tap is applied first.
template <typename Scalar>
Matrix<Scalar> local_logits(const Matrix<Scalar>& xm, Index batch, Index time,
                            const Matrix<Scalar>& kernel, const Matrix<Scalar>& bias,
                            Index local_kernel) {
  const Index d_model = xm.cols();
  const Index center = (local_kernel - 1) / 2;
  Matrix<Scalar> logits(xm.rows(), kernel.cols());
  logits.noalias() = xm * kernel.middleRows(center * d_model, d_model);
  for (Index b = 0; b < batch; ++b) {
    auto in = xm.middleRows(b * time, time);
    auto out = logits.middleRows(b * time, time);
    for (Index j = 0; j < local_kernel; ++j) {
      const Index offset = j - center;
      if (offset == 0 || std::abs(offset) >= time) continue;
      auto tap = kernel.middleRows(j * d_model, d_model);
      const Index n = time - std::abs(offset);
      if (offset > 0) {
        out.topRows(n).noalias() += in.bottomRows(n) * tap;
      } else {
        out.bottomRows(n).noalias() += in.topRows(n) * tap;
      }
    }
  }
  logits.rowwise() += bias.row(0);
  return logits;
}

template <typename Scalar>
Matrix<Scalar> local_logits_backward(const Matrix<Scalar>& xm, Index batch, Index time,
                                     const Matrix<Scalar>& kernel, Index local_kernel,
                                     const Matrix<Scalar>& dlogits, Matrix<Scalar>& dkernel,
                                     Matrix<Scalar>& dbias) {
  const Index d_model = xm.cols();
  const Index center = (local_kernel - 1) / 2;
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(xm.rows(), d_model);
  dbias.row(0) += dlogits.colwise().sum();
  for (Index b = 0; b < batch; ++b) {
    auto in = xm.middleRows(b * time, time);
    auto dout = dlogits.middleRows(b * time, time);
    auto din = dx.middleRows(b * time, time);
    for (Index j = 0; j < local_kernel; ++j) {
      const Index offset = j - center;
      if (std::abs(offset) >= time) continue;
      auto tap = kernel.middleRows(j * d_model, d_model);
      auto dtap = dkernel.middleRows(j * d_model, d_model);
      const Index n = time - std::abs(offset);
      if (offset >= 0) {
        din.bottomRows(n).noalias() += dout.topRows(n) * tap.transpose();
        dtap.noalias() += in.bottomRows(n).transpose() * dout.topRows(n);
      } else {
        din.topRows(n).noalias() += dout.bottomRows(n) * tap.transpose();
        dtap.noalias() += in.topRows(n).transpose() * dout.bottomRows(n);
      }
    }
  }
  return dx;
}

}  // namespace detail

/// Multi-head scaled dot-product self-attention; padded keys are masked.
template <typename Scalar>
Tensor3<Scalar> self_attention(const Tensor3<Scalar>& x, const AttentionParams<Scalar>& p,
                               const LengthMask& mask, AttentionCache<Scalar>* cache = nullptr) {
  if (p.variant != AttentionVariant::scaled_dot) {
    throw ConfigError("self_attention: parameters are for variant " + to_string(p.variant));
  }
  mask.validate(x.batch(), x.time());
  const Index d_model = x.channels();
  const Index width = head_width(d_model, p.heads);
  detail::check_square(p.wq, d_model, "wq");
  detail::check_square(p.wk, d_model, "wk");
  detail::check_square(p.wv, d_model, "wv");
  detail::check_square(p.wo, d_model, "wo");

  AttentionCache<Scalar> local;
  AttentionCache<Scalar>& c = cache ? *cache : local;
  c.q.noalias() = x.matrix() * *p.wq;
  c.k.noalias() = x.matrix() * *p.wk;
  c.v.noalias() = x.matrix() * *p.wv;
  c.heads_out.resize(x.matrix().rows(), d_model);
  c.dot_weights.clear();
  const Index time = x.time();
  for (Index b = 0; b < x.batch(); ++b) {
    for (Index h = 0; h < p.heads; ++h) {
      auto block = [&](const Matrix<Scalar>& m) {
        return m.block(b * time, h * width, time, width);
      };
      DotAttention<Scalar> r =
          scaled_dot_attention<Scalar>(block(c.q), block(c.k), block(c.v), mask.length(b));
      c.heads_out.block(b * time, h * width, time, width) = r.out;
      c.dot_weights.push_back(std::move(r.weights));
    }
  }
  Matrix<Scalar> out = c.heads_out * *p.wo;
  return Tensor3<Scalar>(x.batch(), time, std::move(out));
}

namespace detail {

/// Shared tail of simplified and local attention: weights (x) values, then
/// the output projection.
template <typename Scalar>
Tensor3<Scalar> gated_values(const Tensor3<Scalar>& x, const AttentionParams<Scalar>& p,
                             const Matrix<Scalar>& logits, AttentionCache<Scalar>& c) {
  c.v.noalias() = x.matrix() * *p.wv;
  c.channel_weights = head_softmax(logits, p.heads);
  c.heads_out = (c.channel_weights.array() * c.v.array()).matrix();
  Matrix<Scalar> out = c.heads_out * *p.wo;
  return Tensor3<Scalar>(x.batch(), x.time(), std::move(out));
}

}  // namespace detail

/// Per position and head: softmax over channels of (x W_S + b), multiplied
/// elementwise with the projected values x W_V.
template <typename Scalar>
Tensor3<Scalar> simplified_attention(const Tensor3<Scalar>& x, const AttentionParams<Scalar>& p,
                                     const LengthMask& mask,
                                     AttentionCache<Scalar>* cache = nullptr) {
  if (p.variant != AttentionVariant::simplified) {
    throw ConfigError("simplified_attention: parameters are for variant " + to_string(p.variant));
  }
  mask.validate(x.batch(), x.time());
  const Index d_model = x.channels();
  head_width(d_model, p.heads);
  detail::check_square(p.wv, d_model, "wv");
  detail::check_square(p.wo, d_model, "wo");
  detail::check_square(p.ws, d_model, "ws");
  detail::check_bias(p.ws_bias, d_model, "ws_bias");
  AttentionCache<Scalar> local;
  AttentionCache<Scalar>& c = cache ? *cache : local;
  Matrix<Scalar> logits(x.matrix().rows(), d_model);
  logits.noalias() = x.matrix() * *p.ws;
  logits.rowwise() += p.ws_bias->row(0);
  return detail::gated_values(x, p, logits, c);
}

/// Simplified attention whose weight logits come from a centered,
/// zero-padded convolution over time. Padded positions contribute zero.
template <typename Scalar>
Tensor3<Scalar> local_attention(const Tensor3<Scalar>& x, const AttentionParams<Scalar>& p,
                                const LengthMask& mask, AttentionCache<Scalar>* cache = nullptr) {
  if (p.variant != AttentionVariant::local) {
    throw ConfigError("local_attention: parameters are for variant " + to_string(p.variant));
  }
  mask.validate(x.batch(), x.time());
  const Index d_model = x.channels();
  head_width(d_model, p.heads);
  if (p.local_kernel < 1 || p.local_kernel % 2 == 0) {
    throw ConfigError("local_attention: window " + std::to_string(p.local_kernel) +
                      " must be odd and positive");
  }
  detail::check_square(p.wv, d_model, "wv");
  detail::check_square(p.wo, d_model, "wo");
  detail::check_bias(p.local_bias, d_model, "local_bias");
  if (!p.local_w || p.local_w->rows() != p.local_kernel * d_model ||
      p.local_w->cols() != d_model) {
    throw ShapeError("local_attention: kernel must be " +
                     shape_string(p.local_kernel * d_model, d_model));
  }
  AttentionCache<Scalar> local;
  AttentionCache<Scalar>& c = cache ? *cache : local;
  c.masked_input = detail::zero_padding(x, mask);
  const Matrix<Scalar> logits = detail::local_logits(c.masked_input, x.batch(), x.time(),
                                                     *p.local_w, *p.local_bias, p.local_kernel);
  return detail::gated_values(x, p, logits, c);
}

/// Dispatches on the variant; `none` is the identity.
template <typename Scalar>
Tensor3<Scalar> apply_attention(const Tensor3<Scalar>& x, const AttentionParams<Scalar>& p,
                                const LengthMask& mask, AttentionCache<Scalar>* cache = nullptr) {
  switch (p.variant) {
    case AttentionVariant::none: return x;
    case AttentionVariant::scaled_dot: return self_attention(x, p, mask, cache);
    case AttentionVariant::simplified: return simplified_attention(x, p, mask, cache);
    case AttentionVariant::local: return local_attention(x, p, mask, cache);
  }
  throw ConfigError("apply_attention: unknown variant");
}

/// Accumulates parameter gradients into `g` and returns dL/dx.
template <typename Scalar>
Tensor3<Scalar> apply_attention_backward(const Tensor3<Scalar>& x,
                                         const AttentionParams<Scalar>& p,
                                         const LengthMask& mask, const AttentionCache<Scalar>& c,
                                         const Tensor3<Scalar>& dy, const AttentionGrads<Scalar>& g) {
  if (p.variant == AttentionVariant::none) return dy;
  const Index d_model = x.channels();
  const Index width = head_width(d_model, p.heads);
  const Index time = x.time();
  const Matrix<Scalar>& xm = x.matrix();

  g.wo->noalias() += c.heads_out.transpose() * dy.matrix();
  const Matrix<Scalar> dheads = dy.matrix() * p.wo->transpose();
  Matrix<Scalar> dx(xm.rows(), d_model);

  if (p.variant == AttentionVariant::scaled_dot) {
    Matrix<Scalar> dq(xm.rows(), d_model), dk(xm.rows(), d_model), dv(xm.rows(), d_model);
    for (Index b = 0; b < x.batch(); ++b) {
      const Index len = mask.length(b);
      for (Index h = 0; h < p.heads; ++h) {
        auto block = [&](const Matrix<Scalar>& m) {
          return m.block(b * time, h * width, time, width);
        };
        const Matrix<Scalar>& w = c.dot_weights[static_cast<std::size_t>(b * p.heads + h)];
        auto r = scaled_dot_attention_backward<Scalar>(
            block(c.q), c.k.block(b * time, h * width, len, width),
            c.v.block(b * time, h * width, len, width), w.leftCols(len), block(dheads));
        dq.block(b * time, h * width, time, width) = r.dq;
        dk.block(b * time, h * width, time, width).setZero();
        dv.block(b * time, h * width, time, width).setZero();
        dk.block(b * time, h * width, len, width) = r.dk;
        dv.block(b * time, h * width, len, width) = r.dv;
      }
    }
    g.wq->noalias() += xm.transpose() * dq;
    g.wk->noalias() += xm.transpose() * dk;
    g.wv->noalias() += xm.transpose() * dv;
    dx.noalias() = dq * p.wq->transpose();
    dx.noalias() += dk * p.wk->transpose();
    dx.noalias() += dv * p.wv->transpose();
    return Tensor3<Scalar>(x.batch(), time, std::move(dx));
  }

  // simplified / local
  const Matrix<Scalar> dv = (dheads.array() * c.channel_weights.array()).matrix();
  const Matrix<Scalar> dweights = (dheads.array() * c.v.array()).matrix();
  const Matrix<Scalar> dlogits = head_softmax_backward(c.channel_weights, dweights, p.heads);
  g.wv->noalias() += xm.transpose() * dv;
  dx.noalias() = dv * p.wv->transpose();
  if (p.variant == AttentionVariant::simplified) {
    g.ws->noalias() += xm.transpose() * dlogits;
    g.ws_bias->row(0) += dlogits.colwise().sum();
    dx.noalias() += dlogits * p.ws->transpose();
  } else {
    Matrix<Scalar> dmasked = detail::local_logits_backward(
        c.masked_input, x.batch(), time, *p.local_w, p.local_kernel, dlogits, *g.local_w,
        *g.local_bias);
    for (Index b = 0; b < x.batch(); ++b) {
      const Index len = mask.length(b);
      dmasked.middleRows(b * time + len, time - len).setZero();
    }
    dx += dmasked;
  }
  return Tensor3<Scalar>(x.batch(), time, std::move(dx));
}

}  // namespace fcn
