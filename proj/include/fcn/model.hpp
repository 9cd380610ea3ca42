#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fcn/attention.hpp"
#include "fcn/config.hpp"
#include "fcn/errors.hpp"
#include "fcn/layers.hpp"
#include "fcn/tensor.hpp"

namespace fcn {

/// A named parameter with its gradient buffer. Values are held as a matrix
/// of prod(dims[:-1]) rows by dims.back() columns.
template <typename Scalar>
struct Param {
  std::string name;
  std::vector<std::uint32_t> dims;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool decay = false;  // counted in the L2 penalty
};

/// Ordered collection of parameters; iteration follows insertion order.
template <typename Scalar>
class ParamSet {
 public:
  Param<Scalar>& add(const std::string& name, std::vector<std::uint32_t> dims, bool decay) {
    if (dims.empty()) throw ShapeError("parameter '" + name + "' has rank 0");
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Index rows = 1;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) rows *= dims[i];
    const Index cols = dims.back();
    index_.emplace(name, params_.size());
    params_.push_back(Param<Scalar>{name, std::move(dims), Matrix<Scalar>::Zero(rows, cols),
                                    Matrix<Scalar>::Zero(rows, cols), decay});
    return params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Param<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Param<Scalar>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }
  Param<Scalar>& at(const std::string& name) { return params_[index_of(name)]; }
  const Param<Scalar>& at(const std::string& name) const { return params_[index_of(name)]; }

  /// Total number of scalar entries.
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.dims, p.decay);
      q.value = p.value.template cast<Other>();
    }
    return out;
  }

 private:
  std::vector<Param<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

/// 1 + (init_kernel - 1) + sum over stack layers of (stack_kernel - 1) * 2^l.
inline Index receptive_field(const ModelConfig& cfg) {
  Index field = 1 + (cfg.init_kernel - 1);
  for (Index l = 0; l < cfg.stack_layers; ++l) field += (cfg.stack_kernel - 1) * (Index{1} << l);
  return field;
}

/// Every intermediate of one forward pass, kept for backward.
template <typename Scalar>
struct ForwardCache {
  IdMatrix ids;
  LengthMask mask;
  Tensor3<Scalar> embedded;
  Tensor3<Scalar> init_pre;  // initial conv output, before the optional activation
  std::vector<Tensor3<Scalar>> block_inputs;
  std::vector<ResidualBlockOutput<Scalar>> blocks;
  Tensor3<Scalar> skip_sum;  // after ReLU
  DropoutMask<Scalar> dropout;
  Tensor3<Scalar> dropped;
  Tensor3<Scalar> attention_input;
  AttentionCache<Scalar> attention;
  Tensor3<Scalar> head_input;  // input of the output conv
  Tensor3<Scalar> scores;      // per-position class scores, before pooling
  PoolResult<Scalar> pooled;
};

/// The fully convolutional classifier:
/// embed -> causal conv -> residual dilated stack (skips collected) ->
/// skip sum + ReLU -> spatial dropout -> attention -> 1x1 conv -> masked
/// global max pool. With after_output placement attention follows the 1x1
/// conv instead.
template <typename Scalar>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    allocate();
    initialize();
  }

  /// Adopts existing parameters, which must match the configuration's
  /// names and shapes.
  Model(const ModelConfig& cfg, ParamSet<Scalar> params) : cfg_(cfg) {
    cfg_.validate();
    allocate();
    if (params.size() != params_.size()) {
      throw ConfigError("expected " + std::to_string(params_.size()) + " parameters, got " +
                        std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params[i].name != params_[i].name || params[i].dims != params_[i].dims) {
        throw ConfigError("parameter " + std::to_string(i) + " '" + params[i].name +
                          "' does not match expected '" + params_[i].name + "'");
      }
      params_[i].value = std::move(params[i].value);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<Scalar>& params() { return params_; }
  const ParamSet<Scalar>& params() const { return params_; }

  template <typename Other>
  Model<Other> cast() const {
    return Model<Other>(cfg_, params_.template cast<Other>());
  }

  /// Logits (batch x num_classes). `rng` is required when training with
  /// dropout enabled.
  Matrix<Scalar> forward(const IdMatrix& ids, const LengthMask& mask, bool training = false,
                         std::mt19937_64* rng = nullptr) const {
    ForwardCache<Scalar> cache;
    return forward(ids, mask, training, rng, cache);
  }

  Matrix<Scalar> forward(const IdMatrix& ids, const LengthMask& mask, bool training,
                         std::mt19937_64* rng, ForwardCache<Scalar>& c) const {
    if (ids.rows() < 1 || ids.cols() < 1) throw InputError("forward: empty input");
    mask.validate(ids.rows(), ids.cols());
    c.ids = ids;
    c.mask = mask;
    c.embedded = embed<Scalar>(ids, value(ix_.embedding));
    c.init_pre = causal_dilated_conv(c.embedded, init_conv());
    Tensor3<Scalar> h = cfg_.init_activation ? lrn_relu(c.init_pre, cfg_.lrn) : c.init_pre;
    c.block_inputs.clear();
    c.blocks.clear();
    std::vector<Tensor3<Scalar>> skips;
    for (Index l = 0; l < cfg_.stack_layers; ++l) {
      c.block_inputs.push_back(std::move(h));
      c.blocks.push_back(residual_dilated_block(c.block_inputs.back(), block(l), cfg_.lrn));
      skips.push_back(c.blocks.back().skip);
      h = c.blocks.back().residual;
    }
    c.skip_sum = skip_aggregate<Scalar>(skips);
    if (training && cfg_.dropout_p > 0.0 && !rng) {
      throw ConfigError("forward: training with dropout needs a random generator");
    }
    std::mt19937_64 unused(0);
    c.dropped = spatial_dropout(c.skip_sum, cfg_.dropout_p, training, rng ? *rng : unused,
                                &c.dropout);
    const AttentionParams<Scalar> attn = attention();
    if (cfg_.attention.placement == AttentionPlacement::before_output) {
      c.attention_input = c.dropped;
      c.head_input = apply_attention(c.attention_input, attn, mask, &c.attention);
      c.scores = pointwise_conv(c.head_input, value(ix_.output_w), value(ix_.output_b));
    } else {
      c.head_input = c.dropped;
      c.attention_input = pointwise_conv(c.head_input, value(ix_.output_w), value(ix_.output_b));
      c.scores = apply_attention(c.attention_input, attn, mask, &c.attention);
    }
    c.pooled = global_masked_max_pool(c.scores, mask);
    return c.pooled.values;
  }

  /// Accumulates parameter gradients for d loss / d logits.
  void backward(const ForwardCache<Scalar>& c, const Matrix<Scalar>& dlogits) {
    const Tensor3<Scalar> dscores =
        global_masked_max_pool_backward(c.pooled, c.scores.time(), dlogits);
    backward_from_scores(c, dscores);
  }

  /// Backward from a gradient on the pre-pool class scores. Accumulates
  /// parameter gradients and returns the gradient w.r.t. the embedded input.
  Tensor3<Scalar> backward_from_scores(const ForwardCache<Scalar>& c,
                                       const Tensor3<Scalar>& dscores) {
    const AttentionParams<Scalar> attn = attention();
    const AttentionGrads<Scalar> attn_grads = attention_grads();
    Tensor3<Scalar> ddropped;
    if (cfg_.attention.placement == AttentionPlacement::before_output) {
      const Tensor3<Scalar> dhead = pointwise_conv_backward(
          c.head_input, value(ix_.output_w), dscores, grad(ix_.output_w), grad(ix_.output_b));
      ddropped = apply_attention_backward(c.attention_input, attn, c.mask, c.attention, dhead,
                                          attn_grads);
    } else {
      const Tensor3<Scalar> dattn = apply_attention_backward(c.attention_input, attn, c.mask,
                                                             c.attention, dscores, attn_grads);
      ddropped = pointwise_conv_backward(c.head_input, value(ix_.output_w), dattn,
                                         grad(ix_.output_w), grad(ix_.output_b));
    }
    const Tensor3<Scalar> dskip =
        skip_aggregate_backward(c.skip_sum, spatial_dropout_backward(c.dropout, ddropped));
    Tensor3<Scalar> dh(dskip.batch(), dskip.time(), dskip.channels());
    for (Index l = cfg_.stack_layers - 1; l >= 0; --l) {
      const auto u = static_cast<std::size_t>(l);
      dh = residual_dilated_block_backward(c.block_inputs[u], c.blocks[u], block(l), cfg_.lrn,
                                           dh, dskip, block_grads(l));
    }
    if (cfg_.init_activation) dh = lrn_relu_backward(c.init_pre, cfg_.lrn, dh);
    Tensor3<Scalar> dembedded = causal_dilated_conv_backward(
        c.embedded, init_conv(), dh, ConvGrads<Scalar>{grad(ix_.init_kernel), grad(ix_.init_bias)});
    embed_backward(c.ids, cfg_.pad_id, dembedded, grad(ix_.embedding));
    return dembedded;
  }

 private:
  struct BlockIndex {
    std::size_t kernel, bias, proj, proj_bias;
  };
  struct Indices {
    std::size_t embedding = 0, init_kernel = 0, init_bias = 0;
    std::vector<BlockIndex> blocks;
    std::size_t wq = 0, wk = 0, wv = 0, wo = 0, ws = 0, ws_bias = 0, local_w = 0, local_bias = 0;
    std::size_t output_w = 0, output_b = 0;
  };

  static std::uint32_t u32(Index v) { return static_cast<std::uint32_t>(v); }

  void allocate() {
    const auto& cfg = cfg_;
    const Index channels = cfg.stack_channels;
    ix_.embedding = params_.size();
    params_.add("embedding", {u32(cfg.vocab_size), u32(cfg.embed_dim)}, false);
    ix_.init_kernel = params_.size();
    params_.add("init_conv.kernel", {u32(cfg.init_kernel), u32(cfg.embed_dim), u32(channels)},
                true);
    ix_.init_bias = params_.size();
    params_.add("init_conv.bias", {u32(channels)}, false);
    for (Index l = 0; l < cfg.stack_layers; ++l) {
      const std::string prefix = "block" + std::to_string(l);
      BlockIndex b{};
      b.kernel = params_.size();
      params_.add(prefix + ".conv.kernel", {u32(cfg.stack_kernel), u32(channels), u32(channels)},
                  true);
      b.bias = params_.size();
      params_.add(prefix + ".conv.bias", {u32(channels)}, false);
      b.proj = params_.size();
      params_.add(prefix + ".proj.weight", {u32(channels), u32(channels)}, true);
      b.proj_bias = params_.size();
      params_.add(prefix + ".proj.bias", {u32(channels)}, false);
      ix_.blocks.push_back(b);
    }
    const Index width = cfg.attention_width();
    switch (cfg.attention.variant) {
      case AttentionVariant::none: break;
      case AttentionVariant::scaled_dot:
        ix_.wq = params_.size();
        params_.add("attention.wq", {u32(width), u32(width)}, true);
        ix_.wk = params_.size();
        params_.add("attention.wk", {u32(width), u32(width)}, true);
        ix_.wv = params_.size();
        params_.add("attention.wv", {u32(width), u32(width)}, true);
        ix_.wo = params_.size();
        params_.add("attention.wo", {u32(width), u32(width)}, true);
        break;
      case AttentionVariant::simplified:
        ix_.ws = params_.size();
        params_.add("attention.ws", {u32(width), u32(width)}, true);
        ix_.ws_bias = params_.size();
        params_.add("attention.ws_bias", {u32(width)}, false);
        ix_.wv = params_.size();
        params_.add("attention.wv", {u32(width), u32(width)}, true);
        ix_.wo = params_.size();
        params_.add("attention.wo", {u32(width), u32(width)}, true);
        break;
      case AttentionVariant::local:
        ix_.local_w = params_.size();
        params_.add("attention.local_kernel",
                    {u32(cfg.attention.local_kernel), u32(width), u32(width)}, true);
        ix_.local_bias = params_.size();
        params_.add("attention.local_bias", {u32(width)}, false);
        ix_.wv = params_.size();
        params_.add("attention.wv", {u32(width), u32(width)}, true);
        ix_.wo = params_.size();
        params_.add("attention.wo", {u32(width), u32(width)}, true);
        break;
    }
    ix_.output_w = params_.size();
    params_.add("output.weight", {u32(channels), u32(cfg.num_classes)}, true);
    ix_.output_b = params_.size();
    params_.add("output.bias", {u32(cfg.num_classes)}, false);
  }

  // Embedding ~ U(-0.05, 0.05) with a zero pad row; kernels feeding LRN+ReLU
  // are He-uniform; every other weight is Glorot-uniform; biases are zero.
  void initialize() {
    std::mt19937_64 rng(cfg_.seed);
    auto fill = [&rng](Matrix<Scalar>& m, double limit) {
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    };
    auto he = [](double fan_in) { return std::sqrt(6.0 / fan_in); };
    auto glorot = [](double fan_in, double fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); };
    for (auto& p : params_) {
      if (!p.decay) continue;
      const double rows = static_cast<double>(p.value.rows());
      const double cols = static_cast<double>(p.value.cols());
      const double taps = p.dims.size() == 3 ? static_cast<double>(p.dims[0]) : 1.0;
      const bool feeds_relu = p.name.ends_with(".conv.kernel") ||
                              (p.name == "init_conv.kernel" && cfg_.init_activation);
      fill(p.value, feeds_relu ? he(rows) : glorot(rows, cols * taps));
    }
    auto& table = params_[ix_.embedding].value;
    fill(table, 0.05);
    table.row(cfg_.pad_id).setZero();
  }

  const Matrix<Scalar>& value(std::size_t i) const { return params_[i].value; }
  Matrix<Scalar>& grad(std::size_t i) { return params_[i].grad; }

  ConvParams<Scalar> init_conv() const {
    return ConvParams<Scalar>{value(ix_.init_kernel), value(ix_.init_bias), cfg_.init_kernel, 1};
  }

  ResidualBlockParams<Scalar> block(Index l) const {
    const BlockIndex& b = ix_.blocks[static_cast<std::size_t>(l)];
    return ResidualBlockParams<Scalar>{
        ConvParams<Scalar>{value(b.kernel), value(b.bias), cfg_.stack_kernel, Index{1} << l},
        value(b.proj), value(b.proj_bias)};
  }

  ResidualBlockGrads<Scalar> block_grads(Index l) {
    const BlockIndex& b = ix_.blocks[static_cast<std::size_t>(l)];
    return ResidualBlockGrads<Scalar>{ConvGrads<Scalar>{grad(b.kernel), grad(b.bias)},
                                      grad(b.proj), grad(b.proj_bias)};
  }

  AttentionParams<Scalar> attention() const {
    AttentionParams<Scalar> p;
    p.variant = cfg_.attention.variant;
    p.heads = cfg_.attention.heads;
    p.local_kernel = cfg_.attention.local_kernel;
    switch (p.variant) {
      case AttentionVariant::none: return p;
      case AttentionVariant::scaled_dot:
        p.wq = &value(ix_.wq);
        p.wk = &value(ix_.wk);
        break;
      case AttentionVariant::simplified:
        p.ws = &value(ix_.ws);
        p.ws_bias = &value(ix_.ws_bias);
        break;
      case AttentionVariant::local:
        p.local_w = &value(ix_.local_w);
        p.local_bias = &value(ix_.local_bias);
        break;
    }
    p.wv = &value(ix_.wv);
    p.wo = &value(ix_.wo);
    return p;
  }

  AttentionGrads<Scalar> attention_grads() {
    AttentionGrads<Scalar> g;
    switch (cfg_.attention.variant) {
      case AttentionVariant::none: return g;
      case AttentionVariant::scaled_dot:
        g.wq = &grad(ix_.wq);
        g.wk = &grad(ix_.wk);
        break;
      case AttentionVariant::simplified:
        g.ws = &grad(ix_.ws);
        g.ws_bias = &grad(ix_.ws_bias);
        break;
      case AttentionVariant::local:
        g.local_w = &grad(ix_.local_w);
        g.local_bias = &grad(ix_.local_bias);
        break;
    }
    g.wv = &grad(ix_.wv);
    g.wo = &grad(ix_.wo);
    return g;
  }

  ModelConfig cfg_;
  ParamSet<Scalar> params_;
  Indices ix_;
};

}  // namespace fcn
