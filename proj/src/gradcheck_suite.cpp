#include "fcn/gradcheck_suite.hpp"

#include <chrono>
#include <cstdio>
#include <limits>
#include <random>
#include <sstream>

#include "fcn/attention.hpp"
#include "fcn/layers.hpp"
#include "fcn/model.hpp"
#include "fcn/training.hpp"

namespace fcn {

namespace {

using Mat = Matrix<double>;
using Tensor = Tensor3<double>;

// Central differences with h = 1e-5 move pre-activations by far less than
// this, so samples with a larger margin never straddle a kink.
constexpr double kKinkMargin = 1e-4;
constexpr int kMaxSamples = 25;

Mat random(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Tensor random_tensor(Index b, Index t, Index c, std::mt19937_64& rng, double scale = 1.0) {
  return Tensor(b, t, random(b * t, c, rng, scale));
}

double dot(const Mat& a, const Mat& b) { return (a.array() * b.array()).sum(); }

double min_abs_nonzero(const Mat& m) {
  double best = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < m.size(); ++i) {
    const double v = std::abs(m.data()[i]);
    if (v > 0.0) best = std::min(best, v);
  }
  return best;
}

double min_abs(const Mat& m) { return m.cwiseAbs().minCoeff(); }

/// Smallest gap between the largest and second-largest valid value of any
/// pooled column.
double pool_gap(const Tensor& x, const LengthMask& mask) {
  double best = std::numeric_limits<double>::infinity();
  for (Index b = 0; b < x.batch(); ++b) {
    for (Index c = 0; c < x.channels(); ++c) {
      double first = -std::numeric_limits<double>::infinity();
      double second = first;
      for (Index t = 0; t < mask.length(b); ++t) {
        const double v = x(b, t, c);
        if (v > first) {
          second = first;
          first = v;
        } else if (v > second) {
          second = v;
        }
      }
      if (mask.length(b) > 1) best = std::min(best, first - second);
    }
  }
  return best;
}

GradCheckSample sample(const DifferentiableOp& op, bool near_kink) {
  if (near_kink) return {0.0, true};
  return {grad_check(op, kGradCheckStep), false};
}

// ---------------------------------------------------------------------------

GradCheckSample check_matmul(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Mat a = random(3, 3, rng), b = random(3, 3, rng);
  const Mat probe = random(3, 3, rng);
  DifferentiableOp op;
  op.inputs = {as_span(a), as_span(b)};
  op.objective = [&] { return dot(probe, matmul(a, b)); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    Mat da = Mat::Zero(3, 3), db = Mat::Zero(3, 3);
    matmul_backward(a, b, probe, da, db);
    return {flatten(da), flatten(db)};
  };
  return sample(op, false);
}

GradCheckSample check_softmax(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Mat x = random(3, 5, rng, 2.0);
  const Mat probe = random(3, 5, rng);
  DifferentiableOp op;
  op.inputs = {as_span(x)};
  op.objective = [&] { return dot(probe, softmax(x, Axis::row)) + dot(probe, softmax(x, Axis::col)); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    const Mat g = softmax_backward(softmax(x, Axis::row), probe, Axis::row) +
                  softmax_backward(softmax(x, Axis::col), probe, Axis::col);
    return {flatten(g)};
  };
  return sample(op, false);
}

GradCheckSample check_embed(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index vocab = 6, dim = 4;
  Mat table = random(vocab, dim, rng);
  table.row(0).setZero();
  IdMatrix ids(2, 5);
  std::uniform_int_distribution<std::int32_t> pick(0, vocab - 1);
  for (Index i = 0; i < ids.size(); ++i) ids.data()[i] = pick(rng);
  const Mat probe = random(10, dim, rng);
  DifferentiableOp op;
  // The pad row is frozen; only rows 1.. are parameters.
  op.inputs = {std::span<double>(table.data() + dim, static_cast<std::size_t>((vocab - 1) * dim))};
  op.objective = [&] { return dot(probe, embed<double>(ids, table).matrix()); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    Mat dtable = Mat::Zero(vocab, dim);
    embed_backward(ids, 0, Tensor(2, 5, probe), dtable);
    return {flatten(dtable.bottomRows(vocab - 1))};
  };
  return sample(op, false);
}

GradCheckSample check_conv(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor(2, 9, 3, rng);
  Mat kernel = random(3 * 3, 4, rng), bias = random(1, 4, rng);
  const Mat probe = random(18, 4, rng);
  const ConvParams<double> p{kernel, bias, 3, 2};
  DifferentiableOp op;
  op.inputs = {as_span(x.matrix()), as_span(kernel), as_span(bias)};
  op.objective = [&] { return dot(probe, causal_dilated_conv(x, p).matrix()); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    Mat dk = Mat::Zero(kernel.rows(), kernel.cols()), db = Mat::Zero(1, 4);
    const Tensor dx = causal_dilated_conv_backward(x, p, Tensor(2, 9, probe), {dk, db});
    return {flatten(dx.matrix()), flatten(dk), flatten(db)};
  };
  return sample(op, false);
}

GradCheckSample check_lrn(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor(2, 5, 7, rng, 2.0);
  const Mat probe = random(10, 7, rng);
  double worst = 0.0;
  // Default constants, then a strongly coupled window so the cross-channel
  // term is visible to the check.
  for (const LrnParams lrn : {LrnParams{}, LrnParams{3, 1.0, 0.8, 0.75}}) {
    DifferentiableOp op;
    op.inputs = {as_span(x.matrix())};
    op.objective = [&] { return dot(probe, lrn_relu(x, lrn).matrix()); };
    op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
      return {flatten(lrn_relu_backward(x, lrn, Tensor(2, 5, probe)).matrix())};
    };
    const GradCheckSample s = sample(op, min_abs(x.matrix()) < kKinkMargin);
    if (s.near_kink) return s;
    worst = std::max(worst, s.max_rel_err);
  }
  return {worst, false};
}

GradCheckSample check_residual_block(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index c = 4;
  Tensor x = random_tensor(2, 10, c, rng);
  Mat kernel = random(3 * c, c, rng), bias = random(1, c, rng, 0.2);
  Mat proj = random(c, c, rng), proj_bias = random(1, c, rng, 0.2);
  const Mat probe_res = random(20, c, rng), probe_skip = random(20, c, rng);
  const LrnParams lrn{3, 1.0, 0.5, 0.75};
  const ResidualBlockParams<double> p{ConvParams<double>{kernel, bias, 3, 2}, proj, proj_bias};
  DifferentiableOp op;
  op.inputs = {as_span(x.matrix()), as_span(kernel), as_span(bias), as_span(proj),
               as_span(proj_bias)};
  op.objective = [&] {
    const auto out = residual_dilated_block(x, p, lrn);
    return dot(probe_res, out.residual.matrix()) + dot(probe_skip, out.skip.matrix());
  };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    Mat dk = Mat::Zero(kernel.rows(), c), db = Mat::Zero(1, c);
    Mat dp = Mat::Zero(c, c), dpb = Mat::Zero(1, c);
    const auto out = residual_dilated_block(x, p, lrn);
    const Tensor dx = residual_dilated_block_backward(
        x, out, p, lrn, Tensor(2, 10, probe_res), Tensor(2, 10, probe_skip),
        ResidualBlockGrads<double>{{dk, db}, dp, dpb});
    return {flatten(dx.matrix()), flatten(dk), flatten(db), flatten(dp), flatten(dpb)};
  };
  const auto out = residual_dilated_block(x, p, lrn);
  return sample(op, min_abs(out.pre_activation.matrix()) < kKinkMargin);
}

GradCheckSample check_skip_aggregate(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> skips;
  for (int i = 0; i < 3; ++i) skips.push_back(random_tensor(2, 4, 3, rng));
  const Mat probe = random(8, 3, rng);
  DifferentiableOp op;
  for (auto& s : skips) op.inputs.push_back(as_span(s.matrix()));
  op.objective = [&] { return dot(probe, skip_aggregate<double>(skips).matrix()); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    const Tensor d = skip_aggregate_backward(skip_aggregate<double>(skips), Tensor(2, 4, probe));
    return {flatten(d.matrix()), flatten(d.matrix()), flatten(d.matrix())};
  };
  Mat sum = skips[0].matrix() + skips[1].matrix() + skips[2].matrix();
  return sample(op, min_abs(sum) < kKinkMargin);
}

GradCheckSample check_pointwise(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor(2, 4, 5, rng);
  Mat w = random(5, 3, rng), b = random(1, 3, rng);
  const Mat probe = random(8, 3, rng);
  DifferentiableOp op;
  op.inputs = {as_span(x.matrix()), as_span(w), as_span(b)};
  op.objective = [&] { return dot(probe, pointwise_conv(x, w, b).matrix()); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    Mat dw = Mat::Zero(5, 3), db = Mat::Zero(1, 3);
    const Tensor dx = pointwise_conv_backward(x, w, Tensor(2, 4, probe), dw, db);
    return {flatten(dx.matrix()), flatten(dw), flatten(db)};
  };
  return sample(op, false);
}

GradCheckSample check_dropout(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor(2, 4, 6, rng);
  const Mat probe = random(8, 6, rng);
  DifferentiableOp op;
  op.inputs = {as_span(x.matrix())};
  // Re-seeding per evaluation keeps the dropped channels fixed.
  op.objective = [&] {
    std::mt19937_64 drop_rng(seed + 7);
    return dot(probe, spatial_dropout(x, 0.3, true, drop_rng).matrix());
  };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    std::mt19937_64 drop_rng(seed + 7);
    DropoutMask<double> mask;
    spatial_dropout(x, 0.3, true, drop_rng, &mask);
    return {flatten(spatial_dropout_backward(mask, Tensor(2, 4, probe)).matrix())};
  };
  return sample(op, false);
}

GradCheckSample check_pool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor(2, 7, 3, rng);
  const LengthMask mask{{7, 4}, 7};
  const Mat probe = random(2, 3, rng);
  DifferentiableOp op;
  op.inputs = {as_span(x.matrix())};
  op.objective = [&] { return dot(probe, global_masked_max_pool(x, mask).values); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    const auto pooled = global_masked_max_pool(x, mask);
    return {flatten(global_masked_max_pool_backward(pooled, 7, probe).matrix())};
  };
  return sample(op, pool_gap(x, mask) < kKinkMargin);
}

GradCheckSample check_loss(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Mat logits = random(4, 5, rng, 3.0);
  std::vector<std::size_t> labels;
  std::uniform_int_distribution<std::size_t> pick(0, 4);
  for (int i = 0; i < 4; ++i) labels.push_back(pick(rng));
  ParamSet<double> params;
  params.add("w", {3, 3}, true).value = random(3, 3, rng);
  params.add("b", {3}, false).value = random(1, 3, rng);
  const double l2 = 0.05;
  DifferentiableOp op;
  op.inputs = {as_span(logits), as_span(params[0].value), as_span(params[1].value)};
  op.objective = [&] { return loss(logits, labels, params, l2); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    Mat dlogits;
    loss(logits, labels, params, l2, &dlogits);
    params.zero_grad();
    add_l2_gradient(params, l2);
    return {flatten(dlogits), flatten(params[0].grad), flatten(params[1].grad)};
  };
  return sample(op, false);
}

GradCheckSample check_attention(AttentionVariant variant, Index heads, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index d = 16, time = 6, k_loc = 3;
  Tensor x = random_tensor(2, time, d, rng);
  const LengthMask mask{{time, 4}, time};
  std::vector<Mat> storage;
  storage.reserve(8);
  AttentionParams<double> p;
  p.variant = variant;
  p.heads = heads;
  p.local_kernel = k_loc;
  AttentionGrads<double> g;
  std::vector<Mat> grads;
  grads.reserve(8);
  auto add = [&](const Matrix<double>*& slot, Matrix<double>*& gslot, Index r, Index c) {
    storage.push_back(random(r, c, rng, 0.5));
    grads.push_back(Mat::Zero(r, c));
    slot = &storage.back();
    gslot = &grads.back();
  };
  add(p.wv, g.wv, d, d);
  add(p.wo, g.wo, d, d);
  if (variant == AttentionVariant::scaled_dot) {
    add(p.wq, g.wq, d, d);
    add(p.wk, g.wk, d, d);
  } else if (variant == AttentionVariant::simplified) {
    add(p.ws, g.ws, d, d);
    add(p.ws_bias, g.ws_bias, 1, d);
  } else {
    add(p.local_w, g.local_w, k_loc * d, d);
    add(p.local_bias, g.local_bias, 1, d);
  }
  const Mat probe = random(2 * time, d, rng);
  DifferentiableOp op;
  op.inputs.push_back(as_span(x.matrix()));
  for (auto& m : storage) op.inputs.push_back(as_span(m));
  op.objective = [&] { return dot(probe, apply_attention(x, p, mask).matrix()); };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    for (auto& m : grads) m.setZero();
    AttentionCache<double> cache;
    apply_attention(x, p, mask, &cache);
    const Tensor dx = apply_attention_backward(x, p, mask, cache, Tensor(2, time, probe), g);
    std::vector<Eigen::VectorXd> out{flatten(dx.matrix())};
    for (const auto& m : grads) out.push_back(flatten(m));
    return out;
  };
  return sample(op, false);
}

/// Kink margin over every ReLU and the pool of one model forward pass.
double model_margin(const ForwardCache<double>& c, const ModelConfig& cfg) {
  double margin = pool_gap(c.scores, c.mask);
  Mat skip_sum = Mat::Zero(c.skip_sum.matrix().rows(), c.skip_sum.channels());
  for (const auto& block : c.blocks) {
    margin = std::min(margin, min_abs(block.pre_activation.matrix()));
    skip_sum += block.skip.matrix();
  }
  margin = std::min(margin, min_abs_nonzero(skip_sum));
  if (cfg.init_activation) margin = std::min(margin, min_abs(c.init_pre.matrix()));
  return margin;
}

GradCheckSample check_model(const std::string& variant, AttentionPlacement placement,
                            std::uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.embed_dim = 4;
  cfg.init_kernel = 3;
  cfg.stack_layers = 2;
  cfg.stack_kernel = 3;
  cfg.stack_channels = 8;
  cfg.num_classes = 3;
  cfg.attention = variant_attention(variant);
  cfg.attention.placement = placement;
  cfg.dropout_p = 0.1;
  cfg.l2_scale = 1e-2;
  cfg.seed = seed;
  Model<double> model(cfg);
  std::mt19937_64 rng(seed + 1);
  for (auto& p : model.params()) {
    if (!p.decay && p.name != "embedding") p.value = random(p.value.rows(), p.value.cols(), rng, 0.1);
    // Sharper attention; near-uniform weights leave pooled scores almost
    // tied across time.
    if (p.name == "attention.wq" || p.name == "attention.wk") p.value *= 5.0;
  }
  const Index time = 8;
  IdMatrix ids = IdMatrix::Zero(2, time);
  const LengthMask mask{{time, 5}, time};
  std::uniform_int_distribution<std::int32_t> pick(1, 11);
  for (Index b = 0; b < 2; ++b) {
    for (Index t = 0; t < mask.length(b); ++t) ids(b, t) = pick(rng);
  }
  const std::vector<std::size_t> labels{0, 2};
  const std::uint64_t drop_seed = seed + 2;

  DifferentiableOp op;
  for (auto& p : model.params()) {
    if (p.name == "embedding") {
      op.inputs.push_back(std::span<double>(p.value.data() + p.value.cols(),
                                            static_cast<std::size_t>(p.value.size() - p.value.cols())));
    } else {
      op.inputs.push_back(as_span(p.value));
    }
  }
  op.objective = [&] {
    std::mt19937_64 drop(drop_seed);
    return loss(model.forward(ids, mask, true, &drop), labels, model.params(), cfg.l2_scale);
  };
  op.gradient = [&]() -> std::vector<Eigen::VectorXd> {
    std::mt19937_64 drop(drop_seed);
    ForwardCache<double> cache;
    const Mat logits = model.forward(ids, mask, true, &drop, cache);
    Mat dlogits;
    loss(logits, labels, model.params(), cfg.l2_scale, &dlogits);
    model.params().zero_grad();
    model.backward(cache, dlogits);
    add_l2_gradient(model.params(), cfg.l2_scale);
    std::vector<Eigen::VectorXd> out;
    for (const auto& p : model.params()) {
      out.push_back(p.name == "embedding" ? flatten(p.grad.bottomRows(p.grad.rows() - 1))
                                          : flatten(p.grad));
    }
    return out;
  };
  std::mt19937_64 drop(drop_seed);
  ForwardCache<double> cache;
  model.forward(ids, mask, true, &drop, cache);
  return sample(op, model_margin(cache, cfg) < kKinkMargin);
}

}  // namespace

std::vector<GradCheckCase> default_gradcheck_cases() {
  std::vector<GradCheckCase> cases{
      {"matmul", check_matmul},
      {"softmax", check_softmax},
      {"embed", check_embed},
      {"causal_dilated_conv", check_conv},
      {"lrn_relu", check_lrn},
      {"residual_dilated_block", check_residual_block},
      {"skip_aggregate", check_skip_aggregate},
      {"pointwise_conv", check_pointwise},
      {"spatial_dropout", check_dropout},
      {"global_masked_max_pool", check_pool},
      {"loss", check_loss},
  };
  const std::pair<const char*, AttentionVariant> variants[] = {
      {"scaled_dot_attention", AttentionVariant::scaled_dot},
      {"simplified_attention", AttentionVariant::simplified},
      {"local_attention", AttentionVariant::local}};
  for (const auto& [name, variant] : variants) {
    for (Index heads : {1, 8}) {
      const AttentionVariant v = variant;
      cases.push_back({std::string(name) + "/h" + std::to_string(heads),
                       [v, heads](std::uint64_t seed) { return check_attention(v, heads, seed); }});
    }
  }
  for (const std::string& variant : variant_names()) {
    cases.push_back({"model/" + variant, [variant](std::uint64_t seed) {
                       return check_model(variant, AttentionPlacement::before_output, seed);
                     }});
  }
  for (const std::string variant : {"dot1", "simp1", "local1"}) {
    cases.push_back({"model/" + variant + "@after_output", [variant](std::uint64_t seed) {
                       return check_model(variant, AttentionPlacement::after_output, seed);
                     }});
  }
  return cases;
}

GradCheckReport run_gradcheck(const std::vector<GradCheckCase>& cases, double tolerance) {
  GradCheckReport report;
  const auto start = std::chrono::steady_clock::now();
  for (const GradCheckCase& c : cases) {
    GradCheckRow row;
    row.name = c.name;
    try {
      bool done = false;
      for (int attempt = 0; attempt < kMaxSamples && !done; ++attempt) {
        const GradCheckSample s = c.run(1000 + static_cast<std::uint64_t>(attempt));
        if (s.near_kink) continue;
        row.max_rel_err = s.max_rel_err;
        row.passed = s.max_rel_err <= tolerance;
        done = true;
      }
      if (!done) row.error = "every sample was near a kink";
    } catch (const std::exception& e) {
      row.error = e.what();
      row.passed = false;
    }
    report.passed = report.passed && row.passed;
    report.rows.push_back(std::move(row));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string format_gradcheck(const GradCheckReport& report) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-36s %14s  %s\n", "operation", "max_rel_err", "status");
  os << buf;
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof buf, "%-36s %14.3e  %s%s%s\n", row.name.c_str(), row.max_rel_err,
                  row.passed ? "ok" : "FAIL", row.error.empty() ? "" : "  ", row.error.c_str());
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "\n%s in %.2f s\n", report.passed ? "all passed" : "FAILED",
                report.seconds);
  os << buf;
  return os.str();
}

}  // namespace fcn
