#include "doctest.h"

#include <cmath>
#include <random>

#include "fcn/attention.hpp"
#include "fcn/gradcheck_suite.hpp"

using namespace fcn;
using Mat = Matrix<double>;
using Tensor = Tensor3<double>;

namespace {

Mat random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

Tensor random_tensor(Index b, Index t, Index c, std::mt19937_64& rng) {
  return Tensor(b, t, random_matrix(b * t, c, rng));
}

/// Owns the matrices an AttentionParams points at.
struct Weights {
  Mat wq, wk, wv, wo, ws, ws_bias, local_w, local_bias;

  Weights(Index d, Index k_loc, std::mt19937_64& rng)
      : wq(random_matrix(d, d, rng, 0.5)),
        wk(random_matrix(d, d, rng, 0.5)),
        wv(random_matrix(d, d, rng, 0.5)),
        wo(random_matrix(d, d, rng, 0.5)),
        ws(random_matrix(d, d, rng, 0.5)),
        ws_bias(random_matrix(1, d, rng, 0.5)),
        local_w(random_matrix(k_loc * d, d, rng, 0.5)),
        local_bias(random_matrix(1, d, rng, 0.5)) {}

  AttentionParams<double> params(AttentionVariant v, Index heads, Index k_loc = 1) const {
    AttentionParams<double> p;
    p.variant = v;
    p.heads = heads;
    p.local_kernel = k_loc;
    p.wv = &wv;
    p.wo = &wo;
    if (v == AttentionVariant::scaled_dot) {
      p.wq = &wq;
      p.wk = &wk;
    } else if (v == AttentionVariant::simplified) {
      p.ws = &ws;
      p.ws_bias = &ws_bias;
    } else if (v == AttentionVariant::local) {
      p.local_w = &local_w;
      p.local_bias = &local_bias;
    }
    return p;
  }
};

double row_softmax_weight(const std::vector<double>& logits, std::size_t i) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return std::exp(logits[i] - mx) / z;
}

/// Per-head loop oracle for multi-head scaled dot-product self-attention.
Tensor self_attention_oracle(const Tensor& x, const Weights& w, Index heads,
                             const LengthMask& mask) {
  const Index d = x.channels(), dh = d / heads, time = x.time();
  Tensor concat(x.batch(), time, d);
  for (Index b = 0; b < x.batch(); ++b) {
    const Mat xb = x.slice(b);
    for (Index h = 0; h < heads; ++h) {
      const Mat q = xb * w.wq.middleCols(h * dh, dh);
      const Mat k = xb * w.wk.middleCols(h * dh, dh);
      const Mat v = xb * w.wv.middleCols(h * dh, dh);
      for (Index t = 0; t < time; ++t) {
        std::vector<double> scores;
        for (Index s = 0; s < mask.length(b); ++s) {
          double dot = 0.0;
          for (Index c = 0; c < dh; ++c) dot += q(t, c) * k(s, c);
          scores.push_back(dot / std::sqrt(static_cast<double>(dh)));
        }
        for (Index c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (Index s = 0; s < mask.length(b); ++s)
            acc += row_softmax_weight(scores, static_cast<std::size_t>(s)) * v(s, c);
          concat(b, t, h * dh + c) = acc;
        }
      }
    }
  }
  return Tensor(x.batch(), time, concat.matrix() * w.wo);
}

/// Channel-softmax gating oracle given precomputed logits.
Tensor gating_oracle(const Tensor& x, const Mat& logits, const Weights& w, Index heads) {
  const Index d = x.channels(), dh = d / heads;
  const Mat v = x.matrix() * w.wv;
  Mat gated(v.rows(), d);
  for (Index r = 0; r < v.rows(); ++r)
    for (Index h = 0; h < heads; ++h) {
      std::vector<double> l;
      for (Index c = 0; c < dh; ++c) l.push_back(logits(r, h * dh + c));
      for (Index c = 0; c < dh; ++c)
        gated(r, h * dh + c) = row_softmax_weight(l, static_cast<std::size_t>(c)) * v(r, h * dh + c);
    }
  return Tensor(x.batch(), x.time(), gated * w.wo);
}

double max_diff(const Tensor& a, const Tensor& b) {
  return (a.matrix() - b.matrix()).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("scaled dot attention: single key returns its value") {
  std::mt19937_64 rng(1);
  const Mat q = random_matrix(4, 3, rng), k = random_matrix(1, 3, rng), v = random_matrix(1, 5, rng);
  const auto r = scaled_dot_attention<double>(q, k, v, 1);
  for (Index t = 0; t < 4; ++t) CHECK((r.out.row(t) - v.row(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("scaled dot attention: zero query averages unmasked values") {
  std::mt19937_64 rng(2);
  const Mat k = random_matrix(6, 4, rng), v = random_matrix(6, 3, rng);
  const auto r = scaled_dot_attention<double>(Mat::Zero(2, 4), k, v, 4);
  const Mat mean = v.topRows(4).colwise().mean();
  for (Index t = 0; t < 2; ++t) CHECK((r.out.row(t) - mean).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(r.weights.rightCols(2).isZero(0.0));
}

TEST_CASE("scaled dot attention: two-key example") {
  Mat q(1, 2), k(2, 2), v(2, 2);
  q << 1, 0;
  k << 1, 0, 0, 1;
  v << 10, 0, 0, 10;
  const auto r = scaled_dot_attention<double>(q, k, v, 2);
  const double a = std::exp(1.0 / std::sqrt(2.0));
  CHECK(r.out(0, 0) == doctest::Approx(10.0 * a / (a + 1.0)).epsilon(1e-14));
  CHECK(r.out(0, 1) == doctest::Approx(10.0 / (a + 1.0)).epsilon(1e-14));
  CHECK(r.out(0, 0) == doctest::Approx(6.70).epsilon(1e-3));
  CHECK(r.out(0, 1) == doctest::Approx(3.30).epsilon(1e-3));
}

TEST_CASE("scaled dot attention: fully masked keys are an input error") {
  CHECK_THROWS_AS(scaled_dot_attention<double>(Mat::Zero(1, 2), Mat::Zero(3, 2), Mat::Zero(3, 2), 0),
                  InputError);
}

TEST_CASE("scaled dot attention weights are convex") {
  std::mt19937_64 rng(3);
  const Mat q = random_matrix(7, 4, rng, 3.0), k = random_matrix(7, 4, rng, 3.0);
  const Mat v = random_matrix(7, 2, rng);
  const auto r = scaled_dot_attention<double>(q, k, v, 7);
  for (Index t = 0; t < 7; ++t) {
    CHECK(std::abs(r.weights.row(t).sum() - 1.0) <= 1e-6);
    CHECK(r.weights.row(t).minCoeff() > 0.0);
    for (Index c = 0; c < 2; ++c) {
      CHECK(r.out(t, c) >= v.col(c).minCoeff() - 1e-12);
      CHECK(r.out(t, c) <= v.col(c).maxCoeff() + 1e-12);
    }
  }
}

TEST_CASE("self attention: single position is the value path") {
  std::mt19937_64 rng(4);
  const Weights w(8, 1, rng);
  const Tensor x = random_tensor(2, 1, 8, rng);
  for (Index heads : {1, 8}) {
    const Tensor y = self_attention(x, w.params(AttentionVariant::scaled_dot, heads),
                                    LengthMask::full(2, 1));
    CHECK((y.matrix() - x.matrix() * w.wv * w.wo).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("self attention with identity projections equals scaled dot attention") {
  std::mt19937_64 rng(5);
  Weights w(4, 1, rng);
  w.wq = w.wk = w.wv = w.wo = Mat::Identity(4, 4);
  const Tensor x = random_tensor(2, 5, 4, rng);
  const LengthMask mask{{5, 3}, 5};
  const Tensor y = apply_attention(x, w.params(AttentionVariant::scaled_dot, 1), mask);
  for (Index b = 0; b < 2; ++b) {
    const Mat xb = x.slice(b);
    const auto r = scaled_dot_attention<double>(xb, xb, xb, mask.length(b));
    CHECK((y.slice(b) - r.out).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("self attention h=8 d_model=128 matches a per-head oracle") {
  std::mt19937_64 rng(6);
  const Weights w(128, 1, rng);
  const Tensor x = random_tensor(2, 6, 128, rng);
  const LengthMask mask{{6, 4}, 6};
  const Tensor y = self_attention(x, w.params(AttentionVariant::scaled_dot, 8), mask);
  CHECK(max_diff(y, self_attention_oracle(x, w, 8, mask)) < 1e-10);
}

TEST_CASE("single head reproduces the single-head formula bit for bit") {
  std::mt19937_64 rng(7);
  const Weights w(6, 1, rng);
  const Tensor x = random_tensor(1, 5, 6, rng);
  const Tensor y = self_attention(x, w.params(AttentionVariant::scaled_dot, 1), LengthMask::full(1, 5));
  Mat q, k, v;
  q.noalias() = x.matrix() * w.wq;
  k.noalias() = x.matrix() * w.wk;
  v.noalias() = x.matrix() * w.wv;
  const Mat expected = scaled_dot_attention<double>(q, k, v, 5).out * w.wo;
  CHECK(y.matrix() == expected);
}

TEST_CASE("self attention is equivariant to permutations of valid positions") {
  std::mt19937_64 rng(8);
  const Weights w(8, 1, rng);
  const Tensor x = random_tensor(1, 5, 8, rng);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Tensor xp = x;
  for (Index t = 0; t < 5; ++t) xp.slice(0).row(t) = x.slice(0).row(perm[static_cast<std::size_t>(t)]);
  for (Index heads : {1, 8}) {
    const auto p = w.params(AttentionVariant::scaled_dot, heads);
    const Tensor y = self_attention(x, p, LengthMask::full(1, 5));
    const Tensor yp = self_attention(xp, p, LengthMask::full(1, 5));
    for (Index t = 0; t < 5; ++t) {
      CHECK((yp.slice(0).row(t) - y.slice(0).row(perm[static_cast<std::size_t>(t)]))
                .cwiseAbs()
                .maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("simplified attention trivial cases") {
  std::mt19937_64 rng(9);
  Weights w(8, 1, rng);
  const Tensor x = random_tensor(2, 4, 8, rng);
  const LengthMask mask = LengthMask::full(2, 4);
  // d_head = 1: every weight is one.
  const Tensor y1 = simplified_attention(x, w.params(AttentionVariant::simplified, 8), mask);
  CHECK((y1.matrix() - x.matrix() * w.wv * w.wo).cwiseAbs().maxCoeff() < 1e-12);

  // Constant logits: uniform weights 1/d_head.
  w.ws.setZero();
  w.ws_bias.setConstant(0.3);
  AttentionCache<double> cache;
  const Tensor y2 = simplified_attention(x, w.params(AttentionVariant::simplified, 2), mask, &cache);
  CHECK((cache.channel_weights.array() - 0.25).abs().maxCoeff() < 1e-15);
  CHECK((y2.matrix() - (x.matrix() * w.wv / 4.0) * w.wo).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("simplified attention matches an elementwise oracle") {
  std::mt19937_64 rng(10);
  const Weights w(4, 1, rng);
  const Tensor x = random_tensor(1, 5, 4, rng);
  const Tensor y = simplified_attention(x, w.params(AttentionVariant::simplified, 1),
                                        LengthMask::full(1, 5));
  Mat logits = x.matrix() * w.ws;
  logits.rowwise() += w.ws_bias.row(0);
  CHECK(max_diff(y, gating_oracle(x, logits, w, 1)) < 1e-12);
}

TEST_CASE("local attention with a one-wide window equals simplified attention exactly") {
  std::mt19937_64 rng(11);
  Weights w(16, 1, rng);
  w.local_w = w.ws;
  w.local_bias = w.ws_bias;
  const Tensor x = random_tensor(3, 9, 16, rng);
  const LengthMask mask = LengthMask::full(3, 9);
  for (Index heads : {1, 8}) {
    const Tensor simp = simplified_attention(x, w.params(AttentionVariant::simplified, heads), mask);
    const Tensor loc = local_attention(x, w.params(AttentionVariant::local, heads, 1), mask);
    CHECK(simp.matrix() == loc.matrix());
  }
}

TEST_CASE("local attention with zero kernel gives uniform weights") {
  std::mt19937_64 rng(12);
  Weights w(8, 3, rng);
  w.local_w.setZero();
  w.local_bias.setConstant(-1.5);
  const Tensor x = random_tensor(1, 6, 8, rng);
  AttentionCache<double> cache;
  local_attention(x, w.params(AttentionVariant::local, 8 / 4, 3), LengthMask::full(1, 6), &cache);
  CHECK((cache.channel_weights.array() - 0.25).abs().maxCoeff() < 1e-15);
}

TEST_CASE("local attention matches a windowed oracle with zero padding") {
  std::mt19937_64 rng(13);
  const Index d = 6, k_loc = 3, time = 7;
  const Weights w(d, k_loc, rng);
  const Tensor x = random_tensor(2, time, d, rng);
  const LengthMask mask{{7, 5}, 7};
  for (Index heads : {1, 2}) {
    const Tensor y = local_attention(x, w.params(AttentionVariant::local, heads, k_loc), mask);
    Mat logits(2 * time, d);
    for (Index b = 0; b < 2; ++b)
      for (Index t = 0; t < time; ++t)
        for (Index o = 0; o < d; ++o) {
          double s = w.local_bias(0, o);
          for (Index j = 0; j < k_loc; ++j) {
            const Index src = t + j - 1;
            if (src < 0 || src >= mask.length(b)) continue;
            for (Index i = 0; i < d; ++i) s += x(b, src, i) * w.local_w(j * d + i, o);
          }
          logits(b * time + t, o) = s;
        }
    const Tensor expected = gating_oracle(x, logits, w, heads);
    for (Index b = 0; b < 2; ++b)
      for (Index t = 0; t < mask.length(b); ++t)
        CHECK((y.slice(b).row(t) - expected.slice(b).row(t)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("channel weights are positive and sum to one per head") {
  std::mt19937_64 rng(14);
  const Weights w(16, 3, rng);
  const Tensor x = random_tensor(2, 5, 16, rng);
  const LengthMask mask{{5, 2}, 5};
  for (auto v : {AttentionVariant::simplified, AttentionVariant::local}) {
    for (Index heads : {1, 8}) {
      AttentionCache<double> cache;
      apply_attention(x, w.params(v, heads, 3), mask, &cache);
      const Index dh = 16 / heads;
      const Mat& cw = cache.channel_weights;
      CHECK(cw.minCoeff() > 0.0);
      for (Index r = 0; r < cw.rows(); ++r)
        for (Index h = 0; h < heads; ++h)
          CHECK(std::abs(cw.row(r).segment(h * dh, dh).sum() - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("padded positions never reach valid outputs") {
  std::mt19937_64 rng(15);
  const Weights w(8, 3, rng);
  const Tensor x = random_tensor(2, 6, 8, rng);
  const LengthMask mask{{6, 3}, 6};
  Tensor noisy = x;
  noisy.slice(1).bottomRows(3).setConstant(50.0);
  for (auto v : {AttentionVariant::none, AttentionVariant::scaled_dot,
                 AttentionVariant::simplified, AttentionVariant::local}) {
    for (Index heads : {1, 8}) {
      const auto p = w.params(v, heads, 3);
      const Tensor a = apply_attention(x, p, mask), b = apply_attention(noisy, p, mask);
      CHECK(a.slice(0) == b.slice(0));
      CHECK(a.slice(1).topRows(3) == b.slice(1).topRows(3));
    }
  }
}

TEST_CASE("apply_attention dispatch and shape audit") {
  std::mt19937_64 rng(16);
  Weights w(16, 3, rng);
  const Tensor x = random_tensor(2, 5, 16, rng);
  const LengthMask mask{{5, 4}, 5};
  CHECK(apply_attention(x, w.params(AttentionVariant::none, 1), mask).matrix() == x.matrix());
  const std::pair<AttentionVariant, Index> variants[] = {
      {AttentionVariant::none, 1},       {AttentionVariant::scaled_dot, 1},
      {AttentionVariant::scaled_dot, 8}, {AttentionVariant::simplified, 1},
      {AttentionVariant::simplified, 8}, {AttentionVariant::local, 1},
      {AttentionVariant::local, 8}};
  for (const auto& [v, heads] : variants) {
    const Tensor y = apply_attention(x, w.params(v, heads, 3), mask);
    CHECK(y.same_shape(x));
    CHECK(y.all_finite());
  }
}

TEST_CASE("head width must divide the model width") {
  CHECK(head_width(128, 8) == 16);
  CHECK_THROWS_AS(head_width(25, 8), ConfigError);
  std::mt19937_64 rng(17);
  const Weights w(6, 1, rng);
  CHECK_THROWS_AS(apply_attention(random_tensor(1, 2, 6, rng),
                                  w.params(AttentionVariant::simplified, 4), LengthMask::full(1, 2)),
                  ConfigError);
}

TEST_CASE("missing and misshaped parameters") {
  std::mt19937_64 rng(18);
  const Weights w(6, 1, rng);
  const Tensor x = random_tensor(1, 2, 6, rng);
  auto p = w.params(AttentionVariant::scaled_dot, 1);
  p.wk = nullptr;
  CHECK_THROWS_AS(apply_attention(x, p, LengthMask::full(1, 2)), ConfigError);
  const Mat wrong = Mat::Zero(6, 5);
  p.wk = &wrong;
  CHECK_THROWS_AS(apply_attention(x, p, LengthMask::full(1, 2)), ShapeError);
}

TEST_CASE("attention gradients pass the 64-bit check") {
  for (const auto& c : default_gradcheck_cases()) {
    if (c.name.find("attention/") == std::string::npos) continue;
    const GradCheckReport r = run_gradcheck({c});
    INFO(c.name);
    CHECK(r.passed);
    CHECK(r.rows[0].max_rel_err <= 1e-4);
  }
}
