#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "fcn/gradcheck_suite.hpp"
#include "fcn/model.hpp"

using namespace fcn;

namespace {

ModelConfig reference_config(Index vocab) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embed_dim = 16;
  cfg.init_kernel = 3;
  cfg.stack_layers = 9;
  cfg.stack_kernel = 7;
  cfg.stack_channels = 128;
  cfg.num_classes = 25;
  return cfg;
}

ModelConfig tiny_config(const std::string& variant = "none") {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.embed_dim = 4;
  cfg.stack_layers = 2;
  cfg.stack_kernel = 3;
  cfg.stack_channels = 8;
  cfg.num_classes = 5;
  cfg.attention = variant_attention(variant);
  return cfg;
}

IdMatrix random_ids(Index rows, Index cols, Index vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> pick(1, static_cast<std::int32_t>(vocab - 1));
  IdMatrix ids(rows, cols);
  for (Index i = 0; i < ids.size(); ++i) ids.data()[i] = pick(rng);
  return ids;
}

}  // namespace

TEST_CASE("reference configuration parameter count") {
  const Model<float> m(reference_config(100));
  // Sum of shapes written out independently of the allocator.
  const std::size_t embedding = 100 * 16;
  const std::size_t init = 3 * 16 * 128 + 128;
  const std::size_t block = 7 * 128 * 128 + 128 + 128 * 128 + 128;
  const std::size_t output = 128 * 25 + 25;
  CHECK(embedding + init + 9 * block + output == 1193049);
  CHECK(m.params().count() == 1193049);
}

TEST_CASE("receptive field") {
  CHECK(receptive_field(reference_config(10)) == 3069);
  ModelConfig c;
  c.stack_layers = 0;
  c.init_kernel = 1;
  CHECK(receptive_field(c) == 1);
  c.stack_layers = 1;
  c.stack_kernel = 7;
  c.init_kernel = 3;
  CHECK(receptive_field(c) == 9);
}

TEST_CASE("logits have one column per class at any length") {
  const Model<float> m(reference_config(30));
  for (Index t : {Index{1}, Index{3069}}) {
    const IdMatrix ids = random_ids(2, t, 30, 5);
    const Matrix<float> logits = m.forward(ids, LengthMask::full(2, t));
    CHECK(logits.rows() == 2);
    CHECK(logits.cols() == 25);
    CHECK(logits.allFinite());
  }
}

TEST_CASE("initialization is reproducible and within its ranges") {
  const Model<float> a(tiny_config("dot1")), b(tiny_config("dot1"));
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].value == b.params()[i].value);
  }
  ModelConfig other = tiny_config("dot1");
  other.seed = 2;
  CHECK(Model<float>(other).params().at("block0.conv.kernel").value !=
        a.params().at("block0.conv.kernel").value);

  const auto& emb = a.params().at("embedding").value;
  CHECK(emb.row(0).isZero(0.0f));
  CHECK(emb.cwiseAbs().maxCoeff() <= 0.05f);
  CHECK(a.params().at("block0.conv.bias").value.isZero(0.0f));
  // He-uniform over fan_in = taps * channels.
  CHECK(a.params().at("block1.conv.kernel").value.cwiseAbs().maxCoeff() <=
        static_cast<float>(std::sqrt(6.0 / (3 * 8))));
}

TEST_CASE("variant-irrelevant parameters are absent") {
  const auto names = [](const std::string& v) {
    const Model<float> m(tiny_config(v));
    std::vector<std::string> out;
    for (const auto& p : m.params()) out.push_back(p.name);
    return out;
  };
  const auto has = [](const std::vector<std::string>& v, const std::string& n) {
    return std::find(v.begin(), v.end(), n) != v.end();
  };
  const auto none = names("none"), dot = names("dot8"), simp = names("simp1"), loc = names("local8");
  CHECK_FALSE(has(none, "attention.wv"));
  CHECK(has(dot, "attention.wq"));
  CHECK_FALSE(has(dot, "attention.ws"));
  CHECK(has(simp, "attention.ws"));
  CHECK_FALSE(has(simp, "attention.wq"));
  CHECK(has(loc, "attention.local_kernel"));
  CHECK_FALSE(has(loc, "attention.ws"));
}

TEST_CASE("eval forward is deterministic") {
  for (const auto& v : variant_names()) {
    const Model<float> m(tiny_config(v));
    const IdMatrix ids = random_ids(3, 12, 20, 7);
    const LengthMask mask{{12, 5, 9}, 12};
    CHECK(m.forward(ids, mask) == m.forward(ids, mask));
  }
}

TEST_CASE("padded rows match the sequence run alone") {
  const Model<float> m(reference_config(40));
  IdMatrix ids = random_ids(2, 40, 40, 9);
  ids.row(1).tail(33).setZero();
  const Matrix<float> batch = m.forward(ids, LengthMask{{40, 7}, 40});
  const IdMatrix alone = ids.row(1).head(7);
  const Matrix<float> single = m.forward(alone, LengthMask::full(1, 7));
  CHECK((batch.row(1) - single.row(0)).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("causality: later inputs never change earlier activations") {
  const Model<double> m(tiny_config());
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    IdMatrix ids = random_ids(1, 30, 20, 100 + static_cast<std::uint64_t>(trial));
    const Index t = std::uniform_int_distribution<Index>(0, 28)(rng);
    ForwardCache<double> a, b;
    m.forward(ids, LengthMask::full(1, 30), false, nullptr, a);
    for (Index s = t + 1; s < 30; ++s) ids(0, s) = (ids(0, s) % 19) + 1;
    m.forward(ids, LengthMask::full(1, 30), false, nullptr, b);
    CHECK(a.scores.matrix().topRows(t + 1) == b.scores.matrix().topRows(t + 1));
    CHECK(a.skip_sum.matrix().topRows(t + 1) == b.skip_sum.matrix().topRows(t + 1));
  }
}

TEST_CASE("forward input errors") {
  const Model<float> m(tiny_config());
  IdMatrix ids(1, 3);
  ids << 1, 2, 99;
  CHECK_THROWS_AS(m.forward(ids, LengthMask::full(1, 3)), VocabError);
  ids << 1, 2, 3;
  CHECK_THROWS_AS(m.forward(ids, LengthMask::full(1, 3), true), ConfigError);
  CHECK_THROWS_AS(m.forward(ids, LengthMask::full(2, 3)), ShapeError);
}

TEST_CASE("configuration validation") {
  ModelConfig c = tiny_config("dot8");
  c.attention.placement = AttentionPlacement::after_output;  // 5 classes, 8 heads
  CHECK_THROWS_AS(Model<float>{c}, ConfigError);
  c = tiny_config("local1");
  c.attention.local_kernel = 2;
  CHECK_THROWS_AS(Model<float>{c}, ConfigError);
  c = tiny_config();
  c.dropout_p = 1.0;
  CHECK_THROWS_AS(Model<float>{c}, ConfigError);
  CHECK_THROWS_AS(variant_attention("dot4"), ConfigError);
}

TEST_CASE("config JSON round trip") {
  ModelConfig c = tiny_config("local8");
  c.attention.local_kernel = 5;
  c.init_activation = true;
  c.lrn.alpha = 0.25;
  const ModelConfig back = model_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  nlohmann::json j = to_json(c);
  j["surprise"] = 1;
  CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
}

TEST_CASE("cast to double and back is exact") {
  const Model<float> m(tiny_config("simp8"));
  const Model<float> back = m.cast<double>().cast<float>();
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params()[i].value == m.params()[i].value);
  }
}

TEST_CASE("adopting parameters checks names and shapes") {
  const Model<float> m(tiny_config("dot1"));
  CHECK_THROWS_AS(Model<float>(tiny_config("simp1"), m.params()), ConfigError);
  CHECK_NOTHROW(Model<float>(tiny_config("dot1"), m.params()));
}

TEST_CASE("model gradients pass the 64-bit check for every variant") {
  for (const auto& c : default_gradcheck_cases()) {
    if (c.name.rfind("model/", 0) != 0) continue;
    const GradCheckReport r = run_gradcheck({c});
    INFO(c.name);
    CHECK(r.passed);
  }
}
