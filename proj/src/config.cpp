#include "fcn/config.hpp"

#include <set>

namespace fcn {

namespace {

const char* placement_name(AttentionPlacement p) {
  return p == AttentionPlacement::before_output ? "before_output" : "after_output";
}

AttentionPlacement placement_from_string(const std::string& s) {
  if (s == "before_output") return AttentionPlacement::before_output;
  if (s == "after_output") return AttentionPlacement::after_output;
  throw ConfigError("unknown attention placement '" + s + "'");
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be at least 1");
  };
  positive(vocab_size, "vocab_size");
  positive(embed_dim, "embed_dim");
  positive(init_kernel, "init_kernel");
  positive(stack_layers, "stack_layers");
  positive(stack_kernel, "stack_kernel");
  positive(stack_channels, "stack_channels");
  positive(num_classes, "num_classes");
  if (pad_id < 0 || pad_id >= vocab_size) throw ConfigError("pad_id outside vocabulary");
  if (stack_layers > 30) throw ConfigError("stack_layers too large for the dilation schedule");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must be in [0, 1)");
  if (!(l2_scale >= 0.0)) throw ConfigError("l2_scale must be non-negative");
  lrn.validate();
  if (attention.variant != AttentionVariant::none) {
    head_width(attention_width(), attention.heads);
    if (attention.variant == AttentionVariant::local &&
        (attention.local_kernel < 1 || attention.local_kernel % 2 == 0)) {
      throw ConfigError("attention.local_kernel must be odd and positive");
    }
  }
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"none",  "dot1",   "dot8",  "simp1",
                                              "simp8", "local1", "local8"};
  return names;
}

AttentionConfig variant_attention(const std::string& name) {
  AttentionConfig a;
  if (name == "none") return a;
  if (name.size() < 2) throw ConfigError("unknown variant '" + name + "'");
  const char heads = name.back();
  const std::string stem = name.substr(0, name.size() - 1);
  if (heads != '1' && heads != '8') throw ConfigError("unknown variant '" + name + "'");
  a.heads = heads - '0';
  if (stem == "dot") {
    a.variant = AttentionVariant::scaled_dot;
  } else if (stem == "simp") {
    a.variant = AttentionVariant::simplified;
  } else if (stem == "local") {
    a.variant = AttentionVariant::local;
  } else {
    throw ConfigError("unknown variant '" + name + "'");
  }
  return a;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return nlohmann::json{
      {"vocab_size", cfg.vocab_size},
      {"embed_dim", cfg.embed_dim},
      {"init_kernel", cfg.init_kernel},
      {"init_activation", cfg.init_activation},
      {"stack_layers", cfg.stack_layers},
      {"stack_kernel", cfg.stack_kernel},
      {"stack_channels", cfg.stack_channels},
      {"num_classes", cfg.num_classes},
      {"attention",
       {{"variant", to_string(cfg.attention.variant)},
        {"heads", cfg.attention.heads},
        {"local_kernel", cfg.attention.local_kernel},
        {"placement", placement_name(cfg.attention.placement)}}},
      {"dropout_p", cfg.dropout_p},
      {"l2_scale", cfg.l2_scale},
      {"lrn", {{"n", cfg.lrn.n}, {"k", cfg.lrn.k}, {"alpha", cfg.lrn.alpha}, {"beta", cfg.lrn.beta}}},
      {"seed", cfg.seed},
      {"pad_id", cfg.pad_id},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  reject_unknown(j,
                 {"vocab_size", "embed_dim", "init_kernel", "init_activation", "stack_layers",
                  "stack_kernel", "stack_channels", "num_classes", "attention", "dropout_p",
                  "l2_scale", "lrn", "seed", "pad_id"},
                 "model config");
  ModelConfig cfg;
  read(j, "vocab_size", cfg.vocab_size);
  read(j, "embed_dim", cfg.embed_dim);
  read(j, "init_kernel", cfg.init_kernel);
  read(j, "init_activation", cfg.init_activation);
  read(j, "stack_layers", cfg.stack_layers);
  read(j, "stack_kernel", cfg.stack_kernel);
  read(j, "stack_channels", cfg.stack_channels);
  read(j, "num_classes", cfg.num_classes);
  read(j, "dropout_p", cfg.dropout_p);
  read(j, "l2_scale", cfg.l2_scale);
  read(j, "seed", cfg.seed);
  read(j, "pad_id", cfg.pad_id);
  if (j.contains("attention")) {
    const auto& a = j.at("attention");
    if (!a.is_object()) throw ConfigError("attention must be a JSON object");
    reject_unknown(a, {"variant", "heads", "local_kernel", "placement"}, "attention");
    std::string variant = to_string(cfg.attention.variant);
    std::string placement = placement_name(cfg.attention.placement);
    read(a, "variant", variant);
    read(a, "heads", cfg.attention.heads);
    read(a, "local_kernel", cfg.attention.local_kernel);
    read(a, "placement", placement);
    cfg.attention.variant = attention_variant_from_string(variant);
    cfg.attention.placement = placement_from_string(placement);
  }
  if (j.contains("lrn")) {
    const auto& l = j.at("lrn");
    if (!l.is_object()) throw ConfigError("lrn must be a JSON object");
    reject_unknown(l, {"n", "k", "alpha", "beta"}, "lrn");
    read(l, "n", cfg.lrn.n);
    read(l, "k", cfg.lrn.k);
    read(l, "alpha", cfg.lrn.alpha);
    read(l, "beta", cfg.lrn.beta);
  }
  return cfg;
}

}  // namespace fcn
