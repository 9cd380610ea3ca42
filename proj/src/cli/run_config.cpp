#include "run_config.hpp"

#include <fstream>
#include <set>

namespace fcn::cli {

void RunConfig::resolve() {
  const AttentionConfig picked = variant_attention(variant);
  model.attention.variant = picked.variant;
  model.attention.heads = picked.heads;
  model.seed = seed;
  train.shuffle_seed = seed;
  if (model.l2_scale != train.l2_scale) {
    throw ConfigError("model.l2_scale and train.l2_scale disagree");
  }
  if (threads < 1) throw ConfigError("threads must be at least 1");
  train.validate();
}

std::string RunConfig::vocab_path() const {
  if (!paths.vocab.empty()) return paths.vocab;
  return paths.checkpoint + ".vocab.json";
}

RunConfig default_run_config() {
  RunConfig rc;
  rc.model.embed_dim = 16;
  rc.model.init_kernel = 3;
  rc.model.stack_layers = 9;
  rc.model.stack_kernel = 7;
  rc.model.stack_channels = 128;
  rc.model.dropout_p = 0.1;
  rc.model.l2_scale = 1e-4;
  rc.train.l2_scale = 1e-4;
  return rc;
}

nlohmann::json to_json(const RunConfig& rc) {
  return {{"model", to_json(rc.model)},
          {"train", to_json(rc.train)},
          {"paths",
           {{"train", rc.paths.train},
            {"val", rc.paths.val},
            {"test", rc.paths.test},
            {"vocab", rc.paths.vocab},
            {"checkpoint", rc.paths.checkpoint},
            {"report", rc.paths.report},
            {"history", rc.paths.history}}},
          {"variant", rc.variant},
          {"seed", rc.seed},
          {"min_count", rc.min_count},
          {"threads", rc.threads}};
}

namespace {

void read_paths(const nlohmann::json& j, RunPaths& p) {
  if (!j.is_object()) throw ConfigError("paths must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    std::string* slot = key == "train"        ? &p.train
                        : key == "val"        ? &p.val
                        : key == "test"       ? &p.test
                        : key == "vocab"      ? &p.vocab
                        : key == "checkpoint" ? &p.checkpoint
                        : key == "report"     ? &p.report
                        : key == "history"    ? &p.history
                                              : nullptr;
    if (!slot) throw ConfigError("unknown key '" + key + "' in paths");
    if (!value.is_string()) throw ConfigError("paths." + key + " must be a string");
    *slot = value.get<std::string>();
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  static const std::set<std::string> known{"model", "train",     "paths",  "variant",
                                           "seed",  "min_count", "threads"};
  RunConfig rc = default_run_config();
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in run config");
  }
  if (j.contains("model")) {
    nlohmann::json merged = to_json(rc.model);
    if (!j["model"].is_object()) throw ConfigError("model must be a JSON object");
    merged.merge_patch(j["model"]);
    rc.model = model_config_from_json(merged);
  }
  if (j.contains("train")) {
    nlohmann::json merged = to_json(rc.train);
    if (!j["train"].is_object()) throw ConfigError("train must be a JSON object");
    merged.merge_patch(j["train"]);
    rc.train = train_config_from_json(merged);
  }
  if (j.contains("paths")) read_paths(j["paths"], rc.paths);
  try {
    if (j.contains("variant")) rc.variant = j["variant"].get<std::string>();
    if (j.contains("seed")) rc.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("min_count")) rc.min_count = j["min_count"].get<std::size_t>();
    if (j.contains("threads")) rc.threads = j["threads"].get<unsigned>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace fcn::cli
