#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "fcn/config.hpp"
#include "fcn/training.hpp"

namespace fcn::cli {

struct RunPaths {
  std::string train;
  std::string val;  // empty: score the training set
  std::string test;
  std::string vocab;       // empty: <checkpoint>.vocab.json
  std::string checkpoint;  // --out
  std::string report;
  std::string history;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  RunPaths paths;
  std::string variant = "none";
  std::uint64_t seed = 1;
  std::size_t min_count = 2;
  unsigned threads = 1;

  /// Pushes variant, seed and l2 into the model and train sections and
  /// validates the result.
  void resolve();
  std::string vocab_path() const;
};

/// Paper configuration with the no-attention variant.
RunConfig default_run_config();

nlohmann::json to_json(const RunConfig& rc);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace fcn::cli
