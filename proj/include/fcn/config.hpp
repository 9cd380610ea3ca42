#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcn/attention.hpp"
#include "fcn/layers.hpp"

namespace fcn {

/// Where self-attention sits in the head of the network.
enum class AttentionPlacement {
  before_output,  // on the aggregated skips, width stack_channels
  after_output,   // on the class scores, width num_classes
};

struct AttentionConfig {
  AttentionVariant variant = AttentionVariant::none;
  Index heads = 1;
  Index local_kernel = 3;
  AttentionPlacement placement = AttentionPlacement::before_output;
};

struct ModelConfig {
  Index vocab_size = 2;
  Index embed_dim = 16;
  Index init_kernel = 3;
  bool init_activation = false;  // LRN+ReLU after the initial causal conv
  Index stack_layers = 9;
  Index stack_kernel = 7;
  Index stack_channels = 128;
  Index num_classes = 25;
  AttentionConfig attention;
  double dropout_p = 0.1;
  double l2_scale = 1e-4;
  LrnParams lrn;
  std::uint64_t seed = 1;
  std::int32_t pad_id = 0;

  /// Width seen by the attention layer under the configured placement.
  Index attention_width() const {
    return attention.placement == AttentionPlacement::before_output ? stack_channels
                                                                    : num_classes;
  }
  void validate() const;
};

/// The seven model variants of the experiments: none, dot1, dot8, simp1,
/// simp8, local1, local8.
AttentionConfig variant_attention(const std::string& name);
const std::vector<std::string>& variant_names();

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace fcn
