#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fcn/errors.hpp"

namespace fcn {

/// The 25 emoji labels of the ITAmoji task, in the order of its class
/// distribution table, with the reported percentage of test samples.
class LabelRegistry {
 public:
  static const LabelRegistry& itamoji();

  std::size_t size() const { return labels_.size(); }
  const std::string& label(std::size_t id) const { return labels_.at(id); }
  double prior_percent(std::size_t id) const { return priors_.at(id); }
  std::optional<std::size_t> find(std::string_view label) const;
  std::size_t id(std::string_view label) const;

 private:
  LabelRegistry(std::vector<std::string> labels, std::vector<double> priors);

  std::vector<std::string> labels_;
  std::vector<double> priors_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct Sample {
  std::string text;
  std::size_t label = 0;
  std::size_t line = 0;  // 1-based source line, 0 if synthetic
};

/// Code point -> id map. Ids 0 and 1 are reserved for padding and unknown
/// characters; the remaining ids are dense.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;

  Vocab() = default;

  /// Keeps code points seen at least `min_count` times, ordered by
  /// descending frequency, ties by code point.
  static Vocab build(const std::vector<Sample>& samples, std::size_t min_count = 2);

  std::size_t size() const { return 2 + by_id_.size(); }
  std::int32_t id(char32_t cp) const;
  std::optional<char32_t> code_point(std::int32_t id) const;

  /// JSON array of [codepoint, id] pairs.
  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::map<char32_t, std::int32_t> ids_;
  std::vector<char32_t> by_id_;  // code point of id 2, 3, ...
};

/// One JSON object per line with string fields "text" and "label". Blank
/// lines are skipped.
std::vector<Sample> parse_jsonl(std::istream& in,
                                const LabelRegistry& labels = LabelRegistry::itamoji());
std::vector<Sample> load_jsonl(const std::filesystem::path& path,
                               const LabelRegistry& labels = LabelRegistry::itamoji());

/// One id per code point, no padding or truncation.
std::vector<std::int32_t> encode(std::string_view text, const Vocab& vocab);

/// Characters of the vocabulary back to UTF-8; PAD and UNK are dropped.
std::string decode(const std::vector<std::int32_t>& ids, const Vocab& vocab);

struct SynthSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Class marker text used by synth_dataset.
std::string synth_marker(std::size_t label);

/// Separable toy data: each text is random lowercase filler of 5-80 code
/// points with the class marker inserted once at a random position. Both
/// splits hold `samples_per_class` samples per class.
SynthSplit synth_dataset(std::size_t num_classes, std::size_t samples_per_class,
                         std::uint64_t seed);

}  // namespace fcn
