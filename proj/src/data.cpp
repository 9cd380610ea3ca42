#include "fcn/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <unordered_map>

#include "fcn/utf8.hpp"

namespace fcn {

// ---------------------------------------------------------------------------
// LabelRegistry

LabelRegistry::LabelRegistry(std::vector<std::string> labels, std::vector<double> priors)
    : labels_(std::move(labels)), priors_(std::move(priors)) {
  for (std::size_t i = 0; i < labels_.size(); ++i) index_.emplace(labels_[i], i);
}

const LabelRegistry& LabelRegistry::itamoji() {
  static const LabelRegistry registry(
      {"red heart",
       "face with tears of joy",
       "smiling face with heart eyes",
       "kiss mark",
       "winking face",
       "smiling face with smiling eyes",
       "beaming face with smiling eyes",
       "grinning face",
       "face blowing a kiss",
       "smiling face with sunglasses",
       "thumbs up",
       "rolling on the floor laughing",
       "thinking face",
       "blue heart",
       "winking face with tongue",
       "face screaming in fear",
       "flexed biceps",
       "face savoring food",
       "grinning face with sweat",
       "loudly crying face",
       "top arrow",
       "two hearts",
       "sun",
       "rose",
       "sparkles"},
      {20.28, 19.86, 9.45, 1.12, 5.35, 5.13, 4.11, 3.54, 3.34, 2.80, 2.57, 2.18, 2.16,
       2.02,  1.93,  1.78, 1.67, 1.55, 1.52, 1.49, 1.39, 1.36, 1.28, 1.06, 1.06});
  return registry;
}

std::optional<std::size_t> LabelRegistry::find(std::string_view label) const {
  auto it = index_.find(label);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t LabelRegistry::id(std::string_view label) const {
  if (auto id = find(label)) return *id;
  throw DataError("unknown label '" + std::string(label) + "'");
}

// ---------------------------------------------------------------------------
// Vocab

Vocab Vocab::build(const std::vector<Sample>& samples, std::size_t min_count) {
  std::unordered_map<char32_t, std::size_t> counts;
  for (const Sample& s : samples) {
    for (char32_t cp : utf8::decode(s.text)) ++counts[cp];
  }
  std::vector<std::pair<char32_t, std::size_t>> kept;
  for (const auto& [cp, n] : counts) {
    if (n >= min_count) kept.emplace_back(cp, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (const auto& [cp, n] : kept) {
    v.ids_.emplace(cp, static_cast<std::int32_t>(2 + v.by_id_.size()));
    v.by_id_.push_back(cp);
  }
  return v;
}

std::int32_t Vocab::id(char32_t cp) const {
  auto it = ids_.find(cp);
  return it == ids_.end() ? kUnk : it->second;
}

std::optional<char32_t> Vocab::code_point(std::int32_t id) const {
  if (id < 2 || static_cast<std::size_t>(id) >= size()) return std::nullopt;
  return by_id_[static_cast<std::size_t>(id - 2)];
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < by_id_.size(); ++i) {
    arr.push_back({static_cast<std::uint32_t>(by_id_[i]), static_cast<std::int32_t>(i + 2)});
  }
  return arr;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw DataError("vocab must be a JSON array of [codepoint, id] pairs");
  std::map<std::int32_t, char32_t> by_id;
  for (const auto& pair : j) {
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_unsigned() ||
        !pair[1].is_number_integer()) {
      throw DataError("vocab entry " + pair.dump() + " is not a [codepoint, id] pair");
    }
    const auto cp = pair[0].get<std::uint32_t>();
    const auto id = pair[1].get<std::int32_t>();
    if (cp > 0x10FFFF || !by_id.emplace(id, static_cast<char32_t>(cp)).second) {
      throw DataError("vocab entry " + pair.dump() + " is invalid or duplicated");
    }
  }
  Vocab v;
  std::int32_t expected = 2;
  for (const auto& [id, cp] : by_id) {
    if (id != expected++) throw DataError("vocab ids must be dense from 2");
    if (!v.ids_.emplace(cp, id).second) throw DataError("vocab repeats a code point");
    v.by_id_.push_back(cp);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write vocab " + path.string());
  out << to_json().dump() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocab " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("vocab " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// JSONL

std::vector<Sample> parse_jsonl(std::istream& in, const LabelRegistry& labels) {
  std::vector<Sample> samples;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed JSON: ") + e.what(), number);
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("label") ||
        !j["text"].is_string() || !j["label"].is_string()) {
      throw DataError("expected an object with string fields \"text\" and \"label\"", number);
    }
    Sample s;
    s.text = j["text"].get<std::string>();
    if (s.text.empty()) throw DataError("empty text", number);
    const auto label = labels.find(j["label"].get<std::string>());
    if (!label) throw DataError("unknown label '" + j["label"].get<std::string>() + "'", number);
    s.label = *label;
    s.line = number;
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> load_jsonl(const std::filesystem::path& path, const LabelRegistry& labels) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return parse_jsonl(in, labels);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<std::int32_t> encode(std::string_view text, const Vocab& vocab) {
  if (text.empty()) throw InputError("encode: empty text");
  std::vector<std::int32_t> ids;
  for (char32_t cp : utf8::decode(text)) ids.push_back(vocab.id(cp));
  return ids;
}

std::string decode(const std::vector<std::int32_t>& ids, const Vocab& vocab) {
  std::string out;
  for (std::int32_t id : ids) {
    if (auto cp = vocab.code_point(id)) utf8::append(out, *cp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

// Two marker symbols per class; none of them occur in the filler.
constexpr std::string_view kMarkerSymbols =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789#@%&*+=<>?!$^~";
const std::vector<char32_t> kFiller = {
    U'a', U'b', U'c', U'd', U'e', U'f', U'g', U'h', U'i', U'l', U'm', U'n', U'o',
    U'p', U'q', U'r', U's', U't', U'u', U'v', U'z', U' ', U'à', U'è', U'é', U'ì',
    U'ò', U'ù'};

}  // namespace

std::string synth_marker(std::size_t label) {
  if (2 * label + 1 >= kMarkerSymbols.size()) throw InputError("synth_marker: label too large");
  const char a = kMarkerSymbols[2 * label];
  const char b = kMarkerSymbols[2 * label + 1];
  return {a, b, a};
}

SynthSplit synth_dataset(std::size_t num_classes, std::size_t samples_per_class,
                         std::uint64_t seed) {
  if (num_classes < 1 || num_classes > 25) {
    throw InputError("synth_dataset: num_classes must be in [1, 25]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(5, 80);
  std::uniform_int_distribution<std::size_t> pick(0, kFiller.size() - 1);
  auto make = [&](std::size_t label) {
    const std::size_t n = length(rng);
    std::vector<char32_t> filler(n);
    for (auto& cp : filler) cp = kFiller[pick(rng)];
    const std::size_t at = std::uniform_int_distribution<std::size_t>(0, n)(rng);
    std::string text;
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == at) text += synth_marker(label);
      if (i < n) utf8::append(text, filler[i]);
    }
    return Sample{std::move(text), label, 0};
  };
  SynthSplit split;
  for (auto* part : {&split.train, &split.val}) {
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      for (std::size_t c = 0; c < num_classes; ++c) part->push_back(make(c));
    }
  }
  return split;
}

}  // namespace fcn
