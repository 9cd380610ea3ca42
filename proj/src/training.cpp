#include "fcn/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <set>
#include <thread>

namespace fcn {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(l2_scale >= 0.0)) throw ConfigError("l2_scale must be non-negative");
  if (bucket_width < 0) throw ConfigError("bucket_width must be non-negative");
}

nlohmann::json to_json(const TrainConfig& tc) {
  return {{"batch_size", tc.batch_size},     {"epochs", tc.epochs},
          {"learning_rate", tc.learning_rate}, {"adam_beta1", tc.adam_beta1},
          {"adam_beta2", tc.adam_beta2},     {"adam_eps", tc.adam_eps},
          {"l2_scale", tc.l2_scale},         {"shuffle_seed", tc.shuffle_seed},
          {"bucket_width", tc.bucket_width}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> known{"batch_size", "epochs",   "learning_rate",
                                           "adam_beta1", "adam_beta2", "adam_eps",
                                           "l2_scale",   "shuffle_seed", "bucket_width"};
  TrainConfig tc;
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in train config");
    try {
      if (key == "batch_size") tc.batch_size = value.get<Index>();
      if (key == "epochs") tc.epochs = value.get<Index>();
      if (key == "learning_rate") tc.learning_rate = value.get<double>();
      if (key == "adam_beta1") tc.adam_beta1 = value.get<double>();
      if (key == "adam_beta2") tc.adam_beta2 = value.get<double>();
      if (key == "adam_eps") tc.adam_eps = value.get<double>();
      if (key == "l2_scale") tc.l2_scale = value.get<double>();
      if (key == "shuffle_seed") tc.shuffle_seed = value.get<std::uint64_t>();
      if (key == "bucket_width") tc.bucket_width = value.get<Index>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config field '" + key + "': " + e.what());
    }
  }
  return tc;
}

EncodedDataset encode_dataset(const std::vector<Sample>& samples, const Vocab& vocab) {
  EncodedDataset out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back({encode(s.text, vocab), s.label});
  return out;
}

Batch make_batch(const EncodedDataset& data, const std::vector<std::size_t>& indices,
                 std::int32_t pad_id) {
  if (indices.empty()) throw InputError("make_batch: no samples");
  std::size_t longest = 0;
  for (std::size_t i : indices) {
    if (data.at(i).ids.empty()) throw InputError("make_batch: empty sequence");
    longest = std::max(longest, data[i].ids.size());
  }
  Batch batch;
  const auto rows = static_cast<Index>(indices.size());
  batch.ids = IdMatrix::Constant(rows, static_cast<Index>(longest), pad_id);
  batch.mask.max_time = static_cast<Index>(longest);
  for (Index r = 0; r < rows; ++r) {
    const EncodedSample& s = data[indices[static_cast<std::size_t>(r)]];
    for (std::size_t t = 0; t < s.ids.size(); ++t) batch.ids(r, static_cast<Index>(t)) = s.ids[t];
    batch.mask.lengths.push_back(static_cast<Index>(s.ids.size()));
    batch.labels.push_back(s.label);
  }
  batch.indices = indices;
  return batch;
}

std::vector<Batch> make_batches(const EncodedDataset& data, const TrainConfig& tc,
                                std::uint64_t seed, std::int32_t pad_id) {
  if (data.empty()) throw InputError("make_batches: empty dataset");
  if (tc.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  if (tc.bucket_width > 0) {
    const auto width = static_cast<std::size_t>(tc.bucket_width);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return data[a].ids.size() / width < data[b].ids.size() / width;
    });
  }
  const auto size = static_cast<std::size_t>(tc.batch_size);
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t start = 0; start < order.size(); start += size) {
    const std::size_t stop = std::min(order.size(), start + size);
    groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                        order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  const std::size_t full = order.size() / size;
  std::shuffle(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(full), rng);
  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(data, g, pad_id));
  return batches;
}

double padding_overhead(const std::vector<Batch>& batches) {
  double padded = 0.0;
  double total = 0.0;
  for (const Batch& b : batches) {
    total += static_cast<double>(b.ids.size());
    for (Index len : b.mask.lengths) padded += static_cast<double>(b.mask.max_time - len);
  }
  return total == 0.0 ? 0.0 : padded / total;
}

double train_step(Model<float>& model, const Batch& batch, AdamState<float>& state,
                  const TrainConfig& tc, std::mt19937_64& dropout_rng) {
  ForwardCache<float> cache;
  const Matrix<float> logits = model.forward(batch.ids, batch.mask, true, &dropout_rng, cache);
  Matrix<float> dlogits;
  const double value = loss(logits, batch.labels, model.params(), tc.l2_scale, &dlogits);
  if (!std::isfinite(value)) {
    model.params().zero_grad();
    throw DivergenceError("non-finite loss at step " + std::to_string(state.step + 1),
                          static_cast<std::size_t>(state.step + 1));
  }
  model.backward(cache, dlogits);
  add_l2_gradient(model.params(), tc.l2_scale);
  adam_update(model.params(), state, tc);
  model.params().zero_grad();
  return value;
}

namespace {

std::vector<Batch> eval_batches(const EncodedDataset& data, Index batch_size) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].ids.size() < data[b].ids.size();
  });
  std::vector<Batch> batches;
  const auto size = static_cast<std::size_t>(std::max<Index>(1, batch_size));
  for (std::size_t start = 0; start < order.size(); start += size) {
    const std::size_t stop = std::min(order.size(), start + size);
    batches.push_back(make_batch(
        data, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(stop))));
  }
  return batches;
}

void score(const Model<float>& model, const Batch& batch, ConfusionMatrix& cm) {
  const Matrix<float> logits = model.forward(batch.ids, batch.mask, false);
  for (Index r = 0; r < logits.rows(); ++r) {
    Index pred = 0;
    logits.row(r).maxCoeff(&pred);
    cm.accumulate(batch.labels[static_cast<std::size_t>(r)], static_cast<std::size_t>(pred));
  }
}

}  // namespace

ConfusionMatrix evaluate(const Model<float>& model, const EncodedDataset& data, Index batch_size,
                         unsigned threads) {
  ConfusionMatrix cm(static_cast<std::size_t>(model.config().num_classes));
  if (data.empty()) return cm;
  const std::vector<Batch> batches = eval_batches(data, batch_size);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(batches.size())));
  if (threads == 1) {
    for (const Batch& b : batches) score(model, b, cm);
    return cm;
  }
  std::vector<ConfusionMatrix> shards(threads, cm);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < batches.size(); i += threads) score(model, batches[i], shards[w]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (unsigned w = 0; w < threads; ++w) {
    if (errors[w]) std::rethrow_exception(errors[w]);
    cm.merge(shards[w]);
  }
  return cm;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"val_macro_f1", r.val_macro_f1},
          {"val_micro_f1", r.val_micro_f1},
          {"seconds", r.seconds}};
}

std::vector<EpochRecord> fit(Model<float>& model, const EncodedDataset& train,
                             const EncodedDataset& val, const TrainConfig& tc,
                             const FitHooks& hooks) {
  tc.validate();
  std::vector<EpochRecord> history;
  if (tc.epochs == 0) return history;
  if (train.empty()) throw InputError("fit: empty training set");
  if (val.empty()) throw InputError("fit: empty validation set");
  AdamState<float> state(model.params());
  std::mt19937_64 dropout_rng(model.config().seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<Matrix<float>> best;
  double best_macro = -1.0;
  for (Index epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<Batch> batches =
        make_batches(train, tc, tc.shuffle_seed + static_cast<std::uint64_t>(epoch),
                     model.config().pad_id);
    double loss_sum = 0.0;
    for (const Batch& b : batches) {
      if (hooks.on_batch) hooks.on_batch(b);
      loss_sum += train_step(model, b, state, tc, dropout_rng) * static_cast<double>(b.labels.size());
    }
    const ConfusionMatrix cm = evaluate(model, val, tc.batch_size);
    EpochRecord rec;
    rec.epoch = static_cast<std::size_t>(epoch);
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val_macro_f1 = macro_f1(cm);
    rec.val_micro_f1 = micro_f1(cm);
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (rec.val_macro_f1 > best_macro) {
      best_macro = rec.val_macro_f1;
      best.clear();
      for (const auto& p : model.params()) best.push_back(p.value);
    }
    history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.stop && hooks.stop(rec)) break;
  }
  for (std::size_t i = 0; i < best.size(); ++i) model.params()[i].value = best[i];
  return history;
}

}  // namespace fcn
