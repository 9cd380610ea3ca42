#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcn/data.hpp"
#include "fcn/metrics.hpp"
#include "fcn/model.hpp"

namespace fcn {

struct TrainConfig {
  Index batch_size = 32;
  Index epochs = 10;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double l2_scale = 1e-4;
  std::uint64_t shuffle_seed = 1;
  Index bucket_width = 16;  // 0 disables length bucketing

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& tc);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EncodedSample {
  std::vector<std::int32_t> ids;
  std::size_t label = 0;
};
using EncodedDataset = std::vector<EncodedSample>;

EncodedDataset encode_dataset(const std::vector<Sample>& samples, const Vocab& vocab);

/// Right-padded batch. `indices` are positions in the source dataset.
struct Batch {
  IdMatrix ids;
  LengthMask mask;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;
};

Batch make_batch(const EncodedDataset& data, const std::vector<std::size_t>& indices,
                 std::int32_t pad_id = Vocab::kPad);

/// Shuffles by `seed`, groups samples of similar length (bucket_width
/// granularity) and cuts batches of batch_size. Full batches come in random
/// order, a trailing partial batch last. Every sample appears exactly once.
std::vector<Batch> make_batches(const EncodedDataset& data, const TrainConfig& tc,
                                std::uint64_t seed, std::int32_t pad_id = Vocab::kPad);

/// Padded cells over total cells.
double padding_overhead(const std::vector<Batch>& batches);

/// L2 penalty l2_scale * sum of squared weight entries (biases and the
/// embedding are excluded), accumulated in 64-bit in parameter order.
template <typename Scalar>
double l2_penalty(const ParamSet<Scalar>& params, double l2_scale) {
  double sum = 0.0;
  for (const auto& p : params) {
    if (!p.decay) continue;
    for (Index i = 0; i < p.value.size(); ++i) {
      const double w = static_cast<double>(p.value.data()[i]);
      sum += w * w;
    }
  }
  return l2_scale * sum;
}

template <typename Scalar>
void add_l2_gradient(ParamSet<Scalar>& params, double l2_scale) {
  const auto scale = static_cast<Scalar>(2.0 * l2_scale);
  for (auto& p : params) {
    if (p.decay) p.grad += scale * p.value;
  }
}

/// Mean softmax cross-entropy over the batch plus the L2 penalty. When
/// `dlogits` is given it receives d(cross-entropy)/d(logits).
template <typename Scalar>
double loss(const Matrix<Scalar>& logits, const std::vector<std::size_t>& labels,
            const ParamSet<Scalar>& params, double l2_scale, Matrix<Scalar>* dlogits = nullptr) {
  if (static_cast<Index>(labels.size()) != logits.rows() || logits.rows() == 0) {
    throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(logits));
  }
  const auto batch = static_cast<double>(logits.rows());
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Index b = 0; b < logits.rows(); ++b) {
    const std::size_t y = labels[static_cast<std::size_t>(b)];
    if (y >= static_cast<std::size_t>(logits.cols())) {
      throw InputError("loss: label " + std::to_string(y) + " outside " +
                       std::to_string(logits.cols()) + " classes");
    }
    const Scalar shift = logits.row(b).maxCoeff();
    const Scalar sum = (logits.row(b).array() - shift).exp().sum();
    const Scalar log_z = shift + std::log(sum);
    total += static_cast<double>(log_z - logits(b, static_cast<Index>(y)));
    if (dlogits) {
      dlogits->row(b) = (logits.row(b).array() - log_z).exp() / static_cast<Scalar>(batch);
      (*dlogits)(b, static_cast<Index>(y)) -= static_cast<Scalar>(1.0 / batch);
    }
  }
  return total / batch + l2_penalty(params, l2_scale);
}

/// First and second moment estimates per parameter.
template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(const ParamSet<Scalar>& params) {
    for (const auto& p : params) {
      m.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
    }
  }
};

/// One bias-corrected Adam update from the accumulated gradients.
template <typename Scalar>
void adam_update(ParamSet<Scalar>& params, AdamState<Scalar>& state, const TrainConfig& tc) {
  if (state.m.size() != params.size()) throw ShapeError("adam: state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const auto b1 = static_cast<Scalar>(tc.adam_beta1);
  const auto b2 = static_cast<Scalar>(tc.adam_beta2);
  const auto correction1 = static_cast<Scalar>(1.0 - std::pow(tc.adam_beta1, t));
  const auto correction2 = static_cast<Scalar>(1.0 - std::pow(tc.adam_beta2, t));
  const auto lr = static_cast<Scalar>(tc.learning_rate);
  const auto eps = static_cast<Scalar>(tc.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (m.array() / correction1) /
                       ((v.array() / correction2).sqrt() + eps);
  }
}

/// Forward, loss, full backward, Adam update; gradients are zeroed
/// afterwards. Returns the batch loss before the update.
double train_step(Model<float>& model, const Batch& batch, AdamState<float>& state,
                  const TrainConfig& tc, std::mt19937_64& dropout_rng);

/// Confusion matrix of argmax predictions, in eval mode. With threads > 1
/// batches are split across workers and the shards merged.
ConfusionMatrix evaluate(const Model<float>& model, const EncodedDataset& data,
                         Index batch_size = 32, unsigned threads = 1);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
  double val_micro_f1 = 0.0;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);

struct FitHooks {
  std::function<void(const Batch&)> on_batch;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Checked after on_epoch; returning true ends training early.
  std::function<bool(const EpochRecord&)> stop;
};

/// Trains for tc.epochs epochs, scoring `val` after each. When training
/// ends the parameters with the best validation macro-F1 (earliest on ties)
/// are restored into `model`.
std::vector<EpochRecord> fit(Model<float>& model, const EncodedDataset& train,
                             const EncodedDataset& val, const TrainConfig& tc,
                             const FitHooks& hooks = {});

}  // namespace fcn
