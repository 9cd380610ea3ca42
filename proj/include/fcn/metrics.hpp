#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>

#include "json.hpp"

#include "fcn/data.hpp"

namespace fcn {

/// Counts of (gold, predicted) pairs; rows are gold classes.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  explicit ConfusionMatrix(std::size_t num_classes = 25);

  void accumulate(std::size_t gold, std::size_t pred);
  /// Elementwise sum; used to combine per-thread shards.
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return static_cast<std::size_t>(counts_.rows()); }
  std::int64_t count(std::size_t gold, std::size_t pred) const;
  std::int64_t total() const { return counts_.sum(); }
  const Counts& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix& other) const { return counts_ == other.counts_; }

 private:
  Counts counts_;
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

/// Precision, recall and F1 of one class; 0/0 ratios are taken as 0.
ClassScores class_scores(const ConfusionMatrix& cm, std::size_t c);

/// Unweighted mean of per-class F1 over every class, present in the gold
/// data or not.
double macro_f1(const ConfusionMatrix& cm);

/// Global F1; for single-label data this is accuracy.
double micro_f1(const ConfusionMatrix& cm);

nlohmann::json report_json(const ConfusionMatrix& cm,
                           const LabelRegistry& labels = LabelRegistry::itamoji());
std::string report_table(const ConfusionMatrix& cm,
                         const LabelRegistry& labels = LabelRegistry::itamoji());

}  // namespace fcn
