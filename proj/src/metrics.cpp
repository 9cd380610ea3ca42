#include "fcn/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace fcn {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : counts_(Counts::Zero(static_cast<Eigen::Index>(num_classes),
                           static_cast<Eigen::Index>(num_classes))) {
  if (num_classes == 0) throw InputError("confusion matrix needs at least one class");
}

void ConfusionMatrix::accumulate(std::size_t gold, std::size_t pred) {
  if (gold >= num_classes() || pred >= num_classes()) {
    throw InputError("confusion matrix: pair (" + std::to_string(gold) + ", " +
                     std::to_string(pred) + ") outside " + std::to_string(num_classes()) +
                     " classes");
  }
  ++counts_(static_cast<Eigen::Index>(gold), static_cast<Eigen::Index>(pred));
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes() != num_classes()) {
    throw ShapeError("confusion matrix: cannot merge " + std::to_string(other.num_classes()) +
                     " classes into " + std::to_string(num_classes()));
  }
  counts_ += other.counts_;
}

std::int64_t ConfusionMatrix::count(std::size_t gold, std::size_t pred) const {
  return counts_(static_cast<Eigen::Index>(gold), static_cast<Eigen::Index>(pred));
}

namespace {
double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace

ClassScores class_scores(const ConfusionMatrix& cm, std::size_t c) {
  const auto i = static_cast<Eigen::Index>(c);
  const std::int64_t tp = cm.counts()(i, i);
  const std::int64_t predicted = cm.counts().col(i).sum();
  const std::int64_t gold = cm.counts().row(i).sum();
  ClassScores s;
  s.precision = ratio(tp, predicted);
  s.recall = ratio(tp, gold);
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                                      : 0.0;
  s.support = gold;
  return s;
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InputError("macro_f1: empty confusion matrix");
  double sum = 0.0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) sum += class_scores(cm, c).f1;
  return sum / static_cast<double>(cm.num_classes());
}

double micro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InputError("micro_f1: empty confusion matrix");
  return ratio(cm.counts().trace(), cm.total());
}

nlohmann::json report_json(const ConfusionMatrix& cm, const LabelRegistry& labels) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const ClassScores s = class_scores(cm, c);
    classes.push_back({{"label", c < labels.size() ? labels.label(c) : std::to_string(c)},
                       {"precision", s.precision},
                       {"recall", s.recall},
                       {"f1", s.f1},
                       {"support", s.support}});
  }
  return {{"per_class", classes},
          {"macro_f1", macro_f1(cm)},
          {"micro_f1", micro_f1(cm)},
          {"total", cm.total()}};
}

std::string report_table(const ConfusionMatrix& cm, const LabelRegistry& labels) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-32s %9s %9s %9s %8s\n", "label", "precision", "recall", "f1",
                "support");
  os << buf;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const ClassScores s = class_scores(cm, c);
    const std::string name = c < labels.size() ? labels.label(c) : std::to_string(c);
    std::snprintf(buf, sizeof buf, "%-32s %9.4f %9.4f %9.4f %8lld\n", name.c_str(), s.precision,
                  s.recall, s.f1, static_cast<long long>(s.support));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "\nmacro F1 %.4f   micro F1 %.4f   samples %lld\n", macro_f1(cm),
                micro_f1(cm), static_cast<long long>(cm.total()));
  os << buf;
  return os.str();
}

}  // namespace fcn
