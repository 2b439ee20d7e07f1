#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/error.hpp"
#include "milkit/textio.hpp"

namespace milkit {

inline constexpr double kProbabilityFloor = 1e-12;

/// Per-label loss weights, indexed by label (length max(C, 2)).
struct ClassWeights {
  std::vector<double> w;
};

/// Inverse-frequency weights: w_c = total / (labels * n_c).
inline ClassWeights class_weights_from_counts(const std::vector<std::size_t>& counts) {
  require(!counts.empty(), "class weights: no classes");
  double total = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    require(counts[c] >= 1, "class weights: class " + std::to_string(c) + " has no examples");
    total += static_cast<double>(counts[c]);
  }
  ClassWeights out;
  out.w.reserve(counts.size());
  for (auto n : counts) out.w.push_back(total / (static_cast<double>(counts.size()) * static_cast<double>(n)));
  return out;
}

inline ClassWeights uniform_weights(std::size_t labels) { return ClassWeights{std::vector<double>(labels, 1.0)}; }

/// Class-weighted cross entropy on a 1 x C probability node.
///   C >= 2: -w_y log(clamp(p_y))
///   C == 1: -w_1 y log(clamp(p)) - w_0 (1 - y) log(clamp(1 - p))
/// Only the true-class entry is read, so unnormalised pooled probabilities are fine.
inline Var weighted_ce(Graph& g, Var probs, std::size_t label, const ClassWeights& weights) {
  const std::size_t classes = g.value(probs).size();
  const std::size_t labels = std::max<std::size_t>(classes, 2);
  require(label < labels, "weighted_ce: label " + std::to_string(label) + " out of range");
  require(weights.w.size() == labels, "weighted_ce: expected " + std::to_string(labels) + " class weights");
  for (double w : weights.w) require(w > 0.0 && std::isfinite(w), "weighted_ce: weights must be positive");

  Var target = pick(g, probs, classes == 1 ? 0 : label);
  if (classes == 1 && label == 0) target = add_scalar(g, neg(g, target), 1.0);
  const Var clamped = clamp(g, target, kProbabilityFloor, 1.0);
  return scale(g, log(g, clamped), -weights.w[label]);
}

inline double weighted_ce(const std::vector<double>& probs, std::size_t label, const ClassWeights& weights) {
  Graph g;
  const Var p = g.leaf(Tensor({1, probs.size()}, probs));
  return g.value(weighted_ce(g, p, label, weights)).item();
}

/// counts[true][predicted].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t labels) : labels_(labels), counts_(labels * labels, 0) {
    require(labels >= 2, "confusion matrix: need at least two labels");
  }

  std::size_t labels() const { return labels_; }

  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * labels_ + predicted]; }

  void update(std::size_t truth, std::size_t predicted) {
    require(truth < labels_ && predicted < labels_, "confusion matrix: label out of range");
    ++counts_[truth * labels_ + predicted];
  }

  /// Element-wise sum; used to combine shards evaluated independently.
  void merge(const ConfusionMatrix& other) {
    require(other.labels_ == labels_, "confusion matrix: label count mismatch in merge");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t row_total(std::size_t truth) const {
    std::uint64_t t = 0;
    for (std::size_t p = 0; p < labels_; ++p) t += at(truth, p);
    return t;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t labels_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_update(ConfusionMatrix cm, std::size_t truth, std::size_t predicted) {
  cm.update(truth, predicted);
  return cm;
}

struct MetricsReport {
  double ba = 0.0;
  std::vector<double> recalls;
  std::vector<std::vector<std::uint64_t>> confusion;

  bool operator==(const MetricsReport&) const = default;
};

/// Mean per-class recall. A class with no true examples is an error.
inline MetricsReport balanced_accuracy(const ConfusionMatrix& cm) {
  MetricsReport r;
  double acc = 0.0;
  for (std::size_t c = 0; c < cm.labels(); ++c) {
    const auto n = cm.row_total(c);
    if (n == 0) throw ValidationError("balanced accuracy: class " + std::to_string(c) + " has no examples");
    r.recalls.push_back(static_cast<double>(cm.at(c, c)) / static_cast<double>(n));
    acc += r.recalls.back();
    std::vector<std::uint64_t> row;
    for (std::size_t p = 0; p < cm.labels(); ++p) row.push_back(cm.at(c, p));
    r.confusion.push_back(std::move(row));
  }
  r.ba = acc / static_cast<double>(cm.labels());
  return r;
}

inline double balanced_accuracy_from_recalls(const std::vector<double>& recalls) {
  require(!recalls.empty(), "balanced accuracy: no recalls");
  double acc = 0.0;
  for (double r : recalls) acc += r;
  return acc / static_cast<double>(recalls.size());
}

/// {"ba": ..., "recalls": [...], "confusion": [[...]]} with 17 significant digits.
inline std::string metrics_json(const MetricsReport& r) {
  std::string out = "{\"ba\": " + format_double(r.ba) + ", \"recalls\": [";
  for (std::size_t i = 0; i < r.recalls.size(); ++i) out += (i ? ", " : "") + format_double(r.recalls[i]);
  out += "], \"confusion\": [";
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    out += i ? ", [" : "[";
    for (std::size_t j = 0; j < r.confusion[i].size(); ++j) out += (j ? ", " : "") + std::to_string(r.confusion[i][j]);
    out += "]";
  }
  out += "]}\n";
  return out;
}

}  // namespace milkit
