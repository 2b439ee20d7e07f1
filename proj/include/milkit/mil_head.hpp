#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/error.hpp"
#include "milkit/tensor.hpp"

namespace milkit {

/// Where pooling sits relative to the linear head h and the activation sigma.
///   I1: h -> sigma -> pool  (pool per-patch probabilities)
///   I2: h -> pool -> sigma  (pool per-patch logits)
///   E:  pool -> h -> sigma  (pool patch embeddings column-wise)
enum class Ordering { I1, I2, E };
enum class Pooling { Max, TopK, Average };

inline std::string to_string(Ordering o) {
  switch (o) {
    case Ordering::I1: return "I1";
    case Ordering::I2: return "I2";
    case Ordering::E: return "E";
  }
  return "?";
}

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::Max: return "max";
    case Pooling::TopK: return "topk";
    case Pooling::Average: return "average";
  }
  return "?";
}

inline Ordering parse_ordering(const std::string& s) {
  if (s == "I1" || s == "I-1") return Ordering::I1;
  if (s == "I2" || s == "I-2") return Ordering::I2;
  if (s == "E") return Ordering::E;
  throw ValidationError("unknown ordering '" + s + "' (expected I1, I2 or E)");
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "max") return Pooling::Max;
  if (s == "topk") return Pooling::TopK;
  if (s == "average") return Pooling::Average;
  throw ValidationError("unknown pooling '" + s + "' (expected max, topk or average)");
}

struct MilConfig {
  Ordering ordering = Ordering::I1;
  Pooling pooling = Pooling::TopK;
  double k_fraction = 0.25;  // only read for Pooling::TopK
  std::size_t classes = 1;   // C; 1 means binary with a sigmoid
  std::size_t dim = 0;       // D

  /// Number of distinct labels, max(C, 2).
  std::size_t label_count() const { return std::max<std::size_t>(classes, 2); }

  void validate() const {
    require(k_fraction > 0.0 && k_fraction <= 1.0, "mil config: k_fraction must lie in (0, 1]");
    require(classes >= 1, "mil config: classes must be >= 1");
    require(dim >= 1, "mil config: dim must be >= 1");
  }

  bool operator==(const MilConfig&) const = default;
};

struct HeadParams {
  Tensor w;  // C x D
  Tensor b;  // C
};

inline HeadParams zero_head(const MilConfig& config) {
  return HeadParams{Tensor({config.classes, config.dim}), Tensor({config.classes})};
}

inline HeadParams uniform_head(const MilConfig& config, RandomStream& stream) {
  const double bound = std::sqrt(6.0 / static_cast<double>(config.dim));
  return HeadParams{uniform_tensor(stream, {config.classes, config.dim}, -bound, bound), Tensor({config.classes})};
}

struct HeadVars {
  Var w, b;
};

inline HeadVars record_head(Graph& g, const HeadParams& p) { return HeadVars{g.leaf(p.w), g.leaf(p.b)}; }

/// ceil(fraction * M) clamped to [1, M]; the fraction is ignored for max and average pooling.
inline std::size_t resolve_k(double k_fraction, std::size_t instances, Pooling pooling = Pooling::TopK) {
  require(instances >= 1, "resolve_k: bag must contain at least one instance");
  if (pooling == Pooling::Max) return 1;
  if (pooling == Pooling::Average) return instances;
  require(k_fraction > 0.0 && k_fraction <= 1.0, "resolve_k: k_fraction must lie in (0, 1]");
  // Guard against 0.25 * 196 landing a hair above 49 in floating point.
  const double scaled = k_fraction * static_cast<double>(instances);
  const double nearest = std::round(scaled);
  const double count = std::abs(scaled - nearest) < 1e-9 ? nearest : std::ceil(scaled);
  return std::clamp<std::size_t>(static_cast<std::size_t>(count), 1, instances);
}

inline std::size_t resolve_k(const MilConfig& config, std::size_t instances) {
  return resolve_k(config.k_fraction, instances, config.pooling);
}

/// C = 1: label 1 iff p > 0.5. Otherwise argmax, lowest index on ties.
inline std::size_t predict_label(const std::vector<double>& probs, std::size_t classes) {
  require(probs.size() == classes && classes >= 1, "predict_label: probability vector length mismatch");
  if (classes == 1) return probs[0] > 0.5 ? 1 : 0;
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c)
    if (probs[c] > probs[best]) best = c;
  return best;
}

/// h: per-instance logits, M x C.
inline Var project(Graph& g, Var z, const HeadVars& head) { return matmul_bias(g, head.w, z, head.b); }

/// sigma: element-wise sigmoid for C = 1, row softmax otherwise.
inline Var activate(Graph& g, Var logits, std::size_t classes) {
  return classes == 1 ? sigmoid(g, logits) : softmax_rows(g, logits);
}

/// Every intermediate of one MIL forward, as graph handles.
struct HeadTrace {
  Var instance_logits{};                // M x C (I1, I2)
  std::optional<Var> instance_probs;    // M x C (I1)
  Var pooled{};                         // 1 x C for I1/I2, 1 x D for E
  std::optional<Var> pooled_logits;     // 1 x C pre-sigma (I2, E)
  Var probs{};                          // 1 x C
  std::size_t k = 0;
};

namespace detail {

inline void check_bag(const Graph& g, Var z, const HeadVars& head, const MilConfig& config) {
  const Tensor& Z = g.value(z);
  require(Z.rank() == 2, "mil head: bag must be an M x D matrix");
  require(Z.cols() == config.dim, "mil head: bag has " + std::to_string(Z.cols()) + " features, config expects " +
                                      std::to_string(config.dim));
  require(g.value(head.w).shape() == Shape{config.classes, config.dim},
          "mil head: W shape " + shape_string(g.value(head.w).shape()) + " does not match config");
  require(g.value(head.b).size() == config.classes, "mil head: bias length does not match config");
}

}  // namespace detail

inline HeadTrace forward_i1(Graph& g, Var z, const HeadVars& head, const MilConfig& config) {
  require(config.ordering == Ordering::I1, "forward_i1: config ordering is not I1");
  detail::check_bag(g, z, head, config);
  HeadTrace t;
  t.k = resolve_k(config, g.value(z).rows());
  t.instance_logits = project(g, z, head);
  t.instance_probs = activate(g, t.instance_logits, config.classes);
  t.pooled = topk_mean_columns(g, *t.instance_probs, t.k);
  t.probs = t.pooled;
  return t;
}

inline HeadTrace forward_i2(Graph& g, Var z, const HeadVars& head, const MilConfig& config) {
  require(config.ordering == Ordering::I2, "forward_i2: config ordering is not I2");
  detail::check_bag(g, z, head, config);
  HeadTrace t;
  t.k = resolve_k(config, g.value(z).rows());
  t.instance_logits = project(g, z, head);
  t.pooled = topk_mean_columns(g, t.instance_logits, t.k);
  t.pooled_logits = t.pooled;
  t.probs = activate(g, t.pooled, config.classes);
  return t;
}

inline HeadTrace forward_e(Graph& g, Var z, const HeadVars& head, const MilConfig& config) {
  require(config.ordering == Ordering::E, "forward_e: config ordering is not E");
  detail::check_bag(g, z, head, config);
  HeadTrace t;
  t.k = resolve_k(config, g.value(z).rows());
  t.pooled = topk_mean_columns(g, z, t.k);
  t.instance_logits = project(g, z, head);  // not on the prediction path; kept for explanations
  t.pooled_logits = project(g, t.pooled, head);
  t.probs = activate(g, *t.pooled_logits, config.classes);
  return t;
}

inline HeadTrace forward(Graph& g, Var z, const HeadVars& head, const MilConfig& config) {
  switch (config.ordering) {
    case Ordering::I1: return forward_i1(g, z, head, config);
    case Ordering::I2: return forward_i2(g, z, head, config);
    case Ordering::E: return forward_e(g, z, head, config);
  }
  throw ValidationError("forward: unknown ordering");
}

struct Prediction {
  std::vector<double> probs;
  std::size_t label = 0;
  // Per class (I1, I2) or per feature dimension (E): rows chosen by pooling.
  std::vector<std::vector<std::size_t>> selected;
};

inline Prediction make_prediction(const Graph& g, const HeadTrace& trace, const MilConfig& config) {
  Prediction p;
  p.probs = g.value(trace.probs).values();
  p.label = predict_label(p.probs, config.classes);
  p.selected = g.selection(trace.pooled);
  return p;
}

/// Inference on a bag of instance representations (M x D).
inline Prediction predict(const Tensor& bag, const HeadParams& head, const MilConfig& config) {
  Graph g;
  const HeadVars vars = record_head(g, head);
  const HeadTrace trace = forward(g, g.leaf(bag), vars, config);
  return make_prediction(g, trace, config);
}

}  // namespace milkit
