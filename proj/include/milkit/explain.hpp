#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "milkit/autodiff.hpp"
#include "milkit/error.hpp"
#include "milkit/model.hpp"
#include "milkit/textio.hpp"

namespace milkit {

enum class HeatmapKind { Probability, Gradient, Selection };

inline std::string to_string(HeatmapKind k) {
  switch (k) {
    case HeatmapKind::Probability: return "probability";
    case HeatmapKind::Gradient: return "gradient";
    case HeatmapKind::Selection: return "selection";
  }
  return "?";
}

/// N x N patch scores in [0, 1], row-major over the patch grid.
struct Heatmap {
  std::size_t grid = 0;
  std::vector<double> values;
  HeatmapKind kind = HeatmapKind::Probability;
  std::size_t class_index = 0;
  std::size_t k_used = 0;
  std::vector<std::size_t> selected;  // pooling-selected patches, ascending

  double at(std::size_t r, std::size_t c) const { return values[r * grid + c]; }
  bool operator==(const Heatmap&) const = default;
};

namespace detail {

inline std::size_t grid_side(std::size_t instances) {
  const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(instances))));
  require(n * n == instances, "heatmap: bag size " + std::to_string(instances) + " is not a square grid");
  return n;
}

inline void check_class(const Model& m, std::size_t class_index) {
  require(class_index < m.mil.label_count(), "explain: class index " + std::to_string(class_index) +
                                                 " out of range for " + std::to_string(m.mil.label_count()) +
                                                 " labels");
}

// Column of a 1 x C or M x C node that scores `class_index`; binary class 0 reads column 0 negated.
inline std::size_t score_column(const Model& m, std::size_t class_index) {
  return m.mil.classes == 1 ? 0 : class_index;
}

inline std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace detail

/// Per-patch probability of `class_index` (instance-level models only). The
/// selected list holds the patches pooled for that class.
inline Heatmap prob_map(const Model& model, const BagRecord& bag, std::size_t class_index) {
  require(model.mil.ordering != Ordering::E,
          "prob_map: embedding-level models have no per-patch probabilities; use selection_map");
  detail::check_class(model, class_index);
  Graph g;
  const ModelVars vars = record_model(g, model);
  const BagForward f = forward_bag(g, model, vars, bag);

  const std::size_t col = detail::score_column(model, class_index);
  const Tensor per_patch = f.head.instance_probs ? g.value(*f.head.instance_probs)
                                                 : g.value(activate(g, f.head.instance_logits, model.mil.classes));
  Heatmap map;
  map.grid = detail::grid_side(per_patch.rows());
  map.kind = HeatmapKind::Probability;
  map.class_index = class_index;
  map.k_used = f.head.k;
  map.values.resize(per_patch.rows());
  for (std::size_t j = 0; j < per_patch.rows(); ++j) {
    const double p = per_patch.at(j, col);
    map.values[j] = (model.mil.classes == 1 && class_index == 0) ? 1.0 - p : p;
  }
  map.selected = detail::sorted(g.selection(f.head.pooled)[col]);
  return map;
}

/// L2 norm of d(class score)/d(z_j) for every patch row, divided by the
/// largest norm. The score is the pooled probability for I1 and the pooled
/// logit (before sigma) for I2 and E.
inline Heatmap grad_map(const Model& model, const BagRecord& bag, std::size_t class_index) {
  detail::check_class(model, class_index);
  Graph g;
  const ModelVars vars = record_model(g, model);
  const BagForward f = forward_bag(g, model, vars, bag);

  const std::size_t col = detail::score_column(model, class_index);
  const Var pooled_score = model.mil.ordering == Ordering::I1 ? f.head.pooled : *f.head.pooled_logits;
  Var score = pick(g, pooled_score, col);
  if (model.mil.classes == 1 && class_index == 0) score = neg(g, score);
  g.backward(score);

  const Tensor dz = g.grad(f.instances);
  Heatmap map;
  map.grid = detail::grid_side(dz.rows());
  map.kind = HeatmapKind::Gradient;
  map.class_index = class_index;
  map.k_used = f.head.k;
  map.values.resize(dz.rows());
  double largest = 0.0;
  for (std::size_t j = 0; j < dz.rows(); ++j) {
    double sq = 0.0;
    for (double v : dz.row(j)) sq += v * v;
    map.values[j] = std::sqrt(sq);
    if (!std::isfinite(map.values[j])) throw NumericError("grad_map: non-finite gradient at patch " + std::to_string(j));
    largest = std::max(largest, map.values[j]);
  }
  if (largest > 0.0)
    for (auto& v : map.values) v /= largest;

  const auto& sel = g.selection(f.head.pooled);
  if (model.mil.ordering == Ordering::E) {
    std::set<std::size_t> all;
    for (const auto& s : sel) all.insert(s.begin(), s.end());
    map.selected.assign(all.begin(), all.end());
  } else {
    map.selected = detail::sorted(sel[col]);
  }
  return map;
}

/// Embedding-level explanation: the fraction of feature dimensions whose
/// column-wise top-k set contains each patch. Values sum to k.
inline Heatmap selection_map(const Model& model, const BagRecord& bag) {
  require(model.mil.ordering == Ordering::E, "selection_map: only defined for embedding-level (E) models");
  require(model.mil.pooling != Pooling::Average,
          "selection_map: average pooling selects every patch; the map carries no information");
  Graph g;
  const ModelVars vars = record_model(g, model);
  const BagForward f = forward_bag(g, model, vars, bag);
  const auto& sel = g.selection(f.head.pooled);
  const std::size_t m = g.value(f.instances).rows();

  Heatmap map;
  map.grid = detail::grid_side(m);
  map.kind = HeatmapKind::Selection;
  map.k_used = f.head.k;
  std::vector<std::size_t> counts(m, 0);
  std::set<std::size_t> all;
  for (const auto& column : sel)
    for (auto j : column) {
      ++counts[j];
      all.insert(j);
    }
  map.values.resize(m);
  for (std::size_t j = 0; j < m; ++j) map.values[j] = static_cast<double>(counts[j]) / static_cast<double>(sel.size());
  map.selected.assign(all.begin(), all.end());
  return map;
}

// ---------------------------------------------------------------------------
// Export

enum class HeatmapFormat { Pgm, Csv };

/// PGM: "P2", N x N, maxval 255, pixel = floor(255 v + 0.5). CSV: N rows, 17 significant digits.
inline std::string format_heatmap(const Heatmap& map, HeatmapFormat format) {
  if (format == HeatmapFormat::Csv) return format_csv(map.values, map.grid);
  Greymap grey{map.grid, map.grid, 255, std::vector<int>(map.values.size())};
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    grey.pixels[i] = static_cast<int>(std::floor(255.0 * std::clamp(map.values[i], 0.0, 1.0) + 0.5));
  }
  return format_pgm(grey);
}

inline std::string heatmap_sidecar(const Heatmap& map) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(map.kind);
  j["class_index"] = map.class_index;
  j["N"] = map.grid;
  j["k_used"] = map.k_used;
  j["selected_indices"] = map.selected;
  if (map.kind == HeatmapKind::Selection) j["note"] = "embedding-level selection-frequency map (extension)";
  return j.dump(2) + "\n";
}

/// Writes the map and a JSON sidecar next to it (same stem, ".json").
inline void export_heatmap(const Heatmap& map, const std::filesystem::path& path, HeatmapFormat format) {
  write_file(path, format_heatmap(map, format));
  auto sidecar = path;
  sidecar.replace_extension(".json");
  write_file(sidecar, heatmap_sidecar(map));
}

}  // namespace milkit
