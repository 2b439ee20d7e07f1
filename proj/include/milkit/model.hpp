#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/dataio.hpp"
#include "milkit/encoder.hpp"
#include "milkit/error.hpp"
#include "milkit/mil_head.hpp"

namespace milkit {

/// Everything needed to score a bag: an optional patch encoder (image bags)
/// followed by the MIL head.
struct Model {
  MilConfig mil;
  std::optional<EncoderParams> encoder;
  HeadParams head;
  std::uint64_t seed = 0;
  bool seed_overridden = false;
  std::size_t epoch = 0;

  DataMode input_mode() const { return encoder ? DataMode::Images : DataMode::Embeddings; }

  /// Parameters in canonical order, the order used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor*>> parameters() { return collect(*this); }
  std::vector<std::pair<std::string, const Tensor*>> parameters() const { return collect(*this); }

  void validate() const {
    mil.validate();
    require(head.w.shape() == Shape{mil.classes, mil.dim}, "model: head W shape does not match config");
    require(head.b.size() == mil.classes, "model: head bias length does not match config");
    if (encoder) {
      encoder->validate();
      require(encoder->dim == mil.dim, "model: encoder output width must equal MIL dim");
    }
  }

  bool operator==(const Model& other) const {
    if (!(mil == other.mil) || seed != other.seed || epoch != other.epoch || encoder.has_value() != other.encoder.has_value())
      return false;
    const auto a = parameters();
    const auto b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].first != b[i].first || !(*a[i].second == *b[i].second)) return false;
    return true;
  }

 private:
  template <typename Self>
  static std::vector<std::pair<std::string, decltype(&std::declval<Self&>().head.w)>> collect(Self& self) {
    std::vector<std::pair<std::string, decltype(&self.head.w)>> out;
    if (self.encoder) {
      out.emplace_back("encoder.w1", &self.encoder->w1);
      out.emplace_back("encoder.b1", &self.encoder->b1);
      out.emplace_back("encoder.w2", &self.encoder->w2);
      out.emplace_back("encoder.b2", &self.encoder->b2);
    }
    out.emplace_back("head.w", &self.head.w);
    out.emplace_back("head.b", &self.head.b);
    return out;
  }
};

struct EncoderShape {
  std::size_t patch = 4;
  std::size_t hidden = 32;
};

enum class HeadInit { Zero, Uniform };

/// Draw order: encoder (if any), then head (uniform init only).
inline Model init_model(const MilConfig& mil, std::optional<EncoderShape> encoder, HeadInit head_init,
                        RandomStream& stream) {
  mil.validate();
  Model m;
  m.mil = mil;
  m.seed = stream.seed();
  if (encoder) m.encoder = init_encoder(encoder->patch, encoder->hidden, mil.dim, stream);
  m.head = head_init == HeadInit::Zero ? zero_head(mil) : uniform_head(mil, stream);
  return m;
}

/// The model's parameters recorded as leaves, in Model::parameters() order.
struct ModelVars {
  std::optional<EncoderVars> encoder;
  std::size_t patch = 0;
  HeadVars head;
  std::vector<Var> all;
};

inline ModelVars record_model(Graph& g, const Model& m) {
  ModelVars v;
  if (m.encoder) {
    v.encoder = record_encoder(g, *m.encoder);
    v.patch = m.encoder->patch;
    v.all = {v.encoder->w1, v.encoder->b1, v.encoder->w2, v.encoder->b2};
  }
  v.head = record_head(g, m.head);
  v.all.push_back(v.head.w);
  v.all.push_back(v.head.b);
  return v;
}

/// Reject datasets whose shape the model cannot consume.
inline void check_compatible(const Model& m, const Dataset& ds) {
  require(ds.mode == m.input_mode(), "model expects " + to_string(m.input_mode()) + " data, dataset is " +
                                         to_string(ds.mode));
  require(ds.classes == m.mil.label_count(), "model predicts " + std::to_string(m.mil.label_count()) +
                                                 " labels, dataset has " + std::to_string(ds.classes));
  if (ds.mode == DataMode::Embeddings) {
    require(ds.dim == m.mil.dim, "shape mismatch: model dim D=" + std::to_string(m.mil.dim) + ", dataset D=" +
                                     std::to_string(ds.dim));
  } else {
    require(ds.patch == m.encoder->patch, "shape mismatch: model patch side " + std::to_string(m.encoder->patch) +
                                              ", dataset patch side " + std::to_string(ds.patch));
  }
}

/// Bag instance matrix Z (M x D): the stored embeddings, or the encoded patches of an image.
inline Var bag_instances(Graph& g, const ModelVars& vars, const BagRecord& bag) {
  if (vars.encoder) {
    const auto* image = std::get_if<ImageGrid>(&bag.payload);
    require(image != nullptr, "bag " + bag.id + ": model expects an image payload");
    return encode(g, g.leaf(patchify(*image, vars.patch)), *vars.encoder);
  }
  const auto* z = std::get_if<Tensor>(&bag.payload);
  require(z != nullptr, "bag " + bag.id + ": model expects an embedding payload");
  return g.leaf(*z);
}

struct BagForward {
  Var instances;
  HeadTrace head;
};

inline BagForward forward_bag(Graph& g, const Model& m, const ModelVars& vars, const BagRecord& bag) {
  const Var z = bag_instances(g, vars, bag);
  return BagForward{z, forward(g, z, vars.head, m.mil)};
}

inline Prediction predict(const Model& m, const BagRecord& bag) {
  Graph g;
  const ModelVars vars = record_model(g, m);
  const BagForward f = forward_bag(g, m, vars, bag);
  return make_prediction(g, f.head, m.mil);
}

}  // namespace milkit
