#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "milkit/autodiff.hpp"
#include "milkit/dataio.hpp"
#include "milkit/error.hpp"
#include "milkit/loss_metrics.hpp"
#include "milkit/model.hpp"
#include "milkit/textio.hpp"

namespace milkit {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  DataMode mode = DataMode::Embeddings;
  HeadInit head_init = HeadInit::Zero;

  void validate() const {
    require(learning_rate > 0.0, "train config: learning_rate must be positive");
    require(epochs >= 1, "train config: epochs must be >= 1");
    require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "train config: betas must lie in (0, 1)");
    require(eps > 0.0, "train config: eps must be positive");
  }
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update. Aborts before touching anything if a
/// gradient is non-finite.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      const TrainConfig& config, std::span<const std::string> names = {}) {
  require(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  require(state.m.size() == params.size(), "adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(grads[i].same_shape(*params[i]) && state.m[i].same_shape(*params[i]),
            "adam_step: shape mismatch for parameter " + std::to_string(i));
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) {
        const std::string name = i < names.size() ? names[i] : "#" + std::to_string(i);
        throw NumericError("adam_step: non-finite gradient in parameter " + name);
      }
    }
  }

  ++state.t;
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Confusion counts over bags [begin, end). Shards over disjoint ranges can be
/// merged with ConfusionMatrix::merge.
inline ConfusionMatrix confusion(const Model& model, const Dataset& ds, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= ds.bags.size(), "confusion: bad bag range");
  ConfusionMatrix cm(model.mil.label_count());
  for (std::size_t i = begin; i < end; ++i) cm.update(ds.bags[i].label, predict(model, ds.bags[i]).label);
  return cm;
}

inline MetricsReport evaluate(const Model& model, const Dataset& ds) {
  check_compatible(model, ds);
  return balanced_accuracy(confusion(model, ds, 0, ds.bags.size()));
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_ba = 0.0;

  bool operator==(const EpochLog&) const = default;
};

/// {"epoch": n, "train_loss": x, "val_ba": y} with 17 significant digits.
inline std::string epoch_log_line(const EpochLog& e) {
  return "{\"epoch\": " + std::to_string(e.epoch) + ", \"train_loss\": " + format_double(e.train_loss) +
         ", \"val_ba\": " + format_double(e.val_ba) + "}\n";
}

struct FitResult {
  Model model;  // parameters from the best validation epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

/// Loss of one bag and, when `grads` is given, the gradient of every parameter.
inline double bag_loss(const Model& model, const BagRecord& bag, const ClassWeights& weights,
                       std::vector<Tensor>* grads = nullptr) {
  Graph g;
  const ModelVars vars = record_model(g, model);
  const BagForward f = forward_bag(g, model, vars, bag);
  const Var loss = weighted_ce(g, f.head.probs, bag.label, weights);
  const double value = g.value(loss).item();
  if (grads) {
    g.backward(loss);
    grads->clear();
    for (Var v : vars.all) grads->push_back(g.grad(v));
  }
  return value;
}

/// Batch-size-1 Adam over the training bags, shuffled per epoch from the seed.
/// Epoch 0 in the log scores the initial parameters without updating them.
/// The returned model is the one with the best validation BA (earliest on ties).
inline FitResult fit(const Dataset& train, const Dataset& val, const MilConfig& mil, const TrainConfig& config,
                     std::optional<EncoderShape> encoder_shape = std::nullopt,
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
  config.validate();
  mil.validate();
  require(!train.bags.empty(), "fit: training set is empty");
  require(!val.bags.empty(), "fit: validation set is empty");
  require(train.mode == config.mode, "fit: dataset mode " + to_string(train.mode) + " does not match train mode " +
                                         to_string(config.mode));
  if (config.mode == DataMode::Images) {
    require(encoder_shape.has_value(), "fit: image training requires encoder dimensions");
    require(encoder_shape->patch == train.patch, "fit: encoder patch side does not match the dataset");
  } else {
    encoder_shape.reset();
  }

  const auto counts = train.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    require(counts[c] > 0, "fit: class " + std::to_string(c) + " has no training bags");
  }
  const ClassWeights weights = class_weights_from_counts(counts);

  RandomStream stream(config.seed);
  Model model = init_model(mil, encoder_shape, config.head_init, stream);
  check_compatible(model, train);
  check_compatible(model, val);

  std::vector<std::string> names;
  for (const auto& [name, ptr] : model.parameters()) names.push_back(name);

  FitResult result;
  {
    double total = 0.0;
    for (const auto& bag : train.bags) total += bag_loss(model, bag, weights);
    result.log.push_back({0, total / static_cast<double>(train.bags.size()), evaluate(model, val).ba});
    if (on_epoch) on_epoch(result.log.back());
  }
  result.model = model;
  double best_ba = result.log.front().val_ba;

  AdamState adam;
  std::vector<std::size_t> order(train.bags.size());
  std::vector<Tensor> grads;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, stream);
    double total = 0.0;
    for (std::size_t idx : order) {
      total += bag_loss(model, train.bags[idx], weights, &grads);
      std::vector<Tensor*> params;
      for (auto& [name, ptr] : model.parameters()) params.push_back(ptr);
      adam_step(params, grads, adam, config, names);
    }
    model.epoch = epoch;
    const EpochLog entry{epoch, total / static_cast<double>(order.size()), evaluate(model, val).ba};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (entry.val_ba > best_ba) {
      best_ba = entry.val_ba;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints:
//   "MILCKPT1" | u64 LE header length | JSON header | f64 LE payload
// Parameter offsets in the header are byte offsets into the payload.

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'L', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline nlohmann::ordered_json mil_to_json(const MilConfig& c) {
  nlohmann::ordered_json j;
  j["ordering"] = to_string(c.ordering);
  j["pooling"] = to_string(c.pooling);
  j["k_fraction"] = c.k_fraction;
  j["classes"] = c.classes;
  j["dim"] = c.dim;
  return j;
}

inline MilConfig mil_from_json(const nlohmann::json& j) {
  MilConfig c;
  c.ordering = parse_ordering(j.at("ordering").get<std::string>());
  c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  c.k_fraction = j.at("k_fraction").get<double>();
  c.classes = j.at("classes").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.validate();
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& model) {
  model.validate();
  nlohmann::ordered_json header;
  header["mil"] = detail::mil_to_json(model.mil);
  if (model.encoder) {
    header["encoder"] = {{"patch", model.encoder->patch}, {"hidden", model.encoder->hidden}, {"dim", model.encoder->dim}};
  } else {
    header["encoder"] = nullptr;
  }
  header["params"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  std::string payload;
  for (const auto& [name, tensor] : model.parameters()) {
    header["params"].push_back({{"name", name}, {"shape", tensor->shape()}, {"offset", offset}});
    for (double v : tensor->data()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
    offset += tensor->size() * 8;
  }
  header["seed"] = model.seed;
  header["seed_overridden"] = model.seed_overridden;
  header["epoch"] = model.epoch;

  const std::string head = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(out, head.size());
  out += head;
  out += payload;
  return out;
}

inline Model deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError("checkpoint: bad magic (expected MILCKPT1)");
  }
  const std::uint64_t header_len = detail::get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint: header length exceeds file size");

  Model model;
  std::vector<std::pair<Shape, std::uint64_t>> declared;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
    model.mil = detail::mil_from_json(header.at("mil"));
    if (!header.at("encoder").is_null()) {
      const auto& e = header.at("encoder");
      EncoderParams p;
      p.patch = e.at("patch").get<std::size_t>();
      p.hidden = e.at("hidden").get<std::size_t>();
      p.dim = e.at("dim").get<std::size_t>();
      require(p.patch > 0 && p.hidden > 0 && p.dim > 0, "checkpoint: encoder dimensions must be positive");
      p.w1 = Tensor({p.hidden, p.patch * p.patch});
      p.b1 = Tensor({p.hidden});
      p.w2 = Tensor({p.dim, p.hidden});
      p.b2 = Tensor({p.dim});
      model.encoder = std::move(p);
    }
    model.head = zero_head(model.mil);
    model.seed = header.at("seed").get<std::uint64_t>();
    model.seed_overridden = header.value("seed_overridden", false);
    model.epoch = header.at("epoch").get<std::size_t>();

    const auto expected = model.parameters();
    const auto& params = header.at("params");
    if (!params.is_array() || params.size() != expected.size()) {
      throw FormatError("checkpoint: parameter manifest does not match the model layout");
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto name = params[i].at("name").get<std::string>();
      const auto shape = params[i].at("shape").get<Shape>();
      if (name != expected[i].first || shape != expected[i].second->shape()) {
        throw FormatError("checkpoint: parameter " + name + " " + shape_string(shape) + " does not match expected " +
                          expected[i].first + " " + shape_string(expected[i].second->shape()));
      }
      declared.emplace_back(shape, params[i].at("offset").get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  const std::string_view payload = bytes.substr(16 + header_len);
  std::uint64_t expected_len = 0;
  for (const auto& [shape, offset] : declared) {
    if (offset != expected_len) throw FormatError("checkpoint: parameter offsets are not contiguous");
    expected_len += shape_size(shape) * 8;
  }
  if (payload.size() != expected_len) {
    throw FormatError("checkpoint: payload length " + std::to_string(payload.size()) + " does not match manifest (" +
                      std::to_string(expected_len) + " bytes)");
  }
  std::size_t at = 0;
  for (auto& [name, tensor] : model.parameters()) {
    for (auto& v : tensor->data()) {
      v = std::bit_cast<double>(detail::get_u64(payload, at));
      if (!std::isfinite(v)) throw FormatError("checkpoint: non-finite value in " + name);
      at += 8;
    }
  }
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  write_file(path, serialize_checkpoint(model));
}

inline Model load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace milkit
