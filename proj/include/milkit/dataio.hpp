#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "milkit/encoder.hpp"
#include "milkit/error.hpp"
#include "milkit/rng.hpp"
#include "milkit/tensor.hpp"
#include "milkit/textio.hpp"

namespace milkit {

enum class DataMode { Embeddings, Images };

inline std::string to_string(DataMode m) { return m == DataMode::Embeddings ? "embeddings" : "images"; }

inline DataMode parse_data_mode(const std::string& s) {
  if (s == "embeddings") return DataMode::Embeddings;
  if (s == "images") return DataMode::Images;
  throw ValidationError("unknown data mode '" + s + "' (expected embeddings or images)");
}

/// Parameters of a synthetic MIL problem. Each bag carries between key_min
/// and key_max key instances of its class; the rest is background.
struct SyntheticSpec {
  DataMode mode = DataMode::Embeddings;
  std::size_t classes = 2;  // number of labels
  std::size_t dim = 16;     // embeddings mode
  std::size_t patch = 4;    // images mode
  std::size_t grid = 7;     // images mode: N, bag holds N*N patches
  std::size_t instances = 49;  // embeddings mode: M
  std::size_t bags = 100;
  std::size_t key_min = 1;
  std::size_t key_max = 1;
  double separation = 6.0;
  double noise_sigma = 1.0;
  double background_sigma = 1.0;
  std::uint64_t seed = 0;

  std::size_t bag_size() const { return mode == DataMode::Images ? grid * grid : instances; }

  void validate() const {
    require(classes >= 2, "synthetic spec: need at least two classes");
    require(bags >= 1, "synthetic spec: bags must be >= 1");
    if (mode == DataMode::Embeddings) {
      require(dim >= 1 && instances >= 1, "synthetic spec: dim and instances must be positive");
      require(classes <= dim, "synthetic spec: one-hot prototypes need classes <= dim");
    } else {
      require(patch >= 1 && grid >= 1, "synthetic spec: patch and grid must be positive");
    }
    require(key_min >= 1 && key_min <= key_max && key_max <= bag_size(),
            "synthetic spec: require 1 <= key_min <= key_max <= bag size");
    require(separation > 0.0, "synthetic spec: separation must be positive");
    require(noise_sigma >= 0.0 && background_sigma > 0.0, "synthetic spec: sigmas must be positive");
  }
};

struct BagRecord {
  std::string id;
  std::size_t label = 0;
  std::variant<Tensor, ImageGrid> payload;
  std::vector<std::uint8_t> key_mask;

  bool operator==(const BagRecord&) const = default;
};

struct Dataset {
  DataMode mode = DataMode::Embeddings;
  std::size_t classes = 2;
  std::size_t dim = 0;     // embeddings mode
  std::size_t patch = 0;   // images mode
  std::size_t grid = 0;    // images mode
  std::size_t instances = 0;
  std::vector<BagRecord> bags;

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (const auto& b : bags) ++counts.at(b.label);
    return counts;
  }

  bool operator==(const Dataset&) const = default;
};

inline std::string bag_id(std::size_t index) {
  std::string digits = std::to_string(index);
  return "bag_" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

/// Pairwise-equidistant class means: scaled one-hot corners, mu_c = separation / sqrt(2) * e_c.
inline std::vector<std::vector<double>> class_prototypes(std::size_t classes, std::size_t dim, double separation) {
  require(classes <= dim, "prototypes: need classes <= dim");
  std::vector<std::vector<double>> mu(classes, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < classes; ++c) mu[c][c] = separation / std::numbers::sqrt2;
  return mu;
}

/// Oriented intensity ramp for class c, on the 1/255 lattice.
/// Orientation pi * c / classes; values span 0.5 +- 0.4.
inline std::vector<double> class_template(std::size_t c, std::size_t classes, std::size_t patch) {
  const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double centre = (static_cast<double>(patch) - 1.0) / 2.0;
  const double reach = centre * (std::abs(ct) + std::abs(st));
  std::vector<double> out(patch * patch);
  for (std::size_t r = 0; r < patch; ++r)
    for (std::size_t col = 0; col < patch; ++col) {
      const double proj = (static_cast<double>(col) - centre) * ct + (static_cast<double>(r) - centre) * st;
      const double t = reach > 0.0 ? proj / reach : 0.0;
      out[r * patch + col] = std::floor(255.0 * (0.5 + 0.4 * t) + 0.5) / 255.0;
    }
  return out;
}

namespace detail {

inline double quantise_pixel(double v) { return std::floor(255.0 * std::clamp(v, 0.0, 1.0) + 0.5) / 255.0; }

// Draws, per bag: one uniform_int for the key count, then a full Fisher-Yates
// shuffle of the instance positions (first m become key instances).
inline std::vector<std::uint8_t> draw_key_mask(const SyntheticSpec& spec, RandomStream& stream) {
  const std::size_t m = spec.bag_size();
  const auto keys = static_cast<std::size_t>(
      stream.uniform_int(static_cast<std::int64_t>(spec.key_min), static_cast<std::int64_t>(spec.key_max)));
  std::vector<std::size_t> positions(m);
  for (std::size_t i = 0; i < m; ++i) positions[i] = i;
  shuffle(positions, stream);
  std::vector<std::uint8_t> mask(m, 0);
  for (std::size_t i = 0; i < keys; ++i) mask[positions[i]] = 1;
  return mask;
}

inline Dataset empty_dataset(const SyntheticSpec& spec) {
  Dataset ds;
  ds.mode = spec.mode;
  ds.classes = spec.classes;
  ds.instances = spec.bag_size();
  if (spec.mode == DataMode::Embeddings) {
    ds.dim = spec.dim;
  } else {
    ds.patch = spec.patch;
    ds.grid = spec.grid;
  }
  return ds;
}

}  // namespace detail

/// Bag i has label i mod classes. Key instances ~ N(mu_label, noise^2 I),
/// background ~ N(0, background^2 I); instance rows drawn in order, D normals each.
inline Dataset gen_embedding_bags(const SyntheticSpec& spec, RandomStream& stream) {
  require(spec.mode == DataMode::Embeddings, "gen_embedding_bags: spec mode is not embeddings");
  spec.validate();
  const auto mu = class_prototypes(spec.classes, spec.dim, spec.separation);
  Dataset ds = detail::empty_dataset(spec);
  ds.bags.reserve(spec.bags);
  for (std::size_t i = 0; i < spec.bags; ++i) {
    BagRecord bag;
    bag.id = bag_id(i);
    bag.label = i % spec.classes;
    bag.key_mask = detail::draw_key_mask(spec, stream);
    Tensor z({spec.instances, spec.dim});
    for (std::size_t j = 0; j < spec.instances; ++j) {
      const bool key = bag.key_mask[j] != 0;
      for (std::size_t d = 0; d < spec.dim; ++d) {
        const double n = stream.normal();
        z.at(j, d) = key ? mu[bag.label][d] + spec.noise_sigma * n : spec.background_sigma * n;
      }
    }
    bag.payload = std::move(z);
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

/// Bag i has label i mod classes. Key patches are the class template plus
/// N(0, noise^2) pixel noise; background patches are 0.5 + N(0, background^2).
/// Pixels are clamped to [0, 1] and snapped to the 1/255 lattice so PGM storage is lossless.
inline Dataset gen_image_bags(const SyntheticSpec& spec, RandomStream& stream) {
  require(spec.mode == DataMode::Images, "gen_image_bags: spec mode is not images");
  spec.validate();
  std::vector<std::vector<double>> templates;
  for (std::size_t c = 0; c < spec.classes; ++c) templates.push_back(class_template(c, spec.classes, spec.patch));

  Dataset ds = detail::empty_dataset(spec);
  const std::size_t side = spec.grid * spec.patch;
  const std::size_t pp = spec.patch * spec.patch;
  for (std::size_t i = 0; i < spec.bags; ++i) {
    BagRecord bag;
    bag.id = bag_id(i);
    bag.label = i % spec.classes;
    bag.key_mask = detail::draw_key_mask(spec, stream);
    Tensor patches({spec.grid * spec.grid, pp});
    for (std::size_t j = 0; j < spec.grid * spec.grid; ++j) {
      const bool key = bag.key_mask[j] != 0;
      for (std::size_t p = 0; p < pp; ++p) {
        const double n = stream.normal();
        const double v = key ? templates[bag.label][p] + spec.noise_sigma * n : 0.5 + spec.background_sigma * n;
        patches.at(j, p) = detail::quantise_pixel(v);
      }
    }
    ImageGrid image = unpatchify(patches, spec.patch);
    require(image.height == side, "gen_image_bags: internal layout error");
    bag.payload = std::move(image);
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

inline Dataset generate(const SyntheticSpec& spec) {
  RandomStream stream(spec.seed);
  return spec.mode == DataMode::Embeddings ? gen_embedding_bags(spec, stream) : gen_image_bags(spec, stream);
}

// ---------------------------------------------------------------------------
// On-disk format: DIR/manifest.json plus one payload file per bag
// (CSV with 17 significant digits for embeddings, ASCII PGM for images).

inline constexpr int kManifestVersion = 1;

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["version"] = kManifestVersion;
  manifest["mode"] = to_string(ds.mode);
  manifest["classes"] = ds.classes;
  manifest["instances"] = ds.instances;
  if (ds.mode == DataMode::Embeddings) {
    manifest["dim"] = ds.dim;
  } else {
    manifest["patch"] = ds.patch;
    manifest["grid"] = ds.grid;
  }
  manifest["bags"] = nlohmann::ordered_json::array();
  for (const auto& bag : ds.bags) {
    const std::string file = bag.id + (ds.mode == DataMode::Embeddings ? ".csv" : ".pgm");
    if (ds.mode == DataMode::Embeddings) {
      const auto& z = std::get<Tensor>(bag.payload);
      write_file(dir / file, format_csv(z.values(), z.cols()));
    } else {
      write_pgm_image(dir / file, std::get<ImageGrid>(bag.payload));
    }
    nlohmann::ordered_json entry;
    entry["id"] = bag.id;
    entry["label"] = bag.label;
    entry["file"] = file;
    entry["key_mask"] = bag.key_mask;
    manifest["bags"].push_back(std::move(entry));
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

namespace detail {

template <typename T>
T manifest_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("manifest: missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("manifest: field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest: invalid JSON: ") + e.what());
  }
  const int version = detail::manifest_field<int>(manifest, "version");
  if (version != kManifestVersion) {
    throw FormatError("manifest: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kManifestVersion) + ")");
  }
  Dataset ds;
  ds.mode = parse_data_mode(detail::manifest_field<std::string>(manifest, "mode"));
  ds.classes = detail::manifest_field<std::size_t>(manifest, "classes");
  ds.instances = detail::manifest_field<std::size_t>(manifest, "instances");
  if (ds.classes < 2) throw FormatError("manifest: classes must be >= 2");
  if (ds.mode == DataMode::Embeddings) {
    ds.dim = detail::manifest_field<std::size_t>(manifest, "dim");
  } else {
    ds.patch = detail::manifest_field<std::size_t>(manifest, "patch");
    ds.grid = detail::manifest_field<std::size_t>(manifest, "grid");
    if (ds.grid * ds.grid != ds.instances) throw FormatError("manifest: instances must equal grid^2");
  }
  if (!manifest.contains("bags") || !manifest["bags"].is_array()) throw FormatError("manifest: missing bags array");

  for (const auto& entry : manifest["bags"]) {
    BagRecord bag;
    bag.id = detail::manifest_field<std::string>(entry, "id");
    bag.label = detail::manifest_field<std::size_t>(entry, "label");
    if (bag.label >= ds.classes) {
      throw FormatError("manifest: bag " + bag.id + " has label " + std::to_string(bag.label) + " out of range");
    }
    for (int flag : detail::manifest_field<std::vector<int>>(entry, "key_mask")) {
      if (flag != 0 && flag != 1) throw FormatError("manifest: bag " + bag.id + " key_mask entries must be 0 or 1");
      bag.key_mask.push_back(static_cast<std::uint8_t>(flag));
    }
    if (bag.key_mask.size() != ds.instances) throw FormatError("manifest: bag " + bag.id + " key_mask length mismatch");
    const auto file = detail::manifest_field<std::string>(entry, "file");
    if (file.find('/') != std::string::npos || file.find("..") != std::string::npos) {
      throw FormatError("manifest: bag file must be a plain name, got '" + file + "'");
    }
    const auto path = dir / file;
    if (!std::filesystem::exists(path)) throw FormatError("manifest: missing payload " + path.string());
    if (ds.mode == DataMode::Embeddings) {
      const CsvTable table = parse_csv(read_file(path));
      if (table.rows != ds.instances || table.cols != ds.dim) {
        throw FormatError("payload " + file + ": expected " + std::to_string(ds.instances) + "x" +
                          std::to_string(ds.dim) + ", found " + std::to_string(table.rows) + "x" +
                          std::to_string(table.cols));
      }
      bag.payload = Tensor({table.rows, table.cols}, table.values);
    } else {
      ImageGrid image = read_pgm_image(path);
      const std::size_t side = ds.grid * ds.patch;
      if (image.height != side || image.width != side) {
        throw FormatError("payload " + file + ": expected " + std::to_string(side) + "x" + std::to_string(side) +
                          " image");
      }
      bag.payload = std::move(image);
    }
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

/// Stratified split: every class is shuffled independently (classes in
/// ascending order) and its first floor(fraction * n_c) bags go to training.
/// Both halves keep the original dataset order.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, RandomStream& stream) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "split: train_fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.bags.size(); ++i) by_class.at(ds.bags[i].label).push_back(i);
  std::vector<std::uint8_t> to_train(ds.bags.size(), 0);
  for (std::size_t c = 0; c < ds.classes; ++c) {
    auto& idx = by_class[c];
    require(idx.size() >= 2, "split: class " + std::to_string(c) + " has fewer than 2 bags");
    shuffle(idx, stream);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n_train; ++i) to_train[idx[i]] = 1;
  }
  Dataset train = ds, val = ds;
  train.bags.clear();
  val.bags.clear();
  for (std::size_t i = 0; i < ds.bags.size(); ++i) (to_train[i] ? train : val).bags.push_back(ds.bags[i]);
  return {std::move(train), std::move(val)};
}

}  // namespace milkit
