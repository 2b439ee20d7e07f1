#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iostream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "milkit/dataio.hpp"
#include "milkit/error.hpp"
#include "milkit/explain.hpp"
#include "milkit/selftest.hpp"
#include "milkit/training.hpp"

namespace milkit::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Run configuration
//
// {
//   "data":   {"synthetic": {...}, "validation": {"bags": n, "seed": s}}
//          or {"path": "dir", "validation_path": "dir"},
//             plus optional "train_fraction" and "split_seed" when no validation set is given,
//   "model":  {"ordering", "pooling", "k_fraction", "classes", "dim", "encoder": {"patch", "hidden"}},
//   "train":  {"learning_rate", "beta1", "beta2", "eps", "epochs", "seed", "head_init"},
//   "output": "dir"
// }
// Relative paths are resolved against the directory holding the config file.

struct SyntheticValidation {
  std::size_t bags = 0;
  std::uint64_t seed = 0;
};

struct DataConfig {
  std::optional<SyntheticSpec> synthetic;
  std::optional<SyntheticValidation> validation;
  std::optional<fs::path> path;
  std::optional<fs::path> validation_path;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  DataConfig data;
  MilConfig mil;
  std::optional<EncoderShape> encoder;
  TrainConfig train;
  std::optional<fs::path> output;
  bool seed_overridden = false;
};

namespace detail {

class Section {
 public:
  Section(const json& j, std::string where, std::initializer_list<std::string_view> allowed) : j_(j), where_(std::move(where)) {
    require(j.is_object(), "config: '" + where_ + "' must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
        throw ValidationError("config: unknown key '" + key_path(it.key()) + "'");
      }
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& sub(const std::string& key) const { return j_.at(key); }
  std::string key_path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  std::uint64_t count(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    require(v.is_number_unsigned(), "config: key '" + key_path(key) + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }
  std::uint64_t count(const std::string& key) const {
    require(has(key), "config: missing required key '" + key_path(key) + "'");
    return count(key, 0);
  }

  double number(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    require(v.is_number(), "config: key '" + key_path(key) + "' must be a number");
    return v.get<double>();
  }

  std::string text(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    require(v.is_string(), "config: key '" + key_path(key) + "' must be a string");
    return v.get<std::string>();
  }
  std::string text(const std::string& key) const {
    require(has(key), "config: missing required key '" + key_path(key) + "'");
    return text(key, "");
  }

 private:
  const json& j_;
  std::string where_;
};

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

// Re-throws a ValidationError with the offending config key prefixed.
template <typename F>
auto at_key(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    if (what.rfind("config:", 0) == 0) throw;
    throw ValidationError("config: key '" + key + "': " + what);
  }
}

inline SyntheticSpec parse_synthetic(const json& j) {
  const Section s(j, "data.synthetic",
                  {"mode", "classes", "dim", "patch", "grid", "instances", "bags", "key_min", "key_max", "separation",
                   "noise_sigma", "background_sigma", "seed"});
  SyntheticSpec spec;
  spec.mode = at_key("data.synthetic.mode", [&] { return parse_data_mode(s.text("mode", "embeddings")); });
  spec.classes = s.count("classes", spec.classes);
  spec.dim = s.count("dim", spec.dim);
  spec.patch = s.count("patch", spec.patch);
  spec.grid = s.count("grid", spec.grid);
  spec.instances = s.count("instances", spec.instances);
  spec.bags = s.count("bags", spec.bags);
  spec.key_min = s.count("key_min", spec.key_min);
  spec.key_max = s.count("key_max", spec.key_max);
  spec.separation = s.number("separation", spec.separation);
  spec.noise_sigma = s.number("noise_sigma", spec.noise_sigma);
  spec.background_sigma = s.number("background_sigma", spec.background_sigma);
  spec.seed = s.count("seed", spec.seed);
  at_key("data.synthetic", [&] { spec.validate(); return 0; });
  return spec;
}

inline DataConfig parse_data(const json& j, const fs::path& base) {
  const Section s(j, "data", {"synthetic", "validation", "path", "validation_path", "train_fraction", "split_seed"});
  DataConfig d;
  require(s.has("synthetic") != s.has("path"), "config: 'data' needs exactly one of 'synthetic' or 'path'");
  if (s.has("synthetic")) {
    d.synthetic = parse_synthetic(s.sub("synthetic"));
    require(!s.has("validation_path"), "config: 'data.validation_path' only applies together with 'data.path'");
    if (s.has("validation")) {
      const Section v(s.sub("validation"), "data.validation", {"bags", "seed"});
      d.validation = SyntheticValidation{v.count("bags"), v.count("seed")};
      require(d.validation->bags >= 1, "config: 'data.validation.bags' must be >= 1");
    }
  } else {
    require(!s.has("validation"), "config: 'data.validation' only applies together with 'data.synthetic'");
    d.path = resolve(base, s.text("path"));
    if (s.has("validation_path")) d.validation_path = resolve(base, s.text("validation_path"));
  }
  d.train_fraction = s.number("train_fraction", d.train_fraction);
  require(d.train_fraction > 0.0 && d.train_fraction < 1.0, "config: 'data.train_fraction' must lie in (0, 1)");
  d.split_seed = s.count("split_seed", d.split_seed);
  return d;
}

inline void parse_model(const json& j, RunConfig& cfg) {
  const Section s(j, "model", {"ordering", "pooling", "k_fraction", "classes", "dim", "encoder"});
  cfg.mil.ordering = at_key("model.ordering", [&] { return parse_ordering(s.text("ordering")); });
  cfg.mil.pooling = at_key("model.pooling", [&] { return parse_pooling(s.text("pooling")); });
  cfg.mil.k_fraction = s.number("k_fraction", cfg.mil.k_fraction);
  cfg.mil.classes = s.count("classes");
  cfg.mil.dim = s.count("dim");
  at_key("model", [&] { cfg.mil.validate(); return 0; });
  if (s.has("encoder")) {
    const Section e(s.sub("encoder"), "model.encoder", {"patch", "hidden"});
    cfg.encoder = EncoderShape{e.count("patch"), e.count("hidden")};
    require(cfg.encoder->patch >= 1 && cfg.encoder->hidden >= 1, "config: 'model.encoder' sizes must be >= 1");
  }
}

inline TrainConfig parse_train(const json& j) {
  const Section s(j, "train", {"learning_rate", "beta1", "beta2", "eps", "epochs", "seed", "head_init"});
  TrainConfig t;
  t.learning_rate = s.number("learning_rate", t.learning_rate);
  t.beta1 = s.number("beta1", t.beta1);
  t.beta2 = s.number("beta2", t.beta2);
  t.eps = s.number("eps", t.eps);
  t.epochs = s.count("epochs", t.epochs);
  t.seed = s.count("seed", t.seed);
  const std::string init = s.text("head_init", "zero");
  require(init == "zero" || init == "uniform", "config: key 'train.head_init' must be \"zero\" or \"uniform\"");
  t.head_init = init == "zero" ? HeadInit::Zero : HeadInit::Uniform;
  at_key("train", [&] { t.validate(); return 0; });
  return t;
}

}  // namespace detail

/// Parses and cross-checks a run configuration. Only sections present in
/// the document are filled; `needs` lists the ones the caller requires.
inline RunConfig parse_run_config(const json& j, const fs::path& base_dir, std::initializer_list<std::string_view> needs) {
  const detail::Section top(j, "", {"data", "model", "train", "output"});
  for (auto key : needs) require(top.has(std::string(key)), "config: missing required section '" + std::string(key) + "'");
  RunConfig cfg;
  if (top.has("data")) cfg.data = detail::parse_data(top.sub("data"), base_dir);
  if (top.has("model")) detail::parse_model(top.sub("model"), cfg);
  if (top.has("train")) cfg.train = detail::parse_train(top.sub("train"));
  if (top.has("output")) cfg.output = detail::resolve(base_dir, top.text("output"));

  if (top.has("data") && top.has("model")) {
    if (cfg.data.synthetic) {
      const SyntheticSpec& s = *cfg.data.synthetic;
      require(cfg.mil.label_count() == s.classes, "config: model predicts " + std::to_string(cfg.mil.label_count()) +
                                                      " labels but data.synthetic.classes is " +
                                                      std::to_string(s.classes));
      if (s.mode == DataMode::Embeddings) {
        require(!cfg.encoder, "config: 'model.encoder' is only valid for image data");
        require(cfg.mil.dim == s.dim, "config: model.dim must equal data.synthetic.dim for embedding data");
      } else {
        require(cfg.encoder.has_value(), "config: image data needs 'model.encoder'");
        require(cfg.encoder->patch == s.patch, "config: model.encoder.patch must equal data.synthetic.patch");
      }
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const fs::path& path, std::initializer_list<std::string_view> needs) {
  require(fs::is_regular_file(path), "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path(), needs);
}

/// --seed replaces every seed the run consumes.
inline void override_seed(RunConfig& cfg, std::uint64_t seed) {
  if (cfg.data.synthetic) cfg.data.synthetic->seed = seed;
  if (cfg.data.validation) cfg.data.validation->seed = seed + 1;
  cfg.data.split_seed = seed;
  cfg.train.seed = seed;
  cfg.seed_overridden = true;
}

inline ordered_json to_json(const RunConfig& cfg) {
  ordered_json data;
  if (cfg.data.synthetic) {
    const SyntheticSpec& s = *cfg.data.synthetic;
    data["synthetic"] = {{"mode", to_string(s.mode)}, {"classes", s.classes}, {"dim", s.dim}, {"patch", s.patch},
                         {"grid", s.grid}, {"instances", s.instances}, {"bags", s.bags}, {"key_min", s.key_min},
                         {"key_max", s.key_max}, {"separation", s.separation}, {"noise_sigma", s.noise_sigma},
                         {"background_sigma", s.background_sigma}, {"seed", s.seed}};
    if (cfg.data.validation) data["validation"] = {{"bags", cfg.data.validation->bags}, {"seed", cfg.data.validation->seed}};
  }
  if (cfg.data.path) data["path"] = cfg.data.path->string();
  if (cfg.data.validation_path) data["validation_path"] = cfg.data.validation_path->string();
  data["train_fraction"] = cfg.data.train_fraction;
  data["split_seed"] = cfg.data.split_seed;

  ordered_json model = {{"ordering", to_string(cfg.mil.ordering)}, {"pooling", to_string(cfg.mil.pooling)},
                        {"k_fraction", cfg.mil.k_fraction}, {"classes", cfg.mil.classes}, {"dim", cfg.mil.dim}};
  if (cfg.encoder) model["encoder"] = {{"patch", cfg.encoder->patch}, {"hidden", cfg.encoder->hidden}};

  const TrainConfig& t = cfg.train;
  ordered_json train = {{"learning_rate", t.learning_rate}, {"beta1", t.beta1}, {"beta2", t.beta2}, {"eps", t.eps},
                        {"epochs", t.epochs}, {"seed", t.seed},
                        {"head_init", t.head_init == HeadInit::Zero ? "zero" : "uniform"}};
  return {{"data", data}, {"model", model}, {"train", train}};
}

/// Training and validation sets named by the config: a separate validation
/// source when given, otherwise a stratified split of the training source.
inline std::pair<Dataset, Dataset> load_train_val(const DataConfig& d) {
  Dataset all;
  if (d.synthetic) {
    all = generate(*d.synthetic);
    if (d.validation) {
      SyntheticSpec v = *d.synthetic;
      v.bags = d.validation->bags;
      v.seed = d.validation->seed;
      return {std::move(all), generate(v)};
    }
  } else {
    all = load_dataset(*d.path);
    if (d.validation_path) return {std::move(all), load_dataset(*d.validation_path)};
  }
  RandomStream stream(d.split_seed);
  return split(all, d.train_fraction, stream);
}

inline void check_inputs_exist(const DataConfig& d) {
  if (d.path) require(fs::is_directory(*d.path), "dataset directory not found: " + d.path->string());
  if (d.validation_path) {
    require(fs::is_directory(*d.validation_path), "dataset directory not found: " + d.validation_path->string());
  }
}

inline fs::path output_dir(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  require(cfg.output.has_value(), "no output directory: pass --out or set 'output' in the config");
  return *cfg.output;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen_data(const std::string& config_path, const std::string& out_flag, std::optional<std::uint64_t> seed,
                        std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(config_path, {"data"});
  require(cfg.data.synthetic.has_value(), "gen-data: config needs 'data.synthetic'");
  if (seed) override_seed(cfg, *seed);
  const fs::path dir = output_dir(cfg, out_flag);

  const auto [train, val] = load_train_val(cfg.data);
  save_dataset(dir / "train", train);
  save_dataset(dir / "val", val);

  ordered_json run = {{"command", "gen-data"},
                      {"seed", cfg.data.synthetic->seed},
                      {"seed_overridden", cfg.seed_overridden},
                      {"train_bags", train.bags.size()},
                      {"val_bags", val.bags.size()},
                      {"config", to_json(cfg)["data"]}};
  write_file(dir / "run.json", run.dump(2) + "\n");
  err << "wrote " << train.bags.size() << " training and " << val.bags.size() << " validation bags under "
      << dir.string() << "\n";
  out << ordered_json{{"train", (dir / "train").string()}, {"val", (dir / "val").string()}}.dump() << "\n";
  return 0;
}

inline int cmd_train(const std::string& config_path, const std::string& out_flag, std::optional<std::uint64_t> seed,
                     std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(config_path, {"data", "model", "train"});
  if (seed) override_seed(cfg, *seed);
  check_inputs_exist(cfg.data);
  const fs::path dir = output_dir(cfg, out_flag);

  const auto [train, val] = load_train_val(cfg.data);
  cfg.train.mode = train.mode;
  const FitResult result = fit(train, val, cfg.mil, cfg.train, cfg.encoder, [&](const EpochLog& e) {
    err << "epoch " << e.epoch << " train_loss " << format_double(e.train_loss) << " val_ba "
        << format_double(e.val_ba) << "\n";
  });
  Model model = result.model;
  model.seed_overridden = cfg.seed_overridden;

  std::string log;
  for (const auto& e : result.log) log += epoch_log_line(e);
  const std::string metrics = metrics_json(evaluate(model, val));
  fs::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", model);
  write_file(dir / "epochs.jsonl", log);
  write_file(dir / "metrics.json", metrics);
  ordered_json run = {{"command", "train"},
                      {"seed", cfg.train.seed},
                      {"seed_overridden", cfg.seed_overridden},
                      {"best_epoch", result.best_epoch},
                      {"train_bags", train.bags.size()},
                      {"val_bags", val.bags.size()},
                      {"config", to_json(cfg)}};
  write_file(dir / "run.json", run.dump(2) + "\n");
  out << metrics;
  return 0;
}

inline int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out_path,
                    std::ostream& out, std::ostream&) {
  require(fs::is_regular_file(checkpoint), "checkpoint not found: " + checkpoint);
  require(fs::is_directory(data_dir), "dataset directory not found: " + data_dir);
  const Model model = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data_dir);
  const std::string metrics = metrics_json(evaluate(model, ds));
  const fs::path target(out_path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  write_file(target, metrics);
  out << metrics;
  return 0;
}

inline int cmd_explain(const std::string& checkpoint, const std::string& data_dir, const std::string& bag_id,
                       std::size_t class_index, const std::string& out_dir, const std::string& format, std::ostream& out,
                       std::ostream& err) {
  require(fs::is_regular_file(checkpoint), "checkpoint not found: " + checkpoint);
  require(fs::is_directory(data_dir), "dataset directory not found: " + data_dir);
  const Model model = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data_dir);
  check_compatible(model, ds);
  const auto it = std::find_if(ds.bags.begin(), ds.bags.end(), [&](const BagRecord& b) { return b.id == bag_id; });
  require(it != ds.bags.end(), "explain: no bag with id '" + bag_id + "' in " + data_dir);
  require(class_index < model.mil.label_count(), "explain: --class " + std::to_string(class_index) +
                                                     " out of range for " + std::to_string(model.mil.label_count()) +
                                                     " labels");

  std::vector<std::pair<std::string, Heatmap>> maps;
  const std::string stem = bag_id + "_c" + std::to_string(class_index);
  if (model.mil.ordering != Ordering::E) maps.emplace_back(stem + "_prob", prob_map(model, *it, class_index));
  maps.emplace_back(stem + "_grad", grad_map(model, *it, class_index));
  if (model.mil.ordering == Ordering::E) {
    if (model.mil.pooling == Pooling::Average) {
      err << "explain: skipping selection map, average pooling selects every patch\n";
    } else {
      maps.emplace_back(bag_id + "_selection", selection_map(model, *it));
    }
  }

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  ordered_json written = ordered_json::array();
  for (const auto& [name, map] : maps) {
    if (format == "pgm" || format == "both") {
      export_heatmap(map, dir / (name + ".pgm"), HeatmapFormat::Pgm);
      written.push_back((dir / (name + ".pgm")).string());
    }
    if (format == "csv" || format == "both") {
      export_heatmap(map, dir / (name + ".csv"), HeatmapFormat::Csv);
      written.push_back((dir / (name + ".csv")).string());
    }
  }
  const auto pred = predict(model, *it);
  out << ordered_json{{"bag", bag_id}, {"label", it->label}, {"predicted", pred.label}, {"files", written}}.dump()
      << "\n";
  return 0;
}

inline int cmd_selftest(std::uint64_t seed, std::ostream& out, std::ostream& err) {
  bool all = true;
  for (const auto& r : run_selftest(seed)) {
    out << ordered_json{{"property", r.name}, {"result", r.passed ? "pass" : "fail"}, {"detail", r.detail}}.dump()
        << "\n";
    all = all && r.passed;
  }
  if (!all) err << "selftest: one or more properties failed\n";
  return all ? 0 : 2;
}

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Exit codes: 0 success, 1 usage or validation error,
/// 2 runtime failure.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multiple-instance bag classification: data generation, training, evaluation, explanation.", "milkit"};
  app.require_subcommand(1);

  std::string config, out_path, checkpoint, data_dir, bag, format = "both";
  std::uint64_t seed = 0;
  std::size_t class_index = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset (train/ and val/) from a config");
  gen->add_option("--config", config, "Run config (JSON)")->required();
  gen->add_option("--out", out_path, "Output directory (overrides 'output')");
  auto* gen_seed = gen->add_option("--seed", seed, "Override every seed in the config");

  auto* train = app.add_subcommand("train", "Fit a model; writes model.ckpt, epochs.jsonl, metrics.json, run.json");
  train->add_option("--config", config, "Run config (JSON)")->required();
  train->add_option("--out", out_path, "Output directory (overrides 'output')");
  auto* train_seed = train->add_option("--seed", seed, "Override every seed in the config");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--out", out_path, "Metrics JSON path")->required();

  auto* explain = app.add_subcommand("explain", "Write patch heatmaps for one bag");
  explain->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  explain->add_option("--data", data_dir, "Dataset directory")->required();
  explain->add_option("--bag", bag, "Bag id, e.g. bag_00003")->required();
  explain->add_option("--class", class_index, "Class index to explain")->required();
  explain->add_option("--out", out_path, "Output directory")->required();
  explain->add_option("--format", format, "pgm, csv or both")->check(CLI::IsMember({"pgm", "csv", "both"}));

  auto* selftest = app.add_subcommand("selftest", "Check gradients and pooling properties; prints pass/fail per property");
  selftest->add_option("--seed", seed, "Seed for the random cases");

  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(config, out_path, gen_seed->count() ? std::optional(seed) : std::nullopt, out, err);
    }
    if (train->parsed()) {
      return cmd_train(config, out_path, train_seed->count() ? std::optional(seed) : std::nullopt, out, err);
    }
    if (eval->parsed()) return cmd_eval(checkpoint, data_dir, out_path, out, err);
    if (explain->parsed()) return cmd_explain(checkpoint, data_dir, bag, class_index, out_path, format, out, err);
    if (selftest->parsed()) return cmd_selftest(seed, out, err);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace milkit::cli
