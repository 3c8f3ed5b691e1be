#include "fens/pipeline.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "fens/digest.hpp"
#include "fens/errors.hpp"
#include "fens/log.hpp"

namespace fens {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ------------------------------------------------------------ config

json default_config_json() {
  return json::parse(R"({
    "output": "",
    "jobs": 1,
    "dataset": {"name": "glyphs", "kind": "synth", "path": "", "classes": 28, "per_class": 50,
                "height": 32, "width": 32, "seed": 7, "train_fraction": 0.8, "split_seed": 0},
    "preprocess": {"height": 32, "width": 32, "channels": 0, "mean": [0.0], "std": [1.0],
                   "invert": false, "keep_aspect": false},
    "model": {"families": ["mobile", "mnas", "shuffle", "squeeze"], "strategies": ["tfs"],
              "preset": "micro", "width": 1.0},
    "train": {"epochs": 12, "batch_size": 32, "optimizer": "adam", "learning_rate": 0.003,
              "momentum": 0.9, "weight_decay": 0.0, "seed": 1},
    "cv": {"folds": 5, "seed": 0},
    "hpo": {"enabled": false, "max_resource": 9, "eta": 3, "seed": 0, "replacements": 1,
            "learning_rate": [0.0001, 0.1], "batch_size": [16, 32, 64], "optimizer": ["adam", "sgd-momentum"],
            "weight_decay": [0.000001, 0.001], "momentum": [0.8, 0.95]},
    "pretrain": {"name": "glyphs-source", "kind": "synth", "path": "", "classes": 28, "per_class": 50,
                 "height": 32, "width": 32, "seed": 101, "epochs": 5},
    "ensemble": {"best_min_size": 1},
    "bench": {"enabled": false, "batch_size": 32, "repetitions": 30, "warmup": 5}
  })");
}

json merge_config(json base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " '" + where + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object()) {
      base[key] = merge_config(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
  return base;
}

std::vector<std::string> config_leaves(const json& j) {
  std::vector<std::string> out;
  std::function<void(const json&, const std::string&)> walk = [&](const json& node, const std::string& prefix) {
    for (const auto& [key, value] : node.items()) {
      const auto path = prefix.empty() ? key : prefix + "." + key;
      if (value.is_object()) {
        walk(value, path);
      } else {
        out.push_back(path);
      }
    }
  };
  walk(j, "");
  return out;
}

namespace {

DatasetSource source_from_json(const json& j) {
  DatasetSource s;
  s.name = j.at("name").get<std::string>();
  s.kind = j.at("kind").get<std::string>();
  s.path = j.at("path").get<std::string>();
  s.classes = j.at("classes").get<std::int64_t>();
  s.per_class = j.at("per_class").get<std::int64_t>();
  s.height = j.at("height").get<std::int64_t>();
  s.width = j.at("width").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

json source_to_json(const DatasetSource& s) {
  return {{"name", s.name},       {"kind", s.kind},           {"path", s.path},    {"classes", s.classes},
          {"per_class", s.per_class}, {"height", s.height}, {"width", s.width}, {"seed", s.seed}};
}

void validate_source(const DatasetSource& s, const char* what) {
  const std::string w = what;
  if (s.name.empty()) throw ConfigError(w + ".name is empty");
  if (s.kind == "synth") {
    if (s.classes < 2 || s.per_class < 2) throw ConfigError(w + ": synth needs >= 2 classes and >= 2 per class");
    if (s.height < 8 || s.width < 8) throw ConfigError(w + ": synth images must be at least 8x8");
  } else if (s.kind == "csv" || s.kind == "folder") {
    if (s.path.empty()) throw ConfigError(w + ".path is required for kind '" + s.kind + "'");
    if (!fs::exists(s.path)) throw ConfigError(w + ".path '" + s.path + "' does not exist");
  } else {
    throw ConfigError(w + ".kind must be synth, csv or folder, not '" + s.kind + "'");
  }
}

}  // namespace

PipelineConfig config_from_json(const json& input) {
  const json j = merge_config(default_config_json(), input);
  PipelineConfig c;
  try {
    c.output = j.at("output").get<std::string>();
    c.jobs = j.at("jobs").get<std::int64_t>();
    const auto& d = j.at("dataset");
    c.dataset = source_from_json(d);
    c.train_fraction = d.at("train_fraction").get<double>();
    c.split_seed = d.at("split_seed").get<std::uint64_t>();
    c.preprocess = preprocess_from_json(j.at("preprocess"));

    const auto& m = j.at("model");
    c.families.clear();
    for (const auto& f : m.at("families")) c.families.push_back(parse_family(f.get<std::string>()));
    c.strategies.clear();
    for (const auto& s : m.at("strategies")) c.strategies.push_back(parse_strategy(s.get<std::string>()));
    c.preset = parse_preset(m.at("preset").get<std::string>());
    c.width = m.at("width").get<double>();

    const auto& t = j.at("train");
    c.train.epochs = t.at("epochs").get<std::int64_t>();
    c.train.batch_size = t.at("batch_size").get<std::int64_t>();
    c.train.optimizer.kind = parse_optimizer(t.at("optimizer").get<std::string>());
    c.train.optimizer.learning_rate = t.at("learning_rate").get<double>();
    c.train.optimizer.momentum = t.at("momentum").get<double>();
    c.train.optimizer.weight_decay = t.at("weight_decay").get<double>();
    c.train.seed = t.at("seed").get<std::uint64_t>();

    c.folds = j.at("cv").at("folds").get<std::int64_t>();
    c.fold_seed = j.at("cv").at("seed").get<std::uint64_t>();

    const auto& h = j.at("hpo");
    c.hpo = h.at("enabled").get<bool>();
    c.hyperband.max_resource = h.at("max_resource").get<std::int64_t>();
    c.hyperband.eta = h.at("eta").get<std::int64_t>();
    c.hyperband.seed = h.at("seed").get<std::uint64_t>();
    c.hyperband.replacements = h.at("replacements").get<std::int64_t>();
    c.search_space = search_space_from_json(h);

    const auto& p = j.at("pretrain");
    c.pretrain_dataset = source_from_json(p);
    c.pretrain_epochs = p.at("epochs").get<std::int64_t>();

    c.best_min_size = j.at("ensemble").at("best_min_size").get<std::size_t>();

    const auto& b = j.at("bench");
    c.bench = b.at("enabled").get<bool>();
    c.bench_config.batch_size = b.at("batch_size").get<std::int64_t>();
    c.bench_config.repetitions = b.at("repetitions").get<std::int64_t>();
    c.bench_config.warmup = b.at("warmup").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

json config_to_json(const PipelineConfig& c) {
  std::vector<std::string> families, strategies, optimizers;
  for (auto f : c.families) families.push_back(to_string(f));
  for (auto s : c.strategies) strategies.push_back(to_string(s));
  auto dataset = source_to_json(c.dataset);
  dataset["train_fraction"] = c.train_fraction;
  dataset["split_seed"] = c.split_seed;
  auto hpo = search_space_to_json(c.search_space);
  hpo["enabled"] = c.hpo;
  hpo["max_resource"] = c.hyperband.max_resource;
  hpo["eta"] = c.hyperband.eta;
  hpo["seed"] = c.hyperband.seed;
  hpo["replacements"] = c.hyperband.replacements;
  auto pretrain = source_to_json(c.pretrain_dataset);
  pretrain["epochs"] = c.pretrain_epochs;
  return {{"output", c.output.string()},
          {"jobs", c.jobs},
          {"dataset", dataset},
          {"preprocess", preprocess_to_json(c.preprocess)},
          {"model", {{"families", families}, {"strategies", strategies}, {"preset", to_string(c.preset)}, {"width", c.width}}},
          {"train",
           {{"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"optimizer", to_string(c.train.optimizer.kind)},
            {"learning_rate", c.train.optimizer.learning_rate},
            {"momentum", c.train.optimizer.momentum},
            {"weight_decay", c.train.optimizer.weight_decay},
            {"seed", c.train.seed}}},
          {"cv", {{"folds", c.folds}, {"seed", c.fold_seed}}},
          {"hpo", hpo},
          {"pretrain", pretrain},
          {"ensemble", {{"best_min_size", c.best_min_size}}},
          {"bench",
           {{"enabled", c.bench},
            {"batch_size", c.bench_config.batch_size},
            {"repetitions", c.bench_config.repetitions},
            {"warmup", c.bench_config.warmup}}}};
}

void PipelineConfig::validate() const {
  if (output.empty()) throw ConfigError("output directory not set");
  validate_source(dataset, "dataset");
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("dataset.train_fraction must lie in (0, 1)");
  preprocess.validate();
  if (families.empty()) throw ConfigError("model.families is empty");
  if (strategies.empty()) throw ConfigError("model.strategies is empty");
  if (!(width > 0)) throw ConfigError("model.width must be positive");
  TrainConfig probe = train;
  probe.strategy = Strategy::kTfs;
  probe.source_checkpoint.clear();
  probe.validate();
  if (folds < 2) throw ConfigError("cv.folds must be at least 2");
  if (hpo) {
    search_space.validate();
    hyperband_schedule(hyperband.max_resource, hyperband.eta);
  }
  const bool transfer =
      std::any_of(strategies.begin(), strategies.end(), [](Strategy s) { return s != Strategy::kTfs; });
  if (transfer) {
    validate_source(pretrain_dataset, "pretrain");
    if (pretrain_epochs < 1) throw ConfigError("pretrain.epochs must be at least 1");
  }
  if (best_min_size < 1) throw ConfigError("ensemble.best_min_size must be at least 1");
  if (bench) bench_config.validate();
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
}

fs::path default_output_root() {
  if (const char* home = std::getenv("FENS_HOME"); home && *home) return home;
  return "fens-out";
}

// ------------------------------------------------------------ data

Dataset load_source(const DatasetSource& s) {
  Dataset ds;
  if (s.kind == "synth") {
    ds = synth_glyphs(s.classes, s.per_class, s.height, s.width, s.seed);
  } else if (s.kind == "csv") {
    ds = load_csv_dataset(s.path, s.height, s.width);
  } else if (s.kind == "folder") {
    ds = load_image_folder(s.path);
  } else {
    throw ConfigError("unknown dataset kind '" + s.kind + "'");
  }
  ds.meta.name = s.name;
  return ds;
}

namespace {

PreparedData prepare(const DatasetSource& source, const PreprocessSpec& pre, double fraction, std::uint64_t seed) {
  const Dataset raw = preprocess(load_source(source), pre);
  const auto split = split_holdout(raw.labels, raw.classes, fraction, seed);
  PreparedData d;
  d.train = raw.subset(split.train);
  d.test = raw.subset(split.test);
  d.digest = sha256_hex(dataset_digest(d.train) + ":" + dataset_digest(d.test));
  return d;
}

}  // namespace

PreparedData prepare_data(const PipelineConfig& c) {
  return prepare(c.dataset, c.preprocess, c.train_fraction, c.split_seed);
}

std::string entry_id(const std::string& dataset, Family family, Strategy strategy) {
  return dataset + "-" + to_string(family) + "-" + to_string(strategy);
}

std::int64_t PipelineOutcome::failed() const {
  return std::count_if(entries.begin(), entries.end(), [](const EntryOutcome& e) { return e.status != "done"; });
}

// ------------------------------------------------------------ stamps

namespace {

std::string rel(const fs::path& root, const fs::path& p) { return fs::relative(p, root).generic_string(); }

json artifacts_of(const fs::path& root, const std::vector<fs::path>& files) {
  json a = json::object();
  for (const auto& f : files) a[rel(root, f)] = sha256_file(f);
  return a;
}

bool artifacts_intact(const fs::path& root, const json& artifacts) {
  for (const auto& [path, digest] : artifacts.items()) {
    const auto p = root / path;
    if (!fs::exists(p) || sha256_file(p) != digest.get<std::string>()) return false;
  }
  return true;
}

std::optional<json> current_stage(const fs::path& stage_file, const std::string& stamp, const fs::path& root) {
  if (!fs::exists(stage_file)) return std::nullopt;
  json j;
  try {
    j = json::parse(read_file(stage_file));
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (j.value("stamp", "") != stamp || j.value("status", "") != "done") return std::nullopt;
  if (!artifacts_intact(root, j.value("artifacts", json::object()))) return std::nullopt;
  return j;
}

std::vector<fs::path> run_files(const fs::path& run_dir) {
  std::vector<fs::path> files{run_dir / "config.json", run_dir / "record.json"};
  for (const auto& row : read_run_record(run_dir).rows) files.push_back(run_dir / row.checkpoint);
  return files;
}

ModelSpec entry_spec(const PipelineConfig& c, InputShape input, std::int64_t classes, Family family) {
  return make_spec(family, c.preset, c.width, input, classes);
}

std::mutex g_pretrain_mu;

// Trains the source model for hft/fft once per family; returns the best
// checkpoint relative to the output root.
std::string ensure_pretrain(const PipelineConfig& c, Family family, InputShape input) {
  std::lock_guard lock(g_pretrain_mu);
  const auto root = c.output;
  const auto dir = root / "pretrain" / to_string(family);
  const auto source = prepare(c.pretrain_dataset, c.preprocess, c.train_fraction, c.split_seed);
  if (source.train.sample_shape() != input) throw ConfigError("pretrain data shape differs from the target data");
  const auto spec = entry_spec(c, input, source.train.classes, family);
  TrainConfig tc = c.train;
  tc.strategy = Strategy::kTfs;
  tc.source_checkpoint.clear();
  tc.epochs = c.pretrain_epochs;
  const json inputs = {{"data", source.digest},
                       {"spec", spec_to_json(spec)},
                       {"train", train_config_to_json(tc)},
                       {"folds", c.folds},
                       {"fold_seed", c.fold_seed}};
  const auto stamp = sha256_hex(inputs.dump());
  if (auto done = current_stage(dir / "stage.json", stamp, root)) return done->at("checkpoint").get<std::string>();

  log::info("pipeline.pretrain", {{"family", to_string(family)}});
  fs::remove_all(dir);
  const auto folds = kfold(source.train.labels, source.train.classes, c.folds, c.fold_seed);
  RunOptions ro;
  ro.run_dir = dir;
  ro.run_id = "pretrain-" + to_string(family);
  const auto rec = train_run(spec, source.train, folds, 0, tc, ro);
  const auto ckpt = dir / rec.rows.at(static_cast<std::size_t>(rec.best_epoch - 1)).checkpoint;
  const json stage = {{"stamp", stamp},
                      {"status", "done"},
                      {"checkpoint", rel(root, ckpt)},
                      {"artifacts", artifacts_of(root, run_files(dir))}};
  write_file_atomic(dir / "stage.json", stage.dump(2) + "\n");
  return rel(root, ckpt);
}

EntryOutcome outcome_from_json(const json& j) {
  EntryOutcome o;
  o.id = j.at("id").get<std::string>();
  o.family = parse_family(j.at("family").get<std::string>());
  o.strategy = parse_strategy(j.at("strategy").get<std::string>());
  o.status = j.at("status").get<std::string>();
  o.diagnostic = j.value("diagnostic", "");
  if (j.contains("test")) o.test = metrics_from_json(j.at("test"));
  o.val_score = j.value("val_score", 0.0);
  return o;
}

}  // namespace

// ------------------------------------------------------------ stages

HyperbandResult tune_entry(const PipelineConfig& c, const PreparedData& data, Family family, Strategy strategy,
                           const fs::path& workdir) {
  const auto spec = entry_spec(c, data.train.sample_shape(), data.train.classes, family);
  TrainConfig base = c.train;
  base.strategy = strategy;
  if (strategy != Strategy::kTfs) {
    base.source_checkpoint = ensure_pretrain(c, family, data.train.sample_shape());
  }
  const auto folds = kfold(data.train.labels, data.train.classes, c.folds, c.fold_seed);
  fs::remove_all(workdir);
  fs::create_directories(workdir);
  auto objective = training_objective(spec, data.train, folds, 0, base, workdir, c.output);
  auto opts = c.hyperband;
  opts.parallelism = c.jobs;
  return run_hyperband(c.search_space, objective, opts);
}

EntryOutcome train_entry(const PipelineConfig& c, const PreparedData& data, Family family, Strategy strategy) {
  const auto root = c.output;
  const auto id = entry_id(c.dataset.name, family, strategy);
  const auto dir = root / "entries" / id;
  const auto spec = entry_spec(c, data.train.sample_shape(), data.train.classes, family);

  EntryOutcome out;
  out.id = id;
  out.family = family;
  out.strategy = strategy;

  json inputs = {{"data", data.digest},
                 {"spec", spec_to_json(spec)},
                 {"train", train_config_to_json(c.train)},
                 {"strategy", to_string(strategy)},
                 {"folds", c.folds},
                 {"fold_seed", c.fold_seed},
                 {"hpo", c.hpo ? json{{"options",
                                       {{"max_resource", c.hyperband.max_resource},
                                        {"eta", c.hyperband.eta},
                                        {"seed", c.hyperband.seed},
                                        {"replacements", c.hyperband.replacements}}},
                                      {"space", search_space_to_json(c.search_space)}}
                                : json(nullptr)}};
  try {
    std::string source;
    if (strategy != Strategy::kTfs) {
      source = ensure_pretrain(c, family, data.train.sample_shape());
      inputs["source"] = sha256_file(root / source);
    }
    const auto stamp = sha256_hex(inputs.dump());
    if (auto done = current_stage(dir / "entry.json", stamp, root)) {
      auto o = outcome_from_json(*done);
      o.skipped = true;
      log::info("pipeline.entry_skipped", {{"entry", id}});
      return o;
    }
    log::info("pipeline.entry", {{"entry", id}});

    TrainConfig tc = c.train;
    tc.strategy = strategy;
    tc.source_checkpoint = source;
    json hpo_summary = nullptr;
    if (c.hpo) {
      const auto result = tune_entry(c, data, family, strategy, dir / "hpo");
      write_file_atomic(dir / "hpo" / "tuning.json", tuning_report(result, c.search_space).dump(2) + "\n");
      tc = result.best_config.apply(tc);
      hpo_summary = {{"best_trial", result.best_trial},
                     {"best_score", result.best_score},
                     {"config", hp_config_to_json(result.best_config)}};
    }

    for (std::int64_t f = 0; f < c.folds; ++f) {
      fs::remove_all(root / "runs" / run_id(c.dataset.name, family, strategy, f, tc.seed));
    }
    CvOptions cv;
    cv.k = c.folds;
    cv.fold_seed = c.fold_seed;
    cv.runs_root = root / "runs";
    cv.dataset_name = c.dataset.name;
    cv.source_root = root;
    const auto result = cross_validate(spec, data.train, tc, cv);
    for (const auto& r : result.runs) {
      if (!r.done()) throw TrainingFailure("fold " + std::to_string(r.fold) + " failed: " + r.diagnostic);
    }

    // Out-of-fold validation matrix: each fold's best model scores its own
    // held-out samples, so every training sample gets exactly one row.
    const auto classes = data.train.classes;
    std::vector<double> oof(static_cast<std::size_t>(data.train.size() * classes), 0.0);
    for (std::int64_t f = 0; f < c.folds; ++f) {
      auto model = load_best_model(cv.runs_root / result.runs[static_cast<std::size_t>(f)].run_id);
      const auto idx = result.folds.validation_indices(f);
      const auto probs = predict_proba(model, data.train.gather(idx));
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::int64_t k = 0; k < classes; ++k) {
          oof[static_cast<std::size_t>(idx[r] * classes + k)] = probs[static_cast<std::int64_t>(r) * classes + k];
        }
      }
    }
    ProbabilityMatrix val(data.train.size(), classes, std::move(oof));
    std::vector<const ProbabilityMatrix*> self{&val};
    const auto oof_metrics = compute_metrics(soft_vote(self), data.train.labels, classes);

    const auto& best = result.runs[result.best];
    auto model = load_best_model(cv.runs_root / best.run_id);
    const auto eval = evaluate(model, data.test);

    fs::create_directories(dir);
    write_matrix(eval.probabilities, dir / "test.prob");
    write_matrix(val, dir / "val.prob");

    std::vector<fs::path> files{dir / "test.prob", dir / "val.prob"};
    json runs = json::array();
    for (const auto& r : result.runs) {
      runs.push_back(r.run_id);
      for (auto& f : run_files(cv.runs_root / r.run_id)) files.push_back(std::move(f));
    }
    out.status = "done";
    out.test = eval.metrics;
    out.val_score = best.best_val_accuracy();
    const json entry = {{"id", id},
                        {"dataset", c.dataset.name},
                        {"family", to_string(family)},
                        {"strategy", to_string(strategy)},
                        {"status", "done"},
                        {"stamp", stamp},
                        {"runs", runs},
                        {"best_run", best.run_id},
                        {"train", train_config_to_json(tc)},
                        {"hpo", hpo_summary},
                        {"test", metrics_to_json(eval.metrics)},
                        {"val_score", out.val_score},
                        {"oof_accuracy", oof_metrics.accuracy},
                        {"artifacts", artifacts_of(root, files)}};
    write_file_atomic(dir / "entry.json", entry.dump(2) + "\n");
    log::info("pipeline.entry_done", {{"entry", id}, {"test_acc", log::num(eval.metrics.accuracy, 4)}});
  } catch (const Error& e) {
    out.status = "failed";
    out.diagnostic = e.what();
    fs::create_directories(dir);
    const json entry = {{"id", id},
                        {"dataset", c.dataset.name},
                        {"family", to_string(family)},
                        {"strategy", to_string(strategy)},
                        {"status", "failed"},
                        {"diagnostic", out.diagnostic}};
    write_file_atomic(dir / "entry.json", entry.dump(2) + "\n");
    log::warn("pipeline.entry_failed", {{"entry", id}, {"reason", out.diagnostic}});
  }
  return out;
}

namespace {

struct DoneEntry {
  std::string id;
  json entry;
};

// Completed entries of the configured matrix, in matrix order.
std::vector<DoneEntry> done_entries(const PipelineConfig& c) {
  std::vector<DoneEntry> out;
  for (auto f : c.families) {
    for (auto s : c.strategies) {
      const auto id = entry_id(c.dataset.name, f, s);
      const auto path = c.output / "entries" / id / "entry.json";
      if (!fs::exists(path)) continue;
      auto j = json::parse(read_file(path));
      if (j.value("status", "") == "done") out.push_back({id, std::move(j)});
    }
  }
  return out;
}

}  // namespace

DatasetCombos ensemble_stage(const PipelineConfig& c, bool* skipped) {
  if (skipped) *skipped = false;
  const auto root = c.output;
  const auto dir = root / "ensemble";
  const auto entries = done_entries(c);
  if (entries.empty()) throw ConfigError("no completed entries to ensemble");
  const auto data = prepare_data(c);

  json inputs = {{"data", data.digest}, {"best_min_size", c.best_min_size}, {"members", json::array()}};
  for (const auto& e : entries) {
    const auto base = "entries/" + e.id + "/";
    inputs["members"].push_back({{"id", e.id},
                                 {"test", e.entry.at("artifacts").at(base + "test.prob")},
                                 {"val", e.entry.at("artifacts").at(base + "val.prob")},
                                 {"score", e.entry.at("val_score")}});
  }
  const auto stamp = sha256_hex(inputs.dump());
  if (auto done = current_stage(dir / "stage.json", stamp, root)) {
    log::info("pipeline.ensemble_skipped");
    if (skipped) *skipped = true;
    return combos_from_json(json::parse(read_file(dir / "combinations.json")));
  }

  Manifest manifest;
  manifest.classes = data.train.classes;
  manifest.test_labels = data.test.labels;
  manifest.validation_labels = data.train.labels;
  for (const auto& e : entries) {
    MemberRecord m;
    m.id = e.id;
    m.dataset = e.entry.at("dataset").get<std::string>();
    m.family = e.entry.at("family").get<std::string>();
    m.strategy = e.entry.at("strategy").get<std::string>();
    m.run_id = e.entry.at("best_run").get<std::string>();
    m.test = read_matrix(root / "entries" / e.id / "test.prob");
    m.validation = read_matrix(root / "entries" / e.id / "val.prob");
    m.val_score = e.entry.at("val_score").get<double>();
    manifest.members.push_back(std::move(m));
  }
  fs::create_directories(dir);
  write_manifest(manifest, dir / "manifest.json");
  const auto combos = evaluate_combinations(c.dataset.name, manifest, c.best_min_size);
  write_file_atomic(dir / "combinations.json", combos_to_json(combos).dump(2) + "\n");

  std::vector<fs::path> files{dir / "manifest.json", dir / "combinations.json"};
  for (const auto& m : manifest.members) {
    files.push_back(dir / (m.id + ".test.prob"));
    files.push_back(dir / (m.id + ".val.prob"));
  }
  const json stage = {{"stamp", stamp}, {"status", "done"}, {"artifacts", artifacts_of(root, files)}};
  write_file_atomic(dir / "stage.json", stage.dump(2) + "\n");
  return combos;
}

std::vector<BenchReport> bench_stage(const PipelineConfig& c, bool* skipped) {
  if (skipped) *skipped = false;
  const auto root = c.output;
  const auto dir = root / "bench";
  const auto entries = done_entries(c);
  // One member per family: its tfs entry when present, else its first.
  std::vector<const DoneEntry*> chosen;
  for (auto f : c.families) {
    const DoneEntry* pick = nullptr;
    for (const auto& e : entries) {
      if (e.entry.at("family") != to_string(f)) continue;
      if (!pick || e.entry.at("strategy") == "tfs") pick = &e;
      if (e.entry.at("strategy") == "tfs") break;
    }
    if (pick) chosen.push_back(pick);
  }
  if (chosen.empty()) throw ConfigError("no completed entries to benchmark");

  json inputs = {{"batch_size", c.bench_config.batch_size},
                 {"repetitions", c.bench_config.repetitions},
                 {"warmup", c.bench_config.warmup},
                 {"members", json::array()}};
  for (const auto* e : chosen) {
    // The measured model is the best checkpoint; run records carry timings.
    const auto run_dir = root / "runs" / e->entry.at("best_run").get<std::string>();
    const auto rec = read_run_record(run_dir);
    const auto ckpt = run_dir / rec.rows.at(static_cast<std::size_t>(rec.best_epoch - 1)).checkpoint;
    inputs["members"].push_back({{"id", e->id}, {"checkpoint", sha256_file(ckpt)}});
  }
  const auto stamp = sha256_hex(inputs.dump());
  if (auto done = current_stage(dir / "stage.json", stamp, root)) {
    log::info("pipeline.bench_skipped");
    if (skipped) *skipped = true;
    return {};
  }

  std::vector<BenchMember> members;
  for (const auto* e : chosen) {
    const auto run_dir = root / "runs" / e->entry.at("best_run").get<std::string>();
    members.push_back({family_label(e->entry.at("family").get<std::string>()), [run_dir] { return load_best_model(run_dir); }});
  }
  std::vector<BenchReport> reports;
  auto all = bench_ensemble("Ensemble-" + std::to_string(members.size()), members, Voting::kSoft, c.bench_config);
  for (const auto& m : all.members) reports.push_back(m);
  if (members.size() >= 2) {
    // Drop the slowest member, as in a latency-constrained deployment.
    std::size_t slowest = 0;
    for (std::size_t i = 1; i < all.members.size(); ++i) {
      if (all.members[i].latency_batch_s > all.members[slowest].latency_batch_s) slowest = i;
    }
    reports.push_back(all);
    auto rest = members;
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(slowest));
    reports.push_back(
        bench_ensemble("Ensemble-" + std::to_string(rest.size()), rest, Voting::kSoft, c.bench_config));
  } else {
    reports.push_back(all);
  }

  fs::create_directories(dir);
  json out = json::array();
  for (const auto& r : reports) out.push_back(bench_report_to_json(r));
  write_file_atomic(dir / "bench.json", out.dump(2) + "\n");
  const json stage = {{"stamp", stamp}, {"status", "done"}, {"artifacts", artifacts_of(root, {dir / "bench.json"})}};
  write_file_atomic(dir / "stage.json", stage.dump(2) + "\n");
  return reports;
}

// ------------------------------------------------------------ reports

void write_reports(const fs::path& root) {
  std::vector<BaseResult> base;
  std::vector<std::pair<std::string, json>> entries;
  if (fs::exists(root / "entries")) {
    for (const auto& d : fs::directory_iterator(root / "entries")) {
      const auto path = d.path() / "entry.json";
      if (!fs::exists(path)) continue;
      auto j = json::parse(read_file(path));
      if (j.value("status", "") == "done") entries.emplace_back(d.path().filename().string(), std::move(j));
    }
  }
  if (entries.empty()) throw ConfigError("no completed entries under " + root.string());
  auto order = [](const json& j) {
    const auto f = parse_family(j.at("family").get<std::string>());
    const auto s = parse_strategy(j.at("strategy").get<std::string>());
    return std::make_tuple(j.at("dataset").get<std::string>(),
                           static_cast<int>(std::find(kAllFamilies.begin(), kAllFamilies.end(), f) - kAllFamilies.begin()),
                           static_cast<int>(s));
  };
  std::sort(entries.begin(), entries.end(), [&](const auto& a, const auto& b) { return order(a.second) < order(b.second); });
  for (const auto& [id, j] : entries) {
    BaseResult b;
    b.dataset = j.at("dataset").get<std::string>();
    b.family = j.at("family").get<std::string>();
    b.strategy = j.at("strategy").get<std::string>();
    b.test = metrics_from_json(j.at("test"));
    b.val_score = j.at("val_score").get<double>();
    base.push_back(std::move(b));
  }

  std::vector<DatasetCombos> combos;
  if (fs::exists(root / "ensemble" / "combinations.json")) {
    combos.push_back(combos_from_json(json::parse(read_file(root / "ensemble" / "combinations.json"))));
  }
  std::vector<BenchReport> bench;
  if (fs::exists(root / "bench" / "bench.json")) {
    for (const auto& r : json::parse(read_file(root / "bench" / "bench.json"))) {
      BenchReport b;
      b.subject = r.at("subject").get<std::string>();
      b.latency_batch_s = r.at("latency_batch_s").get<double>();
      b.inference_time_img_s = r.at("inference_time_img_s").get<double>();
      b.load_memory_mb = r.at("load_memory_mb").get<double>();
      b.inference_memory_img_mb = r.at("inference_memory_img_mb").get<double>();
      b.params = r.at("params").get<std::int64_t>();
      b.macs = r.at("macs").get<std::int64_t>();
      b.batch_size = r.at("batch_size").get<std::int64_t>();
      b.repetitions = r.at("repetitions").get<std::int64_t>();
      b.memory_method = r.at("memory_method").get<std::string>();
      const auto& env = r.at("environment");
      b.environment.cpu_model = env.at("cpu_model").get<std::string>();
      b.environment.cores = env.at("cores").get<std::int64_t>();
      b.environment.ram_mb = env.at("ram_mb").get<double>();
      b.environment.threads = env.at("threads").get<std::int64_t>();
      bench.push_back(std::move(b));
    }
  }

  const auto dir = root / "reports";
  fs::create_directories(dir);
  std::ostringstream md;
  auto emit = [&](const std::string& name, const Table& t) {
    write_file_atomic(dir / (name + ".csv"), table_csv(t));
    const auto text = table_markdown(t);
    write_file_atomic(dir / (name + ".md"), text);
    md << text << '\n';
  };
  emit("base_models", base_models_table(base));
  for (const auto& d : combos) emit("combinations-" + d.dataset, combinations_table(d));
  if (!combos.empty()) emit("summary", summary_table(base, combos));
  if (!bench.empty()) {
    write_file_atomic(dir / "bench.csv", emit_report(bench, ReportFormat::kCsv));
    const auto text = emit_report(bench, ReportFormat::kMarkdown);
    write_file_atomic(dir / "bench.md", text);
    md << "### Latency, inference time and memory (seconds, MB)\n\n" << text << '\n';
  }
  write_file_atomic(dir / "report.md", md.str());
}

// ------------------------------------------------------------ pipeline

void store_config(const PipelineConfig& c) {
  fs::create_directories(c.output);
  auto stored = config_to_json(c);
  stored.erase("output");
  const auto config_text = stored.dump(2) + "\n";
  if (!fs::exists(c.output / "config.json") || read_file(c.output / "config.json") != config_text) {
    write_file_atomic(c.output / "config.json", config_text);
  }
}

PipelineOutcome run_pipeline(const PipelineConfig& config) {
  config.validate();
  PipelineConfig c = config;
  store_config(c);

  const auto data = prepare_data(c);
  log::info("pipeline.data", {{"train", std::to_string(data.train.size())},
                              {"test", std::to_string(data.test.size())},
                              {"classes", std::to_string(data.train.classes)}});

  std::vector<std::pair<Family, Strategy>> matrix;
  for (auto f : c.families) {
    for (auto s : c.strategies) matrix.emplace_back(f, s);
  }
  PipelineOutcome outcome;
  outcome.entries.resize(matrix.size());
  std::atomic<std::size_t> next{0};
  const auto workers = static_cast<std::size_t>(std::min<std::int64_t>(c.jobs, static_cast<std::int64_t>(matrix.size())));
  auto work = [&](bool pinned) {
    if (pinned) omp_set_num_threads(1);
    for (auto i = next++; i < matrix.size(); i = next++) {
      outcome.entries[i] = train_entry(c, data, matrix[i].first, matrix[i].second);
    }
  };
  if (workers <= 1) {
    work(false);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, true);
    for (auto& t : pool) t.join();
  }

  if (outcome.failed() < static_cast<std::int64_t>(outcome.entries.size())) {
    bool skipped = false;
    ensemble_stage(c, &skipped);
    outcome.ensemble_ran = !skipped;
    if (c.bench) {
      bench_stage(c, &skipped);
      outcome.bench_ran = !skipped;
    }
    write_reports(c.output);
  }
  return outcome;
}

}  // namespace fens
