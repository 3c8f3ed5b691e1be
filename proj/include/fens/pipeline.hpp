#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/bench.hpp"
#include "fens/data.hpp"
#include "fens/hpo.hpp"
#include "fens/model_spec.hpp"
#include "fens/report.hpp"
#include "fens/training.hpp"

namespace fens {

struct DatasetSource {
  std::string name = "glyphs";
  std::string kind = "synth";  // synth | csv | folder
  std::string path;            // csv file or image folder
  std::int64_t classes = 28;   // synth only
  std::int64_t per_class = 50;
  std::int64_t height = 32;  // synth size; csv row shape
  std::int64_t width = 32;
  std::uint64_t seed = 7;
};

struct PipelineConfig {
  std::filesystem::path output;
  DatasetSource dataset;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  PreprocessSpec preprocess;

  std::vector<Family> families{kAllFamilies.begin(), kAllFamilies.end()};
  std::vector<Strategy> strategies{Strategy::kTfs};
  Preset preset = Preset::kMicro;
  double width = 1.0;

  TrainConfig train;
  std::int64_t folds = 5;
  std::uint64_t fold_seed = 0;

  bool hpo = false;
  HyperbandOptions hyperband;
  SearchSpace search_space;

  // Source task for hft/fft.
  DatasetSource pretrain_dataset;
  std::int64_t pretrain_epochs = 5;

  std::size_t best_min_size = 1;

  bool bench = false;
  BenchConfig bench_config;

  std::int64_t jobs = 1;

  void validate() const;
};

// Every configurable leaf with its default; flags mirror these dotted keys.
nlohmann::json default_config_json();
// Overlays `patch` on `base`; keys absent from `base` are rejected.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& patch, const std::string& where = "");
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& c);
// Leaf keys of a JSON object as "a.b.c" paths, in document order.
std::vector<std::string> config_leaves(const nlohmann::json& j);

// FENS_HOME when set, ./fens-out otherwise.
std::filesystem::path default_output_root();

Dataset load_source(const DatasetSource& source);

struct PreparedData {
  Dataset train;
  Dataset test;
  std::string digest;  // covers source, preprocessing and split
};

PreparedData prepare_data(const PipelineConfig& config);

std::string entry_id(const std::string& dataset, Family family, Strategy strategy);

struct EntryOutcome {
  std::string id;
  Family family = Family::kMobile;
  Strategy strategy = Strategy::kTfs;
  std::string status;  // "done" | "failed"
  std::string diagnostic;
  bool skipped = false;  // outputs were already current
  MetricsRow test;
  double val_score = 0;
};

struct PipelineOutcome {
  std::vector<EntryOutcome> entries;
  bool ensemble_ran = false;  // false when skipped as current
  bool bench_ran = false;
  std::int64_t failed() const;
};

// Output layout under config.output:
//   pretrain/<family>/       source runs for hft/fft
//   runs/<run-id>/           one directory per fold
//   entries/<entry-id>/      entry.json, test.prob, val.prob, hpo/
//   ensemble/                manifest.json, combinations.json
//   reports/                 tables as csv and markdown
// A stage is skipped when its stamp (a digest of its inputs) matches and its
// recorded outputs are intact.
PipelineOutcome run_pipeline(const PipelineConfig& config);

// Writes the config (minus output) to <output>/config.json, where later
// subcommands pick it up. Unchanged files are left untouched.
void store_config(const PipelineConfig& config);

// Individual stages, as used by the CLI subcommands. `skipped` reports
// whether the stage's outputs were already current.
HyperbandResult tune_entry(const PipelineConfig& config, const PreparedData& data, Family family, Strategy strategy,
                           const std::filesystem::path& workdir);
EntryOutcome train_entry(const PipelineConfig& config, const PreparedData& data, Family family, Strategy strategy);
DatasetCombos ensemble_stage(const PipelineConfig& config, bool* skipped = nullptr);
std::vector<BenchReport> bench_stage(const PipelineConfig& config, bool* skipped = nullptr);

// Rebuilds every table from the artifacts under `root`; writes only into
// root/reports. Throws when no completed entry exists.
void write_reports(const std::filesystem::path& root);

}  // namespace fens
