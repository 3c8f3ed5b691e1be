#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/data.hpp"
#include "fens/errors.hpp"
#include "fens/ensemble.hpp"
#include "fens/model.hpp"
#include "fens/optimizer.hpp"

namespace fens {

struct TrainConfig {
  std::int64_t epochs = 10;
  std::int64_t batch_size = 32;
  OptimizerSettings optimizer;
  Strategy strategy = Strategy::kTfs;
  std::uint64_t seed = 1;
  // Checkpoint to transfer from; required for hft/fft, forbidden for tfs.
  std::string source_checkpoint;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// ------------------------------------------------------------ checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
};

// Parameters, batchnorm buffers and (when given) optimizer moments
// ("optim.m.<param>", "optim.v.<param>"); the step count and the model spec
// go into the metadata. Written atomically.
void save_checkpoint(Model& model, const Optimizer* optimizer, nlohmann::json meta,
                     const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameters and buffers into `model`. Throws CheckpointError when a
// model tensor is missing, has another shape, or the checkpoint carries
// names the model does not have.
void restore_model(Model& model, const Checkpoint& ckpt);
void restore_optimizer(Optimizer& optimizer, const Checkpoint& ckpt);
// Rebuilds the model recorded in the checkpoint metadata.
Model model_from_checkpoint(const Checkpoint& ckpt);

// Prepares `model` for training under `strategy`:
//   tfs  fresh initialization from `seed`, everything trainable
//   hft  feature layers from `source` and frozen; head copied when its shape
//        matches, re-initialized otherwise
//   fft  as hft but nothing frozen
void apply_strategy(Model& model, Strategy strategy, const Checkpoint* source, std::uint64_t seed);

// ------------------------------------------------------------ runs

struct EpochRow {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double seconds = 0;
  std::string checkpoint;  // file name inside the run directory
};

struct RunRecord {
  std::string run_id;
  std::int64_t fold = 0;
  TrainConfig config;
  nlohmann::json spec;
  std::vector<EpochRow> rows;
  std::int64_t best_epoch = 0;  // 1-based; 0 while no epoch completed
  std::string status = "pending";  // "done" | "failed"
  std::string diagnostic;

  double best_val_accuracy() const;
  bool done() const { return status == "done"; }
};

// Earliest epoch with the highest validation accuracy (1-based).
std::int64_t best_epoch_of(const std::vector<EpochRow>& rows);

nlohmann::json run_record_to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);
RunRecord read_run_record(const std::filesystem::path& run_dir);

std::string run_id(const std::string& dataset, Family family, Strategy strategy, std::int64_t fold,
                   std::uint64_t seed);
std::string epoch_file(std::int64_t epoch);

// Per-epoch shuffle generator state, derived from (seed, fold, epoch).
std::uint64_t epoch_seed(std::uint64_t seed, std::int64_t fold, std::int64_t epoch);

struct RunOptions {
  std::filesystem::path run_dir;  // required
  std::string run_id;             // defaults to the directory name
  std::int64_t eval_batch = 256;
  std::function<void(const EpochRow&)> on_epoch;
  // Base for a relative source_checkpoint, so run directories stay relocatable.
  std::filesystem::path source_root;
};

// Thrown when training diverges; the run record on disk is marked failed.
class TrainingFailure : public Error {
 public:
  using Error::Error;
};

// Trains on every fold except `fold` and validates on `fold` after each
// epoch, writing config.json, epoch_NNN.ckpt and record.json into the run
// directory.
RunRecord train_run(const ModelSpec& spec, const Dataset& train_set, const FoldAssignment& folds,
                    std::int64_t fold, const TrainConfig& config, const RunOptions& options);

// Continues a run from its epoch `from_epoch` checkpoint up to
// `target_epochs`, reproducing the uninterrupted run.
RunRecord resume_run(const Dataset& train_set, const FoldAssignment& folds, std::int64_t from_epoch,
                     std::int64_t target_epochs, const RunOptions& options);

// Index of the run with the highest best-epoch validation accuracy among
// completed runs (ties: lowest fold). Throws when none completed.
std::size_t select_best_fold(const std::vector<RunRecord>& runs);

struct CvOptions {
  std::int64_t k = 5;
  std::uint64_t fold_seed = 0;
  std::filesystem::path runs_root;
  std::string dataset_name = "data";
  std::int64_t jobs = 1;
  std::filesystem::path source_root;
};

struct CvResult {
  std::vector<RunRecord> runs;  // one per fold, in fold order
  std::size_t best = 0;
  FoldAssignment folds;
};

CvResult cross_validate(const ModelSpec& spec, const Dataset& train_set, const TrainConfig& config,
                        const CvOptions& options);

struct EvalResult {
  MetricsRow metrics;
  ProbabilityMatrix probabilities;
  std::vector<std::int64_t> predictions;
  double loss = 0;
};

// Eval-mode softmax probabilities [N, C] in batches.
Tensor predict_proba(Model& model, const Tensor& images, std::int64_t batch = 256);
EvalResult evaluate(Model& model, const Dataset& data, std::int64_t batch = 256);

// Loads the best-epoch checkpoint of a finished run.
Model load_best_model(const std::filesystem::path& run_dir);

// Scoped marker that training is running in this process (checked by the
// benchmark harness).
class TrainingActivity {
 public:
  TrainingActivity();
  ~TrainingActivity();
  TrainingActivity(const TrainingActivity&) = delete;
  TrainingActivity& operator=(const TrainingActivity&) = delete;
  static int active();
};

}  // namespace fens
