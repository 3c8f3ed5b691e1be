#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/optimizer.hpp"
#include "fens/training.hpp"

namespace fens {

struct SearchSpace {
  double lr_low = 1e-4;
  double lr_high = 1e-1;
  std::vector<std::int64_t> batch_sizes{16, 32, 64};
  std::vector<OptimizerKind> optimizers{OptimizerKind::kAdam, OptimizerKind::kSgdMomentum};
  double wd_low = 1e-6;
  double wd_high = 1e-3;
  double momentum_low = 0.8;
  double momentum_high = 0.95;

  // low <= high everywhere (equal bounds pin the value), log ranges positive.
  void validate() const;
};

nlohmann::json search_space_to_json(const SearchSpace& s);
SearchSpace search_space_from_json(const nlohmann::json& j);

struct HpConfig {
  double learning_rate = 1e-3;
  std::int64_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double weight_decay = 0;
  double momentum = 0.9;

  // `base` with these hyperparameters substituted.
  TrainConfig apply(TrainConfig base) const;
  friend bool operator==(const HpConfig&, const HpConfig&) = default;
};

nlohmann::json hp_config_to_json(const HpConfig& c);
HpConfig hp_config_from_json(const nlohmann::json& j);

// Log-uniform fields: exp(U(ln lo, ln hi)); choices uniform.
HpConfig sample_config(const SearchSpace& space, std::mt19937_64& rng);

struct Rung {
  std::int64_t index = 0;
  std::int64_t configs = 0;    // n_i = floor(n * eta^-i)
  double resource = 0;         // r_i = r * eta^i
  std::int64_t epochs = 0;     // r_i rounded down to whole epochs, at least 1
  std::int64_t survivors = 0;  // floor(n_i / eta)
};

struct Bracket {
  std::int64_t s = 0;
  std::int64_t n = 0;  // ceil((B/R) * eta^s / (s+1))
  double r = 0;        // R * eta^-s
  std::vector<Rung> rungs;
};

struct HyperbandPlan {
  std::int64_t max_resource = 1;  // R
  std::int64_t eta = 3;
  std::int64_t s_max = 0;
  std::int64_t budget = 0;  // B = (s_max + 1) * R
  std::vector<Bracket> brackets;  // s = s_max down to 0

  // Epochs trained when survivors continue from their previous rung.
  std::int64_t bracket_epochs(std::size_t b) const;
  std::int64_t total_epochs() const;
};

HyperbandPlan hyperband_schedule(std::int64_t max_resource, std::int64_t eta);
nlohmann::json plan_to_json(const HyperbandPlan& plan);

struct TrialJob {
  std::int64_t trial_id = 0;
  std::int64_t config_id = 0;
  HpConfig config;
  std::int64_t epochs = 0;           // total resource after this job
  std::int64_t previous_epochs = 0;  // resource already spent on this config
  std::int64_t bracket = 0;
  std::int64_t rung = 0;
};

// Returns a score (higher is better). Failure is signalled by throwing.
using Objective = std::function<double(const TrialJob&)>;

struct Trial {
  TrialJob job;
  std::string status = "pending";  // "done" | "failed"
  std::optional<double> score;
  std::string diagnostic;
  std::optional<std::int64_t> replacement_of;
  bool promoted = false;
};

struct HyperbandOptions {
  std::int64_t max_resource = 27;
  std::int64_t eta = 3;
  std::uint64_t seed = 0;
  std::int64_t parallelism = 1;
  // Fresh configs tried for a failed trial before its slot scores -inf.
  std::int64_t replacements = 1;
};

struct HyperbandResult {
  HyperbandPlan plan;
  std::vector<Trial> trials;  // in trial-id order
  std::int64_t best_trial = -1;
  HpConfig best_config;
  double best_score = 0;
  std::int64_t epochs_executed = 0;
};

HyperbandResult run_hyperband(const SearchSpace& space, const Objective& objective,
                              const HyperbandOptions& options);

nlohmann::json tuning_report(const HyperbandResult& result, const SearchSpace& space);

// Objective that trains `spec` on fold `fold` of `folds` and scores the best
// validation accuracy so far. Promoted configs resume from their last
// checkpoint under `workdir/config-<id>`. A relative source checkpoint is
// resolved against `source_root`.
Objective training_objective(const ModelSpec& spec, const Dataset& train_set, const FoldAssignment& folds,
                             std::int64_t fold, TrainConfig base, std::filesystem::path workdir,
                             std::filesystem::path source_root = {});

}  // namespace fens
