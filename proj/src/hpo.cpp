#include "fens/hpo.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <limits>
#include <mutex>
#include <thread>

#include "fens/errors.hpp"
#include "fens/log.hpp"

namespace fens {

namespace fs = std::filesystem;

void SearchSpace::validate() const {
  auto range = [](const char* what, double lo, double hi, bool log_scale) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) {
      throw ConfigError(std::string("search space: ") + what + " range is empty");
    }
    if (log_scale && lo <= 0) throw ConfigError(std::string("search space: ") + what + " must be positive");
  };
  range("learning_rate", lr_low, lr_high, true);
  range("weight_decay", wd_low, wd_high, true);
  range("momentum", momentum_low, momentum_high, false);
  if (momentum_low < 0 || momentum_high >= 1) throw ConfigError("search space: momentum must lie in [0, 1)");
  if (batch_sizes.empty()) throw ConfigError("search space: no batch sizes");
  for (auto b : batch_sizes) {
    if (b <= 0) throw ConfigError("search space: batch sizes must be positive");
  }
  if (optimizers.empty()) throw ConfigError("search space: no optimizers");
}

nlohmann::json search_space_to_json(const SearchSpace& s) {
  std::vector<std::string> opts;
  for (auto o : s.optimizers) opts.push_back(to_string(o));
  return {{"learning_rate", {s.lr_low, s.lr_high}},
          {"batch_size", s.batch_sizes},
          {"optimizer", opts},
          {"weight_decay", {s.wd_low, s.wd_high}},
          {"momentum", {s.momentum_low, s.momentum_high}}};
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace s;
  auto pair = [&](const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("search space: ") + key + " must be [low, high]");
    lo = v[0].get<double>();
    hi = v[1].get<double>();
  };
  try {
    pair("learning_rate", s.lr_low, s.lr_high);
    pair("weight_decay", s.wd_low, s.wd_high);
    pair("momentum", s.momentum_low, s.momentum_high);
    if (j.contains("batch_size")) s.batch_sizes = j.at("batch_size").get<std::vector<std::int64_t>>();
    if (j.contains("optimizer")) {
      s.optimizers.clear();
      for (const auto& name : j.at("optimizer")) s.optimizers.push_back(parse_optimizer(name.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("search space: ") + e.what());
  }
  s.validate();
  return s;
}

TrainConfig HpConfig::apply(TrainConfig base) const {
  base.batch_size = batch_size;
  base.optimizer.kind = optimizer;
  base.optimizer.learning_rate = learning_rate;
  base.optimizer.weight_decay = weight_decay;
  base.optimizer.momentum = momentum;
  return base;
}

nlohmann::json hp_config_to_json(const HpConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"optimizer", to_string(c.optimizer)},
          {"weight_decay", c.weight_decay},
          {"momentum", c.momentum}};
}

HpConfig hp_config_from_json(const nlohmann::json& j) {
  HpConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::int64_t>();
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.weight_decay = j.at("weight_decay").get<double>();
  c.momentum = j.at("momentum").get<double>();
  return c;
}

namespace {

double log_uniform(double lo, double hi, std::mt19937_64& rng) {
  if (lo == hi) return lo;
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::clamp(std::exp(u(rng)), lo, hi);
}

double uniform(double lo, double hi, std::mt19937_64& rng) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

template <class T>
const T& choose(const std::vector<T>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
  return v[pick(rng)];
}

}  // namespace

HpConfig sample_config(const SearchSpace& space, std::mt19937_64& rng) {
  HpConfig c;
  c.learning_rate = log_uniform(space.lr_low, space.lr_high, rng);
  c.batch_size = choose(space.batch_sizes, rng);
  c.optimizer = choose(space.optimizers, rng);
  c.weight_decay = log_uniform(space.wd_low, space.wd_high, rng);
  c.momentum = uniform(space.momentum_low, space.momentum_high, rng);
  return c;
}

// ------------------------------------------------------------ schedule

std::int64_t HyperbandPlan::bracket_epochs(std::size_t b) const {
  std::int64_t total = 0, prev = 0;
  for (const auto& rung : brackets.at(b).rungs) {
    total += rung.configs * (rung.epochs - prev);
    prev = rung.epochs;
  }
  return total;
}

std::int64_t HyperbandPlan::total_epochs() const {
  std::int64_t total = 0;
  for (std::size_t b = 0; b < brackets.size(); ++b) total += bracket_epochs(b);
  return total;
}

HyperbandPlan hyperband_schedule(std::int64_t max_resource, std::int64_t eta) {
  if (max_resource < 1) throw ConfigError("hyperband: max resource must be at least 1");
  if (eta < 2) throw ConfigError("hyperband: eta must be at least 2");
  HyperbandPlan plan;
  plan.max_resource = max_resource;
  plan.eta = eta;
  // Largest s with eta^s <= R, without floating-point log.
  std::int64_t power = 1;
  while (power <= max_resource / eta) {
    power *= eta;
    ++plan.s_max;
  }
  plan.budget = (plan.s_max + 1) * max_resource;

  auto ipow = [eta](std::int64_t e) {
    std::int64_t v = 1;
    for (std::int64_t i = 0; i < e; ++i) v *= eta;
    return v;
  };
  for (std::int64_t s = plan.s_max; s >= 0; --s) {
    Bracket br;
    br.s = s;
    const std::int64_t num = (plan.s_max + 1) * ipow(s);
    br.n = (num + s) / (s + 1);
    br.r = static_cast<double>(max_resource) / static_cast<double>(ipow(s));
    for (std::int64_t i = 0; i <= s; ++i) {
      Rung rung;
      rung.index = i;
      rung.configs = br.n / ipow(i);
      rung.resource = br.r * static_cast<double>(ipow(i));
      rung.epochs = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(rung.resource + 1e-9)));
      rung.survivors = rung.configs / eta;
      br.rungs.push_back(rung);
    }
    plan.brackets.push_back(std::move(br));
  }
  return plan;
}

nlohmann::json plan_to_json(const HyperbandPlan& plan) {
  nlohmann::json brackets = nlohmann::json::array();
  for (std::size_t b = 0; b < plan.brackets.size(); ++b) {
    const auto& br = plan.brackets[b];
    nlohmann::json rungs = nlohmann::json::array();
    for (const auto& r : br.rungs) {
      rungs.push_back({{"rung", r.index},
                       {"configs", r.configs},
                       {"resource", r.resource},
                       {"epochs", r.epochs},
                       {"survivors", r.survivors}});
    }
    brackets.push_back({{"s", br.s}, {"n", br.n}, {"r", br.r}, {"epochs", plan.bracket_epochs(b)}, {"rungs", rungs}});
  }
  return {{"max_resource", plan.max_resource},
          {"eta", plan.eta},
          {"s_max", plan.s_max},
          {"budget", plan.budget},
          {"total_epochs", plan.total_epochs()},
          {"brackets", brackets}};
}

// ------------------------------------------------------------ execution

namespace {

template <class T>
class Channel {
 public:
  void push(T v) {
    {
      std::lock_guard lock(mu_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }
  // Blocks; returns false once closed and drained.
  bool pop(T& out) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return false;
    out = std::move(q_.front());
    q_.pop_front();
    return true;
  }
  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
  bool closed_ = false;
};

struct Outcome {
  std::size_t index = 0;
  bool ok = false;
  double score = 0;
  std::string diagnostic;
};

Outcome run_one(const Objective& objective, const TrialJob& job, std::size_t index) {
  Outcome out;
  out.index = index;
  try {
    out.score = objective(job);
    if (std::isnan(out.score)) {
      out.diagnostic = "objective returned NaN";
    } else {
      out.ok = true;
    }
  } catch (const std::exception& e) {
    out.diagnostic = e.what();
  } catch (...) {
    out.diagnostic = "objective threw a non-standard exception";
  }
  return out;
}

// Runs `indices` of `trials` on a worker pool; results come back over a
// channel and are written into the trials by the calling thread only.
void execute(std::vector<Trial>& trials, const std::vector<std::size_t>& indices, const Objective& objective,
             std::int64_t parallelism) {
  const auto workers = static_cast<std::size_t>(std::clamp<std::int64_t>(
      parallelism, 1, static_cast<std::int64_t>(std::max<std::size_t>(indices.size(), 1))));
  std::vector<Outcome> outcomes;
  if (workers <= 1) {
    for (auto i : indices) outcomes.push_back(run_one(objective, trials[i].job, i));
  } else {
    Channel<std::size_t> jobs;
    Channel<Outcome> results;
    for (auto i : indices) jobs.push(i);
    jobs.close();
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        omp_set_num_threads(1);
        std::size_t i;
        while (jobs.pop(i)) results.push(run_one(objective, trials[i].job, i));
      });
    }
    for (std::size_t k = 0; k < indices.size(); ++k) {
      Outcome o;
      results.pop(o);
      outcomes.push_back(std::move(o));
    }
    for (auto& t : pool) t.join();
  }
  for (auto& o : outcomes) {
    auto& t = trials[o.index];
    if (o.ok) {
      t.status = "done";
      t.score = o.score;
    } else {
      t.status = "failed";
      t.diagnostic = o.diagnostic;
      log::warn("hpo.trial_failed", {{"trial", std::to_string(t.job.trial_id)}, {"error", o.diagnostic}});
    }
  }
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

HyperbandResult run_hyperband(const SearchSpace& space, const Objective& objective, const HyperbandOptions& options) {
  space.validate();
  if (options.parallelism < 1) throw ConfigError("hyperband: parallelism must be at least 1");
  if (options.replacements < 0) throw ConfigError("hyperband: replacements must be non-negative");
  HyperbandResult result;
  result.plan = hyperband_schedule(options.max_resource, options.eta);

  std::mt19937_64 rng(options.seed);
  std::int64_t next_config = 0;
  auto& trials = result.trials;

  for (std::size_t b = 0; b < result.plan.brackets.size(); ++b) {
    const auto& br = result.plan.brackets[b];
    // A slot is one of the bracket's n configurations; its config can change
    // when a failed trial is replaced.
    struct Slot {
      std::int64_t config_id;
      HpConfig config;
      std::int64_t epochs_done = 0;
    };
    std::vector<Slot> slots;
    for (std::int64_t k = 0; k < br.n; ++k) slots.push_back({next_config++, sample_config(space, rng), 0});
    // Replacement configs come from their own stream so that which trials
    // fail does not shift the main sequence.
    std::mt19937_64 spare(mix(options.seed ^ mix(static_cast<std::uint64_t>(br.s) + 1)));

    std::vector<std::size_t> alive(slots.size());
    for (std::size_t k = 0; k < alive.size(); ++k) alive[k] = k;

    for (const auto& rung : br.rungs) {
      std::vector<std::size_t> batch;
      std::vector<std::size_t> slot_trial(slots.size(), SIZE_MAX);
      for (auto k : alive) {
        Trial t;
        t.job = {static_cast<std::int64_t>(trials.size()), slots[k].config_id, slots[k].config, rung.epochs,
                 slots[k].epochs_done, br.s, rung.index};
        slot_trial[k] = trials.size();
        batch.push_back(trials.size());
        trials.push_back(std::move(t));
      }
      execute(trials, batch, objective, options.parallelism);

      for (std::int64_t attempt = 0; attempt < options.replacements; ++attempt) {
        std::vector<std::size_t> retry;
        for (auto k : alive) {
          const auto& failed = trials[slot_trial[k]];
          if (failed.status != "failed") continue;
          Trial t;
          slots[k] = {next_config++, sample_config(space, spare), 0};
          t.job = {static_cast<std::int64_t>(trials.size()), slots[k].config_id, slots[k].config, rung.epochs, 0,
                   br.s, rung.index};
          t.replacement_of = failed.job.trial_id;
          slot_trial[k] = trials.size();
          retry.push_back(trials.size());
          trials.push_back(std::move(t));
        }
        if (retry.empty()) break;
        execute(trials, retry, objective, options.parallelism);
      }

      for (auto k : alive) slots[k].epochs_done = rung.epochs;

      // Survivors: top floor(n_i / eta) completed slots by score, ties to
      // the earlier trial.
      std::vector<std::size_t> ranked;
      for (auto k : alive) {
        if (trials[slot_trial[k]].status == "done") ranked.push_back(k);
      }
      std::sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t c) {
        const auto& ta = trials[slot_trial[a]];
        const auto& tc = trials[slot_trial[c]];
        if (*ta.score != *tc.score) return *ta.score > *tc.score;
        return ta.job.trial_id < tc.job.trial_id;
      });
      const auto keep = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(rung.survivors));
      ranked.resize(keep);
      if (rung.index + 1 < static_cast<std::int64_t>(br.rungs.size())) {
        for (auto k : ranked) trials[slot_trial[k]].promoted = true;
      }
      std::sort(ranked.begin(), ranked.end());
      alive = ranked;
    }
  }

  double best = -std::numeric_limits<double>::infinity();
  for (const auto& t : trials) {
    // Failed attempts are charged their full assignment.
    result.epochs_executed += t.job.epochs - t.job.previous_epochs;
    if (t.status == "done" && *t.score > best) {
      best = *t.score;
      result.best_trial = t.job.trial_id;
    }
  }
  if (result.best_trial < 0) throw TrainingFailure("hyperband: every trial failed");
  result.best_config = trials[static_cast<std::size_t>(result.best_trial)].job.config;
  result.best_score = best;
  return result;
}

nlohmann::json tuning_report(const HyperbandResult& result, const SearchSpace& space) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : result.trials) {
    nlohmann::json j = {{"trial", t.job.trial_id},
                        {"config_id", t.job.config_id},
                        {"bracket", t.job.bracket},
                        {"rung", t.job.rung},
                        {"epochs", t.job.epochs},
                        {"previous_epochs", t.job.previous_epochs},
                        {"config", hp_config_to_json(t.job.config)},
                        {"status", t.status},
                        {"promoted", t.promoted}};
    j["score"] = t.score ? nlohmann::json(*t.score) : nlohmann::json(nullptr);
    if (t.replacement_of) j["replacement_of"] = *t.replacement_of;
    if (!t.diagnostic.empty()) j["diagnostic"] = t.diagnostic;
    trials.push_back(std::move(j));
  }
  return {{"plan", plan_to_json(result.plan)},
          {"search_space", search_space_to_json(space)},
          {"trials", trials},
          {"epochs_executed", result.epochs_executed},
          {"best", {{"trial", result.best_trial},
                    {"score", result.best_score},
                    {"config", hp_config_to_json(result.best_config)}}}};
}

Objective training_objective(const ModelSpec& spec, const Dataset& train_set, const FoldAssignment& folds,
                             std::int64_t fold, TrainConfig base, fs::path workdir, fs::path source_root) {
  return [=, &train_set, &folds](const TrialJob& job) {
    RunOptions opts;
    opts.run_dir = workdir / ("config-" + std::to_string(job.config_id));
    opts.source_root = source_root;
    RunRecord rec;
    if (job.previous_epochs > 0 && fs::exists(opts.run_dir / "record.json")) {
      rec = resume_run(train_set, folds, job.previous_epochs, job.epochs, opts);
    } else {
      TrainConfig cfg = job.config.apply(base);
      cfg.epochs = job.epochs;
      rec = train_run(spec, train_set, folds, fold, cfg, opts);
    }
    if (!rec.done()) throw TrainingFailure(rec.diagnostic.empty() ? "run did not complete" : rec.diagnostic);
    return rec.best_val_accuracy();
  };
}

}  // namespace fens
