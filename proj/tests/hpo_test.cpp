#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <thread>

#include "fens/errors.hpp"
#include "fens/hpo.hpp"
#include "support.hpp"

using namespace fens;
using fens::test::TempDir;

namespace {

std::int64_t ipow(std::int64_t b, std::int64_t e) {
  std::int64_t r = 1;
  while (e-- > 0) r *= b;
  return r;
}

// Closed-form bracket values in integer arithmetic.
struct ExpectedRung {
  std::int64_t configs, epochs, survivors;
};
struct ExpectedBracket {
  std::int64_t s, n;
  double r;
  std::vector<ExpectedRung> rungs;
};

std::vector<ExpectedBracket> closed_form(std::int64_t R, std::int64_t eta) {
  std::int64_t s_max = 0;
  while (ipow(eta, s_max + 1) <= R) ++s_max;
  std::vector<ExpectedBracket> out;
  for (std::int64_t s = s_max; s >= 0; --s) {
    ExpectedBracket b{s, ((s_max + 1) * ipow(eta, s) + s) / (s + 1), static_cast<double>(R) / static_cast<double>(ipow(eta, s)), {}};
    for (std::int64_t i = 0; i <= s; ++i) {
      const auto n_i = b.n / ipow(eta, i);
      b.rungs.push_back({n_i, std::max<std::int64_t>(1, R * ipow(eta, i) / ipow(eta, s)), n_i / eta});
    }
    out.push_back(b);
  }
  return out;
}

double lr_objective(const TrialJob& job) { return -std::pow(job.config.learning_rate - 0.01, 2); }

HyperbandOptions options(std::int64_t R, std::int64_t eta, std::uint64_t seed, std::int64_t parallelism = 1) {
  HyperbandOptions o;
  o.max_resource = R;
  o.eta = eta;
  o.seed = seed;
  o.parallelism = parallelism;
  return o;
}

// Trials that are a slot's final attempt at their rung.
std::vector<const Trial*> final_attempts(const HyperbandResult& r, std::int64_t bracket, std::int64_t rung) {
  std::set<std::int64_t> replaced;
  for (const auto& t : r.trials) {
    if (t.replacement_of) replaced.insert(*t.replacement_of);
  }
  std::vector<const Trial*> out;
  for (const auto& t : r.trials) {
    if (t.job.bracket == bracket && t.job.rung == rung && !replaced.count(t.job.trial_id)) out.push_back(&t);
  }
  return out;
}

void require_survivor_rule(const HyperbandResult& r) {
  for (const auto& br : r.plan.brackets) {
    for (std::size_t i = 0; i + 1 < br.rungs.size(); ++i) {
      auto finals = final_attempts(r, br.s, static_cast<std::int64_t>(i));
      std::vector<const Trial*> done;
      for (const auto* t : finals) {
        if (t->status == "done") done.push_back(t);
      }
      std::sort(done.begin(), done.end(), [](const Trial* a, const Trial* b) {
        if (*a->score != *b->score) return *a->score > *b->score;
        return a->job.trial_id < b->job.trial_id;
      });
      done.resize(std::min<std::size_t>(done.size(), static_cast<std::size_t>(br.rungs[i].survivors)));
      std::set<std::int64_t> expect_ids, promoted_ids, expect_configs, next_configs;
      for (const auto* t : done) {
        expect_ids.insert(t->job.trial_id);
        expect_configs.insert(t->job.config_id);
      }
      for (const auto* t : finals) {
        if (t->promoted) promoted_ids.insert(t->job.trial_id);
      }
      for (const auto& t : r.trials) {
        if (t.job.bracket == br.s && t.job.rung == static_cast<std::int64_t>(i) + 1 && !t.replacement_of) {
          next_configs.insert(t.job.config_id);
        }
      }
      REQUIRE(promoted_ids == expect_ids);
      REQUIRE(next_configs == expect_configs);
    }
  }
}

std::vector<std::tuple<std::int64_t, std::int64_t, double, bool>> history(const HyperbandResult& r) {
  std::vector<std::tuple<std::int64_t, std::int64_t, double, bool>> out;
  for (const auto& t : r.trials) out.emplace_back(t.job.config_id, t.job.epochs, t.score.value_or(-1e300), t.promoted);
  return out;
}

}  // namespace

TEST_SUITE("hpo") {

TEST_CASE("schedule matches the closed form") {
  for (auto [R, eta] : std::vector<std::pair<std::int64_t, std::int64_t>>{{81, 3}, {27, 3}, {16, 2}, {9, 3}, {1, 2}, {100, 4}, {50, 3}}) {
    CAPTURE(R);
    CAPTURE(eta);
    const auto plan = hyperband_schedule(R, eta);
    const auto expect = closed_form(R, eta);
    REQUIRE(plan.brackets.size() == expect.size());
    CHECK(plan.budget == (plan.s_max + 1) * R);
    for (std::size_t b = 0; b < expect.size(); ++b) {
      const auto& got = plan.brackets[b];
      CHECK(got.s == expect[b].s);
      CHECK(got.n == expect[b].n);
      CHECK(got.r == doctest::Approx(expect[b].r));
      REQUIRE(got.rungs.size() == expect[b].rungs.size());
      for (std::size_t i = 0; i < got.rungs.size(); ++i) {
        CHECK(got.rungs[i].configs == expect[b].rungs[i].configs);
        CHECK(got.rungs[i].epochs == expect[b].rungs[i].epochs);
        CHECK(got.rungs[i].survivors == expect[b].rungs[i].survivors);
      }
    }
  }
}

TEST_CASE("schedule examples") {
  const auto p81 = hyperband_schedule(81, 3);
  std::vector<std::int64_t> n, r;
  for (const auto& b : p81.brackets) {
    n.push_back(b.n);
    r.push_back(static_cast<std::int64_t>(b.r));
  }
  CHECK(n == std::vector<std::int64_t>{81, 34, 15, 8, 5});
  CHECK(r == std::vector<std::int64_t>{1, 3, 9, 27, 81});

  const auto p1 = hyperband_schedule(1, 2);
  REQUIRE(p1.brackets.size() == 1);
  CHECK(p1.brackets[0].n == 1);
  CHECK(p1.brackets[0].r == 1.0);

  const auto p9 = hyperband_schedule(9, 3);
  CHECK(p9.s_max == 2);
  CHECK(p9.budget == 27);
  CHECK(p9.brackets[0].n == 9);
  CHECK(p9.brackets[0].r == 1.0);
  CHECK_THROWS_AS(hyperband_schedule(0, 3), ConfigError);
  CHECK_THROWS_AS(hyperband_schedule(9, 1), ConfigError);
}

TEST_CASE("sampling is seeded and respects the space") {
  SearchSpace space;
  std::mt19937_64 a(4), b(4);
  for (int i = 0; i < 200; ++i) {
    const auto x = sample_config(space, a);
    CHECK(x == sample_config(space, b));
    CHECK(x.learning_rate >= space.lr_low);
    CHECK(x.learning_rate <= space.lr_high);
    CHECK(std::count(space.batch_sizes.begin(), space.batch_sizes.end(), x.batch_size) == 1);
    CHECK(x.momentum >= space.momentum_low);
    CHECK(x.momentum <= space.momentum_high);
  }
  SearchSpace pinned;
  pinned.lr_low = pinned.lr_high = 0.02;
  pinned.wd_low = pinned.wd_high = 1e-4;
  pinned.momentum_low = pinned.momentum_high = 0.9;
  pinned.batch_sizes = {16};
  std::mt19937_64 c(1);
  for (int i = 0; i < 20; ++i) {
    const auto x = sample_config(pinned, c);
    CHECK(x.learning_rate == 0.02);
    CHECK(x.weight_decay == 1e-4);
    CHECK(x.momentum == 0.9);
  }
  SearchSpace broken;
  broken.lr_low = 0.5;
  broken.lr_high = 0.1;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
  CHECK(search_space_to_json(search_space_from_json(search_space_to_json(space))) == search_space_to_json(space));
}

TEST_CASE("returned best is the argmax over completed trials") {
  const auto r = run_hyperband(SearchSpace{}, lr_objective, options(9, 3, 12));
  double best = -1e300;
  for (const auto& t : r.trials) {
    if (t.status == "done") best = std::max(best, *t.score);
  }
  CHECK(r.best_score == best);
  const auto& winner = r.trials[static_cast<std::size_t>(r.best_trial)];
  CHECK(*winner.score == best);
  CHECK(winner.job.config == r.best_config);
  // The winner reaches the final rung of its bracket.
  bool at_top = false;
  for (const auto& t : r.trials) {
    const auto& br = *std::find_if(r.plan.brackets.begin(), r.plan.brackets.end(),
                                   [&](const Bracket& b) { return b.s == t.job.bracket; });
    if (t.job.config_id == winner.job.config_id && t.job.rung + 1 == static_cast<std::int64_t>(br.rungs.size())) {
      at_top = true;
    }
  }
  CHECK(at_top);
  require_survivor_rule(r);
}

TEST_CASE("resource accounting follows the plan") {
  for (auto [R, eta] : std::vector<std::pair<std::int64_t, std::int64_t>>{{27, 3}, {16, 2}, {9, 3}}) {
    const auto r = run_hyperband(SearchSpace{}, lr_objective, options(R, eta, 3));
    CHECK(r.epochs_executed == r.plan.total_epochs());
    std::map<std::int64_t, std::int64_t> last_epochs;
    for (const auto& t : r.trials) {
      const auto& br = *std::find_if(r.plan.brackets.begin(), r.plan.brackets.end(),
                                     [&](const Bracket& b) { return b.s == t.job.bracket; });
      CHECK(t.job.epochs == br.rungs[static_cast<std::size_t>(t.job.rung)].epochs);
      CHECK(t.job.previous_epochs == last_epochs[t.job.config_id]);
      last_epochs[t.job.config_id] = t.job.epochs;
    }
    std::int64_t per_rung = 0;
    for (const auto& br : r.plan.brackets) {
      std::int64_t prev = 0;
      for (const auto& rung : br.rungs) {
        per_rung += rung.configs * (rung.epochs - prev);
        prev = rung.epochs;
      }
    }
    CHECK(per_rung == r.plan.total_epochs());
  }
}

TEST_CASE("fixed seed reproduces the history") {
  const auto a = run_hyperband(SearchSpace{}, lr_objective, options(27, 3, 99));
  const auto b = run_hyperband(SearchSpace{}, lr_objective, options(27, 3, 99));
  CHECK(history(a) == history(b));
  CHECK(a.best_config == b.best_config);
  const auto c = run_hyperband(SearchSpace{}, lr_objective, options(27, 3, 100));
  CHECK_FALSE(history(a) == history(c));
}

TEST_CASE("parallel and serial runs agree") {
  // Jittered completion order; the score depends only on the job.
  const Objective jittery = [](const TrialJob& job) {
    std::this_thread::sleep_for(std::chrono::microseconds((job.trial_id * 7919) % 500));
    return lr_objective(job) + 1e-6 * static_cast<double>(job.epochs);
  };
  const auto serial = run_hyperband(SearchSpace{}, jittery, options(27, 3, 5, 1));
  const auto parallel = run_hyperband(SearchSpace{}, jittery, options(27, 3, 5, 4));
  CHECK(history(serial) == history(parallel));
  require_survivor_rule(parallel);
}

TEST_CASE("failed trials get one replacement") {
  const Objective fails_on_64 = [](const TrialJob& job) {
    if (job.config.batch_size == 64) throw std::runtime_error("out of memory");
    return lr_objective(job);
  };
  const auto r = run_hyperband(SearchSpace{}, fails_on_64, options(9, 3, 2));
  std::map<std::int64_t, int> replacements;
  int failures = 0;
  for (const auto& t : r.trials) {
    if (t.status == "failed") {
      ++failures;
      CHECK(t.job.config.batch_size == 64);
      CHECK_FALSE(t.diagnostic.empty());
    }
    if (t.replacement_of) {
      const auto& orig = r.trials[static_cast<std::size_t>(*t.replacement_of)];
      CHECK(orig.status == "failed");
      CHECK_FALSE(orig.replacement_of.has_value());
      ++replacements[*t.replacement_of];
    }
  }
  CHECK(failures > 0);
  for (const auto& t : r.trials) {
    if (t.status == "failed" && !t.replacement_of) CHECK(replacements[t.job.trial_id] == 1);
  }
  require_survivor_rule(r);
  CHECK(r.best_config.batch_size != 64);
}

TEST_CASE("non-finite scores count as failures") {
  const Objective nan_sometimes = [](const TrialJob& job) {
    return job.config.optimizer == OptimizerKind::kSgdMomentum ? std::nan("") : lr_objective(job);
  };
  const auto r = run_hyperband(SearchSpace{}, nan_sometimes, options(9, 3, 8));
  for (const auto& t : r.trials) {
    if (t.job.config.optimizer == OptimizerKind::kSgdMomentum) CHECK(t.status == "failed");
  }
  CHECK_THROWS_AS(run_hyperband(SearchSpace{}, [](const TrialJob&) -> double { throw std::runtime_error("x"); },
                                options(3, 3, 1)),
                  TrainingFailure);
}

TEST_CASE("tuning report lists plan, trials and winner") {
  const auto r = run_hyperband(SearchSpace{}, lr_objective, options(9, 3, 1));
  const auto j = tuning_report(r, SearchSpace{});
  CHECK(j.at("plan").at("brackets").size() == r.plan.brackets.size());
  CHECK(j.at("trials").size() == r.trials.size());
  CHECK(j.at("best").at("trial") == r.best_trial);
  CHECK(hp_config_from_json(j.at("best").at("config")) == r.best_config);
}

TEST_CASE("training objective continues promoted configs") {
  TempDir dir;
  const auto data = synth_glyphs(4, 8, 32, 32, 2);
  const auto folds = kfold(data.labels, data.classes, 4, 0);
  const auto spec = make_spec(Family::kSqueeze, Preset::kMicro, 1.0, {1, 32, 32}, 4);
  TrainConfig base;
  const auto objective = training_objective(spec, data, folds, 0, base, dir.path());
  SearchSpace space;
  space.batch_sizes = {8};
  const auto r = run_hyperband(space, objective, options(3, 3, 4));
  for (const auto& t : r.trials) {
    CHECK(t.status == "done");
    const auto rec = read_run_record(dir / ("config-" + std::to_string(t.job.config_id)));
    CHECK(static_cast<std::int64_t>(rec.rows.size()) >= t.job.epochs);
  }
  // The s=1 bracket promotes one config from 1 to 3 epochs without retraining.
  const auto& promoted = *std::find_if(r.trials.begin(), r.trials.end(), [](const Trial& t) { return t.job.previous_epochs > 0; });
  const auto rec = read_run_record(dir / ("config-" + std::to_string(promoted.job.config_id)));
  CHECK(rec.rows.size() == 3);
  CHECK(r.epochs_executed == r.plan.total_epochs());
}

}  // TEST_SUITE
