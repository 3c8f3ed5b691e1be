// Acceptance runner: one PASS/FAIL line per criterion.
//   acceptance                 run every criterion
//   acceptance --criterion N   run criterion N only
// Property criteria run the matching unit test cases in a child process; the
// rest measure directly.
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fens/bench.hpp"
#include "fens/cost.hpp"
#include "fens/data.hpp"
#include "fens/hpo.hpp"
#include "fens/log.hpp"
#include "fens/pipeline.hpp"
#include "fens/report.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace fens;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fixed(double v, int prec) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

struct ChildRun {
  int status = -1;
  std::int64_t cases = 0;
  std::int64_t passed = 0;
  double seconds = 0;
  std::string output;
};

// Runs a doctest binary, optionally restricted to the named test cases.
ChildRun run_doctest(const std::string& binary, const std::vector<std::string>& cases) {
  std::string cmd = "'" + binary + "'";
  if (!cases.empty()) {
    std::string list;
    for (const auto& c : cases) list += (list.empty() ? "" : ",") + c;
    cmd += " '--test-case=" + list + "'";
  }
  cmd += " 2>&1";
  ChildRun r;
  const auto start = std::chrono::steady_clock::now();
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) r.output += buf.data();
  r.status = pclose(pipe);
  r.seconds = seconds_since(start);
  std::smatch m;
  static const std::regex summary(R"(test cases:\s*(\d+)\s*\|\s*(\d+) passed)");
  if (std::regex_search(r.output, m, summary)) {
    r.cases = std::stoll(m[1]);
    r.passed = std::stoll(m[2]);
  }
  return r;
}

// All named cases must exist and pass.
Verdict doctest_verdict(const std::string& binary, const std::vector<std::string>& cases, double limit_s = 0) {
  const auto r = run_doctest(binary, cases);
  const auto expected = static_cast<std::int64_t>(cases.size());
  Verdict v;
  v.pass = r.status == 0 && r.passed == r.cases && (expected == 0 || r.cases == expected);
  std::ostringstream os;
  os << r.passed << "/" << r.cases << " test cases passed in " << fixed(r.seconds, 1) << " s";
  if (expected > 0 && r.cases != expected) os << " (expected " << expected << " cases)";
  if (limit_s > 0) {
    os << " (limit " << limit_s << " s)";
    v.pass = v.pass && r.seconds < limit_s;
  }
  if (r.status != 0) std::cerr << r.output;
  v.detail = os.str();
  return v;
}

Verdict criterion1() {
  // Every layer kind, 20 shapes each, in the 64-bit build.
  return doctest_verdict(FENS_GRADCHECK_BIN, {}, 120);
}

Verdict criterion2() {
  return doctest_verdict(FENS_UNIT_BIN, {"voting matches the brute-force oracle on random pools"});
}

Verdict criterion3() { return doctest_verdict(FENS_UNIT_BIN, {"best-ens matches exhaustive enumeration"}); }

Verdict criterion4() {
  auto v = doctest_verdict(FENS_UNIT_BIN, {"schedule matches the closed form", "schedule examples",
                                           "fixed seed reproduces the history", "parallel and serial runs agree"});
  const auto plan = hyperband_schedule(81, 3);
  std::vector<std::int64_t> n, r;
  for (const auto& b : plan.brackets) {
    n.push_back(b.n);
    r.push_back(static_cast<std::int64_t>(b.r));
  }
  const bool example = n == std::vector<std::int64_t>{81, 34, 15, 8, 5} && r == std::vector<std::int64_t>{1, 3, 9, 27, 81};
  std::ostringstream os;
  os << "R=81 eta=3 n=";
  for (std::size_t i = 0; i < n.size(); ++i) os << (i ? "/" : "") << n[i];
  os << " r=";
  for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "/" : "") << r[i];
  v.pass = v.pass && example;
  v.detail = os.str() + "; " + v.detail;
  return v;
}

Verdict criterion5() {
  auto v = doctest_verdict(FENS_UNIT_BIN, {"split and k-fold invariants over random datasets", "holdout split examples",
                                           "k-fold examples"});
  // 16,800 samples over 28 balanced classes at 0.8.
  std::vector<std::int64_t> labels;
  for (std::int64_t c = 0; c < 28; ++c) labels.insert(labels.end(), 600, c);
  const auto s = split_holdout(labels, 28, 0.8, 0);
  const bool counts = s.train.size() == 13440 && s.test.size() == 3360;
  v.pass = v.pass && counts;
  v.detail = "16800 at 0.8 -> " + std::to_string(s.train.size()) + "/" + std::to_string(s.test.size()) + "; " + v.detail;
  return v;
}

Verdict criterion6() {
  return doctest_verdict(FENS_UNIT_BIN,
                         {"checkpoint round trip is bit-identical", "resume from epoch 2 equals an uninterrupted 4-epoch run",
                          "damaged checkpoints are rejected"},
                         60);
}

Verdict criterion7() {
  return doctest_verdict(FENS_UNIT_BIN, {"hft keeps the feature extractor bit-identical to the source"});
}

Verdict criterion8() {
  auto v = doctest_verdict(FENS_UNIT_BIN, {"micro presets match the independent cost fixtures"});
  const bool fixtures_ok = v.pass;
  const std::map<Family, std::pair<double, double>> targets = {{Family::kMobile, {2.5e6, 0.02}},
                                                               {Family::kShuffle, {1.4e6, 0.013}},
                                                               {Family::kMnas, {2.2e6, 0.31}},
                                                               {Family::kSqueeze, {1.2e6, 0.36}}};
  bool params_ok = true, flops_ok = true;
  std::ostringstream os;
  for (auto f : kAllFamilies) {
    const auto cost = count_cost(make_spec(f, Preset::kFull, 1.0, InputShape{3, 224, 224}, 1000));
    const auto [params, gflops] = targets.at(f);
    const double got_gflops = 2.0 * static_cast<double>(cost.macs) / 1e9;
    const bool p = std::abs(static_cast<double>(cost.params) - params) <= 0.15 * params;
    const bool g = std::abs(got_gflops - gflops) <= 0.20 * gflops;
    params_ok = params_ok && p;
    flops_ok = flops_ok && g;
    os << to_string(f) << " " << fixed(static_cast<double>(cost.params) / 1e6, 3) << "M" << (p ? "" : "(!)") << " "
       << fixed(got_gflops, 3) << "GF" << (g ? "" : "(!)") << " vs " << gflops << "; ";
  }
  v.pass = v.pass && params_ok && flops_ok;
  v.detail = std::string("micro fixtures ") + (fixtures_ok ? "ok" : "MISMATCH") + ", params " +
             (params_ok ? "within 15%" : "OUT of 15%") + ", GFLOPs " + (flops_ok ? "within 20%" : "OUT of 20%") +
             ": " + os.str() + v.detail;
  return v;
}

Verdict criterion9() {
  fens::test::TempDir dir;
  auto doc = default_config_json();
  doc["output"] = (dir / "out").string();
  const auto config = config_from_json(doc);
  const bool shape = config.dataset.kind == "synth" && config.dataset.classes == 28 && config.dataset.per_class == 50 &&
                     config.families.size() == 4 && config.strategies == std::vector<Strategy>{Strategy::kTfs} &&
                     config.train.epochs <= 15 && !config.hpo;

  const auto start = std::chrono::steady_clock::now();
  const auto outcome = run_pipeline(config);
  const double elapsed = seconds_since(start);

  std::ostringstream os;
  double best_base = 0;
  bool each = outcome.failed() == 0;
  for (const auto& e : outcome.entries) {
    best_base = std::max(best_base, e.test.accuracy);
    each = each && e.test.accuracy >= 0.90;
    os << to_string(e.family) << " " << fixed(e.test.accuracy, 3) << ", ";
  }
  const auto combos = combos_from_json(nlohmann::json::parse(fens::test::slurp(dir / "out" / "ensemble" / "combinations.json")));
  double all_soft = -1;
  for (const auto& r : combos.rows) {
    if (r.name == "All-Ens") all_soft = r.metrics[0].accuracy;
  }
  const bool ens = all_soft >= best_base - 0.005;
  const bool fast = elapsed <= 20 * 60;
  os << "All-Ens soft " << fixed(all_soft, 3) << " (best base " << fixed(best_base, 3) << "), " << fixed(elapsed, 0)
     << " s on " << probe_environment().cores << " core(s)";
  return {shape && each && ens && fast,
          std::string(each ? "(a) ok" : "(a) FAIL") + (ens ? " (b) ok" : " (b) FAIL") + (fast ? " (c) ok" : " (c) FAIL") +
              ": " + os.str()};
}

Verdict criterion10() {
  const InputShape glyph{1, 32, 32};
  BenchConfig config;
  config.batch_size = 32;
  config.repetitions = 21;
  config.warmup = 3;
  auto member = [&](Family f) {
    return BenchMember{to_string(f), [f, glyph] { return build_model(f, Preset::kMicro, 1.0, glyph, 28, 1); }};
  };

  std::vector<BenchMember> four;
  for (auto f : kAllFamilies) four.push_back(member(f));
  const auto all = bench_ensemble("Ensemble-4", four, Voting::kSoft, config);
  double sum = 0, slowest = -1;
  std::size_t slow_idx = 0;
  for (std::size_t i = 0; i < all.members.size(); ++i) {
    sum += all.members[i].latency_batch_s;
    if (all.members[i].latency_batch_s > slowest) {
      slowest = all.members[i].latency_batch_s;
      slow_idx = i;
    }
  }
  const double ratio4 = all.latency_batch_s / sum;
  const bool four_ok = ratio4 >= 0.8 && ratio4 <= 1.3;

  auto three = four;
  three.erase(three.begin() + static_cast<std::ptrdiff_t>(slow_idx));
  const auto reduced = bench_ensemble("Ensemble-3", three, Voting::kSoft, config);
  const bool drop_ok = reduced.latency_batch_s < all.latency_batch_s;

  const auto single = bench_ensemble("Ensemble-1", {four[slow_idx]}, Voting::kSoft, config);
  const double ratio1 = single.latency_batch_s / single.members.at(0).latency_batch_s;
  const bool single_ok = std::abs(ratio1 - 1.0) <= 0.10;

  bool context = true;
  for (const auto* r : {&all, &reduced, &single}) {
    context = context && r->batch_size == config.batch_size && r->environment.cores > 0 &&
              !r->environment.cpu_model.empty();
    const auto md = emit_report({*r}, ReportFormat::kMarkdown);
    context = context && md.find("Batch size " + std::to_string(config.batch_size)) != std::string::npos &&
              md.find("Environment: " + r->environment.describe()) != std::string::npos;
  }
  std::ostringstream os;
  os << "single/standalone " << fixed(ratio1, 3) << (single_ok ? "" : "(!)") << ", ensemble-4/sum " << fixed(ratio4, 3)
     << (four_ok ? "" : "(!)") << ", without " << four[slow_idx].id << " " << fixed(reduced.latency_batch_s, 4)
     << " s < " << fixed(all.latency_batch_s, 4) << " s" << (drop_ok ? "" : "(!)") << ", context "
     << (context ? "ok" : "missing") << " [" << all.environment.describe() << "]";
  return {single_ok && four_ok && drop_ok && context, os.str()};
}

Verdict criterion11() {
  std::mt19937_64 rng(11);
  Manifest man;
  man.classes = 6;
  auto labels = [&](std::size_t n) {
    std::vector<std::int64_t> v(n);
    for (auto& l : v) l = fens::test::uniform_int(rng, 0, 5);
    return v;
  };
  man.test_labels = labels(30);
  man.validation_labels = labels(20);
  auto matrix = [&](std::size_t n) {
    std::vector<double> p(n * 6);
    for (auto& x : p) x = std::uniform_real_distribution<double>(0, 1)(rng);
    return ProbabilityMatrix(static_cast<std::int64_t>(n), 6, std::move(p));
  };
  for (auto f : kAllFamilies) {
    for (auto s : {Strategy::kTfs, Strategy::kHft, Strategy::kFft}) {
      MemberRecord m;
      m.family = to_string(f);
      m.strategy = to_string(s);
      m.id = "pool-" + m.family + "-" + m.strategy;
      m.test = matrix(30);
      m.validation = matrix(20);
      m.val_score = std::uniform_real_distribution<double>(0.1, 1)(rng);
      man.members.push_back(std::move(m));
    }
  }
  const auto table = combinations_table(evaluate_combinations("pool", man, 1));
  std::vector<std::string> names;
  for (const auto& row : table.rows) names.push_back(row[0].text);
  const std::vector<std::string> expect{"All-Ens",    "TFS-Ens",  "HFT-Ens",     "FFT-Ens",    "mobile-Ens",
                                        "mnas-Ens",   "shuffle-Ens", "squeeze-Ens", "Best-Ens"};
  bool groups = table.header.size() == 13;
  for (std::size_t v = 0; v < 3 && groups; ++v) {
    for (std::size_t m = 0; m < 4; ++m) {
      groups = groups && table.header[1 + 4 * v + m].rfind(to_string(kAllVotings[v]) + "_", 0) == 0;
    }
  }
  std::ostringstream os;
  os << table.rows.size() << " rows (";
  for (std::size_t i = 0; i < names.size(); ++i) os << (i ? ", " : "") << names[i];
  os << "), " << table.header.size() - 1 << " metric columns in soft/hard/weighted groups";
  return {names == expect && groups, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);
  log::set_level(log::Level::kQuiet);

  const std::vector<std::function<Verdict()>> criteria{criterion1, criterion2, criterion3,  criterion4,
                                                       criterion5, criterion6, criterion7,  criterion8,
                                                       criterion9, criterion10, criterion11};
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Verdict v;
    try {
      v = criteria[i]();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::cout << "criterion " << i + 1 << ": " << (v.pass ? "PASS" : "FAIL") << " " << v.detail << std::endl;
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
