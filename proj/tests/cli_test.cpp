#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fens/cli.hpp"
#include "fens/data.hpp"
#include "support.hpp"

using namespace fens;
using fens::test::TempDir;
using fens::test::slurp;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("flags override the config file") {
  TempDir dir;
  std::ofstream(dir / "c.json") << R"({"train": {"seed": 3, "epochs": 4}, "dataset": {"kind": "synth"}})";
  const auto r = run_cli({"train", "--config", (dir / "c.json").string(), "--seed", "9", "--print-config",
                          "--out", (dir / "o").string()});
  REQUIRE(r.code == cli::kExitOk);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("train").at("seed") == 9);
  CHECK(j.at("train").at("epochs") == 4);
  CHECK(j.at("output") == (dir / "o").string());

  const auto leaf = run_cli({"train", "--config", (dir / "c.json").string(), "--train.learning_rate", "0.5",
                             "--model.families", "squeeze,mnas", "--print-config"});
  REQUIRE(leaf.code == cli::kExitOk);
  const auto k = nlohmann::json::parse(leaf.out);
  CHECK(k.at("train").at("learning_rate") == 0.5);
  CHECK(k.at("model").at("families") == nlohmann::json{"squeeze", "mnas"});
}

TEST_CASE("usage errors exit with code 2") {
  TempDir dir;
  const auto missing = run_cli({"tune", "--out", (dir / "o").string()});
  CHECK(missing.code == cli::kExitUsage);
  CHECK(missing.err.find("dataset") != std::string::npos);
  CHECK(run_cli({"train", "--dataset", "synth", "--no-such-flag"}).code == cli::kExitUsage);
  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--dataset", "synth", "--train.epochs", "many", "--print-config"}).code ==
        cli::kExitUsage);
  std::ofstream(dir / "bad.json") << R"({"train": {"epoch": 3}})";
  const auto unknown = run_cli({"train", "--config", (dir / "bad.json").string(), "--dataset", "synth"});
  CHECK(unknown.code == cli::kExitUsage);
  CHECK(unknown.err.find("train.epoch") != std::string::npos);
  CHECK(run_cli({"--help"}).code == cli::kExitOk);
}

TEST_CASE("dataset synth is byte-identical across runs") {
  TempDir a, b;
  const std::vector<std::string> common{"dataset", "synth", "--classes", "5", "--per-class", "3", "--seed", "11"};
  auto args_a = common, args_b = common;
  args_a.insert(args_a.end(), {"--out", a.path().string()});
  args_b.insert(args_b.end(), {"--out", b.path().string()});
  REQUIRE(run_cli(args_a).code == cli::kExitOk);
  REQUIRE(run_cli(args_b).code == cli::kExitOk);
  CHECK(slurp(a / "glyphs.csv") == slurp(b / "glyphs.csv"));
  CHECK_FALSE(slurp(a / "glyphs.csv").empty());

  const auto ds = load_csv_dataset(a / "glyphs.csv", 32, 32);
  CHECK(ds.size() == 15);
  const auto inspect = run_cli({"dataset", "inspect", (a / "glyphs.csv").string()});
  REQUIRE(inspect.code == cli::kExitOk);
  CHECK(nlohmann::json::parse(inspect.out).at("class_counts") == nlohmann::json{3, 3, 3, 3, 3});
}

TEST_CASE("train, eval and report through the command line") {
  TempDir dir;
  const auto out = (dir / "o").string();
  const std::vector<std::string> base{"--out", out, "--dataset", "synth", "--dataset.classes", "4",
                                      "--dataset.per_class", "10", "--family", "squeeze", "--epochs", "1",
                                      "--cv.folds", "2"};
  auto train = std::vector<std::string>{"train"};
  train.insert(train.end(), base.begin(), base.end());
  const auto t = run_cli(train);
  REQUIRE_MESSAGE(t.code == cli::kExitOk, t.err);
  CHECK(t.out.find("done") != std::string::npos);

  const auto ens = run_cli({"ensemble", "--out", out, "--format", "csv"});
  REQUIRE_MESSAGE(ens.code == cli::kExitOk, ens.err);
  CHECK(ens.out.find("All-Ens") != std::string::npos);

  const auto rep = run_cli({"report", "--out", out});
  REQUIRE_MESSAGE(rep.code == cli::kExitOk, rep.err);
  CHECK(std::filesystem::exists(dir / "o" / "reports"));

  const auto runs = dir / "o" / "runs";
  REQUIRE(std::filesystem::exists(runs));
  const auto run_id = std::filesystem::directory_iterator(runs)->path().filename().string();
  const auto ev = run_cli({"eval", "--out", out, "--run", run_id, "--probs", (dir / "p.prob").string()});
  REQUIRE_MESSAGE(ev.code == cli::kExitOk, ev.err);
  const auto metrics = nlohmann::json::parse(ev.out);
  CHECK(metrics.at("samples") == 8);
  CHECK(metrics.at("accuracy").get<double>() >= 0.0);
  CHECK(std::filesystem::exists(dir / "p.prob"));
}

}  // TEST_SUITE
