#include <doctest.h>

#include <algorithm>
#include <chrono>

#include "fens/bench.hpp"
#include "fens/cost.hpp"
#include "fens/errors.hpp"
#include "fens/training.hpp"

using namespace fens;

namespace {

constexpr InputShape kGlyph{1, 32, 32};
constexpr double kMiB = 1024.0 * 1024.0;

void spin_for(std::chrono::microseconds d) {
  const auto end = std::chrono::steady_clock::now() + d;
  while (std::chrono::steady_clock::now() < end) {
  }
}

BenchConfig quick() {
  BenchConfig c;
  c.batch_size = 8;
  c.repetitions = 5;
  c.warmup = 1;
  return c;
}

std::function<Model()> loader(Family f, double width = 1.0) {
  return [f, width] { return build_model(f, Preset::kMicro, width, kGlyph, 28, 1); };
}

}  // namespace

TEST_SUITE("bench") {

TEST_CASE("median of a constant-time stub is that constant") {
  int calls = 0;
  const double m = median_seconds(
      [&] {
        ++calls;
        spin_for(std::chrono::microseconds(2000));
      },
      9, 3);
  CHECK(calls == 12);
  CHECK(m >= 0.002);
  CHECK(m < 0.004);

  std::vector<std::int64_t> sizes;
  const auto lat = measure_latency(
      [&](std::int64_t n) {
        sizes.push_back(n);
        spin_for(std::chrono::microseconds(500 * n));
      },
      quick());
  CHECK(lat.batch_s >= 0.004);
  CHECK(lat.image_s >= 0.0005);
  CHECK(lat.image_s < lat.batch_s);
  CHECK(std::count(sizes.begin(), sizes.end(), 8) == 6);
  CHECK(std::count(sizes.begin(), sizes.end(), 1) == 6);
}

TEST_CASE("config validation") {
  auto c = quick();
  c.repetitions = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = quick();
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = quick();
  c.input = {1, 0, 4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_report_format("xml"), ConfigError);
}

TEST_CASE("tracked load memory covers the parameters") {
  for (auto f : {Family::kMobile, Family::kMnas, Family::kShuffle, Family::kSqueeze}) {
    const auto cost = count_cost(build_model(f, Preset::kMicro, 1.0, kGlyph, 28).spec());
    const auto mem = measure_memory(loader(f), quick());
    const double bytes = mem.load_tracked_mb * kMiB;
    CAPTURE(to_string(f));
    CHECK(bytes >= 4.0 * static_cast<double>(cost.params));
    CHECK(bytes <= 8.0 * static_cast<double>(cost.params + cost.bn_running));
    CHECK(mem.inference_img_mb > 0);
    CHECK(mem.load_mb >= 0);
  }
}

TEST_CASE("memory probes fall back and fail cleanly") {
  MemoryProbes none;
  none.tracking = false;
  CHECK_THROWS_AS(measure_memory(loader(Family::kSqueeze), quick(), none), UnsupportedError);

  MemoryProbes no_rss;
  no_rss.resident = [] { return std::int64_t{-1}; };
  const auto mem = measure_memory(loader(Family::kSqueeze), quick(), no_rss);
  CHECK(mem.method == "tracked");
  CHECK(mem.load_mb == mem.load_tracked_mb);
  CHECK(mem.load_mb > 0);

  MemoryProbes fake_rss;
  std::int64_t level = 1 << 20;
  fake_rss.resident = [&] { return level += 3 << 20; };
  const auto rss = measure_memory(loader(Family::kSqueeze), quick(), fake_rss);
  CHECK(rss.method == "rss");
  CHECK(rss.load_mb == doctest::Approx(3.0));
}

TEST_CASE("benchmarks refuse to run during training") {
  TrainingActivity training;
  CHECK_THROWS_AS(measure_latency([](std::int64_t) {}, quick()), StateError);
  CHECK_THROWS_AS(bench_model("m", loader(Family::kSqueeze), quick()), StateError);
}

TEST_CASE("model report carries costs and context") {
  const auto r = bench_model("squeeze", loader(Family::kSqueeze), quick());
  const auto cost = count_cost(build_model(Family::kSqueeze, Preset::kMicro, 1.0, kGlyph, 28).spec());
  CHECK(r.params == cost.params);
  CHECK(r.macs == cost.macs);
  CHECK(r.batch_size == 8);
  CHECK(r.repetitions == 5);
  CHECK(r.latency_batch_s > 0);
  CHECK(r.inference_time_img_s > 0);
  CHECK(r.environment.cores >= 1);
  CHECK(r.environment.threads == 1);
  CHECK_FALSE(r.memory_method.empty());

  const auto md = emit_report({r}, ReportFormat::kMarkdown);
  CHECK(md.find("Batch size 8") != std::string::npos);
  CHECK(md.find(r.environment.cpu_model) != std::string::npos);
  const auto json = bench_report_to_json(r);
  CHECK(json.at("environment").at("cores") == r.environment.cores);
}

TEST_CASE("ensemble report sums members") {
  const std::vector<BenchMember> members{{"a", loader(Family::kSqueeze)}, {"b", loader(Family::kMobile)}};
  const auto r = bench_ensemble("ens", members, Voting::kSoft, quick());
  REQUIRE(r.members.size() == 2);
  CHECK(r.params == r.members[0].params + r.members[1].params);
  CHECK(r.macs == r.members[0].macs + r.members[1].macs);
  CHECK(r.latency_batch_s > 0);
  CHECK(r.load_tracked_mb * kMiB >= 4.0 * static_cast<double>(r.params));
  CHECK_THROWS_AS(bench_ensemble("ens", members, Voting::kWeighted, quick()), ConfigError);
  CHECK_THROWS_AS(bench_ensemble("ens", {}, Voting::kSoft, quick()), ConfigError);
}

TEST_CASE("doubling the width increases latency") {
  auto c = quick();
  c.batch_size = 16;
  c.repetitions = 7;
  for (auto f : {Family::kMobile, Family::kSqueeze}) {
    auto narrow = loader(f)();
    auto wide = loader(f, 2.0)();
    CAPTURE(to_string(f));
    CHECK(measure_latency(wide, c).batch_s > measure_latency(narrow, c).batch_s);
  }
}

TEST_CASE("csv report round trip") {
  CHECK(emit_report({}, ReportFormat::kCsv) ==
        "subject,latency_batch_s,inference_time_img_s,load_memory_mb,inference_memory_img_mb,params,macs\n");
  BenchReport a;
  a.subject = "All-Ens, \"soft\"";
  a.latency_batch_s = 0.1234567890123;
  a.inference_time_img_s = 1e-5;
  a.load_memory_mb = 3.25;
  a.inference_memory_img_mb = 0.5;
  a.params = 123456;
  a.macs = 9876543210;
  const auto one = emit_report({a}, ReportFormat::kCsv);
  CHECK(std::count(one.begin(), one.end(), '\n') == 2);
  BenchReport b = a;
  b.subject = "plain";
  b.params = 1;
  const auto back = parse_bench_csv(emit_report({a, b}, ReportFormat::kCsv));
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& want = i == 0 ? a : b;
    CHECK(back[i].subject == want.subject);
    CHECK(back[i].latency_batch_s == want.latency_batch_s);
    CHECK(back[i].inference_time_img_s == want.inference_time_img_s);
    CHECK(back[i].load_memory_mb == want.load_memory_mb);
    CHECK(back[i].inference_memory_img_mb == want.inference_memory_img_mb);
    CHECK(back[i].params == want.params);
    CHECK(back[i].macs == want.macs);
  }
  CHECK_THROWS_AS(parse_bench_csv("nope\n"), ParseError);
  CHECK_THROWS_AS(parse_bench_csv(one + "x,1,2\n"), ParseError);
}

}  // TEST_SUITE
