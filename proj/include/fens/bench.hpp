#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/ensemble.hpp"
#include "fens/errors.hpp"
#include "fens/model.hpp"

namespace fens {

struct BenchConfig {
  std::int64_t batch_size = 32;
  std::int64_t repetitions = 30;
  std::int64_t warmup = 5;
  // Zero channels means "use the model's input shape".
  InputShape input{0, 0, 0};

  void validate() const;
};

struct Environment {
  std::string cpu_model = "unknown";
  std::int64_t cores = 0;
  double ram_mb = 0;
  std::int64_t threads = 1;  // workers used while measuring

  std::string describe() const;
};

Environment probe_environment();
nlohmann::json environment_to_json(const Environment& e);

struct BenchReport {
  std::string subject;
  double latency_batch_s = 0;
  double inference_time_img_s = 0;
  double load_memory_mb = 0;
  double inference_memory_img_mb = 0;
  std::int64_t params = 0;
  std::int64_t macs = 0;

  // Context; not part of the CSV columns.
  std::int64_t batch_size = 0;
  std::int64_t repetitions = 0;
  std::string memory_method;
  double load_tracked_mb = 0;
  Environment environment;
  std::vector<BenchReport> members;
};

nlohmann::json bench_report_to_json(const BenchReport& r);

// Median of `repetitions` timings of fn() after `warmup` untimed calls.
double median_seconds(const std::function<void()>& fn, std::int64_t repetitions, std::int64_t warmup);

struct Latency {
  double batch_s = 0;
  double image_s = 0;
};

// `run(n)` performs one inference over a batch of n images.
Latency measure_latency(const std::function<void(std::int64_t)>& run, const BenchConfig& config);
Latency measure_latency(Model& model, const BenchConfig& config);

struct MemoryProbes {
  // Resident bytes of the process, negative when unavailable.
  std::function<std::int64_t()> resident;
  bool tracking = true;  // allocator counters usable
  static MemoryProbes system();
};

struct Memory {
  double load_mb = 0;
  double load_tracked_mb = 0;
  double inference_img_mb = 0;
  std::string method;  // "rss" or "tracked"
};

// Load memory: resident-set delta across `load` (allocator-tracked delta
// when RSS is unavailable). Inference memory: peak tracked allocation during
// a single-image forward. The loaded model is handed back through `out`.
Memory measure_memory(const std::function<Model()>& load, const BenchConfig& config,
                      const MemoryProbes& probes = MemoryProbes::system(),
                      std::optional<Model>* out = nullptr);

// Full record for one model.
BenchReport bench_model(const std::string& subject, const std::function<Model()>& load, const BenchConfig& config);

struct BenchMember {
  std::string id;
  std::function<Model()> load;
};

// Members run one after another on the same batch, then their probabilities
// are aggregated. Sub-reports measure each member on its own.
BenchReport bench_ensemble(const std::string& subject, const std::vector<BenchMember>& members, Voting voting,
                           const BenchConfig& config, std::span<const double> scores = {});

enum class ReportFormat { kCsv, kMarkdown };
ReportFormat parse_report_format(const std::string& name);

std::string emit_report(const std::vector<BenchReport>& reports, ReportFormat format);
// Inverse of the CSV form (context fields are left default).
std::vector<BenchReport> parse_bench_csv(const std::string& text);

}  // namespace fens
