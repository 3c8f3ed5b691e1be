#include "fens/bench.hpp"

#include <omp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include "fens/autograd.hpp"
#include "fens/cost.hpp"
#include "fens/memory.hpp"
#include "fens/training.hpp"

namespace fens {

namespace {

constexpr double kMiB = 1024.0 * 1024.0;

// Benchmarks run on one worker and never alongside training.
class BenchScope {
 public:
  BenchScope() : saved_(omp_get_max_threads()) {
    if (TrainingActivity::active() > 0) {
      throw StateError("benchmark refused: training is running in this process");
    }
    omp_set_num_threads(1);
  }
  ~BenchScope() { omp_set_num_threads(saved_); }
  BenchScope(const BenchScope&) = delete;
  BenchScope& operator=(const BenchScope&) = delete;

 private:
  int saved_;
};

InputShape input_of(const Model& model, const BenchConfig& config) {
  return config.input.channels > 0 ? config.input : model.spec().input;
}

Tensor make_input(InputShape in, std::int64_t n) {
  Tensor t({n, in.channels, in.height, in.width});
  // Deterministic non-constant content so no kernel takes a shortcut.
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>((i * 7919 % 1000) / 1000.0);
  return t;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

void BenchConfig::validate() const {
  if (batch_size < 1) throw ConfigError("bench: batch size must be at least 1");
  if (repetitions < 3) throw ConfigError("bench: repetitions must be at least 3");
  if (warmup < 0) throw ConfigError("bench: warmup must be non-negative");
  if (input.channels < 0 || (input.channels > 0 && (input.height < 1 || input.width < 1))) {
    throw ConfigError("bench: invalid input shape");
  }
}

std::string Environment::describe() const {
  std::ostringstream os;
  os << cpu_model << ", " << cores << " cores, " << static_cast<std::int64_t>(ram_mb) << " MB RAM, " << threads
     << " worker";
  return os.str();
}

Environment probe_environment() {
  Environment e;
  std::ifstream cpu("/proc/cpuinfo");
  std::string line;
  std::int64_t processors = 0;
  while (std::getline(cpu, line)) {
    if (line.rfind("processor", 0) == 0) ++processors;
    if (e.cpu_model == "unknown" && line.rfind("model name", 0) == 0) {
      auto colon = line.find(':');
      if (colon != std::string::npos) {
        auto v = line.substr(colon + 1);
        v.erase(0, v.find_first_not_of(" \t"));
        if (!v.empty()) e.cpu_model = v;
      }
    }
  }
  e.cores = processors > 0 ? processors : static_cast<std::int64_t>(std::thread::hardware_concurrency());
  std::ifstream mem("/proc/meminfo");
  while (std::getline(mem, line)) {
    if (line.rfind("MemTotal:", 0) == 0) {
      std::istringstream is(line.substr(9));
      double kb = 0;
      is >> kb;
      e.ram_mb = kb / 1024.0;
      break;
    }
  }
  return e;
}

nlohmann::json environment_to_json(const Environment& e) {
  return {{"cpu_model", e.cpu_model}, {"cores", e.cores}, {"ram_mb", e.ram_mb}, {"threads", e.threads}};
}

nlohmann::json bench_report_to_json(const BenchReport& r) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : r.members) members.push_back(bench_report_to_json(m));
  return {{"subject", r.subject},
          {"latency_batch_s", r.latency_batch_s},
          {"inference_time_img_s", r.inference_time_img_s},
          {"load_memory_mb", r.load_memory_mb},
          {"inference_memory_img_mb", r.inference_memory_img_mb},
          {"params", r.params},
          {"macs", r.macs},
          {"batch_size", r.batch_size},
          {"repetitions", r.repetitions},
          {"memory_method", r.memory_method},
          {"load_tracked_mb", r.load_tracked_mb},
          {"environment", environment_to_json(r.environment)},
          {"members", members}};
}

double median_seconds(const std::function<void()>& fn, std::int64_t repetitions, std::int64_t warmup) {
  for (std::int64_t i = 0; i < warmup; ++i) fn();
  std::vector<double> t(static_cast<std::size_t>(repetitions));
  for (auto& s : t) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  const auto mid = t.size() / 2;
  std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(mid), t.end());
  double m = t[mid];
  if (t.size() % 2 == 0) {
    const double lower = *std::max_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(mid));
    m = 0.5 * (m + lower);
  }
  return m;
}

Latency measure_latency(const std::function<void(std::int64_t)>& run, const BenchConfig& config) {
  config.validate();
  BenchScope scope;
  Latency l;
  l.batch_s = median_seconds([&] { run(config.batch_size); }, config.repetitions, config.warmup);
  l.image_s = median_seconds([&] { run(1); }, config.repetitions, config.warmup);
  return l;
}

Latency measure_latency(Model& model, const BenchConfig& config) {
  const auto in = input_of(model, config);
  const Tensor batch = make_input(in, config.batch_size);
  const Tensor single = make_input(in, 1);
  return measure_latency(
      [&](std::int64_t n) {
        Tensor logits = forward_logits(model, n == 1 ? single : batch);
        (void)logits;
      },
      config);
}

MemoryProbes MemoryProbes::system() {
  MemoryProbes p;
  p.resident = [] { return memory::resident_bytes(); };
  return p;
}

namespace {

// Load part of a memory measurement; `load` keeps whatever it builds alive.
Memory measure_load(const std::function<void()>& load, const MemoryProbes& probes) {
  const bool rss = probes.resident && probes.resident() >= 0;
  if (!rss && !probes.tracking) throw UnsupportedError("no memory probe available on this platform");
  Memory m;
  m.method = rss ? "rss" : "tracked";
  const auto tracked_before = memory::current_bytes();
  const auto rss_before = rss ? probes.resident() : 0;
  load();
  const auto rss_after = rss ? probes.resident() : 0;
  const auto tracked_load = static_cast<double>(memory::current_bytes() - tracked_before) / kMiB;
  m.load_tracked_mb = probes.tracking ? tracked_load : 0;
  m.load_mb = rss ? static_cast<double>(std::max<std::int64_t>(0, rss_after - rss_before)) / kMiB : tracked_load;
  return m;
}

double peak_mb_during(const std::function<void()>& fn) {
  const auto base = memory::reset_peak();
  fn();
  return static_cast<double>(memory::peak_bytes() - base) / kMiB;
}

}  // namespace

Memory measure_memory(const std::function<Model()>& load, const BenchConfig& config, const MemoryProbes& probes,
                      std::optional<Model>* out) {
  config.validate();
  BenchScope scope;
  std::optional<Model> model;
  Memory m = measure_load([&] { model.emplace(load()); }, probes);
  if (probes.tracking) {
    const Tensor single = make_input(input_of(*model, config), 1);
    m.inference_img_mb = peak_mb_during([&] { Tensor logits = forward_logits(*model, single); });
  }
  if (out) *out = std::move(model);
  return m;
}

BenchReport bench_model(const std::string& subject, const std::function<Model()>& load, const BenchConfig& config) {
  config.validate();
  std::optional<Model> model;
  const auto mem = measure_memory(load, config, MemoryProbes::system(), &model);
  const auto lat = measure_latency(*model, config);
  const auto cost = count_cost(model->spec());

  BenchReport r;
  r.subject = subject;
  r.latency_batch_s = lat.batch_s;
  r.inference_time_img_s = lat.image_s;
  r.load_memory_mb = mem.load_mb;
  r.inference_memory_img_mb = mem.inference_img_mb;
  r.params = cost.params;
  r.macs = cost.macs;
  r.batch_size = config.batch_size;
  r.repetitions = config.repetitions;
  r.memory_method = mem.method;
  r.load_tracked_mb = mem.load_tracked_mb;
  r.environment = probe_environment();
  return r;
}

BenchReport bench_ensemble(const std::string& subject, const std::vector<BenchMember>& members, Voting voting,
                           const BenchConfig& config, std::span<const double> scores) {
  config.validate();
  if (members.empty()) throw ConfigError("bench: ensemble needs at least one member");
  if (voting == Voting::kWeighted && scores.size() != members.size()) {
    throw ConfigError("bench: weighted voting needs one score per member");
  }

  BenchReport r;
  r.subject = subject;
  r.batch_size = config.batch_size;
  r.repetitions = config.repetitions;
  r.environment = probe_environment();
  for (const auto& m : members) r.members.push_back(bench_model(m.id, m.load, config));

  // Load every member together for the ensemble's own memory figure.
  std::vector<Model> models;
  models.reserve(members.size());
  Memory mem;
  {
    BenchScope scope;
    mem = measure_load(
        [&] {
          for (const auto& m : members) models.push_back(m.load());
        },
        MemoryProbes::system());
  }
  r.memory_method = mem.method;
  r.load_memory_mb = mem.load_mb;
  r.load_tracked_mb = mem.load_tracked_mb;

  const auto in = input_of(models.front(), config);
  for (const auto& m : models) {
    if (input_of(m, config) != in) throw ConfigError("bench: ensemble members disagree on input shape");
  }
  const Tensor batch = make_input(in, config.batch_size);
  const Tensor single = make_input(in, 1);
  auto run = [&](std::int64_t n) {
    std::vector<ProbabilityMatrix> probs;
    probs.reserve(models.size());
    for (auto& m : models) probs.push_back(matrix_from_tensor(softmax_rows(forward_logits(m, n == 1 ? single : batch))));
    std::vector<const ProbabilityMatrix*> ptrs;
    for (const auto& p : probs) ptrs.push_back(&p);
    auto pred = vote(voting, ptrs, scores);
    (void)pred;
  };
  const auto lat = measure_latency(run, config);
  r.latency_batch_s = lat.batch_s;
  r.inference_time_img_s = lat.image_s;

  {
    BenchScope scope;
    r.inference_memory_img_mb = peak_mb_during([&] { run(1); });
  }
  for (const auto& m : r.members) {
    r.params += m.params;
    r.macs += m.macs;
  }
  return r;
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "markdown" || name == "md") return ReportFormat::kMarkdown;
  throw ConfigError("unknown report format '" + name + "' (expected csv or markdown)");
}

std::string emit_report(const std::vector<BenchReport>& reports, ReportFormat format) {
  std::ostringstream os;
  if (format == ReportFormat::kCsv) {
    os << "subject,latency_batch_s,inference_time_img_s,load_memory_mb,inference_memory_img_mb,params,macs\n";
    for (const auto& r : reports) {
      os << csv_field(r.subject) << ',' << fmt(r.latency_batch_s) << ',' << fmt(r.inference_time_img_s) << ','
         << fmt(r.load_memory_mb) << ',' << fmt(r.inference_memory_img_mb) << ',' << r.params << ',' << r.macs
         << '\n';
    }
    return os.str();
  }
  auto fixed = [](double v, int prec) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(prec);
    s << v;
    return s.str();
  };
  os << "| Model | Latency (batch) s | Inference time (img) s | Load memory MB | Inference memory (img) MB | "
        "Params | MACs |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    std::string subject = r.subject;
    std::replace(subject.begin(), subject.end(), '|', '/');
    os << "| " << subject << " | " << fixed(r.latency_batch_s, 4) << " | " << fixed(r.inference_time_img_s, 4)
       << " | " << fixed(r.load_memory_mb, 2) << " | " << fixed(r.inference_memory_img_mb, 2) << " | " << r.params
       << " | " << r.macs << " |\n";
  }
  if (!reports.empty()) {
    const auto& r = reports.front();
    os << "\nBatch size " << r.batch_size << ", median of " << r.repetitions << " repetitions, memory method "
       << (r.memory_method.empty() ? "n/a" : r.memory_method) << ".\nEnvironment: " << r.environment.describe()
       << ".\n";
  }
  return os.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw ParseError("bench csv row " + std::to_string(row) + ": unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

template <class T>
T parse_num(const std::string& s, std::size_t row) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError("bench csv row " + std::to_string(row) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

std::vector<BenchReport> parse_bench_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("bench csv: missing header");
  if (line != "subject,latency_batch_s,inference_time_img_s,load_memory_mb,inference_memory_img_mb,params,macs") {
    throw ParseError("bench csv: unexpected header");
  }
  std::vector<BenchReport> out;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_csv_line(line, row);
    if (f.size() != 7) throw ParseError("bench csv row " + std::to_string(row) + ": expected 7 fields");
    BenchReport r;
    r.subject = f[0];
    r.latency_batch_s = parse_num<double>(f[1], row);
    r.inference_time_img_s = parse_num<double>(f[2], row);
    r.load_memory_mb = parse_num<double>(f[3], row);
    r.inference_memory_img_mb = parse_num<double>(f[4], row);
    r.params = parse_num<std::int64_t>(f[5], row);
    r.macs = parse_num<std::int64_t>(f[6], row);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fens
