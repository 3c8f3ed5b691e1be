#include "fens/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fens/digest.hpp"
#include "fens/errors.hpp"
#include "fens/log.hpp"
#include "fens/pipeline.hpp"

namespace fens::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Converts a flag value to the JSON type of the default at that key.
json typed_value(const json& like, const std::string& key, const std::string& text) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      throw UsageError("--" + key + " expects true or false, got '" + text + "'");
    }
    if (like.is_number_unsigned() || like.is_number_integer()) {
      std::size_t used = 0;
      const auto v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
    if (like.is_number_float()) {
      std::size_t used = 0;
      const auto v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
    if (like.is_array()) {
      json arr = json::array();
      const json elem = like.empty() ? json("") : like.front();
      for (const auto& part : split_list(text)) arr.push_back(typed_value(elem, key, part));
      return arr;
    }
  } catch (const std::invalid_argument&) {
    throw UsageError("--" + key + ": cannot parse '" + text + "'");
  } catch (const std::out_of_range&) {
    throw UsageError("--" + key + ": value out of range '" + text + "'");
  }
  return text;
}

void set_path(json& j, const std::string& dotted, json value) {
  json* node = &j;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = std::move(value);
}

const json& get_path(const json& j, const std::string& dotted) {
  const json* node = &j;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) node = &node->at(part);
  return *node;
}

// Config flags shared by the pipeline subcommands: --config, one flag per
// config leaf and a few short aliases.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> leaves;
  std::optional<std::string> seed, epochs, family, strategy, out, jobs, dataset;
  bool hpo = false;
  bool print_config = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config file; flags override its values")->check(CLI::ExistingFile);
    app->add_flag("--print-config", print_config, "Print the resolved config and exit");
    app->add_option("--seed", seed, "Alias of --train.seed");
    app->add_option("--epochs", epochs, "Alias of --train.epochs");
    app->add_option("--family", family, "Alias of --model.families (comma separated)");
    app->add_option("--strategy", strategy, "Alias of --model.strategies (comma separated)");
    app->add_option("--out", out, "Alias of --output");
    app->add_option("--jobs", jobs, "Alias of --jobs (worker count)");
    app->add_option("--dataset", dataset, "'synth' or a CSV file / image folder");
    app->add_flag("--hpo", hpo, "Alias of --hpo.enabled true");
    const auto defaults = default_config_json();
    for (const auto& key : config_leaves(defaults)) {
      if (key == "jobs") continue;
      auto* opt = app->add_option_function<std::string>(
          "--" + key, [this, key](const std::string& v) { leaves[key] = v; }, "config leaf " + key);
      opt->group("Config leaves");
    }
  }

  json flag_patch() const {
    const auto defaults = default_config_json();
    json patch = json::object();
    for (const auto& [key, text] : leaves) set_path(patch, key, typed_value(get_path(defaults, key), key, text));
    auto alias = [&](const std::optional<std::string>& v, const std::string& key) {
      if (v) set_path(patch, key, typed_value(get_path(defaults, key), key, *v));
    };
    alias(seed, "train.seed");
    alias(epochs, "train.epochs");
    alias(family, "model.families");
    alias(strategy, "model.strategies");
    alias(out, "output");
    alias(jobs, "jobs");
    if (hpo) set_path(patch, "hpo.enabled", true);
    if (dataset) {
      if (*dataset == "synth") {
        set_path(patch, "dataset.kind", "synth");
      } else {
        const fs::path p = *dataset;
        set_path(patch, "dataset.kind", fs::is_directory(p) ? "folder" : "csv");
        set_path(patch, "dataset.path", *dataset);
        set_path(patch, "dataset.name", p.stem().string());
      }
    }
    return patch;
  }
};

struct Resolved {
  PipelineConfig config;
  json doc;
};

// defaults <- stored run config (when `use_stored`) <- --config file <- flags.
Resolved resolve(const ConfigFlags& flags, bool use_stored, bool need_dataset) {
  json file = json::object();
  if (!flags.config_file.empty()) {
    try {
      file = json::parse(read_file(flags.config_file));
    } catch (const json::parse_error& e) {
      throw ConfigError(flags.config_file + ": " + e.what());
    }
    if (!file.is_object()) throw ConfigError(flags.config_file + ": top level must be an object");
  }
  const json patch = flags.flag_patch();

  std::string output;
  if (patch.contains("output")) {
    output = patch["output"].get<std::string>();
  } else if (file.contains("output") && file["output"].is_string()) {
    output = file["output"].get<std::string>();
  }
  if (output.empty()) output = default_output_root().string();

  json stored = json::object();
  if (use_stored && fs::exists(fs::path(output) / "config.json")) {
    stored = json::parse(read_file(fs::path(output) / "config.json"));
  }
  const bool has_dataset = stored.contains("dataset") || file.contains("dataset") || patch.contains("dataset");
  if (need_dataset && !has_dataset) {
    throw UsageError("no dataset given (use --dataset, --dataset.* flags or a config file with a \"dataset\" section)");
  }
  json doc = merge_config(default_config_json(), stored);
  doc = merge_config(doc, file);
  doc = merge_config(doc, patch);
  doc["output"] = output;
  Resolved r{config_from_json(doc), doc};
  return r;
}

std::string metrics_line(const MetricsRow& m) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "acc=" << m.accuracy << " f1=" << m.f1 << " prec=" << m.precision << " rec=" << m.recall;
  return os.str();
}

int cmd_synth(std::int64_t classes, std::int64_t per_class, std::uint64_t seed, std::int64_t height,
              std::int64_t width, const std::string& name, const std::string& out_dir, std::ostream& out) {
  const auto ds = synth_glyphs(classes, per_class, height, width, seed);
  fs::create_directories(out_dir);
  const auto path = fs::path(out_dir) / (name + ".csv");
  auto named = ds;
  named.meta.name = name;
  write_csv_dataset(named, path);
  write_sidecar(named, path);
  out << path.generic_string() << '\n';
  return kExitOk;
}

int cmd_inspect(const std::string& path, std::int64_t height, std::int64_t width, std::ostream& out) {
  Dataset ds = fs::is_directory(path) ? load_image_folder(path) : load_csv_dataset(path, height, width);
  auto j = meta_to_json(ds.meta, ds);
  j["class_counts"] = ds.class_counts();
  j["digest"] = dataset_digest(ds);
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_tune(const Resolved& r, std::ostream& out) {
  const auto& c = r.config;
  c.validate();
  store_config(c);
  const auto data = prepare_data(c);
  const auto family = c.families.front();
  const auto strategy = c.strategies.front();
  const auto id = entry_id(c.dataset.name, family, strategy);
  const auto workdir = c.output / "entries" / id / "hpo";
  const auto result = tune_entry(c, data, family, strategy, workdir);
  const auto report = tuning_report(result, c.search_space);
  write_file_atomic(workdir / "tuning.json", report.dump(2) + "\n");
  out << report.at("best").dump(2) << '\n';
  return kExitOk;
}

int cmd_train(const Resolved& r, std::ostream& out) {
  const auto& c = r.config;
  c.validate();
  store_config(c);
  const auto data = prepare_data(c);
  int failed = 0;
  for (auto f : c.families) {
    for (auto s : c.strategies) {
      const auto e = train_entry(c, data, f, s);
      out << e.id << ' ' << e.status << (e.skipped ? " (current)" : "");
      if (e.status == "done") {
        out << ' ' << metrics_line(e.test) << " val=" << e.val_score;
      } else {
        out << ' ' << e.diagnostic;
        ++failed;
      }
      out << '\n';
    }
  }
  return failed ? kExitFailure : kExitOk;
}

int cmd_eval(const Resolved& r, const std::string& run, const std::string& probs, std::ostream& out) {
  const auto& c = r.config;
  c.validate();
  fs::path run_dir = run;
  if (!fs::exists(run_dir / "record.json") && fs::exists(c.output / "runs" / run / "record.json")) {
    run_dir = c.output / "runs" / run;
  }
  if (!fs::exists(run_dir / "record.json")) throw ConfigError("no run found at '" + run + "'");
  const auto data = prepare_data(c);
  const auto run_config = json::parse(read_file(run_dir / "config.json"));
  if (run_config.value("dataset_digest", "") != dataset_digest(data.train)) {
    throw ConfigError("run '" + run + "' was trained on a different dataset or split");
  }
  auto model = load_best_model(run_dir);
  const auto result = evaluate(model, data.test);
  if (!probs.empty()) write_matrix(result.probabilities, probs);
  json j = metrics_to_json(result.metrics);
  j["loss"] = result.loss;
  j["samples"] = data.test.size();
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_ensemble(const Resolved& r, ReportFormat format, std::ostream& out) {
  const auto& c = r.config;
  c.validate();
  const auto combos = ensemble_stage(c);
  const auto table = combinations_table(combos);
  out << (format == ReportFormat::kCsv ? table_csv(table) : table_markdown(table));
  return kExitOk;
}

int cmd_bench(const Resolved& r, bool untrained, ReportFormat format, std::ostream& out) {
  auto c = r.config;
  c.bench = true;
  std::vector<BenchReport> reports;
  if (untrained) {
    c.bench_config.validate();
    std::vector<BenchMember> members;
    const auto input = InputShape{c.preprocess.channels > 0 ? c.preprocess.channels : 1, c.preprocess.height,
                                  c.preprocess.width};
    const auto classes = c.dataset.classes;
    for (auto f : c.families) {
      const auto spec = make_spec(f, c.preset, c.width, input, classes);
      members.push_back({family_label(to_string(f)), [spec] { return Model(spec, 0); }});
    }
    auto all = bench_ensemble("Ensemble-" + std::to_string(members.size()), members, Voting::kSoft, c.bench_config);
    reports = all.members;
    reports.push_back(all);
  } else {
    c.validate();
    reports = bench_stage(c);
    if (reports.empty()) {
      // Stage was current; show what is on disk.
      write_reports(c.output);
      out << read_file(c.output / "reports" / (format == ReportFormat::kCsv ? "bench.csv" : "bench.md"));
      return kExitOk;
    }
    write_reports(c.output);
  }
  out << emit_report(reports, format);
  return kExitOk;
}

int cmd_report(const std::string& output, ReportFormat format, std::ostream& out) {
  const fs::path root = output.empty() ? default_output_root() : fs::path(output);
  write_reports(root);
  if (format == ReportFormat::kMarkdown) {
    out << read_file(root / "reports" / "report.md");
    return kExitOk;
  }
  std::vector<fs::path> csvs;
  for (const auto& e : fs::directory_iterator(root / "reports")) {
    if (e.path().extension() == ".csv") csvs.push_back(e.path());
  }
  std::sort(csvs.begin(), csvs.end());
  for (const auto& p : csvs) out << "# " << p.filename().string() << '\n' << read_file(p) << '\n';
  return kExitOk;
}

int cmd_pipeline(const Resolved& r, std::ostream& out) {
  const auto outcome = run_pipeline(r.config);
  for (const auto& e : outcome.entries) {
    out << e.id << ' ' << e.status << (e.skipped ? " (current)" : "");
    if (e.status == "done") {
      out << ' ' << metrics_line(e.test);
    } else {
      out << ' ' << e.diagnostic;
    }
    out << '\n';
  }
  if (outcome.failed() < static_cast<std::int64_t>(outcome.entries.size())) {
    out << "ensemble " << (outcome.ensemble_ran ? "done" : "(current)") << '\n';
    out << "reports: " << (r.config.output / "reports").generic_string() << '\n';
  }
  return outcome.failed() ? kExitFailure : kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"fens: train, tune, ensemble and benchmark compact convolutional classifiers"};
  app.name("fens");
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  std::string log_level = "warn";
  int verbose = 0;
  app.add_option("--log-level", log_level, "quiet, warn, info or debug")
      ->check(CLI::IsMember({"quiet", "warn", "info", "debug"}));
  app.add_flag("-v,--verbose", verbose, "Raise log verbosity (repeatable)");

  auto* dataset = app.add_subcommand("dataset", "Create or inspect datasets");
  dataset->require_subcommand(1);
  auto* synth = dataset->add_subcommand("synth", "Write a synthetic glyph dataset as CSV plus metadata sidecar");
  std::int64_t classes = 28, per_class = 50, height = 32, width = 32;
  std::uint64_t synth_seed = 7;
  std::string synth_name = "glyphs", synth_out;
  synth->add_option("--classes", classes, "Number of classes")->capture_default_str();
  synth->add_option("--per-class", per_class, "Samples per class")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--height", height, "Image height")->capture_default_str();
  synth->add_option("--width", width, "Image width")->capture_default_str();
  synth->add_option("--name", synth_name, "File stem")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* inspect = dataset->add_subcommand("inspect", "Summarize a CSV dataset or image folder");
  std::string inspect_path;
  inspect->add_option("path", inspect_path, "CSV file or image folder")->required()->check(CLI::ExistingPath);
  inspect->add_option("--height", height, "CSV image height")->capture_default_str();
  inspect->add_option("--width", width, "CSV image width")->capture_default_str();

  std::map<std::string, ConfigFlags> flags;
  auto config_command = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    flags[name].attach(sub);
    return sub;
  };
  auto* tune = config_command("tune", "Hyperband search for the first family/strategy");
  auto* train = config_command("train", "Cross-validated training of every family x strategy entry");
  auto* eval = config_command("eval", "Evaluate a run's best checkpoint on the test split");
  std::string eval_run, eval_probs;
  eval->add_option("--run", eval_run, "Run directory or run id under <output>/runs")->required();
  eval->add_option("--probs", eval_probs, "Write test probabilities to this file");
  auto* ensemble = config_command("ensemble", "Evaluate ensemble combinations over completed entries");
  auto* bench = config_command("bench", "Benchmark latency and memory");
  bool untrained = false;
  bench->add_flag("--untrained", untrained, "Benchmark freshly initialized preset models instead of trained entries");
  auto* pipeline = config_command("pipeline", "Run every stage, skipping those whose outputs are current");

  std::string format_name = "markdown";
  for (auto* sub : {ensemble, bench}) {
    sub->add_option("--format", format_name, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));
  }
  auto* report = app.add_subcommand("report", "Rebuild comparison tables from on-disk artifacts");
  std::string report_output;
  report->add_option("--output,--out", report_output, "Run directory (default: $FENS_HOME or fens-out)");
  report->add_option("--format", format_name, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  log::Level level = log_level == "quiet"  ? log::Level::kQuiet
                     : log_level == "info" ? log::Level::kInfo
                     : log_level == "debug" ? log::Level::kDebug
                                            : log::Level::kWarn;
  level = static_cast<log::Level>(std::min(3, static_cast<int>(level) + verbose));
  log::set_level(level);

  auto usage = [&](CLI::App* sub, const std::string& msg) {
    err << "error: " << msg << "\n\n" << sub->help();
    return kExitUsage;
  };

  CLI::App* active = nullptr;
  for (auto* sub : app.get_subcommands()) active = sub;
  try {
    if (*synth) return cmd_synth(classes, per_class, synth_seed, height, width, synth_name, synth_out, out);
    if (*inspect) return cmd_inspect(inspect_path, height, width, out);
    if (*report) return cmd_report(report_output, parse_report_format(format_name), out);

    const std::string name = active->get_name();
    const auto& f = flags.at(name);
    const bool stored = name == "eval" || name == "ensemble" || name == "bench";
    const bool need_dataset = !(name == "bench" && untrained);
    Resolved r;
    try {
      r = resolve(f, stored, need_dataset);
    } catch (const UsageError& e) {
      return usage(active, e.what());
    } catch (const ConfigError& e) {
      return usage(active, e.what());
    }
    if (f.print_config) {
      auto doc = r.doc;
      out << doc.dump(2) << '\n';
      return kExitOk;
    }
    if (name == "tune") return cmd_tune(r, out);
    if (name == "train") return cmd_train(r, out);
    if (name == "eval") return cmd_eval(r, eval_run, eval_probs, out);
    if (name == "ensemble") return cmd_ensemble(r, parse_report_format(format_name), out);
    if (name == "bench") return cmd_bench(r, untrained, parse_report_format(format_name), out);
    if (name == "pipeline") return cmd_pipeline(r, out);
    (void)tune;
    (void)train;
    (void)pipeline;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace fens::cli
