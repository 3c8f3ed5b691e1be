#include "fens/report.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

#include "fens/errors.hpp"

namespace fens {

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed3(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << v;
  return os.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::size_t voting_index(Voting v) {
  for (std::size_t i = 0; i < std::size(kAllVotings); ++i) {
    if (kAllVotings[i] == v) return i;
  }
  return 0;
}

}  // namespace

std::string table_csv(const Table& t) {
  std::ostringstream os;
  for (std::size_t i = 0; i < t.header.size(); ++i) os << (i ? "," : "") << csv_escape(t.header[i]);
  os << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      os << (i ? "," : "") << (row[i].value ? shortest(*row[i].value) : csv_escape(row[i].text));
    }
    os << '\n';
  }
  return os.str();
}

std::string table_markdown(const Table& t) {
  std::ostringstream os;
  if (!t.title.empty()) os << "### " << t.title << "\n\n";
  os << '|';
  for (const auto& h : t.header) os << ' ' << h << " |";
  os << "\n|";
  for (std::size_t i = 0; i < t.header.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& row : t.rows) {
    os << '|';
    for (const auto& c : row) {
      const auto text = c.value ? fixed3(*c.value) : c.text;
      os << ' ' << (c.bold ? "**" + text + "**" : text) << " |";
    }
    os << '\n';
  }
  return os.str();
}

std::string family_label(const std::string& family) {
  static const std::map<std::string, std::string> labels = {
      {"mobile", "MobileNet"}, {"mnas", "MnasNet"}, {"shuffle", "ShuffleNet"}, {"squeeze", "SqueezeNet"}};
  auto it = labels.find(family);
  return it == labels.end() ? family : it->second;
}

nlohmann::json base_result_to_json(const BaseResult& b) {
  return {{"dataset", b.dataset},
          {"family", b.family},
          {"strategy", b.strategy},
          {"test", metrics_to_json(b.test)},
          {"val_score", b.val_score}};
}

BaseResult base_result_from_json(const nlohmann::json& j) {
  BaseResult b;
  b.dataset = j.at("dataset").get<std::string>();
  b.family = j.at("family").get<std::string>();
  b.strategy = j.at("strategy").get<std::string>();
  b.test = metrics_from_json(j.at("test"));
  b.val_score = j.at("val_score").get<double>();
  return b;
}

nlohmann::json combos_to_json(const DatasetCombos& d) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : d.rows) {
    nlohmann::json by = nlohmann::json::object();
    for (std::size_t v = 0; v < std::size(kAllVotings); ++v) {
      by[to_string(kAllVotings[v])] = {{"metrics", metrics_to_json(r.metrics[v])}, {"members", r.members[v]}};
    }
    rows.push_back({{"name", r.name}, {"voting", by}});
  }
  return {{"dataset", d.dataset}, {"rows", rows}};
}

DatasetCombos combos_from_json(const nlohmann::json& j) {
  DatasetCombos d;
  d.dataset = j.at("dataset").get<std::string>();
  for (const auto& r : j.at("rows")) {
    ComboResult c;
    c.name = r.at("name").get<std::string>();
    for (std::size_t v = 0; v < std::size(kAllVotings); ++v) {
      const auto& e = r.at("voting").at(to_string(kAllVotings[v]));
      c.metrics[v] = metrics_from_json(e.at("metrics"));
      c.members[v] = e.at("members").get<std::vector<std::string>>();
    }
    d.rows.push_back(std::move(c));
  }
  return d;
}

DatasetCombos evaluate_combinations(const std::string& dataset, const Manifest& manifest,
                                    std::size_t best_min_size) {
  const auto& pool = manifest.members;
  if (pool.empty()) throw ConfigError("no completed members to combine");
  DatasetCombos out;
  out.dataset = dataset;

  auto score = [&](const std::vector<std::size_t>& idx, Voting voting) {
    std::vector<const ProbabilityMatrix*> mats;
    std::vector<double> scores;
    for (auto i : idx) {
      mats.push_back(&pool[i].test);
      scores.push_back(pool[i].val_score);
    }
    const auto pred = vote(voting, mats, scores);
    return compute_metrics(pred, manifest.test_labels, manifest.classes);
  };
  auto ids = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::string> v;
    for (auto i : idx) v.push_back(pool[i].id);
    return v;
  };

  for (auto mode : {CombinationMode::kAll, CombinationMode::kPerStrategy, CombinationMode::kPerModel}) {
    for (const auto& combo : enumerate_combinations(pool, mode)) {
      ComboResult r;
      r.name = combo.name;
      for (auto voting : kAllVotings) {
        const auto v = voting_index(voting);
        r.metrics[v] = score(combo.members, voting);
        r.members[v] = ids(combo.members);
      }
      out.rows.push_back(std::move(r));
    }
  }
  ComboResult best;
  best.name = "Best-Ens";
  const auto min_size = std::min(best_min_size, pool.size());
  for (auto voting : kAllVotings) {
    const auto v = voting_index(voting);
    const auto found = best_ens_search(pool, voting, min_size, manifest.validation_labels);
    best.metrics[v] = score(found.members, voting);
    best.members[v] = ids(found.members);
  }
  out.rows.push_back(std::move(best));
  return out;
}

Table base_models_table(const std::vector<BaseResult>& base) {
  Table t;
  t.title = "Base models (test)";
  t.header = {"Dataset", "Model", "Strategy", "Acc", "F1", "Prec", "Rec"};
  for (const auto& b : base) {
    std::string strategy = b.strategy;
    std::transform(strategy.begin(), strategy.end(), strategy.begin(), ::toupper);
    t.rows.push_back(
        {b.dataset, family_label(b.family), strategy, b.test.accuracy, b.test.f1, b.test.precision, b.test.recall});
  }
  return t;
}

Table combinations_table(const DatasetCombos& combos) {
  Table t;
  t.title = "Ensemble combinations (" + combos.dataset + ")";
  t.header = {"Combination"};
  for (auto voting : kAllVotings) {
    const auto v = to_string(voting);
    for (const char* m : {"acc", "f1", "prec", "rec"}) t.header.push_back(v + "_" + m);
  }
  for (const auto& r : combos.rows) {
    std::vector<Cell> row{r.name};
    for (const auto& m : r.metrics) {
      row.insert(row.end(), {Cell(m.accuracy), Cell(m.f1), Cell(m.precision), Cell(m.recall)});
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table summary_table(const std::vector<BaseResult>& base, const std::vector<DatasetCombos>& combos) {
  std::vector<std::string> datasets;
  std::vector<std::string> families;
  for (const auto& b : base) {
    if (std::find(datasets.begin(), datasets.end(), b.dataset) == datasets.end()) datasets.push_back(b.dataset);
    if (std::find(families.begin(), families.end(), b.family) == families.end()) families.push_back(b.family);
  }
  Table t;
  t.title = "Best base model vs ensemble (test accuracy)";
  t.header = {"Model"};
  t.header.insert(t.header.end(), datasets.begin(), datasets.end());

  std::map<std::pair<std::string, std::string>, double> best_base;
  for (const auto& b : base) {
    auto key = std::make_pair(b.family, b.dataset);
    auto it = best_base.find(key);
    if (it == best_base.end() || b.test.accuracy > it->second) best_base[key] = b.test.accuracy;
  }
  std::map<std::string, double> best_ens;
  for (const auto& d : combos) {
    for (const auto& r : d.rows) {
      for (const auto& m : r.metrics) {
        auto it = best_ens.find(d.dataset);
        if (it == best_ens.end() || m.accuracy > it->second) best_ens[d.dataset] = m.accuracy;
      }
    }
  }

  for (const auto& f : families) {
    std::vector<Cell> row{family_label(f)};
    for (const auto& d : datasets) {
      auto it = best_base.find({f, d});
      row.push_back(it == best_base.end() ? Cell("-") : Cell(it->second));
    }
    t.rows.push_back(std::move(row));
  }
  std::vector<Cell> ens{"Ensemble"};
  std::vector<Cell> delta{"Delta"};
  for (const auto& d : datasets) {
    auto it = best_ens.find(d);
    if (it == best_ens.end()) {
      ens.push_back("-");
      delta.push_back("-");
      continue;
    }
    double max_base = -1;
    for (const auto& f : families) {
      auto b = best_base.find({f, d});
      if (b != best_base.end()) max_base = std::max(max_base, b->second);
    }
    ens.push_back(it->second);
    delta.push_back(it->second - max_base);
  }
  t.rows.push_back(std::move(ens));

  // Bold the maximum of each dataset column over the model rows.
  for (std::size_t c = 1; c < t.header.size(); ++c) {
    std::optional<double> top;
    for (const auto& row : t.rows) {
      if (row[c].value && (!top || *row[c].value > *top)) top = row[c].value;
    }
    for (auto& row : t.rows) {
      if (row[c].value && top && *row[c].value == *top) row[c].bold = true;
    }
  }
  t.rows.push_back(std::move(delta));
  return t;
}

}  // namespace fens
