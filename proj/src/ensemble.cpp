#include "fens/ensemble.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "fens/digest.hpp"
#include "fens/errors.hpp"

namespace fens {

namespace fs = std::filesystem;

ProbabilityMatrix::ProbabilityMatrix(std::int64_t rows, std::int64_t cols, std::vector<double> values)
    : n(rows), c(cols), p(std::move(values)) {
  if (rows < 0 || cols < 0 || static_cast<std::int64_t>(p.size()) != rows * cols) {
    throw DimensionError("probability matrix " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " given " + std::to_string(p.size()) + " values");
  }
}

void ProbabilityMatrix::validate() const {
  if (n <= 0 || c <= 0) throw DimensionError("probability matrix must be non-empty");
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0;
    for (double v : row(i)) {
      if (!(v >= 0) || !std::isfinite(v)) {
        throw NumericError("probability matrix row " + std::to_string(i) + " has a negative or non-finite entry");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-5) {
      throw NumericError("probability matrix row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
  }
}

ProbabilityMatrix matrix_from_tensor(const Tensor& probabilities) {
  if (probabilities.rank() != 2) throw DimensionError("probabilities must be [N, C]");
  std::vector<double> values(probabilities.data().begin(), probabilities.data().end());
  return {probabilities.dim(0), probabilities.dim(1), std::move(values)};
}

std::string format_matrix(const ProbabilityMatrix& m) {
  std::string out = std::to_string(m.n) + " " + std::to_string(m.c) + "\n";
  char buf[32];
  for (std::int64_t i = 0; i < m.n; ++i) {
    for (std::int64_t j = 0; j < m.c; ++j) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, m.at(i, j));
      if (j) out += ' ';
      out.append(buf, end);
    }
    out += '\n';
  }
  return out;
}

ProbabilityMatrix parse_matrix(const std::string& text) {
  std::istringstream in(text);
  std::int64_t n = 0, c = 0;
  if (!(in >> n >> c) || n < 0 || c < 0) throw ParseError("probability matrix: bad header");
  std::vector<double> values(static_cast<std::size_t>(n * c));
  std::string tok;
  for (auto& v : values) {
    if (!(in >> tok)) throw ParseError("probability matrix: truncated (expected " + std::to_string(n * c) + " values)");
    auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || end != tok.data() + tok.size()) {
      throw ParseError("probability matrix: bad value '" + tok + "'");
    }
  }
  if (in >> tok) throw ParseError("probability matrix: trailing data");
  return {n, c, std::move(values)};
}

void write_matrix(const ProbabilityMatrix& m, const fs::path& path) {
  write_file_atomic(path, format_matrix(m));
}

ProbabilityMatrix read_matrix(const fs::path& path) { return parse_matrix(read_file(path)); }

std::int64_t argmax_lowest(std::span<const double> scores) {
  if (scores.empty()) throw DimensionError("argmax of an empty row");
  const double best = *std::max_element(scores.begin(), scores.end());
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] >= best - kTieTolerance) return static_cast<std::int64_t>(j);
  }
  return 0;
}

namespace {

void check_members(Members members) {
  if (members.empty()) throw ConfigError("ensemble needs at least one member");
  for (const auto* m : members) {
    if (m->n != members[0]->n || m->c != members[0]->c) {
      throw DimensionError("ensemble members disagree on shape: " + std::to_string(m->n) + "x" +
                           std::to_string(m->c) + " vs " + std::to_string(members[0]->n) + "x" +
                           std::to_string(members[0]->c));
    }
  }
}

// Combined scores for one sample, members summed in order.
void combine_row(Members members, std::span<const double> weights, std::int64_t i,
                 std::vector<double>& out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto row = members[m]->row(i);
    const double w = weights.empty() ? 1.0 : weights[m];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * row[j];
  }
  if (weights.empty()) {
    const double inv = static_cast<double>(members.size());
    for (auto& v : out) v /= inv;
  }
}

}  // namespace

std::vector<std::int64_t> soft_vote(Members members) {
  check_members(members);
  const auto n = members[0]->n, c = members[0]->c;
  std::vector<std::int64_t> pred(static_cast<std::size_t>(n));
  std::vector<double> acc(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < n; ++i) {
    combine_row(members, {}, i, acc);
    pred[static_cast<std::size_t>(i)] = argmax_lowest(acc);
  }
  return pred;
}

std::vector<std::int64_t> hard_vote(Members members) {
  check_members(members);
  const auto n = members[0]->n, c = members[0]->c;
  std::vector<std::int64_t> pred(static_cast<std::size_t>(n));
  std::vector<std::int64_t> votes(static_cast<std::size_t>(c));
  std::vector<double> mean(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < n; ++i) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto* m : members) ++votes[static_cast<std::size_t>(argmax_lowest(m->row(i)))];
    const auto top = *std::max_element(votes.begin(), votes.end());
    combine_row(members, {}, i, mean);
    // Among classes with the top vote count: highest mean probability, then lowest index.
    double best_mean = -1;
    for (std::int64_t j = 0; j < c; ++j) {
      if (votes[static_cast<std::size_t>(j)] == top) best_mean = std::max(best_mean, mean[static_cast<std::size_t>(j)]);
    }
    for (std::int64_t j = 0; j < c; ++j) {
      if (votes[static_cast<std::size_t>(j)] == top &&
          mean[static_cast<std::size_t>(j)] >= best_mean - kTieTolerance) {
        pred[static_cast<std::size_t>(i)] = j;
        break;
      }
    }
  }
  return pred;
}

std::vector<std::int64_t> weighted_vote(Members members, std::span<const double> weights) {
  check_members(members);
  if (weights.size() != members.size()) {
    throw DimensionError("weighted vote: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(members.size()) + " members");
  }
  double sum = 0;
  for (double w : weights) {
    if (!(w >= 0)) throw ConfigError("weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("weights must sum to 1");
  const auto n = members[0]->n, c = members[0]->c;
  std::vector<std::int64_t> pred(static_cast<std::size_t>(n));
  std::vector<double> acc(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < n; ++i) {
    combine_row(members, weights, i, acc);
    pred[static_cast<std::size_t>(i)] = argmax_lowest(acc);
  }
  return pred;
}

std::vector<double> normalize_weights(std::span<const double> scores) {
  if (scores.empty()) throw ConfigError("no scores to normalize");
  double sum = 0;
  for (double s : scores) {
    if (!(s >= 0)) throw ConfigError("validation scores must be non-negative");
    sum += s;
  }
  if (sum <= 0) throw ConfigError("all validation scores are zero");
  std::vector<double> w;
  w.reserve(scores.size());
  for (double s : scores) w.push_back(s / sum);
  return w;
}

Voting parse_voting(const std::string& name) {
  if (name == "soft") return Voting::kSoft;
  if (name == "hard") return Voting::kHard;
  if (name == "weighted") return Voting::kWeighted;
  throw ConfigError("unknown voting strategy '" + name + "'");
}

std::string to_string(Voting v) {
  switch (v) {
    case Voting::kSoft: return "soft";
    case Voting::kHard: return "hard";
    case Voting::kWeighted: return "weighted";
  }
  return "?";
}

std::vector<std::int64_t> vote(Voting voting, Members members, std::span<const double> scores) {
  switch (voting) {
    case Voting::kSoft: return soft_vote(members);
    case Voting::kHard: return hard_vote(members);
    case Voting::kWeighted: {
      const auto w = normalize_weights(scores);
      return weighted_vote(members, w);
    }
  }
  throw ConfigError("unhandled voting strategy");
}

MetricsRow compute_metrics(std::span<const std::int64_t> predictions,
                           std::span<const std::int64_t> labels, std::int64_t classes) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("metrics: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (classes < 1) throw ConfigError("metrics need at least one class");
  const auto k = static_cast<std::size_t>(classes);
  std::vector<std::int64_t> tp(k, 0), fp(k, 0), fn(k, 0);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto p = predictions[i], l = labels[i];
    if (p < 0 || p >= classes || l < 0 || l >= classes) {
      throw DimensionError("metrics: class index outside [0, " + std::to_string(classes) + ")");
    }
    if (p == l) {
      ++correct;
      ++tp[static_cast<std::size_t>(l)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(l)];
    }
  }
  MetricsRow row;
  row.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  for (std::size_t c = 0; c < k; ++c) {
    const double prec = tp[c] + fp[c] > 0 ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c]) : 0.0;
    const double rec = tp[c] + fn[c] > 0 ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c]) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    row.precision += prec;
    row.recall += rec;
    row.f1 += f1;
  }
  row.precision /= static_cast<double>(k);
  row.recall /= static_cast<double>(k);
  row.f1 /= static_cast<double>(k);
  return row;
}

nlohmann::json metrics_to_json(const MetricsRow& m) {
  return {{"accuracy", m.accuracy}, {"f1", m.f1}, {"precision", m.precision}, {"recall", m.recall}};
}

MetricsRow metrics_from_json(const nlohmann::json& j) {
  return {j.at("accuracy").get<double>(), j.at("f1").get<double>(), j.at("precision").get<double>(),
          j.at("recall").get<double>()};
}

CombinationMode parse_combination_mode(const std::string& name) {
  if (name == "all") return CombinationMode::kAll;
  if (name == "per-strategy") return CombinationMode::kPerStrategy;
  if (name == "per-model") return CombinationMode::kPerModel;
  if (name == "best") return CombinationMode::kBest;
  throw ConfigError("unknown combination mode '" + name + "'");
}

std::vector<Combination> enumerate_combinations(const std::vector<MemberRecord>& pool,
                                                CombinationMode mode) {
  if (pool.empty()) throw ConfigError("empty member pool");
  std::vector<Combination> out;
  auto group_by = [&](auto key, auto name) {
    std::vector<std::string> order;
    for (const auto& m : pool) {
      if (std::find(order.begin(), order.end(), key(m)) == order.end()) order.push_back(key(m));
    }
    for (const auto& k : order) {
      Combination c{name(k), {}};
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (key(pool[i]) == k) c.members.push_back(i);
      }
      out.push_back(std::move(c));
    }
  };
  switch (mode) {
    case CombinationMode::kAll: {
      Combination c{"All-Ens", {}};
      for (std::size_t i = 0; i < pool.size(); ++i) c.members.push_back(i);
      out.push_back(std::move(c));
      break;
    }
    case CombinationMode::kPerStrategy:
      group_by([](const MemberRecord& m) { return m.strategy; },
               [](const std::string& s) {
                 std::string up = s;
                 for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
                 return up + "-Ens";
               });
      break;
    case CombinationMode::kPerModel:
      group_by([](const MemberRecord& m) { return m.family; },
               [](const std::string& f) { return f + "-Ens"; });
      break;
    case CombinationMode::kBest:
      throw ConfigError("Best-Ens is chosen by best_ens_search, not enumerated");
  }
  return out;
}

namespace {

struct Candidate {
  std::vector<std::size_t> members;
  std::vector<std::string> sorted_ids;
  std::int64_t correct = -1;
};

// a better than b?
bool better(const Candidate& a, const Candidate& b) {
  if (b.correct < 0) return true;
  if (a.correct != b.correct) return a.correct > b.correct;
  if (a.members.size() != b.members.size()) return a.members.size() < b.members.size();
  return a.sorted_ids < b.sorted_ids;
}

class SubsetScorer {
 public:
  SubsetScorer(const std::vector<MemberRecord>& pool, Voting voting, std::span<const std::int64_t> labels)
      : pool_(pool), voting_(voting), labels_(labels) {
    for (const auto& m : pool) {
      if (m.validation.n != static_cast<std::int64_t>(labels.size())) {
        throw DimensionError("member " + m.id + " validation matrix has " + std::to_string(m.validation.n) +
                             " rows for " + std::to_string(labels.size()) + " labels");
      }
    }
  }

  // Number of correct validation predictions, or -1 when the subset cannot be
  // weighted (all scores zero).
  std::int64_t correct(const std::vector<std::size_t>& subset) const {
    std::vector<const ProbabilityMatrix*> ms;
    std::vector<double> scores;
    for (auto i : subset) {
      ms.push_back(&pool_[i].validation);
      scores.push_back(pool_[i].val_score);
    }
    if (voting_ == Voting::kWeighted && std::accumulate(scores.begin(), scores.end(), 0.0) <= 0) return -1;
    const auto pred = vote(voting_, ms, scores);
    std::int64_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels_[i];
    return ok;
  }

  Candidate make(std::vector<std::size_t> subset) const {
    Candidate c;
    c.correct = correct(subset);
    for (auto i : subset) c.sorted_ids.push_back(pool_[i].id);
    std::sort(c.sorted_ids.begin(), c.sorted_ids.end());
    c.members = std::move(subset);
    return c;
  }

 private:
  const std::vector<MemberRecord>& pool_;
  Voting voting_;
  std::span<const std::int64_t> labels_;
};

}  // namespace

BestEnsResult best_ens_search(const std::vector<MemberRecord>& pool, Voting voting,
                              std::size_t min_size, std::span<const std::int64_t> val_labels) {
  if (pool.empty()) throw ConfigError("empty member pool");
  if (min_size < 1) min_size = 1;
  if (min_size > pool.size()) {
    throw ConfigError("min size " + std::to_string(min_size) + " exceeds pool of " + std::to_string(pool.size()));
  }
  if (val_labels.empty()) throw ConfigError("no validation labels");
  const SubsetScorer scorer(pool, voting, val_labels);
  BestEnsResult result;
  Candidate best;
  if (pool.size() <= kExhaustiveLimit) {
    const std::uint64_t total = std::uint64_t{1} << pool.size();
    for (std::uint64_t mask = 1; mask < total; ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) < min_size) continue;
      std::vector<std::size_t> subset;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (mask >> i & 1U) subset.push_back(i);
      }
      auto cand = scorer.make(std::move(subset));
      ++result.subsets_evaluated;
      if (cand.correct >= 0 && better(cand, best)) best = std::move(cand);
    }
  } else {
    result.exhaustive = false;
    std::vector<std::size_t> chosen;
    std::vector<bool> used(pool.size(), false);
    while (chosen.size() < pool.size()) {
      Candidate step;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (used[i]) continue;
        auto subset = chosen;
        subset.push_back(i);
        std::sort(subset.begin(), subset.end());
        auto cand = scorer.make(std::move(subset));
        ++result.subsets_evaluated;
        if (cand.correct >= 0 && better(cand, step)) step = std::move(cand);
      }
      if (step.correct < 0) break;
      chosen = step.members;
      for (auto i : chosen) used[i] = true;
      if (chosen.size() >= min_size && better(step, best)) best = step;
    }
  }
  if (best.correct < 0) throw ConfigError("no evaluable subset (all validation scores zero?)");
  result.members = best.members;
  result.val_accuracy = static_cast<double>(best.correct) / static_cast<double>(val_labels.size());
  return result;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  nlohmann::json j;
  j["classes"] = manifest.classes;
  j["test_labels"] = manifest.test_labels;
  j["validation_labels"] = manifest.validation_labels;
  j["members"] = nlohmann::json::array();
  const auto dir = path.parent_path();
  for (const auto& m : manifest.members) {
    const auto test_file = m.id + ".test.prob";
    const auto val_file = m.id + ".val.prob";
    write_matrix(m.test, dir / test_file);
    write_matrix(m.validation, dir / val_file);
    j["members"].push_back({{"id", m.id},
                            {"dataset", m.dataset},
                            {"family", m.family},
                            {"strategy", m.strategy},
                            {"run_id", m.run_id},
                            {"test", test_file},
                            {"validation", val_file},
                            {"val_score", m.val_score}});
  }
  write_file_atomic(path, j.dump(2) + "\n");
}

Manifest read_manifest(const fs::path& path) {
  Manifest out;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    const auto dir = path.parent_path();
    out.classes = j.at("classes").get<std::int64_t>();
    out.test_labels = j.at("test_labels").get<std::vector<std::int64_t>>();
    out.validation_labels = j.at("validation_labels").get<std::vector<std::int64_t>>();
    for (const auto& m : j.at("members")) {
      MemberRecord r;
      r.id = m.at("id").get<std::string>();
      r.dataset = m.value("dataset", "");
      r.family = m.value("family", "");
      r.strategy = m.value("strategy", "");
      r.run_id = m.value("run_id", "");
      r.test = read_matrix(dir / m.at("test").get<std::string>());
      r.validation = read_matrix(dir / m.at("validation").get<std::string>());
      r.val_score = m.at("val_score").get<double>();
      out.members.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

}  // namespace fens
