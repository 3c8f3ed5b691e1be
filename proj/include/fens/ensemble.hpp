#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/tensor.hpp"

namespace fens {

// N x C class probabilities, row-major, double precision.
struct ProbabilityMatrix {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::vector<double> p;

  ProbabilityMatrix() = default;
  ProbabilityMatrix(std::int64_t rows, std::int64_t cols, std::vector<double> values);

  double at(std::int64_t i, std::int64_t j) const { return p[static_cast<std::size_t>(i * c + j)]; }
  std::span<const double> row(std::int64_t i) const {
    return {p.data() + i * c, static_cast<std::size_t>(c)};
  }
  // Throws when a row is negative or does not sum to 1 within 1e-5.
  void validate() const;
  friend bool operator==(const ProbabilityMatrix&, const ProbabilityMatrix&) = default;
};

ProbabilityMatrix matrix_from_tensor(const Tensor& probabilities);

// "N C" header line, then N lines of C space-separated values.
std::string format_matrix(const ProbabilityMatrix& m);
ProbabilityMatrix parse_matrix(const std::string& text);
void write_matrix(const ProbabilityMatrix& m, const std::filesystem::path& path);
ProbabilityMatrix read_matrix(const std::filesystem::path& path);

// Scores within this distance of the row maximum count as tied; ties go to
// the lowest class index.
inline constexpr double kTieTolerance = 1e-9;
std::int64_t argmax_lowest(std::span<const double> scores);

using Members = std::span<const ProbabilityMatrix* const>;

std::vector<std::int64_t> soft_vote(Members members);
std::vector<std::int64_t> hard_vote(Members members);
std::vector<std::int64_t> weighted_vote(Members members, std::span<const double> weights);
std::vector<double> normalize_weights(std::span<const double> scores);

enum class Voting { kSoft, kHard, kWeighted };
inline constexpr Voting kAllVotings[] = {Voting::kSoft, Voting::kHard, Voting::kWeighted};
Voting parse_voting(const std::string& name);
std::string to_string(Voting v);

// Weighted voting derives weights from `scores` via normalize_weights.
std::vector<std::int64_t> vote(Voting voting, Members members, std::span<const double> scores = {});

struct MetricsRow {
  double accuracy = 0;
  double f1 = 0;
  double precision = 0;
  double recall = 0;
};

// Macro-averaged over all `classes`; 0/0 ratios count as 0.
MetricsRow compute_metrics(std::span<const std::int64_t> predictions,
                           std::span<const std::int64_t> labels, std::int64_t classes);
nlohmann::json metrics_to_json(const MetricsRow& m);
MetricsRow metrics_from_json(const nlohmann::json& j);

struct MemberRecord {
  std::string id;
  std::string dataset;
  std::string family;
  std::string strategy;
  std::string run_id;
  ProbabilityMatrix test;
  ProbabilityMatrix validation;
  double val_score = 0;
};

enum class CombinationMode { kAll, kPerStrategy, kPerModel, kBest };
CombinationMode parse_combination_mode(const std::string& name);

struct Combination {
  std::string name;                  // "All-Ens", "TFS-Ens", "mobile-Ens", ...
  std::vector<std::size_t> members;  // indices into the pool
};

// kBest is not handled here (see best_ens_search) and throws.
std::vector<Combination> enumerate_combinations(const std::vector<MemberRecord>& pool,
                                                CombinationMode mode);

struct BestEnsResult {
  std::vector<std::size_t> members;
  double val_accuracy = 0;
  std::int64_t subsets_evaluated = 0;
  bool exhaustive = true;
};

inline constexpr std::size_t kExhaustiveLimit = 20;

// Subset of size >= min_size with the highest validation accuracy under
// `voting`. Ties: fewer members, then lexicographically smaller sorted id
// list. Exhaustive up to kExhaustiveLimit members, greedy forward selection
// above. Only validation matrices are read.
BestEnsResult best_ens_search(const std::vector<MemberRecord>& pool, Voting voting,
                              std::size_t min_size, std::span<const std::int64_t> val_labels);

// Member manifest: run ids, matrix files (relative to the manifest) and
// validation scores, plus the label vectors both matrix sets refer to.
struct Manifest {
  std::vector<MemberRecord> members;
  std::vector<std::int64_t> test_labels;
  std::vector<std::int64_t> validation_labels;
  std::int64_t classes = 0;
};

void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace fens
