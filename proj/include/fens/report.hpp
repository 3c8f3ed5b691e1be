#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/ensemble.hpp"

namespace fens {

struct Cell {
  std::string text;
  std::optional<double> value;  // numeric cells print from this
  bool bold = false;

  Cell() = default;
  Cell(std::string t) : text(std::move(t)) {}
  Cell(const char* t) : text(t) {}
  Cell(double v) : value(v) {}
};

struct Table {
  std::string title;
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;
};

// CSV prints numbers in shortest round-trip form and ignores bold;
// markdown prints three decimals and wraps bold cells in **.
std::string table_csv(const Table& t);
std::string table_markdown(const Table& t);

std::string family_label(const std::string& family);

struct BaseResult {
  std::string dataset;
  std::string family;
  std::string strategy;
  MetricsRow test;
  double val_score = 0;
};

nlohmann::json base_result_to_json(const BaseResult& b);
BaseResult base_result_from_json(const nlohmann::json& j);

struct ComboResult {
  std::string name;
  // Indexed like kAllVotings (soft, hard, weighted).
  std::array<MetricsRow, 3> metrics{};
  std::array<std::vector<std::string>, 3> members;
};

struct DatasetCombos {
  std::string dataset;
  std::vector<ComboResult> rows;
};

nlohmann::json combos_to_json(const DatasetCombos& d);
DatasetCombos combos_from_json(const nlohmann::json& j);

// All-Ens, one row per strategy, one per family, then Best-Ens (searched on
// validation matrices per voting). Metrics are computed on the test matrices.
DatasetCombos evaluate_combinations(const std::string& dataset, const Manifest& manifest, std::size_t best_min_size);

// Dataset / model / strategy rows with test accuracy, F1, precision, recall.
Table base_models_table(const std::vector<BaseResult>& base);
// Rows are combinations; soft, hard and weighted column groups.
Table combinations_table(const DatasetCombos& combos);
// Rows are families plus "Ensemble" and "Delta"; columns are datasets. A
// family's entry is its best strategy, the ensemble's the best combination
// under any voting. The maximum of each dataset column is bold.
Table summary_table(const std::vector<BaseResult>& base, const std::vector<DatasetCombos>& combos);

}  // namespace fens
