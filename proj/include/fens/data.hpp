#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fens/model_spec.hpp"
#include "fens/tensor.hpp"

namespace fens {

struct DatasetMeta {
  std::string name;
  // class_names[i] is the original label (CSV) or folder name of class i.
  std::vector<std::string> class_names;
  // Smallest label found in a CSV file; 0 for other sources.
  std::int64_t label_base = 0;
  std::string source_hash;
  std::string source;  // "csv" | "folder" | "synth"
  nlohmann::json extra = nlohmann::json::object();
};

struct Dataset {
  Tensor images;  // [N, C, H, W], values in [0, 1] until preprocessed
  std::vector<std::int64_t> labels;
  std::int64_t classes = 0;
  DatasetMeta meta;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  InputShape sample_shape() const;
  // Samples at `indices`, in that order.
  Dataset subset(const std::vector<std::int64_t>& indices) const;
  // Images [n, C, H, W] for a batch of indices.
  Tensor gather(const std::vector<std::int64_t>& indices) const;
  std::vector<std::int64_t> class_counts() const;
};

// SHA-256 over shape, pixels and labels.
std::string dataset_digest(const Dataset& ds);

// "label,p0,...,pN-1" rows, no header, pixels 0..255. Labels are remapped to
// 0..K-1 by sorted rank of the distinct values found in the file.
Dataset load_csv_dataset(const std::filesystem::path& path, std::int64_t height, std::int64_t width);
void write_csv_dataset(const Dataset& ds, const std::filesystem::path& path);

nlohmann::json meta_to_json(const DatasetMeta& meta, const Dataset& ds);
std::filesystem::path sidecar_path(const std::filesystem::path& data_path);
void write_sidecar(const Dataset& ds, const std::filesystem::path& data_path);

// One sub-directory per class (lexicographic order = class index) holding
// 8-bit grayscale PGM (P5) or PNG images. Other files are skipped with a
// warning. All images must share one size.
Dataset load_image_folder(const std::filesystem::path& path);

// 8-bit grayscale image readers, pixels scaled to [0, 1]; [1, H, W].
Tensor read_pgm(const std::filesystem::path& path);
Tensor read_png_gray(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

// Seeded stroke glyphs: one random template per class, jittered per sample
// (+-2 px shift, +-10 deg rotation, N(0, 0.05) pixel noise, clamped).
Dataset synth_glyphs(std::int64_t classes, std::int64_t per_class, std::int64_t height,
                     std::int64_t width, std::uint64_t seed);

struct Split {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> test;
};

// Stratified: per class, round(fraction * class size) samples go to train.
Split split_holdout(const std::vector<std::int64_t>& labels, std::int64_t classes,
                    double train_fraction, std::uint64_t seed);

struct FoldAssignment {
  std::int64_t k = 5;
  std::vector<std::int64_t> fold;  // per sample, in [0, k)
  std::uint64_t seed = 0;

  std::vector<std::int64_t> train_indices(std::int64_t fold_index) const;
  std::vector<std::int64_t> validation_indices(std::int64_t fold_index) const;
};

FoldAssignment kfold(const std::vector<std::int64_t>& labels, std::int64_t classes, std::int64_t k,
                     std::uint64_t seed);

struct PreprocessSpec {
  std::int64_t height = 32;
  std::int64_t width = 32;
  // 0 keeps the source channel count; 3 replicates grayscale.
  std::int64_t channels = 0;
  std::vector<double> mean{0.0};
  std::vector<double> std{1.0};
  bool invert = false;
  // Resize preserving aspect ratio and zero-pad to the target.
  bool keep_aspect = false;

  void validate() const;
};

nlohmann::json preprocess_to_json(const PreprocessSpec& spec);
PreprocessSpec preprocess_from_json(const nlohmann::json& j);

// Bilinear resize with half-pixel centers.
Tensor resize_bilinear(const Tensor& images, std::int64_t height, std::int64_t width);
Dataset preprocess(const Dataset& ds, const PreprocessSpec& spec);

}  // namespace fens
