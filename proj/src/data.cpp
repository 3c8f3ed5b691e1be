#include "fens/data.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "fens/digest.hpp"
#include "fens/errors.hpp"
#include "fens/log.hpp"

namespace fens {

namespace fs = std::filesystem;

InputShape Dataset::sample_shape() const {
  if (images.rank() != 4) return {0, 0, 0};
  return {images.dim(1), images.dim(2), images.dim(3)};
}

Tensor Dataset::gather(const std::vector<std::int64_t>& indices) const {
  const auto s = sample_shape();
  const auto per = s.channels * s.height * s.width;
  Tensor out({static_cast<std::int64_t>(indices.size()), s.channels, s.height, s.width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = indices[i];
    if (src < 0 || src >= size()) throw DimensionError("sample index out of range");
    std::copy_n(images.ptr() + src * per, per, out.ptr() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

Dataset Dataset::subset(const std::vector<std::int64_t>& indices) const {
  Dataset out;
  out.images = gather(indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  out.classes = classes;
  out.meta = meta;
  return out;
}

std::vector<std::int64_t> Dataset::class_counts() const {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
  for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

std::string dataset_digest(const Dataset& ds) {
  std::string bytes = to_string(ds.images.shape()) + "|" + std::to_string(ds.classes) + "|";
  bytes.append(reinterpret_cast<const char*>(ds.images.ptr()),
               static_cast<std::size_t>(ds.images.size()) * sizeof(Real));
  bytes.append(reinterpret_cast<const char*>(ds.labels.data()),
               ds.labels.size() * sizeof(std::int64_t));
  return sha256_hex(bytes);
}

// ---------------------------------------------------------------- CSV

namespace {

template <typename T>
bool parse_int(std::string_view field, T& out) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
    field.remove_suffix(1);
  }
  if (field.empty()) return false;
  auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  return ec == std::errc() && p == field.data() + field.size();
}

}  // namespace

Dataset load_csv_dataset(const fs::path& path, std::int64_t height, std::int64_t width) {
  if (height < 1 || width < 1) throw ConfigError("image height/width must be positive");
  const std::string text = read_file(path);
  const auto pixels = height * width;
  std::vector<std::int64_t> raw_labels;
  std::vector<Real> values;
  std::istringstream in(text);
  std::string line;
  std::int64_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::string_view rest(line);
    std::int64_t field_count = 0;
    std::int64_t label = 0;
    const auto before = values.size();
    while (true) {
      const auto comma = rest.find(',');
      const auto field = rest.substr(0, comma);
      if (field_count == 0) {
        if (!parse_int(field, label)) {
          throw ParseError(path.string() + ": row " + std::to_string(row) + ": label '" +
                           std::string(field) + "' is not an integer");
        }
      } else {
        int v = 0;
        if (!parse_int(field, v)) {
          throw ParseError(path.string() + ": row " + std::to_string(row) + ": field " +
                           std::to_string(field_count + 1) + " '" + std::string(field) +
                           "' is not an integer");
        }
        if (v < 0 || v > 255) {
          throw ParseError(path.string() + ": row " + std::to_string(row) + ": pixel value " +
                           std::to_string(v) + " outside [0, 255]");
        }
        if (field_count <= pixels) values.push_back(static_cast<Real>(v / 255.0));
      }
      ++field_count;
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (field_count != pixels + 1) {
      values.resize(before);
      throw ParseError(path.string() + ": row " + std::to_string(row) + ": expected " +
                       std::to_string(pixels + 1) + " fields, found " + std::to_string(field_count));
    }
    raw_labels.push_back(label);
  }
  if (raw_labels.empty()) throw ParseError(path.string() + ": no samples");

  const std::set<std::int64_t> distinct(raw_labels.begin(), raw_labels.end());
  std::map<std::int64_t, std::int64_t> rank;
  Dataset ds;
  for (auto l : distinct) {
    rank[l] = static_cast<std::int64_t>(rank.size());
    ds.meta.class_names.push_back(std::to_string(l));
  }
  for (auto l : raw_labels) ds.labels.push_back(rank[l]);
  ds.classes = static_cast<std::int64_t>(distinct.size());
  ds.images = Tensor({static_cast<std::int64_t>(raw_labels.size()), 1, height, width}, values);
  ds.meta.name = path.stem().string();
  ds.meta.label_base = *distinct.begin();
  ds.meta.source = "csv";
  ds.meta.source_hash = sha256_hex(text);
  return ds;
}

void write_csv_dataset(const Dataset& ds, const fs::path& path) {
  const auto s = ds.sample_shape();
  const auto per = s.channels * s.height * s.width;
  std::string out;
  out.reserve(static_cast<std::size_t>(ds.size() * (per * 4 + 4)));
  char buf[16];
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.labels[static_cast<std::size_t>(i)]);
    const Real* px = ds.images.ptr() + i * per;
    for (std::int64_t j = 0; j < per; ++j) {
      const auto v = std::clamp<long>(std::lround(static_cast<double>(px[j]) * 255.0), 0, 255);
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
      out += ',';
      out.append(buf, p);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

nlohmann::json meta_to_json(const DatasetMeta& meta, const Dataset& ds) {
  const auto s = ds.sample_shape();
  return {{"name", meta.name},
          {"source", meta.source},
          {"samples", ds.size()},
          {"classes", ds.classes},
          {"shape", {s.channels, s.height, s.width}},
          {"class_map", meta.class_names},
          {"label_base", meta.label_base},
          {"source_hash", meta.source_hash},
          {"extra", meta.extra}};
}

fs::path sidecar_path(const fs::path& data_path) {
  return data_path.parent_path() / (data_path.stem().string() + ".meta.json");
}

void write_sidecar(const Dataset& ds, const fs::path& data_path) {
  write_file_atomic(sidecar_path(data_path), meta_to_json(ds.meta, ds).dump(2) + "\n");
}

// ---------------------------------------------------------------- images

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

enum class ImageKind { kNone, kPgm, kPng };

ImageKind sniff(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  char head[8] = {};
  in.read(head, sizeof head);
  const auto got = in.gcount();
  if (got >= 2 && head[0] == 'P' && head[1] == '5') return ImageKind::kPgm;
  static const unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (got == 8 && std::memcmp(head, kPngSig, 8) == 0) return ImageKind::kPng;
  return ImageKind::kNone;
}

}  // namespace

Tensor read_pgm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (is_space(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    const auto start = pos;
    while (pos < bytes.size() && !is_space(bytes[pos]) && bytes[pos] != '#') ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P5") throw ParseError(path.string() + ": not a binary PGM (P5)");
  std::int64_t w = 0, h = 0, maxval = 0;
  if (!parse_int(token(), w) || !parse_int(token(), h) || !parse_int(token(), maxval) || w < 1 ||
      h < 1) {
    throw ParseError(path.string() + ": malformed PGM header");
  }
  if (maxval < 1 || maxval > 255) {
    throw ParseError(path.string() + ": only 8-bit PGM is supported (maxval " +
                     std::to_string(maxval) + ")");
  }
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + static_cast<std::size_t>(w * h)) {
    throw ParseError(path.string() + ": truncated PGM pixel data");
  }
  Tensor img({1, h, w});
  for (std::int64_t i = 0; i < w * h; ++i) {
    const auto v = static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]);
    img[i] = static_cast<Real>(static_cast<double>(v) / static_cast<double>(maxval));
  }
  return img;
}

Tensor read_png_gray(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ParseError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ParseError(path.string() + ": " + msg);
  }
  const auto h = static_cast<std::int64_t>(image.height);
  const auto w = static_cast<std::int64_t>(image.width);
  Tensor img({1, h, w});
  for (std::int64_t i = 0; i < h * w; ++i) {
    img[i] = static_cast<Real>(buffer[static_cast<std::size_t>(i)] / 255.0);
  }
  return img;
}

void write_pgm(const fs::path& path, const Tensor& image) {
  const auto h = image.dim(image.rank() - 2);
  const auto w = image.dim(image.rank() - 1);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t i = 0; i < h * w; ++i) {
    out += static_cast<char>(
        std::clamp<long>(std::lround(static_cast<double>(image[i]) * 255.0), 0, 255));
  }
  write_file_atomic(path, out);
}

Dataset load_image_folder(const fs::path& path) {
  if (!fs::is_directory(path)) throw ParseError(path.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_directory()) {
      class_dirs.push_back(entry.path());
    } else {
      log::warn("data.skip", {{"path", entry.path().string()}, {"reason", "not a class folder"}});
    }
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  if (class_dirs.empty()) throw ParseError(path.string() + ": no class folders");

  Dataset ds;
  std::vector<Real> values;
  std::int64_t h = -1, w = -1;
  std::string hash_input;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::int64_t count = 0;
    for (const auto& f : files) {
      if (!fs::is_regular_file(f)) {
        log::warn("data.skip", {{"path", f.string()}, {"reason", "not a regular file"}});
        continue;
      }
      const auto kind = sniff(f);
      if (kind == ImageKind::kNone) {
        log::warn("data.skip", {{"path", f.string()}, {"reason", "not a PGM/PNG image"}});
        continue;
      }
      const Tensor img = kind == ImageKind::kPgm ? read_pgm(f) : read_png_gray(f);
      if (h < 0) {
        h = img.dim(1);
        w = img.dim(2);
      } else if (img.dim(1) != h || img.dim(2) != w) {
        throw ParseError(f.string() + ": image is " + std::to_string(img.dim(2)) + "x" +
                         std::to_string(img.dim(1)) + ", expected " + std::to_string(w) + "x" +
                         std::to_string(h));
      }
      values.insert(values.end(), img.data().begin(), img.data().end());
      ds.labels.push_back(static_cast<std::int64_t>(c));
      hash_input += class_dirs[c].filename().string() + "/" + f.filename().string() + ":" +
                    sha256_file(f) + "\n";
      ++count;
    }
    if (count == 0) throw ParseError(class_dirs[c].string() + ": empty class folder");
    ds.meta.class_names.push_back(class_dirs[c].filename().string());
  }
  ds.classes = static_cast<std::int64_t>(class_dirs.size());
  ds.images = Tensor({ds.size(), 1, h, w}, values);
  ds.meta.name = path.filename().empty() ? path.parent_path().filename().string()
                                         : path.filename().string();
  ds.meta.source = "folder";
  ds.meta.source_hash = sha256_hex(hash_input);
  return ds;
}

// ---------------------------------------------------------------- synthetic glyphs

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// Strokes in unit coordinates.
std::vector<Segment> random_template(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const int strokes = 3 + static_cast<int>(rng() % 4);
  std::vector<Segment> segs;
  for (int s = 0; s < strokes; ++s) {
    if (u(rng) < 0.5) {
      segs.push_back({range(0.15, 0.85), range(0.15, 0.85), range(0.15, 0.85), range(0.15, 0.85)});
    } else {
      const double cx = range(0.3, 0.7), cy = range(0.3, 0.7), r = range(0.12, 0.3);
      const double a0 = range(0.0, 2 * std::numbers::pi);
      const double sweep = range(0.5, 1.5) * std::numbers::pi * (u(rng) < 0.5 ? -1 : 1);
      constexpr int kPieces = 8;
      for (int i = 0; i < kPieces; ++i) {
        const double t0 = a0 + sweep * i / kPieces, t1 = a0 + sweep * (i + 1) / kPieces;
        segs.push_back({cx + r * std::cos(t0), cy + r * std::sin(t0), cx + r * std::cos(t1),
                        cy + r * std::sin(t1)});
      }
    }
  }
  return segs;
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

// Anti-aliased strokes, shifted by (sx, sy) pixels and rotated by `angle`
// around the image center.
void render(const std::vector<Segment>& tmpl, std::int64_t h, std::int64_t w, double sx, double sy,
            double angle, Real* out) {
  const double cx = w / 2.0, cy = h / 2.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double half_width = std::max(1.0, 0.045 * static_cast<double>(std::min(h, w)));
  std::vector<Segment> px;
  px.reserve(tmpl.size());
  for (const auto& s : tmpl) {
    auto map = [&](double x, double y, double& ox, double& oy) {
      const double rx = x * w - cx, ry = y * h - cy;
      ox = ca * rx - sa * ry + cx + sx;
      oy = sa * rx + ca * ry + cy + sy;
    };
    Segment t{};
    map(s.x0, s.y0, t.x0, t.y0);
    map(s.x1, s.y1, t.x1, t.y1);
    px.push_back(t);
  }
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double d = 1e30;
      for (const auto& s : px) d = std::min(d, segment_distance(x + 0.5, y + 0.5, s));
      out[y * w + x] = static_cast<Real>(std::clamp(half_width + 0.5 - d, 0.0, 1.0));
    }
  }
}

double cosine(const std::vector<Real>& a, const std::vector<Real>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 1.0;
}

}  // namespace

Dataset synth_glyphs(std::int64_t classes, std::int64_t per_class, std::int64_t height,
                     std::int64_t width, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synth_glyphs needs at least 2 classes");
  if (per_class < 1 || height < 4 || width < 4) {
    throw ConfigError("synth_glyphs needs per_class >= 1 and images of at least 4x4");
  }
  std::mt19937_64 rng(seed);
  const auto pixels = height * width;

  // Templates are redrawn while they look too much like an earlier class.
  constexpr double kMaxSimilarity = 0.6;
  constexpr int kAttempts = 40;
  std::vector<std::vector<Segment>> templates;
  std::vector<std::vector<Real>> clean;
  for (std::int64_t c = 0; c < classes; ++c) {
    std::vector<Segment> best;
    std::vector<Real> best_img;
    double best_sim = 2.0;
    for (int a = 0; a < kAttempts; ++a) {
      auto t = random_template(rng);
      std::vector<Real> img(static_cast<std::size_t>(pixels));
      render(t, height, width, 0, 0, 0, img.data());
      double sim = 0;
      for (const auto& other : clean) sim = std::max(sim, cosine(img, other));
      if (sim < best_sim) {
        best_sim = sim;
        best = std::move(t);
        best_img = std::move(img);
      }
      if (best_sim <= kMaxSimilarity) break;
    }
    templates.push_back(std::move(best));
    clean.push_back(std::move(best_img));
  }

  Dataset ds;
  ds.images = Tensor({classes * per_class, 1, height, width});
  std::uniform_real_distribution<double> shift(-2.0, 2.0);
  std::uniform_real_distribution<double> rot(-10.0, 10.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (std::int64_t c = 0; c < classes; ++c) {
    for (std::int64_t i = 0; i < per_class; ++i) {
      Real* out = ds.images.ptr() + (c * per_class + i) * pixels;
      const double sx = shift(rng), sy = shift(rng);
      const double angle = rot(rng) * std::numbers::pi / 180.0;
      render(templates[static_cast<std::size_t>(c)], height, width, sx, sy, angle, out);
      for (std::int64_t p = 0; p < pixels; ++p) {
        out[p] = static_cast<Real>(std::clamp(static_cast<double>(out[p]) + noise(rng), 0.0, 1.0));
      }
      ds.labels.push_back(c);
    }
  }
  ds.classes = classes;
  for (std::int64_t c = 0; c < classes; ++c) ds.meta.class_names.push_back(std::to_string(c));
  ds.meta.name = "synth";
  ds.meta.source = "synth";
  ds.meta.extra = {{"classes", classes}, {"per_class", per_class}, {"height", height},
                   {"width", width},     {"seed", seed}};
  ds.meta.source_hash = sha256_hex(ds.meta.extra.dump());
  return ds;
}

// ---------------------------------------------------------------- splits

namespace {

std::vector<std::vector<std::int64_t>> by_class(const std::vector<std::int64_t>& labels,
                                                std::int64_t classes) {
  std::vector<std::vector<std::int64_t>> groups(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (l < 0 || l >= classes) {
      throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
    groups[static_cast<std::size_t>(l)].push_back(static_cast<std::int64_t>(i));
  }
  return groups;
}

}  // namespace

Split split_holdout(const std::vector<std::int64_t>& labels, std::int64_t classes,
                    double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  auto groups = by_class(labels, classes);
  std::mt19937_64 rng(seed);
  // Largest remainder: the train side gets round(fraction * N) samples, each
  // class floor or ceil of its share. Equal remainders go to classes in a
  // seeded order.
  std::vector<std::size_t> take(groups.size());
  std::vector<double> remainder(groups.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].size() < 2) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(groups[c].size()) +
                      " samples; a holdout split needs at least 2");
    }
    const double share = train_fraction * static_cast<double>(groups[c].size());
    take[c] = static_cast<std::size_t>(std::floor(share));
    remainder[c] = share - static_cast<double>(take[c]);
    assigned += take[c];
  }
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(labels.size())));
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainder[a] > remainder[b] + 1e-12;
  });
  for (std::size_t i = 0; assigned < target && i < order.size(); ++i) {
    if (remainder[order[i]] > 0) {
      ++take[order[i]];
      ++assigned;
    }
  }
  Split split;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& g = groups[c];
    std::shuffle(g.begin(), g.end(), rng);
    const auto n_train = static_cast<std::ptrdiff_t>(take[c]);
    split.train.insert(split.train.end(), g.begin(), g.begin() + n_train);
    split.test.insert(split.test.end(), g.begin() + n_train, g.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

FoldAssignment kfold(const std::vector<std::int64_t>& labels, std::int64_t classes, std::int64_t k,
                     std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  auto groups = by_class(labels, classes);
  std::mt19937_64 rng(seed);
  FoldAssignment fa;
  fa.k = k;
  fa.seed = seed;
  fa.fold.assign(labels.size(), -1);
  // Classes are dealt one after another into a single round-robin sequence:
  // each class's share of any fold differs by at most one, and so do fold sizes.
  std::int64_t position = 0;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& g = groups[c];
    if (static_cast<std::int64_t>(g.size()) < k) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(g.size()) +
                      " samples, fewer than k = " + std::to_string(k));
    }
    std::shuffle(g.begin(), g.end(), rng);
    for (auto idx : g) fa.fold[static_cast<std::size_t>(idx)] = position++ % k;
  }
  return fa;
}

std::vector<std::int64_t> FoldAssignment::train_indices(std::int64_t fold_index) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i) {
    if (fold[i] != fold_index) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

std::vector<std::int64_t> FoldAssignment::validation_indices(std::int64_t fold_index) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i) {
    if (fold[i] == fold_index) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

// ---------------------------------------------------------------- preprocessing

void PreprocessSpec::validate() const {
  if (height < 1 || width < 1) throw ConfigError("preprocess target size must be positive");
  if (channels != 0 && channels != 1 && channels != 3) {
    throw ConfigError("preprocess channels must be 0 (keep), 1 or 3");
  }
  if (mean.empty() || std.empty()) throw ConfigError("preprocess mean/std must not be empty");
  for (double s : std) {
    if (!(s > 0)) throw ConfigError("preprocess std must be > 0");
  }
}

nlohmann::json preprocess_to_json(const PreprocessSpec& s) {
  return {{"height", s.height}, {"width", s.width},   {"channels", s.channels},
          {"mean", s.mean},     {"std", s.std},       {"invert", s.invert},
          {"keep_aspect", s.keep_aspect}};
}

PreprocessSpec preprocess_from_json(const nlohmann::json& j) {
  PreprocessSpec s;
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.channels = j.value("channels", s.channels);
  s.mean = j.value("mean", s.mean);
  s.std = j.value("std", s.std);
  s.invert = j.value("invert", s.invert);
  s.keep_aspect = j.value("keep_aspect", s.keep_aspect);
  s.validate();
  return s;
}

Tensor resize_bilinear(const Tensor& images, std::int64_t height, std::int64_t width) {
  if (images.rank() != 4) throw DimensionError("resize expects [N, C, H, W]");
  const auto n = images.dim(0), c = images.dim(1), ih = images.dim(2), iw = images.dim(3);
  if (ih == height && iw == width) return images;
  Tensor out({n, c, height, width});
  auto coords = [](std::int64_t out_len, std::int64_t in_len, std::vector<std::int64_t>& i0,
                   std::vector<std::int64_t>& i1, std::vector<double>& frac) {
    const double scale = static_cast<double>(in_len) / static_cast<double>(out_len);
    for (std::int64_t o = 0; o < out_len; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::max(src, 0.0);
      auto lo = static_cast<std::int64_t>(std::floor(src));
      lo = std::min(lo, in_len - 1);
      i0.push_back(lo);
      i1.push_back(std::min(lo + 1, in_len - 1));
      frac.push_back(src - static_cast<double>(lo));
    }
  };
  std::vector<std::int64_t> y0, y1, x0, x1;
  std::vector<double> fy, fx;
  coords(height, ih, y0, y1, fy);
  coords(width, iw, x0, x1, fx);
  for (std::int64_t p = 0; p < n * c; ++p) {
    const Real* src = images.ptr() + p * ih * iw;
    Real* dst = out.ptr() + p * height * width;
    for (std::int64_t y = 0; y < height; ++y) {
      const auto a = static_cast<std::size_t>(y);
      for (std::int64_t x = 0; x < width; ++x) {
        const auto b = static_cast<std::size_t>(x);
        const double top = src[y0[a] * iw + x0[b]] * (1 - fx[b]) + src[y0[a] * iw + x1[b]] * fx[b];
        const double bot = src[y1[a] * iw + x0[b]] * (1 - fx[b]) + src[y1[a] * iw + x1[b]] * fx[b];
        dst[y * width + x] = static_cast<Real>(top * (1 - fy[a]) + bot * fy[a]);
      }
    }
  }
  return out;
}

namespace {

Tensor letterbox(const Tensor& images, std::int64_t height, std::int64_t width) {
  const auto n = images.dim(0), c = images.dim(1), ih = images.dim(2), iw = images.dim(3);
  const double scale = std::min(static_cast<double>(height) / ih, static_cast<double>(width) / iw);
  const auto sh = std::clamp<std::int64_t>(std::llround(ih * scale), 1, height);
  const auto sw = std::clamp<std::int64_t>(std::llround(iw * scale), 1, width);
  const Tensor scaled = resize_bilinear(images, sh, sw);
  Tensor out({n, c, height, width});
  const auto top = (height - sh) / 2, left = (width - sw) / 2;
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t y = 0; y < sh; ++y) {
      std::copy_n(scaled.ptr() + (p * sh + y) * sw, sw,
                  out.ptr() + (p * height + top + y) * width + left);
    }
  }
  return out;
}

}  // namespace

Dataset preprocess(const Dataset& ds, const PreprocessSpec& spec) {
  spec.validate();
  Dataset out;
  out.labels = ds.labels;
  out.classes = ds.classes;
  out.meta = ds.meta;
  Tensor img = spec.keep_aspect ? letterbox(ds.images, spec.height, spec.width)
                                : resize_bilinear(ds.images, spec.height, spec.width);
  const auto n = img.dim(0), c = img.dim(1), plane = spec.height * spec.width;
  const auto target_c = spec.channels == 0 ? c : spec.channels;
  if (target_c != c) {
    if (c != 1) {
      throw DimensionError("cannot convert " + std::to_string(c) + " channels to " +
                           std::to_string(target_c));
    }
    Tensor rep({n, target_c, spec.height, spec.width});
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < target_c; ++ch) {
        std::copy_n(img.ptr() + i * plane, plane, rep.ptr() + (i * target_c + ch) * plane);
      }
    }
    img = std::move(rep);
  }
  auto per_channel = [](const std::vector<double>& v, std::int64_t ch) {
    return v.size() == 1 ? v[0] : v.at(static_cast<std::size_t>(ch));
  };
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < target_c; ++ch) {
      const double m = per_channel(spec.mean, ch), s = per_channel(spec.std, ch);
      Real* p = img.ptr() + (i * target_c + ch) * plane;
      for (std::int64_t j = 0; j < plane; ++j) {
        double v = p[j];
        if (spec.invert) v = 1.0 - v;
        p[j] = static_cast<Real>((v - m) / s);
      }
    }
  }
  out.images = std::move(img);
  return out;
}

}  // namespace fens
