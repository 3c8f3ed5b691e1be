#include "fens/training.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include "fens/digest.hpp"
#include "fens/errors.hpp"
#include "fens/log.hpp"

namespace fens {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ------------------------------------------------------------ config

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (optimizer.learning_rate < 0) throw ConfigError("learning rate must be >= 0");
  if (optimizer.weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  if (strategy == Strategy::kTfs && !source_checkpoint.empty()) {
    throw ConfigError("tfs trains from scratch and takes no source checkpoint");
  }
  if (strategy != Strategy::kTfs && source_checkpoint.empty()) {
    throw ConfigError(to_string(strategy) + " needs a source checkpoint");
  }
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer",
           {{"kind", to_string(c.optimizer.kind)},
            {"learning_rate", c.optimizer.learning_rate},
            {"momentum", c.optimizer.momentum},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon},
            {"weight_decay", c.optimizer.weight_decay}}},
          {"strategy", to_string(c.strategy)},
          {"seed", c.seed},
          {"source_checkpoint", c.source_checkpoint}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.optimizer.kind = parse_optimizer(o.value("kind", to_string(c.optimizer.kind)));
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    }
    c.strategy = parse_strategy(j.value("strategy", to_string(c.strategy)));
    c.seed = j.value("seed", c.seed);
    c.source_checkpoint = j.value("source_checkpoint", c.source_checkpoint);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  return c;
}

// ------------------------------------------------------------ checkpoints

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

namespace {

constexpr char kMagic[4] = {'F', 'E', 'N', 'S'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* raw(std::size_t n) {
    need(n);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(origin_ + ": truncated or corrupt checkpoint (needed " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ")");
    }
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

void collect_named(Model& model, const Optimizer* optimizer, std::vector<NamedTensor>& out) {
  for (auto* p : model.parameters()) out.push_back({p->name, p->value()});
  for (const auto& b : model.buffers()) out.push_back({b.name, *b.tensor});
  if (optimizer) {
    for (const auto& [name, t] : optimizer->first_moments()) out.push_back({"optim.m." + name, t});
    for (const auto& [name, t] : optimizer->second_moments()) out.push_back({"optim.v." + name, t});
  }
}

bool is_optimizer_record(const std::string& name) { return name.rfind("optim.", 0) == 0; }

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  auto meta = ckpt.meta;
  meta["tensor_count"] = ckpt.tensors.size();
  const std::string meta_text = meta.dump();
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, ckpt.version);
  put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  for (const auto& [name, t] : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, kDoublePrecision ? kDtypeF64 : kDtypeF32);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), static_cast<std::size_t>(t.size()) * sizeof(Real));
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(origin + ": bad magic (not a checkpoint file)");
  }
  r.take(4);
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != kCheckpointVersion) {
    throw CheckpointError(origin + ": unsupported checkpoint version " + std::to_string(ckpt.version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto meta_len = r.get<std::uint64_t>();
  try {
    ckpt.meta = nlohmann::json::parse(r.take(static_cast<std::size_t>(meta_len)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(origin + ": corrupt metadata: " + e.what());
  }
  while (!r.done()) {
    NamedTensor nt;
    const auto name_len = r.get<std::uint32_t>();
    nt.name = r.take(name_len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != kDtypeF32 && dtype != kDtypeF64) {
      throw CheckpointError(origin + ": tensor '" + nt.name + "' has unknown dtype " + std::to_string(dtype));
    }
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError(origin + ": tensor '" + nt.name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    const auto n = numel(shape);
    const std::size_t width = dtype == kDtypeF32 ? 4 : 8;
    const char* payload = r.raw(static_cast<std::size_t>(n) * width);
    Tensor t(shape);
    for (std::int64_t i = 0; i < n; ++i) {
      if (dtype == kDtypeF32) {
        float v;
        std::memcpy(&v, payload + i * 4, 4);
        t[i] = static_cast<Real>(v);
      } else {
        double v;
        std::memcpy(&v, payload + i * 8, 8);
        t[i] = static_cast<Real>(v);
      }
    }
    nt.tensor = std::move(t);
    ckpt.tensors.push_back(std::move(nt));
  }
  const auto expected = ckpt.meta.value("tensor_count", ckpt.tensors.size());
  if (expected != ckpt.tensors.size()) {
    throw CheckpointError(origin + ": truncated checkpoint (" + std::to_string(ckpt.tensors.size()) + " of " +
                          std::to_string(expected) + " tensors)");
  }
  return ckpt;
}

void save_checkpoint(Model& model, const Optimizer* optimizer, nlohmann::json meta, const fs::path& path) {
  Checkpoint ckpt;
  meta["spec"] = spec_to_json(model.spec());
  meta["spec_digest"] = spec_digest(model.spec());
  if (optimizer) {
    meta["optimizer_steps"] = optimizer->step_count();
    meta["optimizer"] = to_string(optimizer->settings().kind);
  }
  ckpt.meta = std::move(meta);
  collect_named(model, optimizer, ckpt.tensors);
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  return parse_checkpoint(read_file(path), path.string());
}

namespace {

void copy_into(Tensor& dst, const Checkpoint& ckpt, const std::string& name) {
  const Tensor* src = ckpt.find(name);
  if (!src) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
  if (src->shape() != dst.shape()) {
    throw CheckpointError("tensor '" + name + "' has shape " + to_string(src->shape()) + " in the checkpoint, " +
                          to_string(dst.shape()) + " in the model");
  }
  dst = *src;
}

}  // namespace

void restore_model(Model& model, const Checkpoint& ckpt) {
  std::set<std::string> expected;
  for (auto* p : model.parameters()) {
    copy_into(p->value(), ckpt, p->name);
    expected.insert(p->name);
  }
  for (auto& b : model.buffers()) {
    copy_into(*b.tensor, ckpt, b.name);
    expected.insert(b.name);
  }
  for (const auto& t : ckpt.tensors) {
    if (!is_optimizer_record(t.name) && !expected.count(t.name)) {
      throw CheckpointError("checkpoint tensor '" + t.name + "' does not belong to this model");
    }
  }
}

void restore_optimizer(Optimizer& optimizer, const Checkpoint& ckpt) {
  optimizer.first_moments().clear();
  optimizer.second_moments().clear();
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("optim.m.", 0) == 0) optimizer.first_moments()[t.name.substr(8)] = t.tensor;
    if (t.name.rfind("optim.v.", 0) == 0) optimizer.second_moments()[t.name.substr(8)] = t.tensor;
  }
  optimizer.set_step_count(ckpt.meta.value("optimizer_steps", std::int64_t{0}));
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("spec")) throw CheckpointError("checkpoint metadata carries no model spec");
  Model model(spec_from_json(ckpt.meta["spec"]));
  restore_model(model, ckpt);
  return model;
}

void apply_strategy(Model& model, Strategy strategy, const Checkpoint* source, std::uint64_t seed) {
  if (strategy == Strategy::kTfs) {
    model.initialize(seed);
    trainable_mask(model, strategy);
    return;
  }
  if (!source) throw CheckpointError(to_string(strategy) + " needs a source checkpoint");
  for (auto* p : model.feature_parameters()) {
    try {
      copy_into(p->value(), *source, p->name);
    } catch (const CheckpointError& e) {
      throw CheckpointError(std::string("source feature extractor does not match the model: ") + e.what());
    }
  }
  for (auto& b : model.feature_buffers()) {
    try {
      copy_into(*b.tensor, *source, b.name);
    } catch (const CheckpointError& e) {
      throw CheckpointError(std::string("source feature extractor does not match the model: ") + e.what());
    }
  }
  bool head_fits = true;
  for (auto* p : model.classifier_parameters()) {
    const Tensor* t = source->find(p->name);
    head_fits = head_fits && t && t->shape() == p->value().shape();
  }
  if (head_fits) {
    for (auto* p : model.classifier_parameters()) copy_into(p->value(), *source, p->name);
    for (auto& b : model.buffers()) {
      if (const Tensor* t = source->find(b.name); t && t->shape() == b.tensor->shape()) *b.tensor = *t;
    }
  } else {
    model.initialize_classifier(seed);
  }
  trainable_mask(model, strategy);
}

// ------------------------------------------------------------ records

double RunRecord::best_val_accuracy() const {
  if (best_epoch < 1 || best_epoch > static_cast<std::int64_t>(rows.size())) return 0.0;
  return rows[static_cast<std::size_t>(best_epoch - 1)].val_accuracy;
}

std::int64_t best_epoch_of(const std::vector<EpochRow>& rows) {
  std::int64_t best = 0;
  double best_acc = -1;
  for (const auto& r : rows) {
    if (r.val_accuracy > best_acc) {
      best_acc = r.val_accuracy;
      best = r.epoch;
    }
  }
  return best;
}

nlohmann::json run_record_to_json(const RunRecord& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : r.rows) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"train_accuracy", e.train_accuracy},
                    {"val_loss", e.val_loss},
                    {"val_accuracy", e.val_accuracy},
                    {"seconds", e.seconds},
                    {"checkpoint", e.checkpoint}});
  }
  return {{"run_id", r.run_id}, {"fold", r.fold},           {"config", train_config_to_json(r.config)},
          {"spec", r.spec},     {"rows", rows},             {"best_epoch", r.best_epoch},
          {"status", r.status}, {"diagnostic", r.diagnostic}};
}

RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.fold = j.at("fold").get<std::int64_t>();
    r.config = train_config_from_json(j.at("config"));
    r.spec = j.value("spec", nlohmann::json::object());
    for (const auto& e : j.at("rows")) {
      r.rows.push_back({e.at("epoch").get<std::int64_t>(), e.at("train_loss").get<double>(),
                        e.at("train_accuracy").get<double>(), e.at("val_loss").get<double>(),
                        e.at("val_accuracy").get<double>(), e.at("seconds").get<double>(),
                        e.at("checkpoint").get<std::string>()});
    }
    r.best_epoch = j.at("best_epoch").get<std::int64_t>();
    r.status = j.at("status").get<std::string>();
    r.diagnostic = j.value("diagnostic", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed run record: ") + e.what());
  }
  return r;
}

RunRecord read_run_record(const fs::path& run_dir) {
  return run_record_from_json(nlohmann::json::parse(read_file(run_dir / "record.json")));
}

std::string run_id(const std::string& dataset, Family family, Strategy strategy, std::int64_t fold,
                   std::uint64_t seed) {
  return dataset + "-" + to_string(family) + "-" + to_string(strategy) + "-fold" + std::to_string(fold) + "-" +
         std::to_string(seed);
}

std::string epoch_file(std::int64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03lld.ckpt", static_cast<long long>(epoch));
  return buf;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t epoch_seed(std::uint64_t seed, std::int64_t fold, std::int64_t epoch) {
  return splitmix64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(fold)) ^
                    static_cast<std::uint64_t>(epoch));
}

// ------------------------------------------------------------ training

namespace {

std::atomic<int> g_training{0};

struct Batch {
  Tensor images;
  std::vector<std::int64_t> labels;
};

Batch make_batch(const Dataset& data, const std::vector<std::int64_t>& order, std::size_t begin, std::size_t end) {
  std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                order.begin() + static_cast<std::ptrdiff_t>(end));
  Batch b;
  b.images = data.gather(idx);
  for (auto i : idx) b.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
  return b;
}

std::int64_t count_correct(const Tensor& probs, const std::vector<std::int64_t>& labels) {
  const auto c = probs.dim(1);
  std::int64_t ok = 0;
  std::vector<double> row(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::int64_t j = 0; j < c; ++j) row[static_cast<std::size_t>(j)] = probs[static_cast<std::int64_t>(i) * c + j];
    ok += argmax_lowest(row) == labels[i];
  }
  return ok;
}

struct Measured {
  double loss = 0;
  double accuracy = 0;
};

Measured measure(Model& model, const Dataset& data, const std::vector<std::int64_t>& idx, std::int64_t batch) {
  double loss = 0;
  std::int64_t ok = 0;
  for (std::size_t b = 0; b < idx.size(); b += static_cast<std::size_t>(batch)) {
    const auto e = std::min(idx.size(), b + static_cast<std::size_t>(batch));
    auto bt = make_batch(data, idx, b, e);
    auto logits = model.forward(nullptr, make_var(std::move(bt.images)), false);
    auto ce = ops::softmax_cross_entropy(nullptr, logits, bt.labels);
    loss += static_cast<double>(ce.loss->value[0]) * static_cast<double>(e - b);
    ok += count_correct(ce.probabilities, bt.labels);
  }
  const auto n = static_cast<double>(std::max<std::size_t>(idx.size(), 1));
  return {loss / n, static_cast<double>(ok) / n};
}

struct RunContext {
  Model& model;
  Optimizer& optimizer;
  const Dataset& data;
  std::vector<std::int64_t> train_idx;
  std::vector<std::int64_t> val_idx;
  RunRecord& record;
  const RunOptions& options;
};

void write_record(const RunContext& ctx) {
  write_file_atomic(ctx.options.run_dir / "record.json", run_record_to_json(ctx.record).dump(2) + "\n");
}

EpochRow train_epoch(RunContext& ctx, std::int64_t epoch) {
  const auto& cfg = ctx.record.config;
  const auto t0 = std::chrono::steady_clock::now();
  auto order = ctx.train_idx;
  std::mt19937_64 rng(epoch_seed(cfg.seed, ctx.record.fold, epoch));
  std::shuffle(order.begin(), order.end(), rng);

  auto params = ctx.model.parameters();
  double loss_sum = 0;
  std::int64_t correct = 0;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
    const auto e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
    auto batch = make_batch(ctx.data, order, b, e);
    Tape tape;
    auto logits = ctx.model.forward(&tape, make_var(std::move(batch.images)), true);
    auto ce = ops::softmax_cross_entropy(&tape, logits, batch.labels);
    const double loss = ce.loss->value[0];
    if (!std::isfinite(loss)) {
      throw TrainingFailure("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b / static_cast<std::size_t>(cfg.batch_size)));
    }
    tape.backward(ce.loss);
    ctx.optimizer.step(params);
    loss_sum += loss * static_cast<double>(e - b);
    correct += count_correct(ce.probabilities, batch.labels);
  }
  for (auto* p : params) {
    if (!p->value().all_finite()) {
      throw TrainingFailure("parameter '" + p->name + "' became non-finite at epoch " + std::to_string(epoch));
    }
  }
  EpochRow row;
  row.epoch = epoch;
  const auto n = static_cast<double>(std::max<std::size_t>(order.size(), 1));
  row.train_loss = loss_sum / n;
  row.train_accuracy = static_cast<double>(correct) / n;
  const auto val = measure(ctx.model, ctx.data, ctx.val_idx, ctx.options.eval_batch);
  row.val_loss = val.loss;
  row.val_accuracy = val.accuracy;
  if (!std::isfinite(row.val_loss)) throw TrainingFailure("non-finite validation loss at epoch " + std::to_string(epoch));
  row.checkpoint = epoch_file(epoch);

  nlohmann::json meta = {{"run_id", ctx.record.run_id},
                         {"epoch", epoch},
                         {"fold", ctx.record.fold},
                         {"seed", cfg.seed},
                         {"metrics",
                          {{"train_loss", row.train_loss},
                           {"train_accuracy", row.train_accuracy},
                           {"val_loss", row.val_loss},
                           {"val_accuracy", row.val_accuracy}}},
                         {"rng_digest", sha256_hex(std::to_string(epoch_seed(cfg.seed, ctx.record.fold, epoch + 1)))
                                            .substr(0, 16)}};
  save_checkpoint(ctx.model, &ctx.optimizer, std::move(meta), ctx.options.run_dir / row.checkpoint);
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

void run_epochs(RunContext& ctx, std::int64_t from_epoch, std::int64_t to_epoch) {
  TrainingActivity active;
  auto& rec = ctx.record;
  rec.status = "running";
  try {
    for (std::int64_t epoch = from_epoch + 1; epoch <= to_epoch; ++epoch) {
      auto row = train_epoch(ctx, epoch);
      rec.rows.push_back(row);
      rec.best_epoch = best_epoch_of(rec.rows);
      log::info("train.epoch", {{"run", rec.run_id},
                                {"epoch", std::to_string(epoch)},
                                {"train_loss", log::num(row.train_loss)},
                                {"train_acc", log::num(row.train_accuracy, 4)},
                                {"val_loss", log::num(row.val_loss)},
                                {"val_acc", log::num(row.val_accuracy, 4)},
                                {"seconds", log::num(row.seconds, 3)}});
      write_record(ctx);
      if (ctx.options.on_epoch) ctx.options.on_epoch(row);
    }
  } catch (const Error& e) {
    rec.status = "failed";
    rec.diagnostic = e.what();
    write_record(ctx);
    log::warn("train.failed", {{"run", rec.run_id}, {"reason", e.what()}});
    throw TrainingFailure(rec.run_id + ": " + e.what());
  }
  rec.status = "done";
  write_record(ctx);
}

}  // namespace

RunRecord train_run(const ModelSpec& spec, const Dataset& train_set, const FoldAssignment& folds, std::int64_t fold,
                    const TrainConfig& config, const RunOptions& options) {
  config.validate();
  if (fold < 0 || fold >= folds.k) {
    throw ConfigError("fold index " + std::to_string(fold) + " outside [0, " + std::to_string(folds.k) + ")");
  }
  if (static_cast<std::int64_t>(folds.fold.size()) != train_set.size()) {
    throw DimensionError("fold assignment covers " + std::to_string(folds.fold.size()) + " samples, dataset has " +
                         std::to_string(train_set.size()));
  }
  if (spec.classes != train_set.classes) {
    throw DimensionError("model has " + std::to_string(spec.classes) + " classes, dataset has " +
                         std::to_string(train_set.classes));
  }
  if (options.run_dir.empty()) throw ConfigError("run directory not set");
  fs::create_directories(options.run_dir);

  RunRecord rec;
  rec.run_id = options.run_id.empty() ? options.run_dir.filename().string() : options.run_id;
  rec.fold = fold;
  rec.config = config;
  rec.spec = spec_to_json(spec);

  Model model(spec);
  std::optional<Checkpoint> source;
  if (!config.source_checkpoint.empty()) {
    fs::path src = config.source_checkpoint;
    if (src.is_relative() && !options.source_root.empty()) src = options.source_root / src;
    source = load_checkpoint(src);
  }
  apply_strategy(model, config.strategy, source ? &*source : nullptr, epoch_seed(config.seed, fold, 0));
  Optimizer optimizer(config.optimizer);

  const nlohmann::json run_config = {{"run_id", rec.run_id},         {"fold", fold},
                                     {"k", folds.k},                 {"fold_seed", folds.seed},
                                     {"config", train_config_to_json(config)}, {"spec", rec.spec},
                                     {"dataset_digest", dataset_digest(train_set)}};
  write_file_atomic(options.run_dir / "config.json", run_config.dump(2) + "\n");

  RunContext ctx{model, optimizer, train_set, folds.train_indices(fold), folds.validation_indices(fold), rec, options};
  run_epochs(ctx, 0, config.epochs);
  return rec;
}

RunRecord resume_run(const Dataset& train_set, const FoldAssignment& folds, std::int64_t from_epoch,
                     std::int64_t target_epochs, const RunOptions& options) {
  const auto run_config = nlohmann::json::parse(read_file(options.run_dir / "config.json"));
  if (run_config.at("k").get<std::int64_t>() != folds.k || run_config.at("fold_seed").get<std::uint64_t>() != folds.seed) {
    throw ConfigError("fold assignment differs from the one the run was started with");
  }
  if (run_config.value("dataset_digest", "") != dataset_digest(train_set)) {
    throw ConfigError("dataset differs from the one the run was started with");
  }
  RunRecord rec = read_run_record(options.run_dir);
  if (from_epoch < 1 || from_epoch > static_cast<std::int64_t>(rec.rows.size())) {
    throw ConfigError("cannot resume from epoch " + std::to_string(from_epoch) + ": run has " +
                      std::to_string(rec.rows.size()) + " completed epochs");
  }
  if (target_epochs < from_epoch) throw ConfigError("target epochs precede the resume point");
  rec.rows.resize(static_cast<std::size_t>(from_epoch));
  rec.best_epoch = best_epoch_of(rec.rows);
  rec.config.epochs = target_epochs;

  const auto ckpt = load_checkpoint(options.run_dir / epoch_file(from_epoch));
  Model model(spec_from_json(run_config.at("spec")));
  restore_model(model, ckpt);
  trainable_mask(model, rec.config.strategy);
  Optimizer optimizer(rec.config.optimizer);
  restore_optimizer(optimizer, ckpt);

  RunContext ctx{model, optimizer, train_set, folds.train_indices(rec.fold), folds.validation_indices(rec.fold), rec,
                 options};
  run_epochs(ctx, from_epoch, target_epochs);
  return rec;
}

std::size_t select_best_fold(const std::vector<RunRecord>& runs) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!runs[i].done()) continue;
    if (!best || runs[i].best_val_accuracy() > runs[*best].best_val_accuracy() ||
        (runs[i].best_val_accuracy() == runs[*best].best_val_accuracy() && runs[i].fold < runs[*best].fold)) {
      best = i;
    }
  }
  if (!best) throw TrainingFailure("no fold completed");
  return *best;
}

CvResult cross_validate(const ModelSpec& spec, const Dataset& train_set, const TrainConfig& config,
                        const CvOptions& options) {
  config.validate();
  CvResult result;
  result.folds = kfold(train_set.labels, train_set.classes, options.k, options.fold_seed);
  result.runs.resize(static_cast<std::size_t>(options.k));
  const std::string dataset = options.dataset_name;

  std::atomic<std::int64_t> next{0};
  auto worker = [&](bool single) {
    if (!single) omp_set_num_threads(1);
    for (auto f = next++; f < options.k; f = next++) {
      const auto id = run_id(dataset, spec.family, config.strategy, f, config.seed);
      RunOptions ro;
      ro.run_dir = options.runs_root / id;
      ro.run_id = id;
      ro.source_root = options.source_root;
      auto& slot = result.runs[static_cast<std::size_t>(f)];
      try {
        slot = train_run(spec, train_set, result.folds, f, config, ro);
      } catch (const Error& e) {
        slot.run_id = id;
        slot.fold = f;
        slot.config = config;
        slot.status = "failed";
        slot.diagnostic = e.what();
      }
    }
  };
  const auto jobs = std::clamp<std::int64_t>(options.jobs, 1, options.k);
  if (jobs == 1) {
    worker(true);
  } else {
    std::vector<std::thread> pool;
    for (std::int64_t j = 0; j < jobs; ++j) pool.emplace_back(worker, false);
    for (auto& t : pool) t.join();
  }
  result.best = select_best_fold(result.runs);
  return result;
}

Tensor predict_proba(Model& model, const Tensor& images, std::int64_t batch) {
  const auto n = images.rank() == 4 ? images.dim(0) : 0;
  const auto classes = model.spec().classes;
  Tensor out({n, classes});
  const auto per = n > 0 ? images.size() / n : 0;
  for (std::int64_t b = 0; b < n; b += batch) {
    const auto e = std::min(n, b + batch);
    Tensor chunk({e - b, images.dim(1), images.dim(2), images.dim(3)},
                 std::span<const Real>(images.ptr() + b * per, static_cast<std::size_t>((e - b) * per)));
    const auto probs = softmax_rows(forward_logits(model, chunk));
    std::copy_n(probs.ptr(), probs.size(), out.ptr() + b * classes);
  }
  return out;
}

EvalResult evaluate(Model& model, const Dataset& data, std::int64_t batch) {
  if (model.spec().classes != data.classes) {
    throw DimensionError("model head has " + std::to_string(model.spec().classes) + " classes, dataset has " +
                         std::to_string(data.classes));
  }
  EvalResult r;
  const auto probs = predict_proba(model, data.images, batch);
  r.probabilities = matrix_from_tensor(probs);
  double loss = 0;
  for (std::int64_t i = 0; i < r.probabilities.n; ++i) {
    r.predictions.push_back(argmax_lowest(r.probabilities.row(i)));
    loss -= std::log(std::max(r.probabilities.at(i, data.labels[static_cast<std::size_t>(i)]), 1e-30));
  }
  r.loss = r.probabilities.n > 0 ? loss / static_cast<double>(r.probabilities.n) : 0.0;
  r.metrics = compute_metrics(r.predictions, data.labels, data.classes);
  return r;
}

Model load_best_model(const fs::path& run_dir) {
  const auto rec = read_run_record(run_dir);
  if (rec.best_epoch < 1) throw StateError(run_dir.string() + ": run has no completed epoch");
  return model_from_checkpoint(load_checkpoint(run_dir / epoch_file(rec.best_epoch)));
}

TrainingActivity::TrainingActivity() { ++g_training; }
TrainingActivity::~TrainingActivity() { --g_training; }
int TrainingActivity::active() { return g_training.load(); }

}  // namespace fens
