#include "fens/model.hpp"

#include <cmath>
#include <random>

#include "fens/errors.hpp"

namespace fens {

Strategy parse_strategy(const std::string& name) {
  if (name == "tfs") return Strategy::kTfs;
  if (name == "hft") return Strategy::kHft;
  if (name == "fft") return Strategy::kFft;
  throw ConfigError("unknown strategy '" + name + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kTfs: return "tfs";
    case Strategy::kHft: return "hft";
    case Strategy::kFft: return "fft";
  }
  return "?";
}

namespace {

ParamTensor make_param(std::string name, Shape shape) {
  return ParamTensor{std::move(name), make_var(Tensor(std::move(shape)), true), true};
}

// conv [+bias] [+batchnorm] [+activation]
struct ConvUnit {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
  Activation act = Activation::kNone;
  bool has_bias = false;
  bool has_bn = false;
  ParamTensor weight;
  ParamTensor bias;
  ParamTensor gamma;
  ParamTensor beta;
  BatchNormState bn;
  std::string prefix;

  ConvUnit() = default;
  ConvUnit(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t kernel,
           std::int64_t stride_, std::int64_t padding_, std::int64_t groups_, bool bias_,
           bool bn_, Activation act_)
      : stride(stride_), padding(padding_), groups(groups_), act(act_), has_bias(bias_),
        has_bn(bn_), prefix(name) {
    weight = make_param(name + ".weight", {out, in / groups, kernel, kernel});
    if (has_bias) bias = make_param(name + ".bias", {out});
    if (has_bn) {
      gamma = make_param(name + ".bn.gamma", {out});
      beta = make_param(name + ".bn.beta", {out});
      bn.running_mean = Tensor({out});
      bn.running_var = Tensor({out}, Real(1));
    }
  }

  Var forward(Tape* tape, const Var& x, bool train) {
    auto y = ops::conv2d(tape, x, weight.var, has_bias ? bias.var : Var{}, stride, padding, groups);
    if (has_bn) y = ops::batchnorm2d(tape, y, gamma.var, beta.var, bn, train);
    return ops::activation(tape, y, act);
  }

  void collect_params(std::vector<ParamTensor*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
    if (has_bn) {
      out.push_back(&gamma);
      out.push_back(&beta);
    }
  }

  void collect_buffers(std::vector<NamedBuffer>& out) {
    if (!has_bn) return;
    out.push_back({prefix + ".bn.running_mean", &bn.running_mean});
    out.push_back({prefix + ".bn.running_var", &bn.running_var});
  }
};

class PlainConvLayer final : public Layer {
 public:
  PlainConvLayer(const std::string& name, const BlockSpec& b)
      : conv_(name + ".conv", b.in_channels, b.out_channels, b.kernel, b.stride,
              b.effective_padding(), 1, b.bias, b.batchnorm, b.activation) {}
  Var forward(Tape* tape, const Var& x, bool train) override { return conv_.forward(tape, x, train); }
  void collect_params(std::vector<ParamTensor*>& out) override { conv_.collect_params(out); }
  void collect_buffers(std::vector<NamedBuffer>& out) override { conv_.collect_buffers(out); }

 private:
  ConvUnit conv_;
};

class DepthwiseSeparableLayer final : public Layer {
 public:
  DepthwiseSeparableLayer(const std::string& name, const BlockSpec& b)
      : dw_(name + ".dw", b.in_channels, b.in_channels, b.kernel, b.stride, b.effective_padding(),
            b.in_channels, b.bias, b.batchnorm, b.activation),
        pw_(name + ".pw", b.in_channels, b.out_channels, 1, 1, 0, 1, b.bias, b.batchnorm,
            b.linear_pointwise ? Activation::kNone : b.activation) {}
  Var forward(Tape* tape, const Var& x, bool train) override {
    return pw_.forward(tape, dw_.forward(tape, x, train), train);
  }
  void collect_params(std::vector<ParamTensor*>& out) override {
    dw_.collect_params(out);
    pw_.collect_params(out);
  }
  void collect_buffers(std::vector<NamedBuffer>& out) override {
    dw_.collect_buffers(out);
    pw_.collect_buffers(out);
  }

 private:
  ConvUnit dw_, pw_;
};

class InvertedResidualLayer final : public Layer {
 public:
  InvertedResidualLayer(const std::string& name, const BlockSpec& b) : skip_(b.has_skip()) {
    const auto hidden = b.hidden_channels();
    has_expand_ = hidden != b.in_channels;
    if (has_expand_) {
      expand_ = ConvUnit(name + ".expand", b.in_channels, hidden, 1, 1, 0, 1, false, true,
                         b.activation);
    }
    dw_ = ConvUnit(name + ".dw", hidden, hidden, b.kernel, b.stride, b.effective_padding(),
                   hidden, false, true, b.activation);
    if (b.squeeze_excite) {
      has_se_ = true;
      const auto sq = b.se_channels();
      se_reduce_ = ConvUnit(name + ".se.reduce", hidden, sq, 1, 1, 0, 1, true, false,
                            Activation::kRelu);
      se_expand_ = ConvUnit(name + ".se.expand", sq, hidden, 1, 1, 0, 1, true, false,
                            Activation::kHardSigmoid);
    }
    project_ = ConvUnit(name + ".project", hidden, b.out_channels, 1, 1, 0, 1, false, true,
                        Activation::kNone);
  }

  Var forward(Tape* tape, const Var& x, bool train) override {
    Var h = has_expand_ ? expand_.forward(tape, x, train) : x;
    h = dw_.forward(tape, h, train);
    if (has_se_) {
      auto pooled = ops::pool2d(tape, h, PoolKind::kGlobalAvg, 1, 1);
      auto gate = se_expand_.forward(tape, se_reduce_.forward(tape, pooled, train), train);
      h = ops::scale_channels(tape, h, gate);
    }
    h = project_.forward(tape, h, train);
    return skip_ ? ops::add(tape, h, x) : h;
  }
  void collect_params(std::vector<ParamTensor*>& out) override {
    if (has_expand_) expand_.collect_params(out);
    dw_.collect_params(out);
    if (has_se_) {
      se_reduce_.collect_params(out);
      se_expand_.collect_params(out);
    }
    project_.collect_params(out);
  }
  void collect_buffers(std::vector<NamedBuffer>& out) override {
    if (has_expand_) expand_.collect_buffers(out);
    dw_.collect_buffers(out);
    project_.collect_buffers(out);
  }

 private:
  bool skip_ = false;
  bool has_expand_ = false;
  bool has_se_ = false;
  ConvUnit expand_, dw_, se_reduce_, se_expand_, project_;
};

class ShuffleUnitLayer final : public Layer {
 public:
  ShuffleUnitLayer(const std::string& name, const BlockSpec& b) : stride_(b.stride) {
    const auto branch = b.out_channels / 2;
    const auto in2 = stride_ == 1 ? b.in_channels / 2 : b.in_channels;
    const auto pad = b.kernel / 2;
    if (stride_ == 2) {
      b1_dw_ = ConvUnit(name + ".branch1.dw", b.in_channels, b.in_channels, b.kernel, 2, pad,
                        b.in_channels, false, true, Activation::kNone);
      b1_pw_ = ConvUnit(name + ".branch1.pw", b.in_channels, branch, 1, 1, 0, 1, false, true,
                        b.activation);
    }
    b2_pw1_ = ConvUnit(name + ".branch2.pw1", in2, branch, 1, 1, 0, 1, false, true, b.activation);
    b2_dw_ = ConvUnit(name + ".branch2.dw", branch, branch, b.kernel, stride_, pad, branch, false,
                      true, Activation::kNone);
    b2_pw2_ = ConvUnit(name + ".branch2.pw2", branch, branch, 1, 1, 0, 1, false, true,
                       b.activation);
  }

  Var forward(Tape* tape, const Var& x, bool train) override {
    Var left, right;
    if (stride_ == 1) {
      const auto c = x->value.dim(1);
      left = ops::slice_channels(tape, x, 0, c / 2);
      right = branch2(tape, ops::slice_channels(tape, x, c / 2, c), train);
    } else {
      left = b1_pw_.forward(tape, b1_dw_.forward(tape, x, train), train);
      right = branch2(tape, x, train);
    }
    return ops::channel_shuffle(tape, ops::concat_channels(tape, left, right), 2);
  }
  void collect_params(std::vector<ParamTensor*>& out) override {
    if (stride_ == 2) {
      b1_dw_.collect_params(out);
      b1_pw_.collect_params(out);
    }
    b2_pw1_.collect_params(out);
    b2_dw_.collect_params(out);
    b2_pw2_.collect_params(out);
  }
  void collect_buffers(std::vector<NamedBuffer>& out) override {
    if (stride_ == 2) {
      b1_dw_.collect_buffers(out);
      b1_pw_.collect_buffers(out);
    }
    b2_pw1_.collect_buffers(out);
    b2_dw_.collect_buffers(out);
    b2_pw2_.collect_buffers(out);
  }

 private:
  Var branch2(Tape* tape, const Var& x, bool train) {
    return b2_pw2_.forward(tape, b2_dw_.forward(tape, b2_pw1_.forward(tape, x, train), train), train);
  }

  std::int64_t stride_;
  ConvUnit b1_dw_, b1_pw_, b2_pw1_, b2_dw_, b2_pw2_;
};

class FireLayer final : public Layer {
 public:
  FireLayer(const std::string& name, const BlockSpec& b)
      : pool_(b.stride == 2), ceil_mode_(b.ceil_mode),
        squeeze_(name + ".squeeze", b.in_channels, b.squeeze_channels, 1, 1, 0, 1, b.bias,
                 b.batchnorm, b.activation),
        expand1_(name + ".expand1x1", b.squeeze_channels, b.expand1x1, 1, 1, 0, 1, b.bias,
                 b.batchnorm, b.activation),
        expand3_(name + ".expand3x3", b.squeeze_channels, b.expand3x3, 3, 1, 1, 1, b.bias,
                 b.batchnorm, b.activation) {}

  Var forward(Tape* tape, const Var& x, bool train) override {
    Var h = pool_ ? ops::pool2d(tape, x, PoolKind::kMax, 3, 2, 0, ceil_mode_) : x;
    h = squeeze_.forward(tape, h, train);
    return ops::concat_channels(tape, expand1_.forward(tape, h, train),
                                expand3_.forward(tape, h, train));
  }
  void collect_params(std::vector<ParamTensor*>& out) override {
    squeeze_.collect_params(out);
    expand1_.collect_params(out);
    expand3_.collect_params(out);
  }
  void collect_buffers(std::vector<NamedBuffer>& out) override {
    squeeze_.collect_buffers(out);
    expand1_.collect_buffers(out);
    expand3_.collect_buffers(out);
  }

 private:
  bool pool_;
  bool ceil_mode_;
  ConvUnit squeeze_, expand1_, expand3_;
};

class MaxPoolLayer final : public Layer {
 public:
  explicit MaxPoolLayer(const BlockSpec& b) : b_(b) {}
  Var forward(Tape* tape, const Var& x, bool) override {
    return ops::pool2d(tape, x, PoolKind::kMax, b_.kernel, b_.stride, b_.effective_padding(),
                       b_.ceil_mode);
  }
  void collect_params(std::vector<ParamTensor*>&) override {}
  void collect_buffers(std::vector<NamedBuffer>&) override {}

 private:
  BlockSpec b_;
};

// Global average (when given a feature map) + linear + activation.
class HeadLinearLayer final : public Layer {
 public:
  HeadLinearLayer(const std::string& name, std::int64_t in, std::int64_t out, Activation act)
      : act_(act),
        weight_(make_param(name + ".weight", {out, in})),
        bias_(make_param(name + ".bias", {out})) {}

  Var forward(Tape* tape, const Var& x, bool) override {
    Var h = x;
    if (h->value.rank() == 4) {
      h = ops::flatten(tape, ops::pool2d(tape, h, PoolKind::kGlobalAvg, 1, 1));
    }
    return ops::activation(tape, ops::linear(tape, h, weight_.var, bias_.var), act_);
  }
  void collect_params(std::vector<ParamTensor*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void collect_buffers(std::vector<NamedBuffer>&) override {}

 private:
  Activation act_;
  ParamTensor weight_, bias_;
};

// 1x1 conv to class scores + relu + global average.
class HeadConvLayer final : public Layer {
 public:
  HeadConvLayer(const std::string& name, std::int64_t in, std::int64_t classes)
      : conv_(name, in, classes, 1, 1, 0, 1, true, false, Activation::kRelu) {}
  Var forward(Tape* tape, const Var& x, bool train) override {
    auto h = conv_.forward(tape, x, train);
    return ops::flatten(tape, ops::pool2d(tape, h, PoolKind::kGlobalAvg, 1, 1));
  }
  void collect_params(std::vector<ParamTensor*>& out) override { conv_.collect_params(out); }
  void collect_buffers(std::vector<NamedBuffer>&) override {}

 private:
  ConvUnit conv_;
};

std::unique_ptr<Layer> make_block(const std::string& name, const BlockSpec& b) {
  switch (b.kind) {
    case BlockKind::kPlainConv: return std::make_unique<PlainConvLayer>(name, b);
    case BlockKind::kDepthwiseSeparable: return std::make_unique<DepthwiseSeparableLayer>(name, b);
    case BlockKind::kInvertedResidual: return std::make_unique<InvertedResidualLayer>(name, b);
    case BlockKind::kShuffleUnit: return std::make_unique<ShuffleUnitLayer>(name, b);
    case BlockKind::kFire: return std::make_unique<FireLayer>(name, b);
    case BlockKind::kMaxPool: return std::make_unique<MaxPoolLayer>(b);
  }
  throw ConfigError("unhandled block kind");
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool any_trainable(Layer& layer) {
  std::vector<ParamTensor*> ps;
  layer.collect_params(ps);
  for (auto* p : ps) {
    if (p->trainable) return true;
  }
  return false;
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  validate(spec_);
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    layers_.push_back(make_block("features." + std::to_string(i), spec_.blocks[i]));
  }
  const auto feat = spec_.feature_channels();
  if (spec_.head.conv_classifier) {
    layers_.push_back(std::make_unique<HeadConvLayer>("classifier.logits", feat, spec_.classes));
  } else if (spec_.head.hidden > 0) {
    layers_.push_back(std::make_unique<HeadLinearLayer>("classifier.hidden", feat, spec_.head.hidden,
                                                        spec_.head.hidden_activation));
    layers_.push_back(std::make_unique<HeadLinearLayer>("classifier.logits", spec_.head.hidden,
                                                        spec_.classes, Activation::kNone));
  } else {
    layers_.push_back(std::make_unique<HeadLinearLayer>("classifier.logits", feat, spec_.classes,
                                                        Activation::kNone));
  }
  initialize(seed);
}

Model::~Model() = default;

std::vector<ParamTensor*> Model::parameters() {
  std::vector<ParamTensor*> out;
  for (auto& l : layers_) l->collect_params(out);
  return out;
}

std::vector<NamedBuffer> Model::buffers() {
  std::vector<NamedBuffer> out;
  for (auto& l : layers_) l->collect_buffers(out);
  return out;
}

std::vector<ParamTensor*> Model::feature_parameters() {
  std::vector<ParamTensor*> out;
  for (std::int64_t i = 0; i < spec_.boundary; ++i) layers_[static_cast<std::size_t>(i)]->collect_params(out);
  return out;
}

std::vector<NamedBuffer> Model::feature_buffers() {
  std::vector<NamedBuffer> out;
  for (std::int64_t i = 0; i < spec_.boundary; ++i) layers_[static_cast<std::size_t>(i)]->collect_buffers(out);
  return out;
}

std::vector<ParamTensor*> Model::classifier_parameters() {
  std::vector<ParamTensor*> out;
  for (auto i = static_cast<std::size_t>(spec_.boundary); i < layers_.size(); ++i) {
    layers_[i]->collect_params(out);
  }
  return out;
}

std::int64_t Model::parameter_count() {
  std::int64_t n = 0;
  for (auto* p : parameters()) n += p->value().size();
  return n;
}

void Model::initialize(std::uint64_t seed) { initialize_range(0, layers_.size(), seed); }

void Model::initialize_classifier(std::uint64_t seed) {
  initialize_range(static_cast<std::size_t>(spec_.boundary), layers_.size(), seed);
}

void Model::initialize_range(std::size_t begin, std::size_t end, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ParamTensor*> params;
  std::vector<NamedBuffer> buffers;
  for (auto i = begin; i < end; ++i) {
    layers_[i]->collect_params(params);
    layers_[i]->collect_buffers(buffers);
  }
  for (auto* p : params) {
    Tensor& t = p->value();
    if (ends_with(p->name, ".gamma")) {
      t.fill(1);
    } else if (ends_with(p->name, ".weight")) {
      const auto fan_in = t.size() / t.dim(0);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.data()) v = static_cast<Real>(dist(rng));
    } else {
      t.fill(0);
    }
  }
  for (auto& b : buffers) b.tensor->fill(ends_with(b.name, "running_var") ? 1 : 0);
}

Var Model::forward(Tape* tape, const Var& x, bool train) {
  Var h = x;
  for (auto& layer : layers_) {
    const bool layer_train = train && any_trainable(*layer);
    h = layer->forward(tape, h, layer_train);
  }
  return h;
}

Model build_model(Family family, Preset preset, double width_multiplier, InputShape input,
                  std::int64_t classes, std::uint64_t seed) {
  return Model(make_spec(family, preset, width_multiplier, input, classes), seed);
}

Tensor forward_logits(Model& model, const Tensor& batch) {
  const auto& in = model.spec().input;
  if (batch.rank() != 4 || batch.dim(1) != in.channels || batch.dim(2) != in.height ||
      batch.dim(3) != in.width) {
    throw DimensionError("batch " + to_string(batch.shape()) + " does not match model input [N x " +
                         std::to_string(in.channels) + "x" + std::to_string(in.height) + "x" +
                         std::to_string(in.width) + "]");
  }
  if (batch.dim(0) == 0) return Tensor({0, model.spec().classes});
  auto out = model.forward(nullptr, make_var(batch), false);
  check_finite(out->value, "logits");
  return std::move(out->value);
}

void trainable_mask(Model& model, Strategy strategy) {
  for (auto* p : model.parameters()) p->set_trainable(true);
  if (strategy == Strategy::kHft) {
    for (auto* p : model.feature_parameters()) p->set_trainable(false);
  }
}

}  // namespace fens
