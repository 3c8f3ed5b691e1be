#include "fens/cost.hpp"

#include "fens/errors.hpp"
#include "fens/kernels.hpp"

namespace fens {

namespace {

struct Walker {
  CostReport report;
  std::int64_t h = 0;
  std::int64_t w = 0;

  // Conv at the current resolution; advances h/w to its output.
  void conv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t groups, bool bias, bool bn) {
    if (in % groups != 0 || out % groups != 0) {
      throw DimensionError(name + ": channels not divisible by groups");
    }
    const auto oh = kernels::window_output(h, k, stride, pad);
    const auto ow = kernels::window_output(w, k, stride, pad);
    LayerCost c{name, "conv", k * k * (in / groups) * out + (bias ? out : 0), 0, 0};
    if (bn) {
      c.params += 2 * out;
      c.bn_running = 2 * out;
    }
    c.macs = k * k * (in / groups) * out * oh * ow;
    add(c);
    h = oh;
    w = ow;
  }

  void linear(const std::string& name, std::int64_t in, std::int64_t out) {
    add({name, "linear", in * out + out, 0, in * out});
  }

  void pool(std::int64_t k, std::int64_t stride, std::int64_t pad, bool ceil_mode) {
    h = kernels::window_output(h, k, stride, pad, ceil_mode);
    w = kernels::window_output(w, k, stride, pad, ceil_mode);
  }

  void add(const LayerCost& c) {
    report.params += c.params;
    report.bn_running += c.bn_running;
    report.macs += c.macs;
    report.layers.push_back(c);
  }
};

void walk_block(Walker& wk, const std::string& name, const BlockSpec& b) {
  const auto in = b.in_channels;
  const auto out = b.out_channels;
  switch (b.kind) {
    case BlockKind::kPlainConv:
      wk.conv(name + ".conv", in, out, b.kernel, b.stride, b.effective_padding(), 1, b.bias,
              b.batchnorm);
      break;
    case BlockKind::kDepthwiseSeparable:
      wk.conv(name + ".dw", in, in, b.kernel, b.stride, b.effective_padding(), in, b.bias,
              b.batchnorm);
      wk.conv(name + ".pw", in, out, 1, 1, 0, 1, b.bias, b.batchnorm);
      break;
    case BlockKind::kInvertedResidual: {
      const auto hidden = b.hidden_channels();
      if (hidden != in) wk.conv(name + ".expand", in, hidden, 1, 1, 0, 1, false, true);
      wk.conv(name + ".dw", hidden, hidden, b.kernel, b.stride, b.effective_padding(), hidden,
              false, true);
      if (b.squeeze_excite) {
        const auto sq = b.se_channels();
        const auto h = wk.h, w = wk.w;
        wk.h = wk.w = 1;
        wk.conv(name + ".se.reduce", hidden, sq, 1, 1, 0, 1, true, false);
        wk.conv(name + ".se.expand", sq, hidden, 1, 1, 0, 1, true, false);
        wk.h = h;
        wk.w = w;
      }
      wk.conv(name + ".project", hidden, out, 1, 1, 0, 1, false, true);
      break;
    }
    case BlockKind::kShuffleUnit: {
      const auto branch = out / 2;
      const auto pad = b.kernel / 2;
      const auto h = wk.h, w = wk.w;
      if (b.stride == 2) {
        wk.conv(name + ".branch1.dw", in, in, b.kernel, 2, pad, in, false, true);
        wk.conv(name + ".branch1.pw", in, branch, 1, 1, 0, 1, false, true);
        wk.h = h;
        wk.w = w;
      }
      const auto in2 = b.stride == 1 ? in / 2 : in;
      wk.conv(name + ".branch2.pw1", in2, branch, 1, 1, 0, 1, false, true);
      wk.conv(name + ".branch2.dw", branch, branch, b.kernel, b.stride, pad, branch, false, true);
      wk.conv(name + ".branch2.pw2", branch, branch, 1, 1, 0, 1, false, true);
      break;
    }
    case BlockKind::kFire: {
      if (b.stride == 2) wk.pool(3, 2, 0, b.ceil_mode);
      wk.conv(name + ".squeeze", in, b.squeeze_channels, 1, 1, 0, 1, b.bias, b.batchnorm);
      wk.conv(name + ".expand1x1", b.squeeze_channels, b.expand1x1, 1, 1, 0, 1, b.bias,
              b.batchnorm);
      wk.conv(name + ".expand3x3", b.squeeze_channels, b.expand3x3, 3, 1, 1, 1, b.bias,
              b.batchnorm);
      break;
    }
    case BlockKind::kMaxPool:
      wk.pool(b.kernel, b.stride, b.effective_padding(), b.ceil_mode);
      break;
  }
}

}  // namespace

CostReport count_flops(const ModelSpec& spec, InputShape input) {
  Walker wk;
  wk.h = input.height;
  wk.w = input.width;
  if (!spec.blocks.empty() && spec.blocks.front().in_channels != input.channels) {
    throw DimensionError("input has " + std::to_string(input.channels) + " channels, spec expects " +
                         std::to_string(spec.blocks.front().in_channels));
  }
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    walk_block(wk, "features." + std::to_string(i), spec.blocks[i]);
  }
  const auto feat = spec.feature_channels();
  if (spec.head.conv_classifier) {
    wk.conv("classifier.logits", feat, spec.classes, 1, 1, 0, 1, true, false);
  } else if (spec.head.hidden > 0) {
    wk.linear("classifier.hidden", feat, spec.head.hidden);
    wk.linear("classifier.logits", spec.head.hidden, spec.classes);
  } else {
    wk.linear("classifier.logits", feat, spec.classes);
  }
  wk.report.flops = 2 * wk.report.macs;
  return wk.report;
}

CostReport count_params(const ModelSpec& spec) { return count_flops(spec, spec.input); }

}  // namespace fens
