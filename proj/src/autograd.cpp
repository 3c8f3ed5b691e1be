#include "fens/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fens/errors.hpp"
#include "fens/kernels.hpp"

namespace fens {

Tensor& Variable::grad_buffer() {
  if (!has_grad()) grad = Tensor(value.shape());
  return grad;
}

Var make_var(Tensor value, bool requires_grad) {
  auto v = std::make_shared<Variable>();
  v->value = std::move(value);
  v->requires_grad = requires_grad;
  return v;
}

void ParamTensor::set_trainable(bool on) {
  trainable = on;
  var->requires_grad = on;
  if (!on) var->grad = Tensor();
}

void Tape::backward(const Var& loss) {
  if (ops_.empty() || !loss || !loss->requires_grad) {
    throw StateError("backward called without a recorded forward pass");
  }
  if (loss->value.size() != 1) {
    throw StateError("backward requires a scalar loss, got " + to_string(loss->value.shape()));
  }
  loss->grad_buffer()[0] = Real(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

Activation parse_activation(const std::string& name) {
  if (name == "none" || name.empty()) return Activation::kNone;
  if (name == "relu") return Activation::kRelu;
  if (name == "relu6") return Activation::kRelu6;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "hard-sigmoid") return Activation::kHardSigmoid;
  if (name == "hard-swish") return Activation::kHardSwish;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kRelu6: return "relu6";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kHardSigmoid: return "hard-sigmoid";
    case Activation::kHardSwish: return "hard-swish";
  }
  return "none";
}

namespace {

Real relu6(Real x) { return std::min(std::max(x, Real(0)), Real(6)); }

}  // namespace

Real apply_activation(Activation a, Real x) {
  switch (a) {
    case Activation::kNone: return x;
    case Activation::kRelu: return x > 0 ? x : Real(0);
    case Activation::kRelu6: return relu6(x);
    case Activation::kSigmoid: return Real(1) / (Real(1) + std::exp(-x));
    case Activation::kHardSigmoid: return relu6(x + 3) / 6;
    case Activation::kHardSwish: return x * relu6(x + 3) / 6;
  }
  return x;
}

Real activation_derivative(Activation a, Real x) {
  switch (a) {
    case Activation::kNone: return 1;
    case Activation::kRelu: return x > 0 ? Real(1) : Real(0);
    case Activation::kRelu6: return (x > 0 && x < 6) ? Real(1) : Real(0);
    case Activation::kSigmoid: {
      const Real s = Real(1) / (Real(1) + std::exp(-x));
      return s * (1 - s);
    }
    case Activation::kHardSigmoid: return (x > -3 && x < 3) ? Real(1) / 6 : Real(0);
    case Activation::kHardSwish:
      if (x <= -3) return 0;
      if (x >= 3) return 1;
      return (2 * x + 3) / 6;
  }
  return 1;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects [N, C], got " + to_string(logits.shape()));
  const auto n = logits.dim(0), c = logits.dim(1);
  Tensor out(logits.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* row = logits.ptr() + i * c;
    Real* dst = out.ptr() + i * c;
    const Real mx = *std::max_element(row, row + c);
    double sum = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      dst[j] = std::exp(row[j] - mx);
      sum += dst[j];
    }
    for (std::int64_t j = 0; j < c; ++j) dst[j] = static_cast<Real>(dst[j] / sum);
  }
  return out;
}

namespace ops {

namespace {

bool wants_grad(Tape* tape, std::initializer_list<const Var*> inputs) {
  if (!tape) return false;
  for (const Var* v : inputs) {
    if (v && *v && (*v)->requires_grad) return true;
  }
  return false;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
  }
}

std::span<Real> grad_or_empty(const Var& v) {
  if (!v || !v->requires_grad) return {};
  return v->grad_buffer().data();
}

}  // namespace

Var conv2d(Tape* tape, const Var& x, const Var& weight, const Var& bias, std::int64_t stride,
           std::int64_t padding, std::int64_t groups) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require_rank(xv, 4, "conv2d input");
  require_rank(wv, 4, "conv2d weight");
  if (wv.dim(2) != wv.dim(3)) throw DimensionError("conv2d expects square kernels");
  if (groups < 1 || xv.dim(1) % groups != 0 || wv.dim(1) * groups != xv.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(xv.dim(1)) +
                         " incompatible with weight " + to_string(wv.shape()) + " and groups " +
                         std::to_string(groups));
  }
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != wv.dim(0))) {
    throw DimensionError("conv2d bias shape " + to_string(bias->value.shape()));
  }
  const auto g = kernels::make_conv_geometry(xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3),
                                             wv.dim(0), wv.dim(2), stride, padding, groups);
  auto out = make_var(Tensor({g.batch, g.out_channels, g.out_h, g.out_w}));
  kernels::parallel::conv2d_forward(g, xv.data(), wv.data(),
                                    bias ? bias->value.data() : std::span<const Real>{},
                                    out->value.data());
  if (wants_grad(tape, {&x, &weight, &bias})) {
    out->requires_grad = true;
    tape->record([g, x, weight, bias, out] {
      if (!out->has_grad()) return;
      kernels::parallel::conv2d_backward(g, x->value.data(), weight->value.data(),
                                         out->grad.data(), grad_or_empty(x),
                                         grad_or_empty(weight), grad_or_empty(bias));
    });
  }
  return out;
}

Var linear(Tape* tape, const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require_rank(xv, 2, "linear input");
  require_rank(wv, 2, "linear weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw DimensionError("linear: input " + to_string(xv.shape()) + " vs weight " +
                         to_string(wv.shape()));
  }
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != wv.dim(0))) {
    throw DimensionError("linear bias shape " + to_string(bias->value.shape()));
  }
  const kernels::LinearGeometry g{xv.dim(0), xv.dim(1), wv.dim(0)};
  auto out = make_var(Tensor({g.batch, g.out_features}));
  kernels::parallel::linear_forward(g, xv.data(), wv.data(),
                                    bias ? bias->value.data() : std::span<const Real>{},
                                    out->value.data());
  if (wants_grad(tape, {&x, &weight, &bias})) {
    out->requires_grad = true;
    tape->record([g, x, weight, bias, out] {
      if (!out->has_grad()) return;
      kernels::parallel::linear_backward(g, x->value.data(), weight->value.data(),
                                         out->grad.data(), grad_or_empty(x),
                                         grad_or_empty(weight), grad_or_empty(bias));
    });
  }
  return out;
}

Var batchnorm2d(Tape* tape, const Var& x, const Var& gamma, const Var& beta,
                BatchNormState& state, bool train) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "batchnorm2d input");
  const auto n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gamma->value.size() != c || beta->value.size() != c ||
      state.running_mean.size() != c || state.running_var.size() != c) {
    throw DimensionError("batchnorm2d: parameters do not match " + std::to_string(c) +
                         " channels");
  }
  const std::int64_t count = n * hw;
  if (train && count < 2) {
    throw StatisticsError("batchnorm2d in train mode needs at least 2 values per channel, got " +
                          std::to_string(count));
  }
  Tensor mean({c}), invstd({c});
  if (train) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const Real* p = xv.ptr() + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) s += p[j];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const Real* p = xv.ptr() + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) v += (p[j] - mu) * (p[j] - mu);
      }
      const double var = v / static_cast<double>(count);
      mean[ch] = static_cast<Real>(mu);
      invstd[ch] = static_cast<Real>(1.0 / std::sqrt(var + state.epsilon));
      const double unbiased = v / static_cast<double>(count - 1);
      state.running_mean[ch] =
          static_cast<Real>((1 - state.momentum) * state.running_mean[ch] + state.momentum * mu);
      state.running_var[ch] = static_cast<Real>((1 - state.momentum) * state.running_var[ch] +
                                                state.momentum * unbiased);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      invstd[ch] = static_cast<Real>(1.0 / std::sqrt(double(state.running_var[ch]) + state.epsilon));
    }
  }
  auto out = make_var(Tensor(xv.shape()));
  Tensor xhat(xv.shape());
  {
    const Real* gp = gamma->value.ptr();
    const Real* bp = beta->value.ptr();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const Real* p = xv.ptr() + (i * c + ch) * hw;
        Real* h = xhat.ptr() + (i * c + ch) * hw;
        Real* o = out->value.ptr() + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          h[j] = (p[j] - mean[ch]) * invstd[ch];
          o[j] = gp[ch] * h[j] + bp[ch];
        }
      }
    }
  }
  if (wants_grad(tape, {&x, &gamma, &beta})) {
    out->requires_grad = true;
    tape->record([x, gamma, beta, out, xhat = std::move(xhat), invstd, train, n, c, hw] {
      if (!out->has_grad()) return;
      const Real* dy = out->grad.ptr();
      const Real* gp = gamma->value.ptr();
      auto dgamma = grad_or_empty(gamma);
      auto dbeta = grad_or_empty(beta);
      auto dx = grad_or_empty(x);
      const double m = static_cast<double>(n * hw);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::int64_t i = 0; i < n; ++i) {
          const auto off = (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) {
            sum_dy += dy[off + j];
            sum_dy_xhat += dy[off + j] * xhat[off + j];
          }
        }
        if (!dgamma.empty()) dgamma[ch] += static_cast<Real>(sum_dy_xhat);
        if (!dbeta.empty()) dbeta[ch] += static_cast<Real>(sum_dy);
        if (dx.empty()) continue;
        const Real scale = gp[ch] * invstd[ch];
        for (std::int64_t i = 0; i < n; ++i) {
          const auto off = (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) {
            if (train) {
              dx[off + j] += static_cast<Real>(
                  scale * (dy[off + j] - sum_dy / m - xhat[off + j] * sum_dy_xhat / m));
            } else {
              dx[off + j] += scale * dy[off + j];
            }
          }
        }
      }
    });
  }
  return out;
}

Var activation(Tape* tape, const Var& x, Activation kind) {
  if (kind == Activation::kNone) return x;
  auto out = make_var(Tensor(x->value.shape()));
  const auto size = x->value.size();
  const Real* src = x->value.ptr();
  Real* dst = out->value.ptr();
#pragma omp parallel for schedule(static) if (size > 65536)
  for (std::int64_t i = 0; i < size; ++i) dst[i] = apply_activation(kind, src[i]);
  if (wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, kind] {
      if (!out->has_grad()) return;
      auto dx = x->grad_buffer().data();
      const Real* dy = out->grad.ptr();
      const Real* xv = x->value.ptr();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * activation_derivative(kind, xv[i]);
    });
  }
  return out;
}

Var pool2d(Tape* tape, const Var& x, PoolKind kind, std::int64_t kernel, std::int64_t stride,
           std::int64_t padding, bool ceil_mode) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "pool2d input");
  const auto n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (kind == PoolKind::kGlobalAvg) {
    auto out = make_var(Tensor({n, c, 1, 1}));
    const auto hw = h * w;
    if (hw == 0) throw GeometryError("global average pool over empty plane");
    for (std::int64_t i = 0; i < n * c; ++i) {
      double s = 0;
      for (std::int64_t j = 0; j < hw; ++j) s += xv[i * hw + j];
      out->value[i] = static_cast<Real>(s / static_cast<double>(hw));
    }
    if (wants_grad(tape, {&x})) {
      out->requires_grad = true;
      tape->record([x, out, n, c, hw] {
        if (!out->has_grad()) return;
        auto dx = x->grad_buffer().data();
        for (std::int64_t i = 0; i < n * c; ++i) {
          const Real d = out->grad[i] / static_cast<Real>(hw);
          for (std::int64_t j = 0; j < hw; ++j) dx[i * hw + j] += d;
        }
      });
    }
    return out;
  }
  const auto oh = kernels::window_output(h, kernel, stride, padding, ceil_mode);
  const auto ow = kernels::window_output(w, kernel, stride, padding, ceil_mode);
  auto out = make_var(Tensor({n, c, oh, ow}));
  std::vector<std::int64_t> argmax;
  if (kind == PoolKind::kMax) argmax.resize(static_cast<std::size_t>(n * c * oh * ow));
  const Real area = static_cast<Real>(kernel * kernel);
#pragma omp parallel for schedule(static)
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const Real* src = xv.ptr() + plane * h * w;
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xo = 0; xo < ow; ++xo) {
        const auto oi = (plane * oh + y) * ow + xo;
        Real best = -std::numeric_limits<Real>::infinity();
        std::int64_t best_at = -1;
        Real sum = 0;
        for (std::int64_t kh = 0; kh < kernel; ++kh) {
          const auto ih = y * stride - padding + kh;
          if (ih < 0 || ih >= h) continue;
          for (std::int64_t kw = 0; kw < kernel; ++kw) {
            const auto iw = xo * stride - padding + kw;
            if (iw < 0 || iw >= w) continue;
            const Real v = src[ih * w + iw];
            sum += v;
            if (v > best) {
              best = v;
              best_at = plane * h * w + ih * w + iw;
            }
          }
        }
        if (kind == PoolKind::kMax) {
          out->value[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = best_at;
        } else {
          out->value[oi] = sum / area;
        }
      }
    }
  }
  if (wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, kind, argmax = std::move(argmax), n, c, h, w, oh, ow, kernel, stride,
                  padding, area] {
      if (!out->has_grad()) return;
      auto dx = x->grad_buffer().data();
      if (kind == PoolKind::kMax) {
        for (std::size_t i = 0; i < argmax.size(); ++i) {
          if (argmax[i] >= 0) dx[static_cast<std::size_t>(argmax[i])] += out->grad[static_cast<std::int64_t>(i)];
        }
        return;
      }
      for (std::int64_t plane = 0; plane < n * c; ++plane) {
        for (std::int64_t y = 0; y < oh; ++y) {
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const Real d = out->grad[(plane * oh + y) * ow + xo] / area;
            for (std::int64_t kh = 0; kh < kernel; ++kh) {
              const auto ih = y * stride - padding + kh;
              if (ih < 0 || ih >= h) continue;
              for (std::int64_t kw = 0; kw < kernel; ++kw) {
                const auto iw = xo * stride - padding + kw;
                if (iw < 0 || iw >= w) continue;
                dx[static_cast<std::size_t>(plane * h * w + ih * w + iw)] += d;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Var channel_shuffle(Tape* tape, const Var& x, std::int64_t groups) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "channel_shuffle input");
  const auto n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (groups < 1 || c % groups != 0) {
    throw DimensionError("channel_shuffle: " + std::to_string(c) + " channels not divisible by " +
                         std::to_string(groups) + " groups");
  }
  const auto per = c / groups;
  auto source = [groups, per](std::int64_t j) { return (j % groups) * per + j / groups; };
  auto out = make_var(Tensor(xv.shape()));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      const Real* src = xv.ptr() + (i * c + source(j)) * hw;
      std::copy(src, src + hw, out->value.ptr() + (i * c + j) * hw);
    }
  }
  if (wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, n, c, hw, source] {
      if (!out->has_grad()) return;
      auto dx = x->grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          const Real* d = out->grad.ptr() + (i * c + j) * hw;
          Real* t = dx.data() + (i * c + source(j)) * hw;
          for (std::int64_t k = 0; k < hw; ++k) t[k] += d[k];
        }
      }
    });
  }
  return out;
}

Var add(Tape* tape, const Var& a, const Var& b) {
  if (a->value.shape() != b->value.shape()) {
    throw DimensionError("add: " + to_string(a->value.shape()) + " vs " +
                         to_string(b->value.shape()));
  }
  auto out = make_var(a->value);
  auto dst = out->value.data();
  auto src = b->value.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  if (wants_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record([a, b, out] {
      if (!out->has_grad()) return;
      for (const Var* v : {&a, &b}) {
        if (!(*v)->requires_grad) continue;
        auto d = (*v)->grad_buffer().data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[static_cast<std::int64_t>(i)];
      }
    });
  }
  return out;
}

Var scale_channels(Tape* tape, const Var& x, const Var& gate) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "scale_channels input");
  const auto n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gate->value.size() != n * c) {
    throw DimensionError("scale_channels: gate " + to_string(gate->value.shape()) +
                         " does not match " + to_string(xv.shape()));
  }
  auto out = make_var(Tensor(xv.shape()));
  for (std::int64_t i = 0; i < n * c; ++i) {
    const Real s = gate->value[i];
    for (std::int64_t j = 0; j < hw; ++j) out->value[i * hw + j] = xv[i * hw + j] * s;
  }
  if (wants_grad(tape, {&x, &gate})) {
    out->requires_grad = true;
    tape->record([x, gate, out, n, c, hw] {
      if (!out->has_grad()) return;
      auto dx = grad_or_empty(x);
      auto dg = grad_or_empty(gate);
      for (std::int64_t i = 0; i < n * c; ++i) {
        const Real s = gate->value[i];
        double acc = 0;
        for (std::int64_t j = 0; j < hw; ++j) {
          const Real d = out->grad[i * hw + j];
          if (!dx.empty()) dx[static_cast<std::size_t>(i * hw + j)] += d * s;
          acc += d * x->value[i * hw + j];
        }
        if (!dg.empty()) dg[static_cast<std::size_t>(i)] += static_cast<Real>(acc);
      }
    });
  }
  return out;
}

Var concat_channels(Tape* tape, const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  require_rank(av, 4, "concat input");
  require_rank(bv, 4, "concat input");
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
    throw DimensionError("concat: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  const auto n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
  auto out = make_var(Tensor({n, ca + cb, av.dim(2), av.dim(3)}));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(av.ptr() + i * ca * hw, av.ptr() + (i + 1) * ca * hw,
              out->value.ptr() + i * (ca + cb) * hw);
    std::copy(bv.ptr() + i * cb * hw, bv.ptr() + (i + 1) * cb * hw,
              out->value.ptr() + (i * (ca + cb) + ca) * hw);
  }
  if (wants_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record([a, b, out, n, ca, cb, hw] {
      if (!out->has_grad()) return;
      auto da = grad_or_empty(a);
      auto db = grad_or_empty(b);
      for (std::int64_t i = 0; i < n; ++i) {
        const Real* d = out->grad.ptr() + i * (ca + cb) * hw;
        if (!da.empty()) {
          for (std::int64_t k = 0; k < ca * hw; ++k) da[static_cast<std::size_t>(i * ca * hw + k)] += d[k];
        }
        if (!db.empty()) {
          for (std::int64_t k = 0; k < cb * hw; ++k) db[static_cast<std::size_t>(i * cb * hw + k)] += d[ca * hw + k];
        }
      }
    });
  }
  return out;
}

Var slice_channels(Tape* tape, const Var& x, std::int64_t begin, std::int64_t end) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "slice input");
  const auto n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (begin < 0 || end > c || begin >= end) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + std::to_string(c) + " channels");
  }
  const auto cs = end - begin;
  auto out = make_var(Tensor({n, cs, xv.dim(2), xv.dim(3)}));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(xv.ptr() + (i * c + begin) * hw, xv.ptr() + (i * c + end) * hw,
              out->value.ptr() + i * cs * hw);
  }
  if (wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, n, c, hw, begin, cs] {
      if (!out->has_grad()) return;
      auto dx = x->grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const Real* d = out->grad.ptr() + i * cs * hw;
        Real* t = dx.data() + (i * c + begin) * hw;
        for (std::int64_t k = 0; k < cs * hw; ++k) t[k] += d[k];
      }
    });
  }
  return out;
}

Var flatten(Tape* tape, const Var& x) {
  const Tensor& xv = x->value;
  if (xv.rank() < 2) throw DimensionError("flatten expects rank >= 2");
  const auto n = xv.dim(0);
  const auto rest = n == 0 ? numel(Shape(xv.shape().begin() + 1, xv.shape().end()))
                           : xv.size() / n;
  auto out = make_var(xv.reshaped({n, rest}));
  if (wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out] {
      if (!out->has_grad()) return;
      auto dx = x->grad_buffer().data();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += out->grad[static_cast<std::int64_t>(i)];
    });
  }
  return out;
}

CrossEntropyResult softmax_cross_entropy(Tape* tape, const Var& logits,
                                         std::span<const std::int64_t> labels) {
  const Tensor& lv = logits->value;
  require_rank(lv, 2, "softmax_cross_entropy logits");
  const auto n = lv.dim(0), c = lv.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  for (auto y : labels) {
    if (y < 0 || y >= c) {
      throw Error("label " + std::to_string(y) + " out of range [0, " + std::to_string(c) + ")");
    }
  }
  CrossEntropyResult res;
  res.probabilities = softmax_rows(lv);
  double total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* row = lv.ptr() + i * c;
    const Real mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::int64_t j = 0; j < c; ++j) s += std::exp(double(row[j]) - mx);
    total += (std::log(s) + mx) - row[labels[static_cast<std::size_t>(i)]];
  }
  res.loss = make_var(Tensor({1}, {static_cast<Real>(n > 0 ? total / static_cast<double>(n) : 0.0)}));
  if (wants_grad(tape, {&logits})) {
    res.loss->requires_grad = true;
    std::vector<std::int64_t> ys(labels.begin(), labels.end());
    tape->record([logits, loss = res.loss, probs = res.probabilities, ys = std::move(ys), n, c] {
      if (!loss->has_grad() || n == 0) return;
      const Real scale = loss->grad[0] / static_cast<Real>(n);
      auto dl = logits->grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          const Real target = (j == ys[static_cast<std::size_t>(i)]) ? Real(1) : Real(0);
          dl[static_cast<std::size_t>(i * c + j)] += scale * (probs[i * c + j] - target);
        }
      }
    });
  }
  return res;
}

}  // namespace ops
}  // namespace fens
