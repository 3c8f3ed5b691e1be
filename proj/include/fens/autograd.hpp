#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fens/tensor.hpp"

namespace fens {

struct Variable {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;

  // Zero-initialized gradient buffer with the value's shape.
  Tensor& grad_buffer();
  bool has_grad() const { return grad.rank() > 0; }
};

using Var = std::shared_ptr<Variable>;

Var make_var(Tensor value, bool requires_grad = false);

// A learned tensor with a stable name. `trainable == false` freezes it: no
// gradient is accumulated and optimizers leave it untouched.
struct ParamTensor {
  std::string name;
  Var var;
  bool trainable = true;

  void set_trainable(bool on);
  Tensor& value() { return var->value; }
  const Tensor& value() const { return var->value; }
};

// Records one backward closure per differentiable op during a forward pass
// and replays them in reverse.
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::size_t size() const { return ops_.size(); }
  bool empty() const { return ops_.empty(); }
  void clear() { ops_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs the recorded closures newest first.
  // Throws StateError when nothing was recorded or loss is not a scalar that
  // depends on a trainable input.
  void backward(const Var& loss);

 private:
  std::vector<std::function<void()>> ops_;
};

enum class Activation { kNone, kRelu, kRelu6, kSigmoid, kHardSigmoid, kHardSwish };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
Real apply_activation(Activation a, Real x);
Real activation_derivative(Activation a, Real x);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  Real momentum = Real(0.1);
  Real epsilon = Real(1e-5);
};

enum class PoolKind { kMax, kAvg, kGlobalAvg };

struct CrossEntropyResult {
  Var loss;             // scalar, mean over the batch
  Tensor probabilities; // [N, C] softmax rows
};

// Differentiable ops. Each records a backward closure on `tape` when tape is
// non-null and some input requires a gradient; with tape == nullptr they are
// plain forward computations.
namespace ops {

Var conv2d(Tape* tape, const Var& x, const Var& weight, const Var& bias, std::int64_t stride,
           std::int64_t padding, std::int64_t groups);
Var linear(Tape* tape, const Var& x, const Var& weight, const Var& bias);
Var batchnorm2d(Tape* tape, const Var& x, const Var& gamma, const Var& beta,
                BatchNormState& state, bool train);
Var activation(Tape* tape, const Var& x, Activation kind);
Var pool2d(Tape* tape, const Var& x, PoolKind kind, std::int64_t kernel, std::int64_t stride,
           std::int64_t padding = 0, bool ceil_mode = false);
Var channel_shuffle(Tape* tape, const Var& x, std::int64_t groups);
Var add(Tape* tape, const Var& a, const Var& b);
// x[N,C,H,W] scaled per (n, c) by gate[N,C,1,1].
Var scale_channels(Tape* tape, const Var& x, const Var& gate);
Var concat_channels(Tape* tape, const Var& a, const Var& b);
Var slice_channels(Tape* tape, const Var& x, std::int64_t begin, std::int64_t end);
Var flatten(Tape* tape, const Var& x);
CrossEntropyResult softmax_cross_entropy(Tape* tape, const Var& logits,
                                         std::span<const std::int64_t> labels);

}  // namespace ops

// Row-wise softmax of an [N, C] tensor.
Tensor softmax_rows(const Tensor& logits);

}  // namespace fens
