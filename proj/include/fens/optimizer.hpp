#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fens/autograd.hpp"

namespace fens {

enum class OptimizerKind { kSgdMomentum, kAdam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind k);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // beta1 for adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// sgd-momentum: v <- m*v + g;  p <- p - lr*v
// adam:         bias-corrected first/second moments
// Weight decay is added to the gradient (L2) before either update.
class Optimizer {
 public:
  explicit Optimizer(OptimizerSettings settings) : settings_(settings) {}

  const OptimizerSettings& settings() const { return settings_; }
  std::int64_t step_count() const { return steps_; }

  // Applies one update to every trainable parameter that has a gradient,
  // then clears those gradients. Frozen parameters are skipped entirely.
  void step(std::vector<ParamTensor*>& params);
  void zero_grad(std::vector<ParamTensor*>& params);

  // Moment buffers keyed by parameter name; used for checkpoint resume.
  std::map<std::string, Tensor>& first_moments() { return first_; }
  std::map<std::string, Tensor>& second_moments() { return second_; }
  const std::map<std::string, Tensor>& first_moments() const { return first_; }
  const std::map<std::string, Tensor>& second_moments() const { return second_; }
  void set_step_count(std::int64_t steps) { steps_ = steps; }

 private:
  OptimizerSettings settings_;
  std::int64_t steps_ = 0;
  std::map<std::string, Tensor> first_;
  std::map<std::string, Tensor> second_;
};

}  // namespace fens
