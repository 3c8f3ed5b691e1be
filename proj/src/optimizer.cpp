#include "fens/optimizer.hpp"

#include <cmath>

#include "fens/errors.hpp"

namespace fens {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd" || name == "sgd-momentum") return OptimizerKind::kSgdMomentum;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::kAdam ? "adam" : "sgd-momentum";
}

void Optimizer::zero_grad(std::vector<ParamTensor*>& params) {
  for (auto* p : params) {
    if (p->var->has_grad()) p->var->grad.fill(0);
  }
}

void Optimizer::step(std::vector<ParamTensor*>& params) {
  ++steps_;
  const auto& s = settings_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(s.momentum, t);
  const double bc2 = 1.0 - std::pow(s.beta2, t);
  for (auto* p : params) {
    if (!p->trainable || !p->var->has_grad()) continue;
    auto& value = p->var->value;
    auto& grad = p->var->grad;
    auto [it, fresh] = first_.try_emplace(p->name);
    if (fresh) it->second = Tensor(value.shape());
    Tensor& m = it->second;
    if (m.shape() != value.shape()) {
      throw DimensionError("optimizer state for '" + p->name + "' has shape " +
                           to_string(m.shape()) + ", parameter has " + to_string(value.shape()));
    }
    const auto n = value.size();
    if (s.kind == OptimizerKind::kSgdMomentum) {
      for (std::int64_t i = 0; i < n; ++i) {
        const double g = double(grad[i]) + s.weight_decay * value[i];
        m[i] = static_cast<Real>(s.momentum * m[i] + g);
        value[i] = static_cast<Real>(value[i] - s.learning_rate * m[i]);
      }
    } else {
      auto [jt, fresh2] = second_.try_emplace(p->name);
      if (fresh2) jt->second = Tensor(value.shape());
      Tensor& v = jt->second;
      for (std::int64_t i = 0; i < n; ++i) {
        const double g = double(grad[i]) + s.weight_decay * value[i];
        m[i] = static_cast<Real>(s.momentum * m[i] + (1.0 - s.momentum) * g);
        v[i] = static_cast<Real>(s.beta2 * v[i] + (1.0 - s.beta2) * g * g);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        value[i] = static_cast<Real>(value[i] - s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon));
      }
    }
    grad.fill(0);
  }
}

}  // namespace fens
