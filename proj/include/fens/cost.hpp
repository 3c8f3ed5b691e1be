#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fens/model_spec.hpp"

namespace fens {

inline constexpr const char* kFlopsConvention = "flops=2*macs";

// One counted layer (conv, linear) of a spec walk.
struct LayerCost {
  std::string name;
  std::string op;  // "conv" | "linear"
  std::int64_t params = 0;
  std::int64_t bn_running = 0;
  std::int64_t macs = 0;
};

struct CostReport {
  std::int64_t params = 0;      // learned scalars, batchnorm gamma/beta included
  std::int64_t bn_running = 0;  // running mean/var scalars, reported separately
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::string convention = kFlopsConvention;
  std::vector<LayerCost> layers;

  double gflops() const { return static_cast<double>(flops) / 1e9; }
};

// Static walk over the spec; the model is never built. Activations,
// batchnorm, pooling, adds and shuffles count zero MACs.
CostReport count_params(const ModelSpec& spec);
CostReport count_flops(const ModelSpec& spec, InputShape input);
inline CostReport count_cost(const ModelSpec& spec) { return count_flops(spec, spec.input); }

}  // namespace fens
