#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fens/autograd.hpp"
#include "fens/model_spec.hpp"

namespace fens {

enum class Strategy { kTfs, kHft, kFft };

Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);

// Non-learned state saved alongside parameters (batchnorm running stats).
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var forward(Tape* tape, const Var& x, bool train) = 0;
  virtual void collect_params(std::vector<ParamTensor*>& out) = 0;
  virtual void collect_buffers(std::vector<NamedBuffer>& out) = 0;
};

class Model {
 public:
  // Builds layers from a validated spec and initializes them from `seed`.
  explicit Model(ModelSpec spec, std::uint64_t seed = 0);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  ~Model();

  const ModelSpec& spec() const { return spec_; }

  // Parameters in layer order; names are unique and stable.
  std::vector<ParamTensor*> parameters();
  std::vector<NamedBuffer> buffers();
  // Parameters of layers [0, boundary) and [boundary, end).
  std::vector<ParamTensor*> feature_parameters();
  std::vector<ParamTensor*> classifier_parameters();
  std::vector<NamedBuffer> feature_buffers();
  std::int64_t parameter_count();

  // Kaiming-uniform (fan-in) conv/linear weights, zero biases, gamma=1,
  // beta=0, running mean 0 / var 1.
  void initialize(std::uint64_t seed);
  void initialize_classifier(std::uint64_t seed);

  // With train == true, batchnorm uses batch statistics except in layers
  // whose parameters are all frozen, which stay in inference mode.
  Var forward(Tape* tape, const Var& x, bool train);

 private:
  void initialize_range(std::size_t begin, std::size_t end, std::uint64_t seed);

  ModelSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

// Builds the shipped preset with overrides; see make_spec.
Model build_model(Family family, Preset preset, double width_multiplier, InputShape input,
                  std::int64_t classes, std::uint64_t seed = 0);

// Eval-mode logits [N, classes]. N == 0 yields an empty [0, classes] tensor.
// Throws DimensionError on an input shape mismatch and NumericError on NaN.
Tensor forward_logits(Model& model, const Tensor& batch);

// Sets trainable flags for a learning strategy: tfs/fft train everything,
// hft trains only layers at or after the boundary.
void trainable_mask(Model& model, Strategy strategy);

}  // namespace fens
