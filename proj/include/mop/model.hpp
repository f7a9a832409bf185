#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mop/autograd.hpp"
#include "mop/tensor.hpp"
#include "json.hpp"

namespace mop {

class ContextLengthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Precision { f32, f64 };

std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view name);

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;
  std::size_t max_context = 128;
  std::size_t output_dim = 5;
  // Extra token channels carrying the control input u_t (0 for autonomous
  // systems). Token width is output_dim + control_dim.
  std::size_t control_dim = 0;
  Precision precision = Precision::f32;
  // Affine token scaling: y enters as y / output_scale and predictions are
  // multiplied back; u enters as (u - control_offset) / control_scale.
  double output_scale = 1.0;
  double control_offset = 0.0;
  double control_scale = 1.0;

  std::size_t token_dim() const { return output_dim + control_dim; }
  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
// Rejects unknown keys and wrong types, listing every offending key.
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename Real>
struct BlockWeights {
  Tensor<Real> ln1_gain, ln1_bias;
  Tensor<Real> qkv_weight, qkv_bias;
  Tensor<Real> attn_out_weight, attn_out_bias;
  Tensor<Real> ln2_gain, ln2_bias;
  Tensor<Real> fc_weight, fc_bias;
  Tensor<Real> proj_weight, proj_bias;
};

template <typename Real>
struct TransformerWeights {
  ModelConfig config;
  Tensor<Real> input_weight, input_bias;
  Tensor<Real> positional;
  std::vector<BlockWeights<Real>> blocks;
  Tensor<Real> final_gain, final_bias;
  Tensor<Real> head_weight, head_bias;

  // Visits (name, tensor) in the canonical order used for checkpoints,
  // optimizer state and gradient accumulation.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f("input.weight", self.input_weight);
    f("input.bias", self.input_bias);
    f("positional", self.positional);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      f(p + "ln1.gain", b.ln1_gain);
      f(p + "ln1.bias", b.ln1_bias);
      f(p + "attn.qkv.weight", b.qkv_weight);
      f(p + "attn.qkv.bias", b.qkv_bias);
      f(p + "attn.out.weight", b.attn_out_weight);
      f(p + "attn.out.bias", b.attn_out_bias);
      f(p + "ln2.gain", b.ln2_gain);
      f(p + "ln2.bias", b.ln2_bias);
      f(p + "mlp.fc.weight", b.fc_weight);
      f(p + "mlp.fc.bias", b.fc_bias);
      f(p + "mlp.proj.weight", b.proj_weight);
      f(p + "mlp.proj.bias", b.proj_bias);
    }
    f("final_ln.gain", self.final_gain);
    f("final_ln.bias", self.final_bias);
    f("head.weight", self.head_weight);
    f("head.bias", self.head_bias);
  }
};

// Names and shapes in canonical order for a configuration.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

// Gaussian(0, 0.02) weights and positional table, zero biases, unit
// layer-norm gains.
template <typename Real>
TransformerWeights<Real> init_weights(const ModelConfig& config, std::uint64_t seed);

// Every tensor zero, including the output head.
template <typename Real>
TransformerWeights<Real> zero_weights(const ModelConfig& config);

template <typename Real>
TransformerWeights<Real> cast_weights(const TransformerWeights<double>& w);

// Token matrix [steps x token_dim] after affine scaling.
template <typename Real>
Tensor<Real> make_tokens(const ModelConfig& config, const Matrix& ys, const Matrix& us);

// Graph nodes for every parameter in canonical order.
template <typename Real>
std::vector<Var> bind_parameters(Graph<Real>& graph, const TransformerWeights<Real>& weights,
                                 bool requires_grad);

// Builds the forward pass for `batch` sequences of length `seq` stacked
// batch-major in `tokens`. Returns predictions [(batch*seq) x output_dim] in
// output units; row j of each sequence predicts element j+1.
template <typename Real>
Var build_forward(Graph<Real>& graph, const ModelConfig& config, std::span<const Var> params,
                  Tensor<Real> tokens, std::size_t batch, std::size_t seq);

// One pass over a prompt y_{0:t} (and u_{0:t}); row j predicts y_{j+1}.
template <typename Real>
Tensor<Real> forward(const TransformerWeights<Real>& weights, const Matrix& ys,
                     const Matrix& us = Matrix());

// Last row of forward(); throws std::invalid_argument on an empty prompt.
template <typename Real>
std::vector<double> predict_next(const TransformerWeights<Real>& weights, const Matrix& ys,
                                 const Matrix& us = Matrix());

// A trained model in whichever precision it was stored.
class LoadedModel {
 public:
  LoadedModel() = default;
  explicit LoadedModel(TransformerWeights<float> w) : weights_(std::move(w)) {}
  explicit LoadedModel(TransformerWeights<double> w) : weights_(std::move(w)) {}

  const ModelConfig& config() const;
  Precision precision() const;
  // Rows t = 0..steps-1: prediction of y_{t+1} from y_{0:t}.
  Matrix predict_all(const Matrix& ys, const Matrix& us = Matrix()) const;

  const std::variant<TransformerWeights<float>, TransformerWeights<double>>& weights() const {
    return weights_;
  }

 private:
  std::variant<TransformerWeights<float>, TransformerWeights<double>> weights_;
};

}  // namespace mop
