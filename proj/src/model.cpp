#include "mop/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "mop/rng.hpp"

namespace mop {

std::string_view precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f32" || name == "float32") {
    return Precision::f32;
  }
  if (name == "f64" || name == "float64") {
    return Precision::f64;
  }
  throw ConfigError("unknown precision '" + std::string(name) + "' (expected f32 or f64)");
}

void ModelConfig::validate() const {
  std::ostringstream problems;
  if (layers == 0) problems << " layers must be >= 1;";
  if (heads == 0) problems << " heads must be >= 1;";
  if (embed_dim == 0 || (heads && embed_dim % heads != 0)) {
    problems << " embed_dim must be a positive multiple of heads;";
  }
  if (max_context == 0) problems << " max_context must be >= 1;";
  if (output_dim == 0) problems << " output_dim must be >= 1;";
  if (!(output_scale > 0.0) || !(control_scale > 0.0)) problems << " scales must be positive;";
  const std::string msg = problems.str();
  if (!msg.empty()) {
    throw ConfigError("invalid model config:" + msg);
  }
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["embed_dim"] = c.embed_dim;
  j["max_context"] = c.max_context;
  j["output_dim"] = c.output_dim;
  j["control_dim"] = c.control_dim;
  j["precision"] = std::string(precision_name(c.precision));
  j["output_scale"] = c.output_scale;
  j["control_offset"] = c.control_offset;
  j["control_scale"] = c.control_scale;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw ConfigError("model config must be a JSON object");
  }
  ModelConfig c;
  std::vector<std::string> bad;
  auto read_size = [&](const char* key, std::size_t& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_unsigned()) {
      bad.emplace_back(key);
      return;
    }
    dst = j[key].get<std::size_t>();
  };
  auto read_double = [&](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) {
      bad.emplace_back(key);
      return;
    }
    dst = j[key].get<double>();
  };
  static const std::set<std::string> known = {
      "layers",     "heads",     "embed_dim",    "max_context",    "output_dim",
      "control_dim", "precision", "output_scale", "control_offset", "control_scale"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) {
      bad.push_back(key);
    }
  }
  read_size("layers", c.layers);
  read_size("heads", c.heads);
  read_size("embed_dim", c.embed_dim);
  read_size("max_context", c.max_context);
  read_size("output_dim", c.output_dim);
  read_size("control_dim", c.control_dim);
  read_double("output_scale", c.output_scale);
  read_double("control_offset", c.control_offset);
  read_double("control_scale", c.control_scale);
  if (j.contains("precision")) {
    if (!j["precision"].is_string()) {
      bad.emplace_back("precision");
    } else {
      try {
        c.precision = parse_precision(j["precision"].get<std::string>());
      } catch (const ConfigError&) {
        bad.emplace_back("precision");
      }
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid model config keys:";
    for (const auto& k : bad) {
      msg += " " + k;
    }
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  TransformerWeights<float> shapes = zero_weights<float>(c);
  std::vector<std::pair<std::string, Shape>> out;
  shapes.for_each([&](const std::string& name, const Tensor<float>& t) {
    out.emplace_back(name, t.shape());
  });
  return out;
}

template <typename Real>
std::size_t TransformerWeights<Real>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor<Real>& t) { n += t.size(); });
  return n;
}

template <typename Real>
TransformerWeights<Real> zero_weights(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.embed_dim;
  TransformerWeights<Real> w;
  w.config = c;
  w.input_weight = Tensor<Real>({c.token_dim(), d});
  w.input_bias = Tensor<Real>({d});
  w.positional = Tensor<Real>({c.max_context, d});
  w.blocks.resize(c.layers);
  for (auto& b : w.blocks) {
    b.ln1_gain = Tensor<Real>({d});
    b.ln1_bias = Tensor<Real>({d});
    b.qkv_weight = Tensor<Real>({d, 3 * d});
    b.qkv_bias = Tensor<Real>({3 * d});
    b.attn_out_weight = Tensor<Real>({d, d});
    b.attn_out_bias = Tensor<Real>({d});
    b.ln2_gain = Tensor<Real>({d});
    b.ln2_bias = Tensor<Real>({d});
    b.fc_weight = Tensor<Real>({d, 4 * d});
    b.fc_bias = Tensor<Real>({4 * d});
    b.proj_weight = Tensor<Real>({4 * d, d});
    b.proj_bias = Tensor<Real>({d});
  }
  w.final_gain = Tensor<Real>({d});
  w.final_bias = Tensor<Real>({d});
  w.head_weight = Tensor<Real>({d, c.output_dim});
  w.head_bias = Tensor<Real>({c.output_dim});
  return w;
}

template <typename Real>
TransformerWeights<Real> init_weights(const ModelConfig& c, std::uint64_t seed) {
  TransformerWeights<Real> w = zero_weights<Real>(c);
  Rng rng(derive_seed(seed, SeedSpace::init, 0));
  w.for_each([&](const std::string& name, Tensor<Real>& t) {
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias");
    for (auto& v : t.data()) {
      if (is_gain) {
        v = Real(1);
      } else if (!is_bias) {
        v = static_cast<Real>(rng.normal(0.02));
      }
    }
  });
  return w;
}

template <typename Real>
TransformerWeights<Real> cast_weights(const TransformerWeights<double>& src) {
  TransformerWeights<Real> dst = zero_weights<Real>(src.config);
  std::vector<const Tensor<double>*> from;
  src.for_each([&](const std::string&, const Tensor<double>& t) { from.push_back(&t); });
  std::size_t i = 0;
  dst.for_each([&](const std::string&, Tensor<Real>& t) { t = from[i++]->template cast<Real>(); });
  return dst;
}

template <typename Real>
Tensor<Real> make_tokens(const ModelConfig& c, const Matrix& ys, const Matrix& us) {
  const std::size_t steps = ys.rows();
  if (ys.cols() != c.output_dim) {
    throw ShapeError("model expects outputs of dimension " + std::to_string(c.output_dim) +
                     ", prompt has " + std::to_string(ys.cols()));
  }
  if (c.control_dim > 0 && (us.rows() < steps || us.cols() != c.control_dim)) {
    throw ShapeError("model expects control inputs of dimension " +
                     std::to_string(c.control_dim));
  }
  Tensor<Real> tokens({steps, c.token_dim()});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < c.output_dim; ++i) {
      tokens(t, i) = static_cast<Real>(ys(t, i) / c.output_scale);
    }
    for (std::size_t i = 0; i < c.control_dim; ++i) {
      tokens(t, c.output_dim + i) =
          static_cast<Real>((us(t, i) - c.control_offset) / c.control_scale);
    }
  }
  return tokens;
}

template <typename Real>
std::vector<Var> bind_parameters(Graph<Real>& graph, const TransformerWeights<Real>& weights,
                                 bool requires_grad) {
  std::vector<Var> vars;
  weights.for_each([&](const std::string&, const Tensor<Real>& t) {
    vars.push_back(graph.leaf(t, requires_grad));
  });
  return vars;
}

template <typename Real>
Var build_forward(Graph<Real>& g, const ModelConfig& c, std::span<const Var> p,
                  Tensor<Real> tokens, std::size_t batch, std::size_t seq) {
  if (seq > c.max_context) {
    throw ContextLengthError("prompt length " + std::to_string(seq) + " exceeds max context " +
                             std::to_string(c.max_context));
  }
  if (tokens.rows() != batch * seq || tokens.cols() != c.token_dim()) {
    throw ShapeError("build_forward: tokens " + shape_string(tokens.shape()) +
                     " do not match batch/sequence/token width");
  }
  constexpr std::size_t kPerBlock = 12;
  const std::size_t expected = 3 + kPerBlock * c.layers + 4;
  if (p.size() != expected) {
    throw ShapeError("build_forward: expected " + std::to_string(expected) + " parameters");
  }
  Var x = g.constant(std::move(tokens));
  Var h = g.add_row_bias(g.matmul(x, p[0]), p[1]);
  h = g.add_positional(h, p[2], seq);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const Var* b = p.data() + 3 + l * kPerBlock;
    Var a = g.layer_norm(h, b[0], b[1]);
    Var qkv = g.add_row_bias(g.matmul(a, b[2]), b[3]);
    Var att = g.causal_attention(qkv, batch, seq, c.heads);
    h = g.add(h, g.add_row_bias(g.matmul(att, b[4]), b[5]));
    Var a2 = g.layer_norm(h, b[6], b[7]);
    Var hidden = g.gelu(g.add_row_bias(g.matmul(a2, b[8]), b[9]));
    h = g.add(h, g.add_row_bias(g.matmul(hidden, b[10]), b[11]));
  }
  const Var* f = p.data() + 3 + kPerBlock * c.layers;
  Var out = g.add_row_bias(g.matmul(g.layer_norm(h, f[0], f[1]), f[2]), f[3]);
  if (c.output_scale != 1.0) {
    out = g.scale(out, static_cast<Real>(c.output_scale));
  }
  return out;
}

template <typename Real>
Tensor<Real> forward(const TransformerWeights<Real>& weights, const Matrix& ys, const Matrix& us) {
  const std::size_t steps = ys.rows();
  if (steps == 0) {
    return Tensor<Real>({0, weights.config.output_dim});
  }
  Graph<Real> graph;
  const std::vector<Var> params = bind_parameters(graph, weights, false);
  Var out = build_forward(graph, weights.config, params,
                          make_tokens<Real>(weights.config, ys, us), 1, steps);
  return graph.value(out);
}

template <typename Real>
std::vector<double> predict_next(const TransformerWeights<Real>& weights, const Matrix& ys,
                                 const Matrix& us) {
  if (ys.rows() == 0) {
    throw std::invalid_argument("predict_next: empty prompt");
  }
  const Tensor<Real> out = forward(weights, ys, us);
  const auto last = out.row(out.rows() - 1);
  return std::vector<double>(last.begin(), last.end());
}

const ModelConfig& LoadedModel::config() const {
  return std::visit([](const auto& w) -> const ModelConfig& { return w.config; }, weights_);
}

Precision LoadedModel::precision() const {
  return std::holds_alternative<TransformerWeights<float>>(weights_) ? Precision::f32
                                                                      : Precision::f64;
}

Matrix LoadedModel::predict_all(const Matrix& ys, const Matrix& us) const {
  return std::visit(
      [&](const auto& w) {
        const auto out = forward(w, ys, us);
        return out.template cast<double>();
      },
      weights_);
}

#define MOP_INSTANTIATE_MODEL(Real)                                                            \
  template struct TransformerWeights<Real>;                                                    \
  template TransformerWeights<Real> init_weights<Real>(const ModelConfig&, std::uint64_t);     \
  template TransformerWeights<Real> zero_weights<Real>(const ModelConfig&);                    \
  template TransformerWeights<Real> cast_weights<Real>(const TransformerWeights<double>&);     \
  template Tensor<Real> make_tokens<Real>(const ModelConfig&, const Matrix&, const Matrix&);   \
  template std::vector<Var> bind_parameters<Real>(Graph<Real>&, const TransformerWeights<Real>&, \
                                                  bool);                                       \
  template Var build_forward<Real>(Graph<Real>&, const ModelConfig&, std::span<const Var>,     \
                                   Tensor<Real>, std::size_t, std::size_t);                    \
  template Tensor<Real> forward<Real>(const TransformerWeights<Real>&, const Matrix&,          \
                                      const Matrix&);                                          \
  template std::vector<double> predict_next<Real>(const TransformerWeights<Real>&,             \
                                                  const Matrix&, const Matrix&);

MOP_INSTANTIATE_MODEL(float)
MOP_INSTANTIATE_MODEL(double)

#undef MOP_INSTANTIATE_MODEL

}  // namespace mop
