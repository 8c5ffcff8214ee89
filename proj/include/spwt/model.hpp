#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "spwt/freeze_plan.hpp"
#include "spwt/linalg.hpp"
#include "spwt/mask.hpp"

namespace spwt {

enum class Activation { tanh, relu, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + s + "' (expected tanh or relu)");
}

// Multi-layer perceptron layout: layer_dims = [d_in, h1, ..., d_embed].
// Hidden layers use `activations`; the final layer is linear.
struct ModelSpec {
  std::vector<std::size_t> layer_dims;
  std::vector<Activation> activations;  // one per hidden layer
  std::vector<std::string> layer_names;  // one per weight matrix

  std::size_t num_layers() const noexcept { return layer_dims.empty() ? 0 : layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t embed_dim() const { return layer_dims.back(); }

  Activation activation(std::size_t layer) const {
    return layer + 1 < num_layers() ? activations.at(layer) : Activation::identity;
  }

  std::vector<LayerShape> shapes() const {
    std::vector<LayerShape> out;
    for (std::size_t i = 0; i < num_layers(); ++i) out.push_back({layer_names[i], layer_dims[i], layer_dims[i + 1]});
    return out;
  }

  void validate() const {
    if (layer_dims.size() < 2) throw std::invalid_argument("ModelSpec: need at least one weight matrix");
    for (auto d : layer_dims)
      if (d < 1) throw std::invalid_argument("ModelSpec: layer widths must be >= 1");
    if (activations.size() != num_layers() - 1) {
      throw std::invalid_argument("ModelSpec: expected " + std::to_string(num_layers() - 1) +
                                  " hidden activations, got " + std::to_string(activations.size()));
    }
    if (layer_names.size() != num_layers()) throw std::invalid_argument("ModelSpec: one name per layer required");
    std::set<std::string> seen;
    for (const auto& n : layer_names) {
      if (n.empty()) throw std::invalid_argument("ModelSpec: empty layer name");
      if (!seen.insert(n).second) throw std::invalid_argument("ModelSpec: duplicate layer name '" + n + "'");
    }
  }

  // Names default to fc0, fc1, ...
  static ModelSpec mlp(std::vector<std::size_t> dims, Activation hidden = Activation::tanh) {
    ModelSpec s;
    s.layer_dims = std::move(dims);
    const std::size_t layers = s.layer_dims.size() < 2 ? 0 : s.layer_dims.size() - 1;
    s.activations.assign(layers == 0 ? 0 : layers - 1, hidden);
    for (std::size_t i = 0; i < layers; ++i) s.layer_names.push_back("fc" + std::to_string(i));
    s.validate();
    return s;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct InitRecord {
  std::uint64_t seed = 0;
  std::string scheme = "glorot_uniform";

  friend bool operator==(const InitRecord&, const InitRecord&) = default;
};

// Weights are (fan_in x fan_out) so a layer computes x·W + b.
struct ParameterStore {
  std::vector<DenseMatrix> weights;
  std::vector<std::vector<double>> biases;
  InitRecord init;

  std::size_t num_layers() const noexcept { return weights.size(); }

  void check_matches(const ModelSpec& spec) const {
    if (weights.size() != spec.num_layers() || biases.size() != spec.num_layers())
      throw std::invalid_argument("ParameterStore: layer count does not match ModelSpec");
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
      if (weights[i].rows() != spec.layer_dims[i] || weights[i].cols() != spec.layer_dims[i + 1] ||
          biases[i].size() != spec.layer_dims[i + 1])
        throw std::invalid_argument("ParameterStore: shape mismatch at layer " + spec.layer_names[i]);
    }
  }

  friend bool operator==(const ParameterStore&, const ParameterStore&) = default;
};

// Glorot-uniform weights, zero biases.
inline ParameterStore initialize(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  SeededRng rng(seed);
  ParameterStore p;
  p.init = {seed, "glorot_uniform"};
  for (std::size_t i = 0; i < spec.num_layers(); ++i) {
    const std::size_t fan_in = spec.layer_dims[i];
    const std::size_t fan_out = spec.layer_dims[i + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(fan_in * fan_out);
    for (double& x : w) x = rng.uniform(-limit, limit);
    p.weights.emplace_back(fan_in, fan_out, std::move(w));
    p.biases.emplace_back(fan_out, 0.0);
  }
  return p;
}

inline void check_mask(const ParameterStore& params, const SparsityMask& mask) {
  if (mask.layers.size() != params.num_layers())
    throw std::invalid_argument("mask has " + std::to_string(mask.layers.size()) + " layers, model has " +
                                std::to_string(params.num_layers()));
  for (std::size_t i = 0; i < params.num_layers(); ++i) {
    const auto& ml = mask.layers[i];
    if (ml.rows != params.weights[i].rows() || ml.cols != params.weights[i].cols() ||
        ml.keep.size() != params.weights[i].size())
      throw std::invalid_argument("mask shape mismatch at layer '" + ml.name + "'");
  }
}

inline SparsityMask ones_mask(const ParameterStore& params, const ModelSpec& spec) {
  params.check_matches(spec);
  return ones_mask(spec.shapes());
}

// m ⊙ W for one layer.
inline DenseMatrix masked_weight(const DenseMatrix& w, const SparsityMask::Layer& m) {
  DenseMatrix out = w;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!m.keep[i]) d[i] = 0.0;
  return out;
}

inline ParameterStore apply_mask(const ParameterStore& params, const SparsityMask& mask) {
  check_mask(params, mask);
  ParameterStore out = params;
  for (std::size_t i = 0; i < out.num_layers(); ++i) out.weights[i] = masked_weight(params.weights[i], mask.layers[i]);
  return out;
}

struct ForwardCache {
  std::vector<DenseMatrix> inputs;       // input to each layer; inputs[0] is the batch
  std::vector<DenseMatrix> weights;      // effective (masked) weights
  std::vector<Activation> activations;
  std::size_t output_rows = 0;
  std::size_t output_cols = 0;
};

struct ForwardResult {
  DenseMatrix output;
  ForwardCache cache;
};

namespace detail {

inline void add_bias_activate(DenseMatrix& z, std::span<const double> bias, Activation act) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      double v = row[c] + bias[c];
      if (act == Activation::tanh) v = std::tanh(v);
      else if (act == Activation::relu) v = v > 0.0 ? v : 0.0;
      row[c] = v;
    }
  }
}

}  // namespace detail

// f(x; m ⊙ θ). The returned cache holds what backward() needs.
inline ForwardResult forward(const ParameterStore& params, const SparsityMask& mask, const DenseMatrix& batch,
                             const ModelSpec& spec) {
  params.check_matches(spec);
  check_mask(params, mask);
  if (batch.cols() != spec.input_dim())
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                                std::to_string(spec.input_dim()));
  ForwardResult res;
  DenseMatrix a = batch;
  for (std::size_t i = 0; i < params.num_layers(); ++i) {
    DenseMatrix w = masked_weight(params.weights[i], mask.layers[i]);
    DenseMatrix z = matmul(a, w);
    const Activation act = spec.activation(i);
    detail::add_bias_activate(z, params.biases[i], act);
    res.cache.inputs.push_back(std::move(a));
    res.cache.weights.push_back(std::move(w));
    res.cache.activations.push_back(act);
    a = std::move(z);
  }
  res.cache.output_rows = a.rows();
  res.cache.output_cols = a.cols();
  // The last layer is linear, so the output doubles as its pre-activation.
  res.output = std::move(a);
  return res;
}

// Unmasked forward pass used as the reference for the all-ones-mask identity.
inline DenseMatrix forward_dense(const ParameterStore& params, const DenseMatrix& batch, const ModelSpec& spec) {
  params.check_matches(spec);
  DenseMatrix a = batch;
  for (std::size_t i = 0; i < params.num_layers(); ++i) {
    DenseMatrix z = matmul(a, params.weights[i]);
    detail::add_bias_activate(z, params.biases[i], spec.activation(i));
    a = std::move(z);
  }
  return a;
}

// Hidden features after every layer, for representation-similarity measurements.
inline std::vector<DenseMatrix> layer_features(const ParameterStore& params, const SparsityMask& mask,
                                               const DenseMatrix& batch, const ModelSpec& spec) {
  auto res = forward(params, mask, batch, spec);
  std::vector<DenseMatrix> out(res.cache.inputs.begin() + 1, res.cache.inputs.end());
  out.push_back(std::move(res.output));
  return out;
}

struct LayerGradient {
  DenseMatrix weight;
  std::vector<double> bias;
};

// Gradients for active layers only; frozen layers hold nullopt.
struct Gradients {
  std::vector<std::optional<LayerGradient>> layers;

  std::size_t computed() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.has_value();
    return n;
  }
  bool empty() const { return computed() == 0; }
};

// Backpropagates dLoss/dOutput. Frozen layers get no weight gradient but still pass the
// hidden-feature gradient down to active layers beneath them. Nothing is propagated below
// the lowest active layer.
inline Gradients backward(const ForwardCache& cache, const DenseMatrix& upstream, const SparsityMask& mask,
                          const FreezePlan& plan) {
  const std::size_t layers = cache.weights.size();
  if (upstream.rows() != cache.output_rows || upstream.cols() != cache.output_cols)
    throw std::invalid_argument("backward: upstream gradient does not match cached forward output");
  if (mask.layers.size() != layers || plan.size() != layers)
    throw std::invalid_argument("backward: mask or freeze plan does not match cached forward pass");

  Gradients g;
  g.layers.resize(layers);
  std::size_t lowest_active = layers;
  for (std::size_t i = 0; i < layers; ++i)
    if (!plan.is_frozen(i)) {
      lowest_active = i;
      break;
    }
  if (lowest_active == layers) return g;

  DenseMatrix delta = upstream;
  for (std::size_t i = layers; i-- > lowest_active;) {
    // delta currently holds dL/d(layer output); convert to dL/dz.
    const Activation act = cache.activations[i];
    if (act != Activation::identity) {
      const DenseMatrix& out = cache.inputs[i + 1];
      auto d = delta.data();
      auto o = out.data();
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (act == Activation::tanh) d[k] *= 1.0 - o[k] * o[k];
        else d[k] = o[k] > 0.0 ? d[k] : 0.0;
      }
    }
    if (!plan.is_frozen(i)) {
      LayerGradient lg;
      lg.weight = matmul_tn(cache.inputs[i], delta);
      auto w = lg.weight.data();
      const auto& keep = mask.layers[i].keep;
      for (std::size_t k = 0; k < w.size(); ++k)
        if (!keep[k]) w[k] = 0.0;
      lg.bias.assign(delta.cols(), 0.0);
      for (std::size_t r = 0; r < delta.rows(); ++r) {
        auto row = delta.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) lg.bias[c] += row[c];
      }
      g.layers[i] = std::move(lg);
    }
    if (i > lowest_active) delta = matmul_nt(delta, cache.weights[i]);
  }
  return g;
}

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t iterations = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  }
};

// Plain SGD. Layers without a gradient and masked positions are left untouched, so
// weights already zeroed by the mask stay exactly 0.
inline ParameterStore sgd_step(const ParameterStore& params, const Gradients& grads, const SparsityMask& mask,
                               double learning_rate) {
  check_mask(params, mask);
  if (grads.layers.size() != params.num_layers())
    throw std::invalid_argument("sgd_step: gradient layer count does not match parameters");
  ParameterStore out = params;
  for (std::size_t i = 0; i < out.num_layers(); ++i) {
    if (!grads.layers[i]) continue;
    const auto& lg = *grads.layers[i];
    auto w = out.weights[i].data();
    auto gw = lg.weight.data();
    const auto& keep = mask.layers[i].keep;
    for (std::size_t k = 0; k < w.size(); ++k)
      if (keep[k]) w[k] -= learning_rate * gw[k];
    for (std::size_t k = 0; k < out.biases[i].size(); ++k) out.biases[i][k] -= learning_rate * lg.bias[k];
  }
  return out;
}

inline ParameterStore sgd_step(const ParameterStore& params, const Gradients& grads, const SparsityMask& mask,
                               const TrainConfig& cfg) {
  return sgd_step(params, grads, mask, cfg.learning_rate);
}

}  // namespace spwt
