#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "spwt/dataset.hpp"
#include "spwt/distill.hpp"
#include "spwt/errors.hpp"
#include "spwt/model.hpp"

namespace spwt {

enum class Objective {
  distill_only,          // TGKD alone, used while searching for the mask
  classify_and_distill,  // cross-entropy through the text classifier + kd_weight * TGKD
};

struct LossBreakdown {
  double total = 0.0;
  double distill = 0.0;
  double classification = 0.0;
};

struct StepOutput {
  LossBreakdown loss;
  Gradients grads;
};

// One forward/backward pass. `categories` holds one text embedding per class.
inline StepOutput loss_and_gradients(const ModelSpec& spec, const ParameterStore& params, const SparsityMask& mask,
                                     const FreezePlan& plan, const Batch& batch, const DenseMatrix& categories,
                                     Objective objective, double kd_weight = 1.0) {
  auto fwd = forward(params, mask, batch.inputs, spec);
  StepOutput out;
  auto kd = tgkd_loss(fwd.output, batch.teacher, batch.text_rows);
  DenseMatrix upstream;
  if (objective == Objective::distill_only) {
    out.loss.distill = kd.value;
    out.loss.total = kd.value;
    upstream = std::move(kd.grad_student);
  } else {
    auto ce = cross_entropy_loss(fwd.output, categories, batch.labels);
    out.loss.distill = kd.value;
    out.loss.classification = ce.value;
    out.loss.total = ce.value + kd_weight * kd.value;
    upstream = std::move(ce.grad);
    auto u = upstream.data();
    auto g = kd.grad_student.data();
    for (std::size_t k = 0; k < u.size(); ++k) u[k] += kd_weight * g[k];
  }
  out.grads = backward(fwd.cache, upstream, mask, plan);
  return out;
}

struct TrainOptions {
  TrainConfig config;
  Objective objective = Objective::distill_only;
  double kd_weight = 1.0;
};

// Called after each step with the 1-based iteration and the updated parameters.
using StepCallback = std::function<void(std::size_t, const ParameterStore&, const LossBreakdown&)>;

struct TrainResult {
  ParameterStore params;
  std::vector<double> loss_curve;  // total loss per iteration
};

// Minibatch SGD under a fixed mask and freeze plan. The starting weights are masked first, so
// pruned positions are exactly 0 from the first step on.
inline TrainResult train(const ModelSpec& spec, ParameterStore params, const SparsityMask& mask, const FreezePlan& plan,
                         const DistillDataset& data, const TrainOptions& opt, const StepCallback& on_step = {}) {
  opt.config.validate();
  if (plan.size() != spec.num_layers()) throw std::invalid_argument("train: freeze plan does not match the model");
  params = apply_mask(params, mask);
  SeededRng rng(opt.config.seed);
  TrainResult res;
  res.loss_curve.reserve(opt.config.iterations);
  for (std::size_t it = 1; it <= opt.config.iterations; ++it) {
    const Batch batch = sample_batch(data, opt.config.batch_size, rng);
    auto step = loss_and_gradients(spec, params, mask, plan, batch, data.text, opt.objective, opt.kd_weight);
    if (!std::isfinite(step.loss.total))
      throw DivergenceError("training diverged at iteration " + std::to_string(it) + " (loss is not finite)");
    params = sgd_step(params, step.grads, mask, opt.config.learning_rate);
    res.loss_curve.push_back(step.loss.total);
    if (on_step) on_step(it, params, step.loss);
  }
  for (const auto& w : params.weights)
    for (double v : w.data())
      if (!std::isfinite(v)) throw DivergenceError("training diverged: non-finite weights");
  res.params = std::move(params);
  return res;
}

struct Evaluation {
  double distill = 0.0;         // TGKD over the whole split
  double classification = 0.0;  // mean cross-entropy
  double accuracy = 0.0;
};

inline Evaluation evaluate(const ModelSpec& spec, const ParameterStore& params, const SparsityMask& mask,
                           const DistillDataset& data) {
  const Batch all = full_batch(data);
  const DenseMatrix out = forward(params, mask, all.inputs, spec).output;
  Evaluation e;
  e.distill = tgkd_loss(out, all.teacher, all.text_rows).value;
  e.classification = cross_entropy_loss(out, data.text, all.labels).value;
  e.accuracy = accuracy(out, data.text, all.labels);
  return e;
}

}  // namespace spwt
