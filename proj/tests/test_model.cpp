#include <gtest/gtest.h>

#include "spwt/train.hpp"
#include "test_util.hpp"

using namespace spwt;
using spwt::testing::random_matrix;
using spwt::testing::rel_error;

namespace {

ParameterStore random_params(const ModelSpec& spec, std::uint64_t seed) {
  auto p = initialize(spec, seed);
  SeededRng rng(seed + 1);
  for (auto& b : p.biases)
    for (double& x : b) x = 0.1 * rng.normal();
  return p;
}

Batch random_batch(const ModelSpec& spec, std::size_t n, std::size_t categories, std::uint64_t seed) {
  Batch b;
  b.inputs = random_matrix(n, spec.input_dim(), seed);
  b.teacher = random_matrix(n, spec.embed_dim(), seed + 1);
  const auto text = random_matrix(categories, spec.embed_dim(), seed + 2);
  b.text_rows = DenseMatrix(n, spec.embed_dim());
  for (std::size_t i = 0; i < n; ++i) {
    b.labels.push_back(i % categories);
    std::copy_n(text.row(i % categories).begin(), spec.embed_dim(), b.text_rows.row(i).begin());
  }
  return b;
}

}  // namespace

TEST(ModelSpec, Validation) {
  EXPECT_THROW(ModelSpec::mlp({4}), std::invalid_argument);
  EXPECT_THROW(ModelSpec::mlp({4, 0, 2}), std::invalid_argument);
  auto s = ModelSpec::mlp({4, 3, 2});
  s.layer_names = {"a", "a"};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_EQ(ModelSpec::mlp({4, 3, 2}).activation(1), Activation::identity);
  EXPECT_THROW(parse_activation("gelu"), std::invalid_argument);
}

TEST(Initialize, GlorotBoundsAndDeterminism) {
  const auto spec = ModelSpec::mlp({10, 20, 5});
  const auto a = initialize(spec, 3);
  EXPECT_EQ(a, initialize(spec, 3));
  EXPECT_NE(a, initialize(spec, 4));
  for (std::size_t l = 0; l < 2; ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(spec.layer_dims[l] + spec.layer_dims[l + 1]));
    for (double w : a.weights[l].data()) EXPECT_LE(std::abs(w), limit);
    for (double b : a.biases[l]) EXPECT_EQ(b, 0.0);
  }
}

TEST(Forward, OnesMaskMatchesDenseBitwise) {
  const auto spec = ModelSpec::mlp({6, 7, 5, 3});
  const auto p = random_params(spec, 1);
  const auto x = random_matrix(4, 6, 2);
  EXPECT_EQ(forward(p, ones_mask(spec.shapes()), x, spec).output, forward_dense(p, x, spec));
}

TEST(Forward, ZeroMaskZeroBiasGivesZeros) {
  const auto spec = ModelSpec::mlp({6, 7, 3});
  const auto p = initialize(spec, 1);
  auto m = ones_mask(spec.shapes());
  for (auto& l : m.layers) std::fill(l.keep.begin(), l.keep.end(), 0);
  const auto out = forward(p, m, random_matrix(5, 6, 2), spec).output;
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, HandComputedOneHiddenLayer) {
  const auto spec = ModelSpec::mlp({2, 2, 1});
  ParameterStore p;
  p.weights = {DenseMatrix(2, 2, std::vector<double>{0.5, -1.0, 0.25, 0.5}), DenseMatrix(2, 1, std::vector<double>{2.0, -3.0})};
  p.biases = {{0.0, 0.1}, {0.5}};
  const DenseMatrix x(1, 2, std::vector<double>{1.0, 2.0});
  // hidden = tanh(1*0.5 + 2*0.25, 1*(-1) + 2*0.5 + 0.1) = (tanh 1, tanh 0.1)
  const double expected = 2.0 * std::tanh(1.0) - 3.0 * std::tanh(0.1) + 0.5;
  EXPECT_NEAR(forward(p, ones_mask(spec.shapes()), x, spec).output(0, 0), expected, 1e-15);
}

TEST(Forward, ShapeErrors) {
  const auto spec = ModelSpec::mlp({6, 7, 3});
  const auto p = initialize(spec, 1);
  EXPECT_THROW(forward(p, ones_mask(spec.shapes()), random_matrix(2, 5, 1), spec), std::invalid_argument);
  auto bad = ones_mask(spec.shapes());
  bad.layers.pop_back();
  EXPECT_THROW(forward(p, bad, random_matrix(2, 6, 1), spec), std::invalid_argument);
}

// Every analytic gradient entry of CE + TGKD against central differences.
class FiniteDifference : public ::testing::TestWithParam<Activation> {};

TEST_P(FiniteDifference, AllParametersOfMaskedModel) {
  auto spec = ModelSpec::mlp({5, 6, 4, 3}, GetParam());
  const auto p = random_params(spec, 11);
  const auto batch = random_batch(spec, 6, 3, 12);
  const auto text = random_matrix(3, 3, 14);
  auto mask = random_mask(spec.shapes(), 0.7, 15);
  const auto plan = FreezePlan::all_active(spec.layer_names);
  const auto start = apply_mask(p, mask);

  auto loss = [&](const ParameterStore& q) {
    return loss_and_gradients(spec, q, mask, plan, batch, text, Objective::classify_and_distill, 0.7).loss.total;
  };
  const auto g = loss_and_gradients(spec, start, mask, plan, batch, text, Objective::classify_and_distill, 0.7).grads;
  ASSERT_EQ(g.computed(), spec.num_layers());
  const double eps = 1e-5;
  std::size_t checked = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    for (std::size_t k = 0; k < start.weights[l].size(); ++k) {
      const double analytic = g.layers[l]->weight.data()[k];
      if (!mask.layers[l].keep[k]) {
        EXPECT_EQ(analytic, 0.0);
        continue;
      }
      auto plus = start, minus = start;
      plus.weights[l].data()[k] += eps;
      minus.weights[l].data()[k] -= eps;
      const double numeric = (loss(plus) - loss(minus)) / (2 * eps);
      EXPECT_LT(rel_error(analytic, numeric, 1e-6), 1e-4) << "layer " << l << " weight " << k;
      ++checked;
    }
    for (std::size_t k = 0; k < start.biases[l].size(); ++k) {
      auto plus = start, minus = start;
      plus.biases[l][k] += eps;
      minus.biases[l][k] -= eps;
      const double numeric = (loss(plus) - loss(minus)) / (2 * eps);
      EXPECT_LT(rel_error(g.layers[l]->bias[k], numeric, 1e-6), 1e-4) << "layer " << l << " bias " << k;
      ++checked;
    }
  }
  EXPECT_GT(checked, 50u);
}

INSTANTIATE_TEST_SUITE_P(Activations, FiniteDifference, ::testing::Values(Activation::tanh, Activation::relu),
                         [](const auto& info) { return to_string(info.param); });

TEST(Backward, LinearLeastSquaresClosedForm) {
  const auto spec = ModelSpec::mlp({3, 2});
  auto p = initialize(spec, 5);
  const auto x = random_matrix(4, 3, 6);
  const auto y = random_matrix(4, 2, 7);
  const auto mask = ones_mask(spec.shapes());
  auto fwd = forward(p, mask, x, spec);
  DenseMatrix resid = fwd.output;
  for (std::size_t i = 0; i < resid.size(); ++i) resid.data()[i] = 2.0 * (resid.data()[i] - y.data()[i]) / 4.0;
  const auto g = backward(fwd.cache, resid, mask, FreezePlan::all_active(spec.layer_names));
  // 2·xᵀ(xW − y)/batch, computed independently.
  const auto xw = matmul(x, p.weights[0]);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double e = 0.0;
      for (std::size_t r = 0; r < 4; ++r) e += x(r, i) * (xw(r, j) - y(r, j));
      EXPECT_NEAR(g.layers[0]->weight(i, j), 2.0 * e / 4.0, 1e-12);
    }
}

TEST(Backward, FrozenLayersHaveNoGradient) {
  const auto spec = ModelSpec::mlp({4, 5, 5, 3});
  const auto p = initialize(spec, 1);
  const auto mask = ones_mask(spec.shapes());
  auto fwd = forward(p, mask, random_matrix(3, 4, 2), spec);
  const auto up = random_matrix(3, 3, 3);
  EXPECT_TRUE(backward(fwd.cache, up, mask, FreezePlan::all_frozen(spec.layer_names)).empty());

  auto plan = FreezePlan::all_active(spec.layer_names);
  plan.frozen[1] = true;
  const auto g = backward(fwd.cache, up, mask, plan);
  EXPECT_TRUE(g.layers[0].has_value());
  EXPECT_FALSE(g.layers[1].has_value());
  EXPECT_TRUE(g.layers[2].has_value());
  // The active layer beneath a frozen one still receives the same gradient as with no freezing.
  const auto full = backward(fwd.cache, up, mask, FreezePlan::all_active(spec.layer_names));
  EXPECT_EQ(g.layers[0]->weight, full.layers[0]->weight);
}

TEST(Backward, StaleCacheRejected) {
  const auto spec = ModelSpec::mlp({4, 5, 3});
  const auto p = initialize(spec, 1);
  const auto mask = ones_mask(spec.shapes());
  auto fwd = forward(p, mask, random_matrix(3, 4, 2), spec);
  EXPECT_THROW(backward(fwd.cache, random_matrix(2, 3, 3), mask, FreezePlan::all_active(spec.layer_names)),
               std::invalid_argument);
}

TEST(SgdStep, Examples) {
  const auto spec = ModelSpec::mlp({1, 1});
  ParameterStore p;
  p.weights = {DenseMatrix(1, 1, std::vector<double>{1.0})};
  p.biases = {{0.0}};
  Gradients g;
  g.layers.push_back(LayerGradient{DenseMatrix(1, 1, std::vector<double>{2.0}), {0.0}});
  const auto mask = ones_mask(spec.shapes());
  EXPECT_DOUBLE_EQ(sgd_step(p, g, mask, 0.1).weights[0](0, 0), 0.8);
  EXPECT_EQ(sgd_step(p, g, mask, 0.0), p);

  auto zero = mask;
  zero.layers[0].keep[0] = 0;
  ParameterStore q = apply_mask(p, zero);
  EXPECT_EQ(sgd_step(q, g, zero, 0.1).weights[0](0, 0), 0.0);
}

TEST(Training, MaskAbsorptionDeterminismAndFreezing) {
  auto cfg = spwt::testing::small_config();
  const auto data = dataset_for(cfg).train;
  const auto spec = cfg.model;
  const auto p0 = initialize(spec, 1);  // deliberately unmasked start
  const auto mask = random_mask(spec.shapes(), 0.4, 2);
  auto plan = FreezePlan::all_active(spec.layer_names);
  plan.frozen[0] = plan.frozen[2] = true;
  TrainOptions opt;
  opt.config = {0.05, 25, 16, 9};
  opt.objective = Objective::classify_and_distill;

  const auto masked0 = apply_mask(p0, mask);
  std::size_t steps = 0;
  auto check = [&](std::size_t, const ParameterStore& p, const LossBreakdown&) {
    ++steps;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      for (std::size_t k = 0; k < p.weights[l].size(); ++k)
        if (!mask.layers[l].keep[k]) {
          ASSERT_EQ(p.weights[l].data()[k], 0.0);
        }
      if (plan.frozen[l]) {
        ASSERT_EQ(p.weights[l], masked0.weights[l]);
        ASSERT_EQ(p.biases[l], masked0.biases[l]);
      }
    }
  };
  const auto a = train(spec, p0, mask, plan, data, opt, check);
  EXPECT_EQ(steps, 25u);
  const auto b = train(spec, p0, mask, plan, data, opt);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_NE(a.params.weights[1], masked0.weights[1]);
}

TEST(Training, DivergenceIsReported) {
  auto cfg = spwt::testing::small_config();
  const auto data = dataset_for(cfg).train;
  TrainOptions opt;
  opt.config = {1e200, 5, 16, 0};
  opt.objective = Objective::classify_and_distill;
  EXPECT_THROW(train(cfg.model, initialize(cfg.model, 0), ones_mask(cfg.model.shapes()),
                     FreezePlan::all_active(cfg.model.layer_names), data, opt),
               DivergenceError);
}

TEST(TrainConfig, Validation) {
  EXPECT_THROW((TrainConfig{0.0, 1, 1, 0}).validate(), std::invalid_argument);
  EXPECT_THROW((TrainConfig{0.1, 0, 1, 0}).validate(), std::invalid_argument);
  EXPECT_NO_THROW((TrainConfig{}).validate());
  EXPECT_DOUBLE_EQ(TrainConfig{}.learning_rate, 1e-4);
}
