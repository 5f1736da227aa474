#include <gtest/gtest.h>

#include <random>

#include "mmpq/network.hpp"

using namespace mmpq;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = u(rng);
  return t;
}

TensorD random_tensor_d(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> u(0.0, 1.0);
  TensorD t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Plain nested loops, written independently of the library kernels.
std::vector<float> oracle_fc(const std::vector<float>& x, std::size_t n, std::size_t in, const Tensor& w,
                             const Tensor& b, bool relu) {
  const std::size_t out = w.dim(0);
  std::vector<float> y(n * out);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < out; ++o) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[s * in + i];
      acc = acc + b[o];
      y[s * out + o] = relu && acc < 0.0f ? 0.0f : acc;
    }
  }
  return y;
}

void randomize_biases(ModelGraph& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  for (auto& [idx, p] : m.params) {
    if (p.bias) {
      for (float& v : p.bias->values()) v = u(rng);
    }
  }
}

LabeledDataset blobs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.3f);
  Tensor x({n, 2});
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    const float cx = c == 0 ? -1.5f : 1.5f;
    x[i * 2] = cx + noise(rng);
    x[i * 2 + 1] = noise(rng);
    labels.push_back(c);
  }
  return {x, labels, 2};
}

}  // namespace

TEST(Forward, IdentityFullyConnectedReturnsInput) {
  ModelGraph m = ModelBuilder("id", {4}).fully_connected(4).softmax().build(1);
  auto& p = m.params_of(1);
  p.weight.fill(0.0f);
  for (std::size_t i = 0; i < 4; ++i) p.weight[i * 4 + i] = 1.0f;
  p.bias->fill(0.0f);
  const Tensor x = random_tensor({3, 4}, 7);
  EXPECT_TRUE(bitwise_equal(forward(m, x), x));
}

TEST(Forward, ZeroConvolutionOutputsBias) {
  ModelGraph m = ModelBuilder("zc", {2, 5, 5}).conv3x3(3).flatten().fully_connected(2).softmax().build(1);
  auto& p = m.params_of(1);
  p.weight.fill(0.0f);
  *p.bias = Tensor({3}, std::vector<float>{0.5f, -1.25f, 2.0f});
  const auto trace = forward_trace(m, random_tensor({2, 2, 5, 5}, 3));
  const Tensor& y = trace.front();
  ASSERT_EQ(y.shape(), (Shape{2, 3, 5, 5}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], (*p.bias)[(i / 25) % 3]);
}

TEST(Forward, TwoLayerMlpMatchesStraightLoopOracle) {
  ModelGraph m = ModelBuilder("mlp", {6}).fully_connected(5).relu().fully_connected(3).softmax().build(42);
  randomize_biases(m, 42);
  const Tensor x = random_tensor({8, 6}, 42);
  const std::vector<float> xs(x.values().begin(), x.values().end());
  const auto h = oracle_fc(xs, 8, 6, m.params_of(1).weight, *m.params_of(1).bias, true);
  const auto y = oracle_fc(h, 8, 5, m.params_of(3).weight, *m.params_of(3).bias, false);
  const Tensor logits = forward(m, x);
  ASSERT_EQ(logits.shape(), (Shape{8, 3}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(logits[i], y[i]) << i;
}

TEST(Forward, PointwiseConvolutionEqualsFullyConnectedPerPosition) {
  const std::size_t c = 5, o = 4, h = 3, w = 4;
  ModelGraph conv = ModelBuilder("c", {c, h, w}).conv1x1(o).flatten().fully_connected(2).softmax().build(9);
  randomize_biases(conv, 9);
  ModelGraph fc = ModelBuilder("f", {c}).fully_connected(o).softmax().build(1);
  fc.params_of(1).weight = Tensor({o, c}, std::vector<float>(conv.params_of(1).weight.values().begin(),
                                                             conv.params_of(1).weight.values().end()));
  fc.params_of(1).bias = conv.params_of(1).bias;
  const Tensor x = random_tensor({2, c, h, w}, 5);
  const Tensor y = forward_trace(conv, x).front();
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t pos = 0; pos < h * w; ++pos) {
      Tensor v({1, c});
      for (std::size_t ch = 0; ch < c; ++ch) v[ch] = x[(s * c + ch) * h * w + pos];
      const Tensor r = forward(fc, v);
      for (std::size_t oc = 0; oc < o; ++oc) EXPECT_NEAR(y[(s * o + oc) * h * w + pos], r[oc], 1e-6);
    }
  }
}

TEST(Forward, RejectsWrongInputShape) {
  const ModelGraph m = ModelBuilder("m", {4}).fully_connected(2).softmax().build(1);
  EXPECT_THROW(forward(m, Tensor({2, 5})), std::invalid_argument);
}

TEST(Train, SeparableBlobsReachNearPerfectAccuracy) {
  const LabeledDataset data = blobs(200, 3);
  // Perceptron oracle: the generator's margin makes the classes linearly separable.
  double w0 = 0, w1 = 0, b = 0;
  for (int epoch = 0; epoch < 100; ++epoch) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double t = data.labels[i] == 1 ? 1.0 : -1.0;
      if (t * (w0 * data.inputs[i * 2] + w1 * data.inputs[i * 2 + 1] + b) <= 0) {
        w0 += t * data.inputs[i * 2];
        w1 += t * data.inputs[i * 2 + 1];
        b += t;
      }
    }
  }
  std::size_t separated = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double t = data.labels[i] == 1 ? 1.0 : -1.0;
    separated += t * (w0 * data.inputs[i * 2] + w1 * data.inputs[i * 2 + 1] + b) > 0;
  }
  ASSERT_EQ(separated, data.size());

  ModelGraph m = ModelBuilder("lin", {2}).fully_connected(2).softmax().build(0);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.learning_rate = 0.01;
  const TrainReport r = train(m, data, cfg);
  EXPECT_GE(r.accuracy, 0.99);
  EXPECT_GE(evaluate(m, data), 0.99);
}

TEST(Train, AllFrozenLeavesParametersUntouched) {
  ModelGraph m = ModelBuilder("f", {2}).fully_connected(8).batch_norm().relu().fully_connected(2).softmax().build(4);
  for (const auto& s : m.layers) {
    if (is_parameterized(s.kind)) m.frozen.insert(s.layer_index);
  }
  const ModelGraph before = m;
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.bn_mode = BatchNormMode::RunningStatistics;
  const TrainReport r = train(m, blobs(64, 1), cfg);
  EXPECT_EQ(m.params, before.params);
  ASSERT_EQ(r.epoch_losses.size(), 3u);
  EXPECT_EQ(r.epoch_losses[0], r.epoch_losses[2]);
}

TEST(Train, FrozenLayerUntouchedWhileOthersMove) {
  ModelGraph m = ModelBuilder("f", {2}).fully_connected(8).relu().fully_connected(8).relu().fully_connected(2).softmax().build(4);
  m.frozen.insert(3);
  const ModelGraph before = m;
  TrainConfig cfg;
  cfg.epochs = 2;
  train(m, blobs(64, 1), cfg);
  EXPECT_EQ(m.params_of(3), before.params_of(3));
  EXPECT_NE(m.params_of(1), before.params_of(1));
}

TEST(Train, SameSeedIsBitIdentical) {
  const LabeledDataset data = blobs(96, 2);
  auto run = [&] {
    ModelGraph m = ModelBuilder("d", {2}).fully_connected(16).batch_norm().relu().fully_connected(2).softmax().build(11);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 5;
    train(m, data, cfg);
    return m;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradientCheck, QuadraticToy) {
  const std::vector<double> theta = {0.3, -1.2, 2.5, 0.0, 7.0};
  std::vector<double> analytic;
  for (double t : theta) analytic.push_back(2.0 * t);
  auto f = [](std::span<const double> x) {
    double s = 0;
    for (double v : x) s += v * v;
    return s;
  };
  EXPECT_LT(gradient_check(f, analytic, theta, 1e-4), 1e-9);
}

struct KindCase {
  const char* name;
  Shape input;
  std::vector<std::string> tokens;
  BatchNormMode mode = BatchNormMode::BatchStatistics;
};

class EveryLayerKind : public ::testing::TestWithParam<KindCase> {};

TEST_P(EveryLayerKind, CentralDifferenceAgrees) {
  const KindCase& c = GetParam();
  ModelBuilder b(c.name, c.input);
  for (const auto& t : c.tokens) b.add(t);
  ModelGraph m = b.build(13);
  randomize_biases(m, 13);
  ModelGraphD md = m.cast<double>();
  for (auto& [idx, p] : md.params) {
    if (p.running_var) {
      for (double& v : p.running_var->values()) v = 0.5 + 0.1 * idx;
      for (double& v : p.running_mean->values()) v = 0.05 * idx;
      for (double& v : p.weight.values()) v = 1.3;
    }
  }
  Shape shape{6};
  shape.insert(shape.end(), c.input.begin(), c.input.end());
  const TensorD x = random_tensor_d(shape, 17);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  GradientCheckOptions o;
  o.h = 1e-4;
  o.samples_per_tensor = 24;
  o.bn_mode = c.mode;
  EXPECT_LT(gradient_check(md, x, labels, o), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(
    Kinds, EveryLayerKind,
    ::testing::Values(
        KindCase{"fc", {5}, {"fc:7", "fc:3", "softmax"}},
        KindCase{"relu", {5}, {"fc:7", "relu", "fc:3", "softmax"}},
        KindCase{"conv3x3", {2, 5, 5}, {"conv3x3:3", "flatten", "fc:3", "softmax"}},
        KindCase{"conv3x3_stride2", {2, 6, 6}, {"conv3x3:3/2", "flatten", "fc:3", "softmax"}},
        KindCase{"conv1x1", {3, 4, 4}, {"conv3x3:4", "conv1x1:3", "flatten", "fc:3", "softmax"}},
        KindCase{"bn_batch", {2, 4, 4}, {"conv3x3:3", "bn", "relu", "flatten", "fc:3", "softmax"}},
        KindCase{"bn_running", {2, 4, 4}, {"conv3x3:3", "bn", "flatten", "fc:3", "softmax"},
                 BatchNormMode::RunningStatistics},
        KindCase{"bn_fc", {5}, {"fc:6", "bn", "fc:3", "softmax"}},
        KindCase{"maxpool", {2, 6, 6}, {"conv3x3:3", "maxpool:2", "flatten", "fc:3", "softmax"}},
        KindCase{"avgpool_window", {2, 6, 6}, {"conv3x3:3", "avgpool:2", "flatten", "fc:3", "softmax"}},
        KindCase{"avgpool_global", {2, 5, 5}, {"conv3x3:4", "avgpool", "flatten", "fc:3", "softmax"}}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(GradientCheck, SmallCnn) {
  ModelGraph m = ModelBuilder("cnn", {1, 6, 6}).conv3x3(4).relu().flatten().fully_connected(3).softmax().build(3);
  const TensorD x = random_tensor_d({4, 1, 6, 6}, 2);
  const std::vector<int> labels = {0, 1, 2, 1};
  EXPECT_LT(gradient_check(m.cast<double>(), x, labels, {}), 1e-3);
}

TEST(GradientCheck, CorruptedBackwardIsCaught) {
  ModelGraph m = ModelBuilder("cnn", {1, 6, 6}).conv3x3(4).relu().flatten().fully_connected(3).softmax().build(3);
  const TensorD x = random_tensor_d({4, 1, 6, 6}, 2);
  const std::vector<int> labels = {0, 1, 2, 1};
  GradientCheckOptions o;
  o.corrupt = [](Gradients<double>& g) {
    for (double& v : g.at(1).weight.values()) v *= 1.5;
  };
  EXPECT_GT(gradient_check(m.cast<double>(), x, labels, o), 1e-1);
}

TEST(Model, ValidateRejectsBrokenGraphs) {
  ModelGraph m = ModelBuilder("m", {4}).fully_connected(3).softmax().build(1);
  ModelGraph bad = m;
  bad.params_of(1).weight = Tensor({3, 5});
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = m;
  bad.layers[1].layer_index = 5;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = m;
  bad.frozen.insert(2);
  EXPECT_THROW(validate(bad), std::invalid_argument);
}

TEST(Model, FirstAndLastWeightLayers) {
  const ModelGraph m = ModelBuilder("m", {1, 4, 4}).conv3x3(2).batch_norm().relu().flatten().fully_connected(5).relu().fully_connected(3).softmax().build(1);
  EXPECT_EQ(first_weight_layer(m.layers), 1);
  EXPECT_EQ(last_weight_layer(m.layers), 7);
  EXPECT_EQ(weight_layer_indices(m.layers), (std::vector<int>{1, 5, 7}));
  EXPECT_EQ(num_classes(m.layers), 3u);
}
