#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include <json.hpp>

#include "../support/fixtures.hpp"
#include "mmpq/datasets.hpp"
#include "mmpq/weight_pool.hpp"

using namespace mmpq;
using mmpq::testing::brute_force_scores;

namespace {

const mmpq::testing::DamageFixture& fixture() {
  static const auto f = mmpq::testing::make_damage_fixture(1);
  return f;
}

ModelGraph fc_chain(const std::vector<std::size_t>& widths, std::size_t in, std::uint64_t seed) {
  ModelBuilder b("chain", {in});
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) b.fully_connected(widths[i]);
  return b.fully_connected(widths.back()).softmax().build(seed);
}

}  // namespace

TEST(FinetuneSet, StartsWithEndsAndGrowsByOne) {
  FinetuneSet s(1, 9);
  EXPECT_EQ(s.layers(), (std::vector<int>{1, 9}));
  s.add(4);
  EXPECT_EQ(s.size(), 3u);
  EXPECT_TRUE(s.contains(4));
  EXPECT_THROW(s.add(4), std::invalid_argument);
}

TEST(OptimizeConfig, RejectsOutOfRangeEpsilon) {
  OptimizeConfig c;
  c.epsilon = 0.0;
  EXPECT_THROW(c.check(), std::invalid_argument);
  c.epsilon = 1.5;
  EXPECT_THROW(c.check(), std::invalid_argument);
}

TEST(Heuristic, ScoreDividesByParameterCount) {
  // Layers: 1 (first), 2 = A with 100 weights, 3 = B with 10 weights, 4 (last).
  ModelGraph m = ModelBuilder("ab", {10}).fully_connected(10).fully_connected(10).fully_connected(1).fully_connected(2).softmax().build(3);
  ModelGraph recon = m;
  recon.params_of(2).weight[5] += 2.0f;               // diff^2 = 4, N = 100
  recon.params_of(3).weight[0] += std::sqrt(2.0f);    // diff^2 = 2, N = 10
  const FinetuneSet s(1, 4);
  const auto scores = layer_difference_scores(m, recon, s);
  EXPECT_NEAR(scores.at(2), 0.04, 1e-6);
  EXPECT_NEAR(scores.at(3), 0.2, 1e-6);
  EXPECT_EQ(select_layer_heuristic(m, recon, s), 3);
}

TEST(Heuristic, IdenticalModelsPickLowestEligibleIndex) {
  const ModelGraph m = mmpq::testing::random_mlp(6, 4);
  const auto idx = weight_layer_indices(m.layers);
  FinetuneSet s(idx.front(), idx.back());
  for (const auto& [i, v] : layer_difference_scores(m, m, s)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(select_layer_heuristic(m, m, s), idx[1]);
  s.add(idx[1]);
  EXPECT_EQ(select_layer_heuristic(m, m, s), idx[2]);
}

TEST(Heuristic, MatchesBruteForceOracleOnRandomModels) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ModelGraph a = mmpq::testing::random_mlp(6, seed);
    ModelGraph b = mmpq::testing::random_mlp(6, seed);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<float> n(0, 0.3f);
    for (auto& [i, p] : b.params) {
      for (float& v : p.weight.values()) v += n(rng) * static_cast<float>(rng() % 3);
    }
    const auto idx = weight_layer_indices(a.layers);
    FinetuneSet s(idx.front(), idx.back());
    const auto oracle = brute_force_scores(a, b, s.as_set());
    const auto got = layer_difference_scores(a, b, s);
    ASSERT_EQ(got.size(), oracle.size());
    int arg = -1;
    double best = -1;
    for (const auto& [i, v] : oracle) {
      EXPECT_NEAR(got.at(i), v, 1e-12 * std::max(1.0, v));
      if (v > best) {
        best = v;
        arg = i;
      }
    }
    EXPECT_EQ(select_layer_heuristic(a, b, s), arg);
  }
}

TEST(Heuristic, AllLayersInSetThrows) {
  const ModelGraph m = fc_chain({4, 3}, 4, 1);
  const FinetuneSet s(1, 2);
  EXPECT_THROW(select_layer_heuristic(m, m, s), std::invalid_argument);
}

TEST(InitialFinetune, MiddleLayersStayAtTheirCodes) {
  const auto& f = fixture();
  const ModelCodes codes = encode_model(f.original, f.pair);
  const ModelGraph recon = reconstruct_model(codes, f.pair, f.original);
  const CompressedModel out = initial_finetune(f.original, f.pair, f.train, f.config);
  const auto idx = weight_layer_indices(f.original.layers);
  EXPECT_EQ(out.escape_layers, (std::set<int>{idx.front(), idx.back()}));
  for (std::size_t i = 1; i + 1 < idx.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(out.model.params_of(idx[i]).weight, recon.params_of(idx[i]).weight));
  }
  EXPECT_NE(out.model.params_of(idx.front()).weight, recon.params_of(idx.front()).weight);
}

TEST(InitialFinetune, DoesNotLowerAccuracyOnDigits) {
  const DatasetSplits d = split_dataset(make_digits(800, 3), 0.25, 0.0, 3);
  ModelGraph m = ModelBuilder("cnn", {2, 8, 8})
                     .conv3x3(8).relu().max_pool(2)
                     .conv3x3(16).relu()
                     .conv1x1(16).relu().avg_pool().flatten()
                     .fully_connected(10).softmax()
                     .build(2);
  TrainConfig tc;
  tc.epochs = 8;
  train(m, d.train, tc);
  const CodebookPair pair = learn_codebooks(pool_weights(std::span(&m, 1), GroupConfig{}), 16, 1);
  const ModelGraph before = reconstruct_model(encode_model(m, pair), pair, m);
  OptimizeConfig oc;
  const CompressedModel after = initial_finetune(m, pair, d.train, oc);
  EXPECT_GE(evaluate(after.model, d.test), evaluate(before, d.test));
}

TEST(EmOptimize, EpsilonOneExitsAfterInitialFinetune) {
  const auto& f = fixture();
  OptimizeConfig c = f.config;
  c.epsilon = 1.0;
  const OptimizeResult r = em_optimize(f.original, f.initial, f.pair, f.train, f.test, c);
  EXPECT_EQ(r.report.em_iterations(), 0u);
  EXPECT_EQ(r.report.status, OptimizeStatus::Converged);
  EXPECT_EQ(r.compressed.codes, f.initial.codes);
}

TEST(EmOptimize, CodewordConcatenationsConvergeImmediately) {
  const auto& f = fixture();
  // Original whose middle layers already equal their reconstruction and whose
  // first and last layers equal the finetuned ones: nothing is lost.
  const CompressedModel init = initial_finetune(f.original, f.pair, f.train, f.config);
  ModelGraph exact = init.model;
  const OptimizeResult r = em_optimize(exact, init, f.pair, f.train, f.test, f.config);
  EXPECT_EQ(r.report.em_iterations(), 0u);
  EXPECT_EQ(r.report.iterations[0].acc_orig, r.report.iterations[0].acc_recon);
  EXPECT_EQ(r.compressed.model.params, exact.params);
}

TEST(EmOptimize, HeuristicSelectsDamagedLayerFirst) {
  const auto& f = fixture();
  const std::uint64_t hash = f.pair.hash();
  OptimizeConfig ours = f.config;
  ours.heuristic = Heuristic::Ours;
  const OptimizeResult a = em_optimize(f.original, f.initial, f.pair, f.train, f.test, ours);
  ASSERT_GE(a.report.iterations.size(), 2u) << "damage did not push accuracy outside epsilon";
  ASSERT_TRUE(a.report.iterations[1].selected_layer);
  EXPECT_EQ(*a.report.iterations[1].selected_layer, f.damaged_layer);

  OptimizeConfig none = f.config;
  none.heuristic = Heuristic::None;
  const OptimizeResult b = em_optimize(f.original, f.initial, f.pair, f.train, f.test, none);
  EXPECT_GE(evaluate(a.compressed.model, f.test), evaluate(b.compressed.model, f.test));
  EXPECT_EQ(f.pair.hash(), hash);

  // The finetune set grows by exactly one per non-converged heuristic iteration.
  for (std::size_t i = 1; i < a.report.iterations.size(); ++i) {
    EXPECT_EQ(a.report.iterations[i].finetuned_layers.size(), 2 + (i - 1));
  }
}

TEST(EmOptimize, EStepKeepsCodesOfFrozenLayers) {
  const auto& f = fixture();
  OptimizeConfig c = f.config;
  c.heuristic = Heuristic::None;
  c.max_outer_iters = 2;
  const OptimizeResult r = em_optimize(f.original, f.initial, f.pair, f.train, f.test, c);
  for (const auto& it : r.report.iterations) EXPECT_EQ(it.reassigned_codes, 0u);
  // Every code of a layer outside the escape set is per-subvector optimal for its weights.
  for (const auto& [idx, codes] : r.compressed.codes) {
    if (r.compressed.escape_layers.count(idx)) continue;
    EXPECT_EQ(encode_layer(r.compressed.model.params_of(idx).weight, r.compressed.model.layer(idx).kind, f.pair),
              codes);
  }
}

TEST(EmOptimize, AblationFlagsShapeTheTrace) {
  const auto& f = fixture();
  OptimizeConfig pqm = f.config;
  pqm.max_outer_iters = 0;
  const OptimizeResult a = em_optimize(f.original, f.initial, f.pair, f.train, f.test, pqm);
  EXPECT_EQ(a.report.em_iterations(), 0u);

  OptimizeConfig mopt = f.config;
  mopt.heuristic = Heuristic::None;
  const OptimizeResult b = em_optimize(f.original, f.initial, f.pair, f.train, f.test, mopt);
  const auto idx = weight_layer_indices(f.original.layers);
  for (const auto& it : b.report.iterations) {
    EXPECT_EQ(it.finetuned_layers, (std::vector<int>{idx.front(), idx.back()}));
    EXPECT_FALSE(it.selected_layer);
  }
}

TEST(EmOptimize, ExhaustionReturnsBestIteration) {
  const auto& f = fixture();
  OptimizeConfig c = f.config;
  c.epsilon = 1e-9;
  c.heuristic = Heuristic::None;
  c.max_outer_iters = 2;
  const OptimizeResult r = em_optimize(f.original, f.initial, f.pair, f.train, f.test, c);
  if (r.report.status == OptimizeStatus::Exhausted) {
    double best = -1;
    for (const auto& it : r.report.iterations) best = std::max(best, it.acc_recon);
    EXPECT_EQ(r.report.iterations[r.report.returned_iteration].acc_recon, best);
    EXPECT_EQ(evaluate(r.compressed.model, f.test), best);
  }
}

TEST(EmOptimize, JsonLinesEndWithSummary) {
  const auto& f = fixture();
  const OptimizeResult r = em_optimize(f.original, f.initial, f.pair, f.train, f.test, f.config);
  std::istringstream in(r.report.to_json_lines());
  std::string line, last;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    last = line;
    ++n;
  }
  EXPECT_EQ(n, r.report.iterations.size() + 1);
  const auto j = nlohmann::json::parse(last);
  EXPECT_EQ(j.at("em_iterations").get<std::size_t>(), r.report.em_iterations());
}
