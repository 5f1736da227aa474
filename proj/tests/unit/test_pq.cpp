#include <gtest/gtest.h>

#include <chrono>
#include <limits>
#include <random>

#include "mmpq/kmeans.hpp"
#include "mmpq/pq.hpp"
#include "mmpq/weight_pool.hpp"

using namespace mmpq;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> u(0.0f, 1.0f);
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = u(rng);
  return t;
}

Codebook random_codebook(GroupId g, std::size_t k, std::size_t m, std::size_t dsub, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> u(0.0f, 1.0f);
  Codebook cb{g, {}};
  for (std::size_t s = 0; s < m; ++s) {
    SubCodebook sub{k, dsub, std::vector<float>(k * dsub)};
    for (float& v : sub.codewords) v = u(rng);
    cb.subs.push_back(std::move(sub));
  }
  return cb;
}

double sq(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return s;
}

ModelGraph small_model(const std::string& name, std::uint64_t seed) {
  return ModelBuilder(name, {2, 6, 6})
      .conv3x3(4)
      .batch_norm()
      .relu()
      .conv1x1(8)
      .relu()
      .avg_pool()
      .flatten()
      .fully_connected(5)
      .softmax()
      .build(seed);
}

}  // namespace

// --------------------------------------------------------------------------- pools

TEST(WeightPool, TwoKernelConvFillsOneRow) {
  WeightPool pool{GroupId::G3x3, 18, {}, {}};
  const Tensor w = random_tensor({2, 1, 3, 3}, 1);
  const ProvenanceEntry e = append_to_pool(pool, "m", 1, w);
  EXPECT_EQ(pool.rows(), 1u);
  EXPECT_EQ(e.pad_count, 0u);
  for (std::size_t i = 0; i < 18; ++i) EXPECT_EQ(pool.vectors[i], w[i]);
}

TEST(WeightPool, TenWeightFcPadsSecondRow) {
  WeightPool pool{GroupId::G1x1FC, 8, {}, {}};
  const Tensor w = random_tensor({2, 5}, 2);
  const ProvenanceEntry e = append_to_pool(pool, "m", 1, w);
  EXPECT_EQ(pool.rows(), 2u);
  EXPECT_EQ(e.pad_count, 6u);
  for (std::size_t i = 10; i < 16; ++i) EXPECT_EQ(pool.vectors[i], 0.0f);
  const Tensor back = unpool_layer(pool, e);
  EXPECT_EQ(back.size(), 10u);
  EXPECT_TRUE(bitwise_equal(back, w));
}

TEST(WeightPool, PointwiseLayerHoldsSeventeenTimesTheKernelParameters) {
  WeightPool g3{GroupId::G3x3, 18, {}, {}}, g1{GroupId::G1x1FC, 8, {}, {}};
  const auto& a = append_to_pool(g3, "kws", 1, Tensor({140, 1, 3, 3}));
  const auto& b = append_to_pool(g1, "kws", 2, Tensor({196, 112, 1, 1}));
  const std::size_t na = a.rows() * 18 - a.pad_count, nb = b.rows() * 8 - b.pad_count;
  EXPECT_EQ(na, 1260u);
  EXPECT_EQ(nb, 21952u);
  EXPECT_NEAR(static_cast<double>(nb) / static_cast<double>(na), 17.4, 0.05);
}

TEST(WeightPool, ThreeRandomModelsRoundTripEveryLayer) {
  std::vector<ModelGraph> models;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 3; ++i) {
    ModelBuilder b("m" + std::to_string(i), {static_cast<std::size_t>(1 + rng() % 3), 5, 5});
    b.conv3x3(1 + rng() % 7).relu().conv1x1(1 + rng() % 9).relu().flatten().fully_connected(1 + rng() % 11).relu();
    b.fully_connected(3).softmax();
    models.push_back(b.build(rng()));
  }
  const PoolPair pools = pool_weights(models, GroupConfig{});
  std::size_t seen = 0;
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    for (const auto& e : pools[g].provenance) {
      const ModelGraph* src = nullptr;
      for (const auto& m : models) {
        if (m.name == e.model) src = &m;
      }
      ASSERT_NE(src, nullptr);
      EXPECT_EQ(group_of(src->layer(e.layer_index).kind), g);
      EXPECT_TRUE(bitwise_equal(unpool_layer(pools[g], e), src->params_of(e.layer_index).weight));
      ++seen;
    }
  }
  EXPECT_EQ(seen, 12u);
  // Disjoint and contiguous: provenance ranges tile the pool.
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    std::size_t next = 0;
    for (const auto& e : pools[g].provenance) {
      EXPECT_EQ(e.row_begin, next);
      next = e.row_end;
    }
    EXPECT_EQ(next, pools[g].rows());
  }
}

TEST(WeightPool, RowLayout) {
  EXPECT_EQ(row_layout(10, 8), (std::pair<std::size_t, std::size_t>{2, 6}));
  EXPECT_EQ(row_layout(16, 8), (std::pair<std::size_t, std::size_t>{2, 0}));
  EXPECT_EQ(row_layout(1, 18), (std::pair<std::size_t, std::size_t>{1, 17}));
}

// --------------------------------------------------------------------------- k-means

TEST(KMeans, DistinctRowsEqualToKAreFixedPoint) {
  std::vector<float> pts = {0, 0, 1, 0, 0, 1, 5, 5};
  const KMeansResult r = kmeans(pts, 2, {4, 100, 1e-6, 0});
  EXPECT_EQ(r.objective.back(), 0.0);
  std::vector<std::pair<float, float>> got, want = {{0, 0}, {1, 0}, {0, 1}, {5, 5}};
  for (std::size_t i = 0; i < 4; ++i) got.emplace_back(r.centroids[2 * i], r.centroids[2 * i + 1]);
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  EXPECT_EQ(got, want);
}

TEST(KMeans, RecoversBlobMeans) {
  const float centers[4][2] = {{-3, -3}, {3, -3}, {-3, 3}, {3, 3}};
  std::mt19937_64 rng(8);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::vector<float> pts;
  double means[4][2] = {};
  for (int i = 0; i < 200; ++i) {
    const int c = i % 4;
    const float x = centers[c][0] + noise(rng), y = centers[c][1] + noise(rng);
    pts.push_back(x);
    pts.push_back(y);
    means[c][0] += x / 50.0;
    means[c][1] += y / 50.0;
  }
  const KMeansResult r = kmeans(pts, 2, {4, 100, 1e-6, 1});
  for (const auto& m : means) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < 4; ++j) {
      best = std::min(best, std::hypot(r.centroids[2 * j] - m[0], r.centroids[2 * j + 1] - m[1]));
    }
    EXPECT_LT(best, 0.05);
  }
}

TEST(KMeans, ObjectiveNeverIncreases) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1, 1);
    std::vector<float> pts(600 * 3);
    for (float& v : pts) v = u(rng) * u(rng);
    const KMeansResult r = kmeans(pts, 3, {16, 100, 0.0, seed});
    ASSERT_FALSE(r.objective.empty());
    for (std::size_t i = 1; i < r.objective.size(); ++i) EXPECT_LE(r.objective[i], r.objective[i - 1]);
  }
}

TEST(KMeans, SameSeedIsBitIdentical) {
  std::vector<float> pts(1000);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0, 1);
  for (float& v : pts) v = n(rng);
  const auto a = kmeans(pts, 4, {32, 100, 1e-6, 9});
  const auto b = kmeans(pts, 4, {32, 100, 1e-6, 9});
  EXPECT_EQ(0, std::memcmp(a.centroids.data(), b.centroids.data(), a.centroids.size() * sizeof(float)));
}

TEST(KMeans, TooFewDistinctPointsThrows) {
  std::vector<float> pts = {1, 1, 1, 1, 2, 2};
  EXPECT_THROW(kmeans(pts, 2, {3, 100, 1e-6, 0}), std::invalid_argument);
}

// --------------------------------------------------------------------------- encoding

TEST(Encode, ConcatenatedCodewordsEncodeExactly) {
  const Codebook cb = random_codebook(GroupId::G1x1FC, 16, 2, 4, 5);
  std::vector<float> v;
  for (float x : cb.subs[0].codeword(3)) v.push_back(x);
  for (float x : cb.subs[1].codeword(7)) v.push_back(x);
  const EncodeResult r = encode(v, cb);
  EXPECT_EQ(r.codes, (std::vector<Code>{3, 7}));
  EXPECT_EQ(r.squared_error, 0.0);
}

TEST(Encode, CodeSpaceHasKToTheMCombinations) {
  const Codebook cb = random_codebook(GroupId::G1x1FC, 4, 2, 4, 6);
  std::set<std::vector<float>> joint;
  for (std::size_t a = 0; a < cb.k(); ++a) {
    for (std::size_t b = 0; b < cb.k(); ++b) {
      std::vector<float> v;
      for (float x : cb.subs[0].codeword(a)) v.push_back(x);
      for (float x : cb.subs[1].codeword(b)) v.push_back(x);
      joint.insert(v);
      const EncodeResult r = encode(v, cb);
      EXPECT_EQ(r.codes, (std::vector<Code>{static_cast<Code>(a), static_cast<Code>(b)}));
    }
  }
  EXPECT_EQ(joint.size(), 16u);
}

TEST(Encode, MatchesExhaustiveJointSearch) {
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    const std::size_t dsub = g == GroupId::G3x3 ? 9 : 4;
    const Codebook cb = random_codebook(g, 16, 2, dsub, 10 + static_cast<int>(g));
    std::mt19937_64 rng(20);
    std::normal_distribution<float> n(0, 1);
    for (int t = 0; t < 1000; ++t) {
      std::vector<float> v(2 * dsub);
      for (float& x : v) x = n(rng);
      double best = std::numeric_limits<double>::infinity();
      std::vector<Code> arg;
      std::vector<float> cand(2 * dsub);
      for (std::size_t a = 0; a < 16; ++a) {
        for (std::size_t b = 0; b < 16; ++b) {
          std::copy_n(cb.subs[0].codeword(a).begin(), dsub, cand.begin());
          std::copy_n(cb.subs[1].codeword(b).begin(), dsub, cand.begin() + dsub);
          const double d = sq(v, cand);
          if (d < best) {
            best = d;
            arg = {static_cast<Code>(a), static_cast<Code>(b)};
          }
        }
      }
      ASSERT_EQ(encode(v, cb).codes, arg) << "vector " << t;
    }
  }
}

TEST(Encode, TiesGoToLowestIndex) {
  Codebook cb{GroupId::G1x1FC, {SubCodebook{3, 1, {1.0f, -1.0f, 1.0f}}}};
  EXPECT_EQ(encode(std::vector<float>{0.0f}, cb).codes, (std::vector<Code>{0}));
}

TEST(Encode, IdempotentAfterReconstruction) {
  const Codebook cb = random_codebook(GroupId::G3x3, 32, 2, 9, 3);
  std::vector<float> rows(18 * 50);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0, 1);
  for (float& v : rows) v = n(rng);
  const CodeMatrix c = encode_rows(rows, cb);
  std::vector<float> back(rows.size());
  decode_rows(c, cb, back);
  EXPECT_EQ(encode_rows(back, cb), c);
}

TEST(Encode, ModelOfCodewordsReconstructsBitwise) {
  ModelGraph m = small_model("m", 1);
  const CodebookPair pair(random_codebook(GroupId::G3x3, 8, 2, 9, 1), random_codebook(GroupId::G1x1FC, 8, 2, 4, 2));
  std::mt19937_64 rng(3);
  for (int idx : weight_layer_indices(m.layers)) {
    const Codebook& cb = pair.group(group_of(m.layer(idx).kind));
    Tensor& w = m.params_of(idx).weight;
    const std::size_t d = cb.d();
    ASSERT_EQ(w.size() % d, 0u);
    for (std::size_t r = 0; r < w.size() / d; ++r) {
      for (std::size_t s = 0; s < 2; ++s) {
        const auto cw = cb.subs[s].codeword(rng() % 8);
        std::copy(cw.begin(), cw.end(), w.data() + r * d + s * cb.dsub());
      }
    }
  }
  std::map<int, double> errors;
  const ModelCodes codes = encode_model(m, pair, &errors);
  for (const auto& [idx, e] : errors) EXPECT_EQ(e, 0.0);
  EXPECT_EQ(reconstruct_model(codes, pair, m).params, m.params);
}

TEST(Encode, LayerErrorIsSumOfRowErrors) {
  const ModelGraph m = small_model("m", 4);
  const CodebookPair pair(random_codebook(GroupId::G3x3, 16, 2, 9, 1), random_codebook(GroupId::G1x1FC, 16, 2, 4, 2));
  std::map<int, double> errors;
  encode_model(m, pair, &errors);
  for (int idx : weight_layer_indices(m.layers)) {
    const GroupId g = group_of(m.layer(idx).kind);
    WeightPool pool{g, pair.group(g).d(), {}, {}};
    append_to_pool(pool, "m", idx, m.params_of(idx).weight);
    double sum = 0;
    for (std::size_t r = 0; r < pool.rows(); ++r) sum += encode(pool.row(r), pair, g).squared_error;
    EXPECT_NEAR(errors.at(idx), sum, 1e-9 * std::max(1.0, sum));
  }
}

TEST(Encode, ZeroCodewordGivesZeroWeights) {
  Codebook g3 = random_codebook(GroupId::G3x3, 4, 2, 9, 1), g1 = random_codebook(GroupId::G1x1FC, 4, 2, 4, 2);
  for (auto* cb : {&g3, &g1}) {
    for (auto& s : cb->subs) std::fill_n(s.codewords.begin(), s.dsub, 0.0f);
  }
  const CodebookPair pair(g3, g1);
  const ModelGraph m = small_model("m", 1);
  ModelCodes codes = encode_model(m, pair);
  for (auto& [idx, c] : codes) std::fill(c.codes.begin(), c.codes.end(), 0);
  const ModelGraph r = reconstruct_model(codes, pair, m);
  for (int idx : weight_layer_indices(m.layers)) {
    for (float v : r.params_of(idx).weight.values()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Encode, EveryCodeIsPerSubvectorOptimal) {
  const ModelGraph m = small_model("m", 2);
  const CodebookPair pair(random_codebook(GroupId::G3x3, 16, 2, 9, 1), random_codebook(GroupId::G1x1FC, 16, 2, 4, 2));
  const ModelCodes codes = encode_model(m, pair);
  for (const auto& [idx, c] : codes) {
    const Codebook& cb = pair.group(c.group);
    WeightPool pool{c.group, cb.d(), {}, {}};
    append_to_pool(pool, "m", idx, m.params_of(idx).weight);
    for (std::size_t r = 0; r < c.rows; ++r) {
      for (std::size_t s = 0; s < 2; ++s) {
        const auto sub = pool.row(r).subspan(s * cb.dsub(), cb.dsub());
        const double chosen = sq(sub, cb.subs[s].codeword(c.row(r)[s]));
        for (std::size_t j = 0; j < cb.k(); ++j) EXPECT_LE(chosen, sq(sub, cb.subs[s].codeword(j)));
      }
    }
  }
}

TEST(Codebooks, ErrorFallsAsKDoubles) {
  std::vector<ModelGraph> models;
  for (int i = 0; i < 3; ++i) {
    models.push_back(ModelBuilder("r" + std::to_string(i), {3, 6, 6})
                         .conv3x3(24)
                         .relu()
                         .conv3x3(24)
                         .relu()
                         .conv1x1(48)
                         .avg_pool()
                         .flatten()
                         .fully_connected(64)
                         .relu()
                         .fully_connected(4)
                         .softmax()
                         .build(30 + i));
  }
  const PoolPair pools = pool_weights(models, GroupConfig{});
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k : {16, 32, 64, 128, 256}) {
    const CodebookPair pair = learn_codebooks(pools, k, 7);
    double err = 0, norm = 0;
    for (const auto& m : models) {
      std::map<int, double> e;
      encode_model(m, pair, &e);
      for (const auto& [idx, v] : e) err += v;
      for (int idx : weight_layer_indices(m.layers)) {
        for (float w : m.params_of(idx).weight.values()) norm += double(w) * w;
      }
    }
    const double rel = std::sqrt(err / norm);
    EXPECT_LT(rel, prev) << "K=" << k;
    prev = rel;
  }
}

TEST(Codebooks, LearnedPairIsFrozenDistinctAndDeterministic) {
  std::vector<ModelGraph> models = {small_model("a", 1), small_model("b", 2), small_model("c", 3)};
  const PoolPair pools = pool_weights(models, GroupConfig{});
  const CodebookPair a = learn_codebooks(pools, 8, 5);
  const CodebookPair b = learn_codebooks(pools, 8, 5);
  EXPECT_TRUE(a.frozen());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a, b);
  CodebookPair c = a;
  EXPECT_THROW(c.mutable_group(GroupId::G3x3), std::logic_error);
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    for (const auto& s : a.group(g).subs) {
      for (std::size_t i = 0; i < s.k; ++i) {
        for (std::size_t j = i + 1; j < s.k; ++j) EXPECT_GT(sq(s.codeword(i), s.codeword(j)), 1e-24);
        for (float v : s.codeword(i)) EXPECT_TRUE(std::isfinite(v));
      }
    }
  }
}
