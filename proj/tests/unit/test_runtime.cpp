#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mmpq/datasets.hpp"
#include "mmpq/runtime.hpp"
#include "mmpq/weight_pool.hpp"

using namespace mmpq;

namespace {

struct Deployed {
  std::vector<ModelGraph> originals;
  std::vector<CompressedModel> compressed;
  std::vector<LabeledDataset> data;
  DeploymentBundle bundle;
  std::vector<std::byte> bytes;
};

// Two trained models sharing one codebook pair.
const Deployed& deployed() {
  static const Deployed d = [] {
    Deployed out;
    out.data.push_back(make_digits(1600, 4));
    out.data.push_back(make_spirals(1600, 5));
    out.originals.push_back(ModelBuilder("digits", {2, 8, 8}).conv3x3(8).batch_norm().relu().max_pool(2).conv3x3(16).batch_norm().relu().conv1x1(32).relu().avg_pool().flatten().fully_connected(10).softmax().build(1));
    out.originals.push_back(ModelBuilder("spirals", {2}).fully_connected(32).relu().fully_connected(32).relu().fully_connected(32).relu().fully_connected(3).softmax().build(2));
    for (std::size_t i = 0; i < 2; ++i) {
      TrainConfig tc;
      tc.epochs = 6;
      tc.learning_rate = 3e-3;
      train(out.originals[i], out.data[i], tc);
    }
    const CodebookPair pair = learn_codebooks(pool_weights(out.originals, GroupConfig{}), 64, 3);
    out.bundle.codebooks = to_f16(pair);
    for (std::size_t i = 0; i < 2; ++i) {
      out.compressed.push_back(initial_finetune(out.originals[i], pair, out.data[i], OptimizeConfig{}));
      out.bundle.models.push_back(encode_for_deployment(out.compressed[i], out.bundle.codebooks, out.data[i]));
    }
    out.bytes = serialize(out.bundle);
    return out;
  }();
  return d;
}

}  // namespace

TEST(FixedPoint, RepresentsMultipliers) {
  for (double m : {0.5, 0.001, 0.75, 1.0, 3.5, -0.25, 1e-9}) {
    const FixedPointMultiplier fp = to_fixed_point(m);
    EXPECT_GE(fp.shift, 0);
    EXPECT_LE(fp.shift, 46);
    EXPECT_LT(std::llabs(fp.multiplier), 1LL << 31);
    EXPECT_NEAR(std::ldexp(static_cast<double>(fp.multiplier), -fp.shift), m, std::abs(m) * 1e-6 + 1e-14);
  }
}

TEST(FixedPoint, RoundsHalfUp) {
  const FixedPointMultiplier half{1, 1};
  EXPECT_EQ(apply_fixed_point(3, half, 0), 2);   // 1.5 -> 2
  EXPECT_EQ(apply_fixed_point(-3, half, 0), -1);  // -1.5 -> -1
  EXPECT_EQ(apply_fixed_point(4, half, 2), 3);   // (4 + 2) / 2
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double m = std::ldexp(static_cast<double>(rng() % 1000 + 1), -static_cast<int>(rng() % 20));
    const FixedPointMultiplier fp = to_fixed_point(m);
    const std::int64_t acc = static_cast<std::int64_t>(rng() % 200001) - 100000;
    const double exact = static_cast<double>(acc) * std::ldexp(static_cast<double>(fp.multiplier), -fp.shift);
    EXPECT_EQ(apply_fixed_point(acc, fp, 0), static_cast<std::int64_t>(std::floor(exact + 0.5)));
  }
}

TEST(Arena, OneByteCapacityFailsAndStaysEmpty) {
  Arena arena(1);
  EXPECT_THROW(load_model(deployed().bytes, "digits", arena), ArenaCapacityError);
  EXPECT_TRUE(arena.empty());
  EXPECT_EQ(arena.used(), 0u);
  EXPECT_EQ(arena.high_water_mark(), 0u);
}

TEST(Arena, CapacityFailureKeepsPreviousModel) {
  LoadStats small, large;
  Arena probe;
  load_model(deployed().bytes, "spirals", probe, &small);
  load_model(deployed().bytes, "digits", probe, &large);
  ASSERT_NE(small.arena_bytes, large.arena_bytes);
  const bool spirals_smaller = small.arena_bytes < large.arena_bytes;
  const std::string fits = spirals_smaller ? "spirals" : "digits", too_big = spirals_smaller ? "digits" : "spirals";
  Arena arena(std::min(small.arena_bytes, large.arena_bytes));
  const ResidentModel a = load_model(deployed().bytes, fits, arena);
  const auto before = std::vector<std::int8_t>(a.weights(1).begin(), a.weights(1).end());
  EXPECT_THROW(load_model(deployed().bytes, too_big, arena), ArenaCapacityError);
  EXPECT_EQ(arena.resident_model(), fits);
  ASSERT_TRUE(a.valid());
  EXPECT_TRUE(std::equal(before.begin(), before.end(), a.weights(1).begin(), a.weights(1).end()));
}

TEST(Arena, UnknownModelLeavesArenaEmpty) {
  Arena arena;
  load_model(deployed().bytes, "digits", arena);
  EXPECT_THROW(load_model(deployed().bytes, "nope", arena), std::exception);
  EXPECT_TRUE(arena.empty() || arena.resident_model() == "digits");
}

TEST(Arena, CorruptBundleFailsCleanly) {
  Arena arena;
  auto bytes = deployed().bytes;
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(load_model(bytes, "spirals", arena), std::exception);
  EXPECT_TRUE(arena.empty());
  EXPECT_EQ(arena.used(), 0u);
}

TEST(Runtime, ResidentWeightsEqualOfflinePipeline) {
  const DeploymentBundle& b = deployed().bundle;
  Arena arena;
  for (const auto& m : b.models) {
    const ResidentModel rm = swap_model(deployed().bytes, m.name, arena);
    for (const auto& l : m.layers) {
      if (!is_weight_layer(l.spec.kind)) continue;
      const auto want = offline_int8_weights(l, b.codebooks);
      const auto got = rm.weights(l.spec.layer_index);
      EXPECT_TRUE(std::equal(want.begin(), want.end(), got.begin(), got.end())) << m.name << " " << l.spec.layer_index;
      EXPECT_EQ(rm.weight_qp(l.spec.layer_index), l.weight_qp);
    }
  }
}

TEST(Runtime, SwapBackReproducesFirstLoad) {
  Arena arena;
  const ResidentModel a1 = swap_model(deployed().bytes, "digits", arena);
  std::vector<std::vector<std::int8_t>> first;
  for (int idx : weight_layer_indices(deployed().originals[0].layers)) {
    first.emplace_back(a1.weights(idx).begin(), a1.weights(idx).end());
  }
  swap_model(deployed().bytes, "spirals", arena);
  EXPECT_FALSE(a1.valid());
  EXPECT_THROW(a1.weights(1), std::logic_error);
  const ResidentModel a2 = swap_model(deployed().bytes, "digits", arena);
  std::size_t i = 0;
  for (int idx : weight_layer_indices(deployed().originals[0].layers)) {
    EXPECT_TRUE(std::equal(first[i].begin(), first[i].end(), a2.weights(idx).begin(), a2.weights(idx).end()));
    ++i;
  }
  const ResidentModel a3 = swap_model(deployed().bytes, "digits", arena);
  EXPECT_FALSE(a2.valid());
  EXPECT_TRUE(a3.valid());
}

TEST(Runtime, RandomSwapsStayWithinCapacity) {
  Arena arena;
  std::mt19937_64 rng(9);
  const char* names[] = {"digits", "spirals"};
  for (int i = 0; i < 100; ++i) {
    const int which = static_cast<int>(rng() % 2);
    const ResidentModel rm = swap_model(deployed().bytes, names[which], arena);
    const auto& data = deployed().data[which];
    infer(rm, data.subset(rng() % (data.size() - 8), 8).inputs);
    EXPECT_LE(arena.used(), arena.capacity());
  }
  EXPECT_LE(arena.high_water_mark(), arena.capacity());
  EXPECT_GT(arena.high_water_mark(), 0u);
}

TEST(Runtime, CompressedLoadReadsFewerBytes) {
  Arena arena;
  for (const auto& m : deployed().bundle.models) {
    LoadStats s;
    swap_model(deployed().bytes, m.name, arena, &s);
    EXPECT_LT(s.bytes_read, s.uncompressed_bytes_read) << m.name;
    EXPECT_LE(s.arena_bytes, arena.capacity());
  }
}

TEST(Runtime, AgreesWithFloatReference) {
  Arena arena;
  for (std::size_t i = 0; i < 2; ++i) {
    const ResidentModel rm = swap_model(deployed().bytes, deployed().bundle.models[i].name, arena);
    const LabeledDataset probe = deployed().data[i].subset(0, 1000);
    const auto got = infer_labels(rm, probe.inputs);
    const auto want = predict(deployed_float_model(deployed().bundle.models[i], deployed().bundle.codebooks), probe.inputs);
    std::size_t agree = 0;
    for (std::size_t s = 0; s < got.size(); ++s) agree += got[s] == want[s];
    EXPECT_GE(static_cast<double>(agree) / static_cast<double>(got.size()), 0.98) << deployed().bundle.models[i].name;
  }
}

TEST(Runtime, SameInputTwiceIsBitIdentical) {
  Arena arena;
  const ResidentModel rm = swap_model(deployed().bytes, "digits", arena);
  const Tensor x = deployed().data[0].subset(0, 16).inputs;
  EXPECT_TRUE(bitwise_equal(infer(rm, x), infer(rm, x)));
}

TEST(Runtime, ZeroWeightsOutputBias) {
  ModelGraph m = ModelBuilder("zero", {3}).fully_connected(4).softmax().build(1);
  m.params_of(1).weight.fill(0.0f);
  *m.params_of(1).bias = Tensor({4}, std::vector<float>{0.5f, -1.0f, 0.25f, 2.0f});
  const LabeledDataset calib{Tensor({4, 3}, std::vector<float>(12, 0.7f)), {0, 1, 2, 3}, 4};
  const EncodedModel enc = encode_int8(m, calib);
  const auto bytes = serialize(DeploymentBundle{F16CodebookPair{}, {enc}});
  Arena arena;
  const ResidentModel rm = load_model(bytes, "zero", arena);
  const Tensor y = infer(rm, Tensor({2, 3}, std::vector<float>{1, -2, 3, 0.1f, 0.2f, 0.3f}));
  const QuantParams out = enc.layers[0].output_qp;
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t o = 0; o < 4; ++o) {
      EXPECT_NEAR(y[s * 4 + o], (*m.params_of(1).bias)[o], out.scale / 2 + 1e-7);
      // Equal to the bias as represented on the output grid.
      EXPECT_EQ(y[s * 4 + o], dequantize_value(quantize_value((*m.params_of(1).bias)[o], out), out));
    }
  }
}

TEST(Runtime, RejectsWrongBatchShape) {
  Arena arena;
  const ResidentModel rm = swap_model(deployed().bytes, "spirals", arena);
  EXPECT_THROW(infer(rm, Tensor({2, 3})), std::invalid_argument);
  EXPECT_EQ(rm.num_classes(), 3u);
  EXPECT_EQ(rm.input_shape(), (Shape{2}));
}
