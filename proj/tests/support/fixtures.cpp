#include "fixtures.hpp"

#include <random>

#include "mmpq/datasets.hpp"
#include "mmpq/weight_pool.hpp"

namespace mmpq::testing {

DamageFixture make_damage_fixture(std::uint64_t seed) {
  DamageFixture f;
  const DatasetSplits d = split_dataset(make_spirals(900, seed), 0.2, 0.0, seed);
  f.train = d.train;
  f.test = d.test;
  ModelBuilder b("damaged", {2});
  for (int i = 0; i < 4; ++i) b.fully_connected(32).relu();
  f.original = b.fully_connected(3).softmax().build(seed);
  TrainConfig tc;
  tc.epochs = 40;
  tc.learning_rate = 3e-3;
  tc.seed = seed;
  train(f.original, f.train, tc);

  f.pair = learn_codebooks(pool_weights(std::span(&f.original, 1), GroupConfig{}), 64, seed);
  f.config.epsilon = 0.03;
  f.config.seed = seed;
  f.config.finetune_epochs = 5;
  f.initial = initial_finetune(f.original, f.pair, f.train, f.config);

  f.damaged_layer = weight_layer_indices(f.original.layers)[2];
  CodeMatrix& codes = f.initial.codes.at(f.damaged_layer);
  const std::size_t k = f.pair.group(codes.group).k();
  std::mt19937_64 rng(seed);
  for (Code& c : codes.codes) c = static_cast<Code>(rng() % k);
  Tensor& w = f.initial.model.params_of(f.damaged_layer).weight;
  w = decode_layer(codes, f.pair, w.shape());
  return f;
}

std::map<int, double> brute_force_scores(const ModelGraph& original, const ModelGraph& recon,
                                         const std::set<int>& excluded) {
  std::map<int, double> out;
  for (const auto& spec : original.layers) {
    if (!is_weight_layer(spec.kind) || excluded.count(spec.layer_index)) continue;
    const auto a = original.params.at(spec.layer_index).weight.values();
    const auto b = recon.params.at(spec.layer_index).weight.values();
    long double sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += (static_cast<long double>(a[i]) - b[i]) * (static_cast<long double>(a[i]) - b[i]);
    out[spec.layer_index] = static_cast<double>(sum / a.size());
  }
  return out;
}

ModelGraph random_mlp(std::size_t weight_layers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelBuilder b("rand", {4});
  for (std::size_t i = 0; i + 1 < weight_layers; ++i) b.fully_connected(2 + rng() % 12).relu();
  return b.fully_connected(3).softmax().build(rng());
}

}  // namespace mmpq::testing
