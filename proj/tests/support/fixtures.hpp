#pragma once

#include <cstdint>

#include "mmpq/optimizer.hpp"

namespace mmpq::testing {

/// A trained 5-weight-layer MLP whose third layer has its codes scrambled
/// after the initial finetune, so its reconstruction is far from the original.
struct DamageFixture {
  ModelGraph original;
  CodebookPair pair;
  LabeledDataset train, test;
  CompressedModel initial;  // codes and weights of the damaged layer agree
  int damaged_layer = 0;
  OptimizeConfig config;
};

DamageFixture make_damage_fixture(std::uint64_t seed = 1);

/// Straight-loop squared Frobenius difference per element for every weight
/// layer, independent of the optimizer's implementation.
std::map<int, double> brute_force_scores(const ModelGraph& original, const ModelGraph& recon,
                                         const std::set<int>& excluded);

/// Random model with `weight_layers` fully-connected layers.
ModelGraph random_mlp(std::size_t weight_layers, std::uint64_t seed);

}  // namespace mmpq::testing
