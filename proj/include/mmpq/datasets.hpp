#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "mmpq/network.hpp"

namespace mmpq {

/// 2-D points on interleaved spiral arms, one class per arm.
LabeledDataset make_spirals(std::size_t n, std::uint64_t seed, std::size_t arms = 3);

/// 8x8 two-channel glyphs of the ten digits: channel 0 holds the strokes,
/// channel 1 their horizontal edges. Random shift, stroke gain and noise.
LabeledDataset make_digits(std::size_t n, std::uint64_t seed);

/// 16x16 single-channel patches of four periodic textures (horizontal,
/// vertical, diagonal stripes, checkerboard) with random period and phase.
LabeledDataset make_textures(std::size_t n, std::uint64_t seed);

/// 2-D points on three noisy concentric rings.
LabeledDataset make_rings(std::size_t n, std::uint64_t seed);

/// Builds a generator dataset by name: spirals, digits, textures, rings.
LabeledDataset make_dataset(const std::string& generator, std::size_t n, std::uint64_t seed);

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset test;     // used by the optimizer's stopping rule
  LabeledDataset holdout;  // never seen by training or the optimizer
};

/// Seeded shuffle, then disjoint test / holdout / train slices.
DatasetSplits split_dataset(const LabeledDataset& data, double test_fraction, double holdout_fraction,
                            std::uint64_t seed);

class IdxParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an IDX image file (magic 0x00000803, u8 N x H x W) and label file
/// (magic 0x00000801, u8 N). Images become (N, 1, H, W) floats in [0, 1].
LabeledDataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                          std::size_t num_classes);

/// Writes a (N, 1, H, W) dataset as an IDX pair; values are rounded to
/// multiples of 1/255.
void write_idx(const LabeledDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

}  // namespace mmpq
