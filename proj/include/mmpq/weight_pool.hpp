#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmpq/model.hpp"

namespace mmpq {

enum class GroupId : std::uint8_t {
  G3x3 = 0,    // Conv3x3 kernels
  G1x1FC = 1,  // Conv1x1 and fully-connected weights
};

std::string_view to_string(GroupId group);

/// Group that a weight layer kind is pooled into. Throws for other kinds.
GroupId group_of(LayerKind kind);

struct GroupConfig {
  std::size_t m = 2;         // sub-codebooks per group
  std::size_t d3x3 = 18;     // two 9-value kernel slices per row
  std::size_t d1x1fc = 8;

  std::size_t d(GroupId group) const { return group == GroupId::G3x3 ? d3x3 : d1x1fc; }
  std::size_t dsub(GroupId group) const { return d(group) / m; }
  void check() const;
};

struct ProvenanceEntry {
  std::string model;
  int layer_index = 0;
  std::size_t row_begin = 0;
  std::size_t row_end = 0;  // exclusive
  std::size_t pad_count = 0;  // trailing zeros in the final row
  Shape shape;                // original weight shape

  std::size_t rows() const { return row_end - row_begin; }
  friend bool operator==(const ProvenanceEntry&, const ProvenanceEntry&) = default;
};

struct WeightPool {
  GroupId group = GroupId::G3x3;
  std::size_t d = 0;
  std::vector<float> vectors;  // rows x d, row-major
  std::vector<ProvenanceEntry> provenance;

  std::size_t rows() const { return d == 0 ? 0 : vectors.size() / d; }
  std::span<const float> row(std::size_t i) const { return {vectors.data() + i * d, d}; }

  /// True when every value of row i is padding.
  bool row_is_padding(std::size_t i) const;
};

struct PoolPair {
  WeightPool g3x3;
  WeightPool g1x1fc;

  WeightPool& operator[](GroupId g) { return g == GroupId::G3x3 ? g3x3 : g1x1fc; }
  const WeightPool& operator[](GroupId g) const { return g == GroupId::G3x3 ? g3x3 : g1x1fc; }
};

/// Number of d-value rows a weight tensor of `count` values occupies, and the
/// number of padding zeros in the final row.
std::pair<std::size_t, std::size_t> row_layout(std::size_t count, std::size_t d);

/// Concatenates the weight tensors of every Conv3x3 / Conv1x1 / FC layer of
/// every model into the two group pools. Biases and BN are never pooled.
PoolPair pool_weights(std::span<const ModelGraph> models, const GroupConfig& cfg);

/// Appends one weight tensor to a pool, returning its provenance entry.
const ProvenanceEntry& append_to_pool(WeightPool& pool, const std::string& model, int layer_index,
                                      const Tensor& weight);

/// Rebuilds a layer weight tensor from the pool rows an entry points at
/// (`rows` is the full pool matrix), dropping padding.
Tensor unpool_layer(std::span<const float> rows, std::size_t d, const ProvenanceEntry& entry);

inline Tensor unpool_layer(const WeightPool& pool, const ProvenanceEntry& entry) {
  return unpool_layer(pool.vectors, pool.d, entry);
}

}  // namespace mmpq
