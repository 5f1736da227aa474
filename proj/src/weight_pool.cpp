#include "mmpq/weight_pool.hpp"

#include <algorithm>
#include <stdexcept>

namespace mmpq {

std::string_view to_string(GroupId group) {
  return group == GroupId::G3x3 ? "g3x3" : "g1x1fc";
}

GroupId group_of(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3x3: return GroupId::G3x3;
    case LayerKind::Conv1x1:
    case LayerKind::FullyConnected: return GroupId::G1x1FC;
    default:
      throw std::invalid_argument("layer kind '" + std::string(to_string(kind)) +
                                  "' is not pooled into a codebook group");
  }
}

void GroupConfig::check() const {
  if (m == 0) throw std::invalid_argument("group config: M must be positive");
  if (d3x3 == 0 || d3x3 % 9 != 0) throw std::invalid_argument("group config: d3x3 must be a positive multiple of 9");
  if (d3x3 % m != 0 || d1x1fc == 0 || d1x1fc % m != 0) {
    throw std::invalid_argument("group config: d must be divisible by M");
  }
}

bool WeightPool::row_is_padding(std::size_t i) const {
  for (const auto& e : provenance) {
    if (i >= e.row_begin && i < e.row_end) {
      return i + 1 == e.row_end && e.pad_count >= d;
    }
  }
  throw std::out_of_range("pool row " + std::to_string(i) + " has no provenance");
}

std::pair<std::size_t, std::size_t> row_layout(std::size_t count, std::size_t d) {
  const std::size_t rows = (count + d - 1) / d;
  return {rows, rows * d - count};
}

const ProvenanceEntry& append_to_pool(WeightPool& pool, const std::string& model, int layer_index,
                                      const Tensor& weight) {
  const auto [rows, pad] = row_layout(weight.size(), pool.d);
  ProvenanceEntry entry{model, layer_index, pool.rows(), pool.rows() + rows, pad, weight.shape()};
  pool.vectors.insert(pool.vectors.end(), weight.values().begin(), weight.values().end());
  pool.vectors.insert(pool.vectors.end(), pad, 0.0f);
  pool.provenance.push_back(std::move(entry));
  return pool.provenance.back();
}

PoolPair pool_weights(std::span<const ModelGraph> models, const GroupConfig& cfg) {
  cfg.check();
  if (models.empty()) throw std::invalid_argument("pool_weights: no models given");
  PoolPair pools;
  pools.g3x3 = {GroupId::G3x3, cfg.d3x3, {}, {}};
  pools.g1x1fc = {GroupId::G1x1FC, cfg.d1x1fc, {}, {}};
  for (const auto& model : models) {
    for (const auto& spec : model.layers) {
      if (!is_parameterized(spec.kind)) continue;
      if (spec.kind == LayerKind::BatchNorm) continue;
      const Tensor& w = model.params_of(spec.layer_index).weight;
      const bool conv3 = spec.kind == LayerKind::Conv3x3;
      const bool shape_ok = conv3 ? (w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3)
                                  : spec.kind == LayerKind::Conv1x1
                                        ? (w.rank() == 4 && w.dim(2) == 1 && w.dim(3) == 1)
                                        : w.rank() == 2;
      if (!shape_ok) {
        throw std::invalid_argument("model '" + model.name + "' layer " +
                                    std::to_string(spec.layer_index) + ": weight shape " +
                                    shape_to_string(w.shape()) + " unsupported for " +
                                    std::string(to_string(spec.kind)));
      }
      append_to_pool(pools[group_of(spec.kind)], model.name, spec.layer_index, w);
    }
  }
  return pools;
}

Tensor unpool_layer(std::span<const float> rows, std::size_t d, const ProvenanceEntry& entry) {
  const std::size_t count = shape_numel(entry.shape);
  const auto [expected_rows, pad] = row_layout(count, d);
  if (d == 0 || entry.row_end < entry.row_begin || entry.rows() != expected_rows ||
      pad != entry.pad_count || entry.row_end * d > rows.size()) {
    throw std::invalid_argument("unpool: provenance for layer " + std::to_string(entry.layer_index) +
                                " of '" + entry.model + "' (rows " +
                                std::to_string(entry.row_begin) + ".." + std::to_string(entry.row_end) +
                                ", shape " + shape_to_string(entry.shape) +
                                ") does not match the pool");
  }
  std::vector<float> values(rows.begin() + static_cast<std::ptrdiff_t>(entry.row_begin * d),
                            rows.begin() + static_cast<std::ptrdiff_t>(entry.row_begin * d + count));
  return Tensor(entry.shape, std::move(values));
}

}  // namespace mmpq
