#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "mmpq/kmeans.hpp"
#include "mmpq/model.hpp"
#include "mmpq/weight_pool.hpp"

namespace mmpq {

using Code = std::uint16_t;

struct SubCodebook {
  std::size_t k = 0;
  std::size_t dsub = 0;
  std::vector<float> codewords;  // k x dsub

  std::span<const float> codeword(std::size_t i) const { return {codewords.data() + i * dsub, dsub}; }
  friend bool operator==(const SubCodebook&, const SubCodebook&) = default;
};

/// M sub-codebooks; a full codeword is the concatenation of one codeword from
/// each, so the group addresses K^M combinations.
struct Codebook {
  GroupId group = GroupId::G3x3;
  std::vector<SubCodebook> subs;

  std::size_t m() const { return subs.size(); }
  std::size_t k() const { return subs.empty() ? 0 : subs.front().k; }
  std::size_t dsub() const { return subs.empty() ? 0 : subs.front().dsub; }
  std::size_t d() const { return m() * dsub(); }
  friend bool operator==(const Codebook&, const Codebook&) = default;
};

/// The shared pair of group codebooks. Codewords can only be written before
/// freeze(); after that the pair is read-only for its lifetime.
class CodebookPair {
 public:
  CodebookPair() = default;
  CodebookPair(Codebook g3x3, Codebook g1x1fc, bool frozen = true);

  const Codebook& group(GroupId g) const { return g == GroupId::G3x3 ? g3x3_ : g1x1fc_; }
  Codebook& mutable_group(GroupId g);
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  /// FNV-1a over every codeword byte and the group geometry.
  std::uint64_t hash() const;

  friend bool operator==(const CodebookPair&, const CodebookPair&) = default;

 private:
  Codebook g3x3_;
  Codebook g1x1fc_;
  bool frozen_ = false;
};

struct CodeMatrix {
  GroupId group = GroupId::G3x3;
  std::size_t rows = 0;
  std::size_t m = 0;
  std::vector<Code> codes;  // rows x m

  std::span<const Code> row(std::size_t i) const { return {codes.data() + i * m, m}; }
  friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;
};

/// Per-layer code matrices keyed by layer_index.
using ModelCodes = std::map<int, CodeMatrix>;

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// k-means per (group, subvector slot) over the dsub-column slices of the
/// pool rows. All-padding rows are skipped; a group with an empty pool gets
/// an empty codebook. Returns a frozen pair.
CodebookPair learn_codebooks(const PoolPair& pools, std::size_t k, std::uint64_t seed,
                             const GroupConfig& cfg = {}, std::vector<KMeansResult>* diagnostics = nullptr);

/// Learns a single group codebook from one pool.
Codebook learn_codebook(const WeightPool& pool, std::size_t k, std::size_t m, std::uint64_t seed,
                        std::vector<KMeansResult>* diagnostics = nullptr);

struct EncodeResult {
  std::vector<Code> codes;    // one per sub-codebook
  double squared_error = 0.0;  // ||w - C b||^2
};

/// Nearest codeword per subvector; ties go to the lowest index.
EncodeResult encode(std::span<const float> vector, const Codebook& codebook);
EncodeResult encode(std::span<const float> vector, const CodebookPair& pair, GroupId group);

/// Encodes consecutive d-value rows. Optionally accumulates total squared error.
CodeMatrix encode_rows(std::span<const float> rows, const Codebook& codebook, double* squared_error = nullptr);

/// Writes the concatenated codewords of every row into `out` (rows x d).
void decode_rows(const CodeMatrix& codes, const Codebook& codebook, std::span<float> out);

/// Encodes every weight layer of one model against the pair.
ModelCodes encode_model(const ModelGraph& model, const CodebookPair& pair,
                        std::map<int, double>* layer_errors = nullptr);

/// Re-encodes a single layer's weight tensor.
CodeMatrix encode_layer(const Tensor& weight, LayerKind kind, const CodebookPair& pair,
                        double* squared_error = nullptr);

/// Decodes one layer's codes back to a tensor of `shape`.
Tensor decode_layer(const CodeMatrix& codes, const CodebookPair& pair, const Shape& shape);

/// Returns the skeleton with every weight layer outside `escape_layers`
/// replaced by its decoded codes. Escape layers, biases and BN parameters are
/// copied from the skeleton.
ModelGraph reconstruct_model(const ModelCodes& codes, const CodebookPair& pair, const ModelGraph& skeleton,
                             const std::set<int>& escape_layers = {});

}  // namespace mmpq
