#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmpq/network.hpp"
#include "mmpq/optimizer.hpp"
#include "mmpq/quant.hpp"

namespace mmpq {

inline constexpr std::array<char, 4> kBundleMagic = {'Y', 'N', 'B', '1'};
inline constexpr std::uint16_t kBundleVersion = 1;
inline constexpr std::size_t kBundleHeaderBytes = 20;
inline constexpr std::size_t kDirectoryEntryBytes = 12;

class BundleFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class WeightStorage : std::uint8_t { Codes = 1, Int8 = 2 };

struct EncodedLayer {
  LayerSpec spec;
  QuantParams output_qp;  // activation parameters of this layer's output

  // Weight layers only.
  WeightStorage storage = WeightStorage::Codes;
  Shape weight_shape;
  QuantParams weight_qp;
  std::optional<CodeMatrix> codes;      // storage == Codes
  std::vector<std::int8_t> int8_weights;  // storage == Int8
  std::optional<std::vector<float>> bias;

  // BatchNorm only.
  float bn_epsilon = static_cast<float>(kBatchNormEpsilon);
  std::vector<float> gamma, beta, mean, var;

  friend bool operator==(const EncodedLayer&, const EncodedLayer&) = default;
};

struct EncodedModel {
  std::string name;
  Shape input_shape;
  QuantParams input_qp;
  std::vector<EncodedLayer> layers;
  std::uint32_t original_f32_bytes = 0;

  friend bool operator==(const EncodedModel&, const EncodedModel&) = default;
};

struct DeploymentBundle {
  F16CodebookPair codebooks;
  std::vector<EncodedModel> models;

  const EncodedModel& model(const std::string& name) const;
  friend bool operator==(const DeploymentBundle&, const DeploymentBundle&) = default;
};

enum class ByteCategory : std::uint8_t {
  Header,
  Directory,
  Codebooks,
  Descriptors,
  QuantParams,
  Codes,
  Escapes,
  Biases,
  BatchNorm,
};
inline constexpr std::size_t kByteCategoryCount = 9;

std::string_view to_string(ByteCategory c);

struct ByteAccounting {
  std::array<std::size_t, kByteCategoryCount> totals{};
  std::map<std::string, std::array<std::size_t, kByteCategoryCount>> per_model;

  std::size_t operator[](ByteCategory c) const { return totals[static_cast<std::size_t>(c)]; }
  std::size_t total() const;
};

std::vector<std::byte> serialize(const DeploymentBundle& bundle, ByteAccounting* accounting = nullptr);

/// Parses and validates a bundle. Throws BundleFormatError naming the byte
/// offset of the first problem.
DeploymentBundle deserialize(std::span<const std::byte> bytes, ByteAccounting* accounting = nullptr);

/// Attributes every byte of a serialized bundle to one category.
ByteAccounting account(std::span<const std::byte> bytes);

/// Seekable view of a bundle: header, directory and codebook-section offsets,
/// without parsing model records.
struct BundleIndex {
  struct Entry {
    std::string name;
    std::uint32_t offset = 0;
    std::uint32_t length = 0;
    std::uint32_t original_f32_bytes = 0;
  };
  std::uint64_t codebook_hash = 0;
  std::size_t codebook_offset = 0;
  std::size_t codebook_bytes = 0;
  // Per group: byte offset of the first f16 codeword, M, K, dsub.
  struct GroupLayout {
    std::size_t data_offset = 0;
    std::size_t m = 0, k = 0, dsub = 0;
  };
  std::array<GroupLayout, 2> groups{};
  std::vector<Entry> entries;

  const Entry& entry(const std::string& name) const;
};

BundleIndex index_bundle(std::span<const std::byte> bytes);

/// Parses a single model record located through the index.
EncodedModel read_model_record(std::span<const std::byte> bytes, const BundleIndex& index, const std::string& name);

// ---------------------------------------------------------------------------
// Building deployable models
// ---------------------------------------------------------------------------

/// Per-layer output quantization parameters from a float calibration pass.
/// Weight layers and BN/ReLU fused directly behind them get their own range;
/// pooling, flatten, standalone ReLU and softmax inherit their input's.
struct ActivationCalibration {
  QuantParams input;
  std::vector<QuantParams> outputs;  // per layer, list order
};

ActivationCalibration calibrate_activations(const ModelGraph& model, const Tensor& samples);

/// Compressed layers keep their codes; escape layers are stored as int8.
/// `calibration` supplies up to `calibration_samples` inputs.
EncodedModel encode_for_deployment(const CompressedModel& compressed, const F16CodebookPair& codebooks,
                                   const LabeledDataset& calibration, std::size_t calibration_samples = 256);

/// Every weight layer stored as int8 (the post-training Int8 baseline).
EncodedModel encode_int8(const ModelGraph& model, const LabeledDataset& calibration,
                         std::size_t calibration_samples = 256);

/// Float model whose weights are the f16-widened decode of the codes (or the
/// dequantized int8 values for escape layers).
ModelGraph deployed_float_model(const EncodedModel& model, const F16CodebookPair& codebooks);

/// Offline int8 weights of one layer: f16 codeword lookup, widen, quantize.
std::vector<std::int8_t> offline_int8_weights(const EncodedLayer& layer, const F16CodebookPair& codebooks);

// ---------------------------------------------------------------------------
// Compression accounting
// ---------------------------------------------------------------------------

struct ModelCompression {
  std::string name;
  std::size_t original_bytes = 0;
  double bundle_bytes = 0.0;  // record + directory entry + equal share of header and codebooks
};

struct CompressionReport {
  std::size_t total_original_bytes = 0;
  std::size_t total_bundle_bytes = 0;
  double ratio = 0.0;
  std::vector<ModelCompression> per_model;
};

/// ratio = sum of f32 parameter bytes of the originals / bundle length.
CompressionReport compression_ratio(std::span<const ModelGraph> originals, std::span<const std::byte> bundle);

}  // namespace mmpq
