#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmpq/bundle.hpp"

namespace mmpq {

inline constexpr std::size_t kDefaultArenaBytes = 512 * 1024;
inline constexpr std::size_t kDefaultFlashBytes = 1024 * 1024;

class ArenaCapacityError : public std::runtime_error {
 public:
  ArenaCapacityError(std::size_t required, std::size_t available);
  std::size_t required() const { return required_; }
  std::size_t available() const { return available_; }

 private:
  std::size_t required_;
  std::size_t available_;
};

class ResidentModel;

/// Fixed-capacity bump region that holds at most one resident model. Loading
/// a model reuses the region from offset 0.
class Arena {
 public:
  explicit Arena(std::size_t capacity = kDefaultArenaBytes);

  std::size_t capacity() const { return capacity_; }
  std::size_t used() const { return used_; }
  std::size_t high_water_mark() const { return high_water_; }
  const std::optional<std::string>& resident_model() const { return resident_; }
  bool empty() const { return !resident_.has_value(); }
  std::uint64_t generation() const { return generation_; }

 private:
  friend struct ArenaAccess;

  std::byte* allocate(std::size_t bytes);
  void clear();

  std::size_t capacity_;
  std::unique_ptr<std::byte[]> storage_;
  std::size_t used_ = 0;
  std::size_t high_water_ = 0;
  std::optional<std::string> resident_;
  std::uint64_t generation_ = 0;
};

struct LoadStats {
  std::size_t bytes_read = 0;               // record bytes + one codeword fetch per code
  std::size_t uncompressed_bytes_read = 0;  // same record with f32 weights instead of codes/int8
  std::size_t bytes_written = 0;            // arena bytes written during the load
  std::size_t arena_bytes = 0;              // arena bytes reserved, including scratch
};

/// Handle to the model currently resident in an arena. It becomes invalid
/// (and every accessor throws) once the arena loads another model.
class ResidentModel {
 public:
  const std::string& name() const { return name_; }
  bool valid() const;

  /// Read-only int8 weights of a weight layer, as resident in the arena.
  std::span<const std::int8_t> weights(int layer_index) const;
  QuantParams weight_qp(int layer_index) const;
  Shape input_shape() const;
  std::size_t num_classes() const;

 private:
  friend struct ArenaAccess;
  friend ResidentModel load_model(std::span<const std::byte>, const std::string&, Arena&, LoadStats*);
  friend Tensor infer(const ResidentModel&, const Tensor&);

  const std::byte* base() const;

  Arena* arena_ = nullptr;
  std::uint64_t generation_ = 0;
  std::string name_;
};

/// Reconstructs `model_name` from the serialized bundle into the arena.
/// Compressed layers fetch f16 codewords by code, widen and quantize them with
/// the layer's stored parameters; escape layers are copied as int8.
///
/// A capacity failure throws ArenaCapacityError and leaves the arena as it
/// was. Any other failure leaves the arena empty.
ResidentModel load_model(std::span<const std::byte> bundle, const std::string& model_name, Arena& arena,
                         LoadStats* stats = nullptr);

/// Replaces whatever is resident with `model_name`, reusing the same region.
inline ResidentModel swap_model(std::span<const std::byte> bundle, const std::string& model_name, Arena& arena,
                                LoadStats* stats = nullptr) {
  return load_model(bundle, model_name, arena, stats);
}

/// Int8 inference over a batch (N, ...input shape). Returns (N, classes)
/// dequantized scores of the final layer.
Tensor infer(const ResidentModel& model, const Tensor& batch);

std::vector<int> infer_labels(const ResidentModel& model, const Tensor& batch);

/// Fixed-point form of a positive or negative real multiplier:
/// value ~= multiplier * 2^-shift.
struct FixedPointMultiplier {
  std::int64_t multiplier = 0;  // |multiplier| < 2^31
  int shift = 0;                // 0..46
};

FixedPointMultiplier to_fixed_point(double real_multiplier);

/// round((acc * multiplier + offset) * 2^-shift), halves rounded up.
std::int64_t apply_fixed_point(std::int64_t acc, const FixedPointMultiplier& fp, std::int64_t offset);

}  // namespace mmpq
