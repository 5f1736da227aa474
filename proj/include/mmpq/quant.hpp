#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "mmpq/pq.hpp"
#include "mmpq/tensor.hpp"

namespace mmpq {

// ---------------------------------------------------------------------------
// IEEE 754 binary16, converted in software with round-to-nearest-even so the
// result never depends on the host FPU.
// ---------------------------------------------------------------------------

class HalfRangeError : public std::range_error {
 public:
  using std::range_error::range_error;
};

/// Throws HalfRangeError for NaN or values that round beyond +-65504.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

struct F16SubCodebook {
  std::size_t k = 0;
  std::size_t dsub = 0;
  std::vector<std::uint16_t> codewords;  // k x dsub
  friend bool operator==(const F16SubCodebook&, const F16SubCodebook&) = default;
};

struct F16Codebook {
  GroupId group = GroupId::G3x3;
  std::vector<F16SubCodebook> subs;

  std::size_t m() const { return subs.size(); }
  std::size_t k() const { return subs.empty() ? 0 : subs.front().k; }
  std::size_t dsub() const { return subs.empty() ? 0 : subs.front().dsub; }
  std::size_t d() const { return m() * dsub(); }
  std::size_t storage_bytes() const { return m() * k() * dsub() * sizeof(std::uint16_t); }
  friend bool operator==(const F16Codebook&, const F16Codebook&) = default;
};

struct F16CodebookPair {
  F16Codebook g3x3{GroupId::G3x3, {}};
  F16Codebook g1x1fc{GroupId::G1x1FC, {}};

  const F16Codebook& group(GroupId g) const { return g == GroupId::G3x3 ? g3x3 : g1x1fc; }
  std::size_t storage_bytes() const { return g3x3.storage_bytes() + g1x1fc.storage_bytes(); }
  std::uint64_t hash() const;
  friend bool operator==(const F16CodebookPair&, const F16CodebookPair&) = default;
};

F16CodebookPair to_f16(const CodebookPair& pair);

/// Widens every f16 codeword back to f32; the result is a frozen pair.
CodebookPair widen(const F16CodebookPair& pair);

// ---------------------------------------------------------------------------
// Affine int8 quantization r = S (q - Z), per tensor.
// ---------------------------------------------------------------------------

struct QuantParams {
  float scale = 1.0f;
  std::int8_t zero_point = 0;
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// S = (max - min) / 255 over the range widened to include 0, and
/// Z = round(-min / S) - 128. An all-zero tensor gets S = 2^-8, Z = 0.
QuantParams calibrate(std::span<const float> values);
inline QuantParams calibrate(const Tensor& t) { return calibrate(t.values()); }

/// Range-based variant used for activations.
QuantParams calibrate_range(double min_value, double max_value);

/// q = clamp(round(r / S) + Z, -128, 127), rounding half away from zero.
std::int8_t quantize_value(float r, const QuantParams& qp);

/// Exact real value S (q - Z).
inline double dequantize_exact(std::int8_t q, const QuantParams& qp) {
  return static_cast<double>(qp.scale) * (static_cast<int>(q) - static_cast<int>(qp.zero_point));
}

inline float dequantize_value(std::int8_t q, const QuantParams& qp) {
  return static_cast<float>(dequantize_exact(q, qp));
}

std::vector<std::int8_t> quantize(std::span<const float> values, const QuantParams& qp);
Tensor dequantize(std::span<const std::int8_t> values, const QuantParams& qp, const Shape& shape);

/// Lower and upper real values the parameters can represent.
inline double representable_min(const QuantParams& qp) { return qp.scale * (-128.0 - qp.zero_point); }
inline double representable_max(const QuantParams& qp) { return qp.scale * (127.0 - qp.zero_point); }

}  // namespace mmpq
