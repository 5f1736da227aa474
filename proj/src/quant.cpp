#include "mmpq/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <string>

namespace mmpq {

namespace {

// Shifts right by `s` bits rounding to nearest, ties to even.
std::uint32_t shift_round_even(std::uint32_t v, unsigned s) {
  if (s == 0) return v;
  if (s >= 32) return 0;
  const std::uint32_t q = v >> s;
  const std::uint32_t rem = v & ((1u << s) - 1u);
  const std::uint32_t half = 1u << (s - 1);
  return (rem > half || (rem == half && (q & 1u))) ? q + 1 : q;
}

}  // namespace

std::uint16_t float_to_half(float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t mag = bits & 0x7fffffffu;
  if (mag > 0x7f800000u) throw HalfRangeError("NaN cannot be stored as binary16");
  // 65520 and above round to infinity.
  if (mag >= 0x477ff000u) {
    throw HalfRangeError("value " + std::to_string(value) + " is outside the binary16 range");
  }
  const unsigned exponent = mag >> 23;
  const std::uint32_t mantissa = mag & 0x7fffffu;
  if (exponent >= 113) {  // normal half: |x| >= 2^-14
    const std::uint32_t h = ((exponent - 112) << 10) + shift_round_even(mantissa, 13);
    return static_cast<std::uint16_t>(sign | h);
  }
  if (exponent < 102) return sign;  // below half the smallest subnormal
  // Subnormal half: value = m * 2^-24.
  const std::uint32_t full = mantissa | 0x800000u;
  return static_cast<std::uint16_t>(sign | shift_round_even(full, 126 - exponent));
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exponent = (h >> 10) & 0x1fu;
  std::uint32_t mantissa = h & 0x3ffu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mantissa <<= 1;
      } while ((mantissa & 0x400u) == 0);
      bits = sign | ((112u - static_cast<std::uint32_t>(e)) << 23) | ((mantissa & 0x3ffu) << 13);
    }
  } else if (exponent == 0x1f) {
    bits = sign | 0x7f800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 112u) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

std::uint64_t F16CodebookPair::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const F16Codebook* cb : {&g3x3, &g1x1fc}) {
    const std::uint64_t geometry[3] = {cb->m(), cb->k(), cb->dsub()};
    h = fnv1a(std::as_bytes(std::span(geometry)), h);
    for (const auto& sub : cb->subs) h = fnv1a(std::as_bytes(std::span(sub.codewords)), h);
  }
  return h;
}

F16CodebookPair to_f16(const CodebookPair& pair) {
  if (!pair.frozen()) throw std::invalid_argument("to_f16 requires a frozen codebook pair");
  F16CodebookPair out;
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    F16Codebook& dst = g == GroupId::G3x3 ? out.g3x3 : out.g1x1fc;
    dst.group = g;
    for (const auto& sub : pair.group(g).subs) {
      F16SubCodebook h{sub.k, sub.dsub, {}};
      h.codewords.reserve(sub.codewords.size());
      for (float v : sub.codewords) h.codewords.push_back(float_to_half(v));
      dst.subs.push_back(std::move(h));
    }
  }
  return out;
}

CodebookPair widen(const F16CodebookPair& pair) {
  Codebook cb[2];
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    Codebook& dst = cb[static_cast<int>(g)];
    dst.group = g;
    for (const auto& sub : pair.group(g).subs) {
      SubCodebook f{sub.k, sub.dsub, {}};
      f.codewords.reserve(sub.codewords.size());
      for (std::uint16_t v : sub.codewords) f.codewords.push_back(half_to_float(v));
      dst.subs.push_back(std::move(f));
    }
  }
  return CodebookPair(std::move(cb[0]), std::move(cb[1]), true);
}

namespace {

int round_half_away(double x) { return static_cast<int>(std::round(x)); }

}  // namespace

QuantParams calibrate_range(double lo, double hi) {
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  QuantParams qp;
  if (hi == lo) {
    const double c = std::max(std::abs(hi), std::abs(lo));
    qp.scale = static_cast<float>(std::max(c, 1.0) / 256.0);
    qp.zero_point = 0;
    return qp;
  }
  qp.scale = static_cast<float>((hi - lo) / 255.0);
  const int z = round_half_away(255.0 * -lo / (hi - lo)) - 128;
  qp.zero_point = static_cast<std::int8_t>(std::clamp(z, -128, 127));
  return qp;
}

QuantParams calibrate(std::span<const float> values) {
  if (values.empty()) throw std::invalid_argument("calibrate: empty tensor");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi)) throw std::invalid_argument("calibrate: non-finite value");
  return calibrate_range(*lo, *hi);
}

std::int8_t quantize_value(float r, const QuantParams& qp) {
  const double scaled = static_cast<double>(r) / static_cast<double>(qp.scale);
  const double q = std::round(scaled) + qp.zero_point;
  return static_cast<std::int8_t>(std::clamp(q, -128.0, 127.0));
}

std::vector<std::int8_t> quantize(std::span<const float> values, const QuantParams& qp) {
  std::vector<std::int8_t> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [&](float r) { return quantize_value(r, qp); });
  return out;
}

Tensor dequantize(std::span<const std::int8_t> values, const QuantParams& qp, const Shape& shape) {
  std::vector<float> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [&](std::int8_t q) { return dequantize_value(q, qp); });
  return Tensor(shape, std::move(out));
}

}  // namespace mmpq
