#pragma once

#include <bit>
#include <cstdint>

namespace vpr {

// IEEE 754 binary16 conversion, round to nearest even. Used by the float16
// feature store; kept as explicit bit manipulation so results do not depend
// on compiler half-precision support.
inline uint16_t float_to_half(float f) {
  uint32_t x = std::bit_cast<uint32_t>(f);
  const uint32_t sign = (x >> 16) & 0x8000u;
  x &= 0x7fffffffu;

  if (x >= 0x7f800000u) {  // inf / nan
    const uint32_t mant = (x > 0x7f800000u) ? 0x0200u : 0;
    return static_cast<uint16_t>(sign | 0x7c00u | mant);
  }
  if (x >= 0x47800000u) {  // overflows half range -> inf
    return static_cast<uint16_t>(sign | 0x7c00u);
  }
  if (x < 0x38800000u) {  // subnormal half or zero
    if (x < 0x33000000u) return static_cast<uint16_t>(sign);  // below half of the smallest step
    const int shift = 126 - static_cast<int>(x >> 23);  // in [14, 24]
    const uint32_t mant = (x & 0x007fffffu) | 0x00800000u;
    const uint32_t rounded = mant >> shift;
    const uint32_t rem = mant & ((1u << shift) - 1);
    const uint32_t halfway = 1u << (shift - 1);
    uint32_t r = rounded;
    if (rem > halfway || (rem == halfway && (rounded & 1u))) r += 1;
    return static_cast<uint16_t>(sign | r);
  }
  // normal range
  uint32_t mant = x & 0x007fffffu;
  const uint32_t exp = (x >> 23) - 127 + 15;
  uint32_t r = (exp << 10) | (mant >> 13);
  const uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) r += 1;
  return static_cast<uint16_t>(sign | r);
}

inline float half_to_float(uint16_t h) {
  const uint32_t sign = (static_cast<uint32_t>(h) & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;

  uint32_t bits;
  if (exp == 0x1fu) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        mant <<= 1;
        ++e;
      } while ((mant & 0x400u) == 0);
      bits = sign | ((112u - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else {
    bits = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace vpr
