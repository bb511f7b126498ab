#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "vpr/encoder.hpp"
#include "vpr/io.hpp"

namespace vpr {

// One selected token: normalized patch-center coordinates, its attention
// value from the CLS row, and the unit-norm reduced feature.
struct LocalDescriptor {
  float x = 0, y = 0;
  float attention = 0;
  std::vector<float> feature;
};

// Selected tokens in descending attention order.
struct LocalDescriptorSet {
  std::vector<LocalDescriptor> records;

  size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  int feature_dim() const { return records.empty() ? 0 : static_cast<int>(records[0].feature.size()); }
};

enum class ScalarType : uint8_t { f32 = 0, f16 = 1 };

constexpr int kLocalFeatureDim = 128;
constexpr int kLocalRecordDims = kLocalFeatureDim + 3;  // x, y, A plus the feature

inline size_t scalar_width(ScalarType t) { return t == ScalarType::f32 ? 4 : 2; }

// Exact serialized payload size (excluding the 5-byte header).
inline size_t local_payload_bytes(size_t count, ScalarType t) {
  return count * kLocalRecordDims * scalar_width(t);
}

// Token order of a top-k attention selection: highest value first, ties
// toward the lower row-major index, so runs are reproducible. Shared by the
// plain and the differentiable selection paths.
template <typename T>
std::vector<int> top_attention_indices(const T* attn, int n, int k) {
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (attn[a] != attn[b]) return attn[a] > attn[b];
    return a < b;
  });
  order.resize(static_cast<size_t>(std::min(k, n)));
  return order;
}

// Keeps the min(k, n) tokens with the highest attention values.
LocalDescriptorSet select_top_k(const EncodedImage& encoded, int k);

// Record layout (little-endian): count u32, dtype u8, then per record
// x, y, A, f[128] in the declared scalar type.
void quantize_into(ByteWriter& w, const LocalDescriptorSet& set, ScalarType dtype);
std::vector<uint8_t> quantize(const LocalDescriptorSet& set, ScalarType dtype);
LocalDescriptorSet dequantize_from(ByteReader& r);
LocalDescriptorSet dequantize(const std::vector<uint8_t>& bytes);

}  // namespace vpr
