#include "vpr/local_features.hpp"

#include <algorithm>
#include <numeric>

#include "vpr/half.hpp"

namespace vpr {

LocalDescriptorSet select_top_k(const EncodedImage& encoded, int k) {
  if (k < 1) throw ConfigError("select_top_k: k must be at least 1");
  const int n = static_cast<int>(encoded.attn_map.numel());
  const std::vector<int> order = top_attention_indices(encoded.attn_map.data.data(), n, k);

  const int keep = static_cast<int>(order.size());
  LocalDescriptorSet set;
  set.records.reserve(static_cast<size_t>(keep));
  const int dim = encoded.locals.cols();
  for (int i = 0; i < keep; ++i) {
    const int t = order[static_cast<size_t>(i)];
    LocalDescriptor rec;
    rec.x = encoded.coords[static_cast<size_t>(t)].first;
    rec.y = encoded.coords[static_cast<size_t>(t)].second;
    rec.attention = encoded.attn_map.data[static_cast<size_t>(t)];
    rec.feature.resize(static_cast<size_t>(dim));
    for (int j = 0; j < dim; ++j) rec.feature[static_cast<size_t>(j)] = encoded.locals.at(t, j);
    set.records.push_back(std::move(rec));
  }
  return set;
}

void quantize_into(ByteWriter& w, const LocalDescriptorSet& set, ScalarType dtype) {
  for (const auto& rec : set.records)
    if (static_cast<int>(rec.feature.size()) != kLocalFeatureDim)
      throw FormatError("local feature dim must be " + std::to_string(kLocalFeatureDim));
  w.put<uint32_t>(static_cast<uint32_t>(set.records.size()));
  w.put<uint8_t>(static_cast<uint8_t>(dtype));
  auto put_scalar = [&](float v) {
    if (dtype == ScalarType::f32)
      w.put<float>(v);
    else
      w.put<uint16_t>(float_to_half(v));
  };
  for (const auto& rec : set.records) {
    put_scalar(rec.x);
    put_scalar(rec.y);
    put_scalar(rec.attention);
    for (float v : rec.feature) put_scalar(v);
  }
}

std::vector<uint8_t> quantize(const LocalDescriptorSet& set, ScalarType dtype) {
  ByteWriter w;
  quantize_into(w, set, dtype);
  return w.take();
}

LocalDescriptorSet dequantize_from(ByteReader& r) {
  const uint32_t count = r.get<uint32_t>("local record count");
  const uint8_t dtype_raw = r.get<uint8_t>("local dtype");
  if (dtype_raw > 1)
    throw FormatError("unknown local dtype " + std::to_string(dtype_raw), r.offset() - 1);
  const ScalarType dtype = static_cast<ScalarType>(dtype_raw);
  auto get_scalar = [&]() -> float {
    if (dtype == ScalarType::f32) return r.get<float>("local scalar");
    return half_to_float(r.get<uint16_t>("local scalar"));
  };
  LocalDescriptorSet set;
  set.records.resize(count);
  for (auto& rec : set.records) {
    rec.x = get_scalar();
    rec.y = get_scalar();
    rec.attention = get_scalar();
    rec.feature.resize(kLocalFeatureDim);
    for (auto& v : rec.feature) v = get_scalar();
  }
  return set;
}

LocalDescriptorSet dequantize(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  LocalDescriptorSet set = dequantize_from(r);
  if (!r.at_end()) throw FormatError("trailing bytes after local records", r.offset());
  return set;
}

}  // namespace vpr
