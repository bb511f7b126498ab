#include "vpr/encoder.hpp"

namespace vpr {

std::vector<std::pair<float, float>> token_coords(int grid_h, int grid_w) {
  std::vector<std::pair<float, float>> coords;
  coords.reserve(static_cast<size_t>(grid_h) * grid_w);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c)
      coords.emplace_back((c + 0.5f) / grid_w, (r + 0.5f) / grid_h);
  return coords;
}

EncodedImage encode(const ParamSet<float>& params, const Image& image,
                    const EncoderConfig& cfg) {
  Tape<float> tape;
  BoundParams<float> bound(tape, params);
  EncoderGraph<float> g = encode_graph(bound, image.to_tensor(), cfg);

  EncodedImage out;
  out.global = g.global.value().data;
  out.locals = g.locals.value();
  const Tensor<float>& row = g.attn_row.value();
  out.cls_self_attention = row.data[0];
  out.attn_map = Tensor<float>({g.grid_h, g.grid_w});
  for (int i = 0; i < g.grid_h * g.grid_w; ++i)
    out.attn_map.data[static_cast<size_t>(i)] = row.data[static_cast<size_t>(i) + 1];
  out.coords = token_coords(g.grid_h, g.grid_w);
  return out;
}

std::vector<float> encoder_config_to_meta(const EncoderConfig& cfg) {
  return {static_cast<float>(cfg.image_h), static_cast<float>(cfg.image_w),
          static_cast<float>(cfg.patch),   static_cast<float>(cfg.depth),
          static_cast<float>(cfg.dim),     static_cast<float>(cfg.heads),
          static_cast<float>(cfg.channels), static_cast<float>(cfg.global_dim),
          static_cast<float>(cfg.local_dim)};
}

EncoderConfig encoder_config_from_meta(const std::vector<float>& meta) {
  if (meta.size() != 9) throw FormatError("bad encoder meta length");
  EncoderConfig cfg;
  cfg.image_h = static_cast<int>(meta[0]);
  cfg.image_w = static_cast<int>(meta[1]);
  cfg.patch = static_cast<int>(meta[2]);
  cfg.depth = static_cast<int>(meta[3]);
  cfg.dim = static_cast<int>(meta[4]);
  cfg.heads = static_cast<int>(meta[5]);
  cfg.channels = static_cast<int>(meta[6]);
  cfg.global_dim = static_cast<int>(meta[7]);
  cfg.local_dim = static_cast<int>(meta[8]);
  cfg.validate();
  return cfg;
}

}  // namespace vpr
