#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vpr/image.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

struct EncoderConfig {
  int image_h = 64;
  int image_w = 64;
  int patch = 8;
  int depth = 4;
  int dim = 64;
  int heads = 4;
  int channels = 3;
  int global_dim = 256;
  int local_dim = 128;

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int tokens() const { return grid_h() * grid_w(); }

  void validate() const {
    if (patch <= 0 || image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("image dimensions must be divisible by the patch size");
    if (depth < 2) throw ConfigError("encoder needs at least two layers");
    if (dim % heads != 0) throw ConfigError("token dim must be divisible by heads");
  }
};

// Everything the backbone produces for one image.
struct EncodedImage {
  std::vector<float> global;   // unit-norm, global_dim
  Tensor<float> locals;        // tokens x local_dim, unit-norm rows
  Tensor<float> attn_map;      // grid_h x grid_w, patch share of the CLS attention row
  float cls_self_attention = 0.0f;
  std::vector<std::pair<float, float>> coords;  // normalized (x, y) per token
};

// Registers all backbone parameters under "encoder." names.
// The patch projection bias starts at -W^T * (0.5 * ones): mid-gray patches
// map to zero tokens, which keeps token geometry spread out instead of
// letting the shared brightness component dominate every local feature.
template <typename T>
void add_encoder_params(ParamSet<T>& ps, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const T std_ = T(0.02);
  const int in_dim = cfg.patch * cfg.patch * cfg.channels;
  const T proj_std = T(1) / std::sqrt(static_cast<T>(in_dim));
  Tensor<T> proj_w = randn<T>({in_dim, cfg.dim}, rng, proj_std);
  Tensor<T> proj_b({1, cfg.dim});
  for (int j = 0; j < cfg.dim; ++j) {
    T acc = T(0);
    for (int i = 0; i < in_dim; ++i) acc += proj_w.at(i, j);
    proj_b.data[static_cast<size_t>(j)] = T(-0.5) * acc;
  }
  ps.add("encoder.patch_proj.w", std::move(proj_w));
  ps.add("encoder.patch_proj.b", std::move(proj_b));
  ps.add("encoder.cls", randn<T>({1, cfg.dim}, rng, std_));
  ps.add("encoder.pos", randn<T>({cfg.tokens() + 1, cfg.dim}, rng, std_));
  for (int l = 0; l < cfg.depth; ++l)
    add_layer_params(ps, "encoder.layer" + std::to_string(l), cfg.dim, rng, std_);
  ps.add("encoder.global_head.w", randn<T>({cfg.dim, cfg.global_dim}, rng, std_));
  ps.add("encoder.global_head.b", Tensor<T>::zeros({1, cfg.global_dim}));
  ps.add("encoder.local_head.w", randn<T>({cfg.dim, cfg.local_dim}, rng, std_));
  ps.add("encoder.local_head.b", Tensor<T>::zeros({1, cfg.local_dim}));
}

// Bilinear resampling of the learned position table to a new patch grid.
// Row 0 (the class token position) passes through unchanged. Corner-aligned,
// so an unchanged grid reproduces the input bit for bit.
template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pe, int old_gh, int old_gw, int new_gh,
                                int new_gw) {
  if (pe.rows() != old_gh * old_gw + 1) throw ShapeError("interpolate_pos_embed: bad grid");
  if (new_gh <= 0 || new_gw <= 0) throw ShapeError("interpolate_pos_embed: bad target grid");
  const int d = pe.cols();
  Tensor<T> out({new_gh * new_gw + 1, d});
  for (int j = 0; j < d; ++j) out.at(0, j) = pe.at(0, j);
  for (int r = 0; r < new_gh; ++r) {
    const double fy = new_gh == 1 ? 0.0
                                  : static_cast<double>(r) * (old_gh - 1) / (new_gh - 1);
    const int y0 = std::min(static_cast<int>(fy), old_gh - 1);
    const int y1 = std::min(y0 + 1, old_gh - 1);
    const double wy = fy - y0;
    for (int c = 0; c < new_gw; ++c) {
      const double fx = new_gw == 1 ? 0.0
                                    : static_cast<double>(c) * (old_gw - 1) / (new_gw - 1);
      const int x0 = std::min(static_cast<int>(fx), old_gw - 1);
      const int x1 = std::min(x0 + 1, old_gw - 1);
      const double wx = fx - x0;
      for (int j = 0; j < d; ++j) {
        if (wy == 0.0 && wx == 0.0) {  // exact grid point: copy, no arithmetic
          out.at(1 + r * new_gw + c, j) = pe.at(1 + y0 * old_gw + x0, j);
          continue;
        }
        const double v00 = pe.at(1 + y0 * old_gw + x0, j);
        const double v01 = pe.at(1 + y0 * old_gw + x1, j);
        const double v10 = pe.at(1 + y1 * old_gw + x0, j);
        const double v11 = pe.at(1 + y1 * old_gw + x1, j);
        const double top = v00 * (1.0 - wx) + v01 * wx;
        const double bot = v10 * (1.0 - wx) + v11 * wx;
        out.at(1 + r * new_gw + c, j) = static_cast<T>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return out;
}

// Splits an image into p x p patches, projects them to tokens, prepends the
// class token, and adds the (possibly resized) position embedding.
// Returns the (n+1) x d token matrix for an image of arbitrary p-divisible
// size; cfg fixes the patch size and dims, the stored position table is
// resampled when the grid differs.
template <typename T>
Var<T> patchify(BoundParams<T>& p, const Tensor<T>& image, const EncoderConfig& cfg) {
  if (image.ndim() != 3) throw ShapeError("patchify: image must be h x w x c");
  const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
  if (c != cfg.channels) throw ShapeError("patchify: channel count mismatch");
  const int ps = cfg.patch;
  if (h % ps != 0 || w % ps != 0)
    throw ShapeError("patchify: image dimensions not divisible by patch size");
  const int gh = h / ps, gw = w / ps, n = gh * gw;

  Tensor<T> patches({n, ps * ps * c});
  for (int gr = 0; gr < gh; ++gr)
    for (int gc = 0; gc < gw; ++gc) {
      const int ti = gr * gw + gc;
      int k = 0;
      for (int py = 0; py < ps; ++py)
        for (int px = 0; px < ps; ++px)
          for (int ch = 0; ch < c; ++ch)
            patches.at(ti, k++) =
                image.data[((static_cast<size_t>(gr * ps + py) * w) + gc * ps + px) * c + ch];
    }

  Tape<T>& tape = p.tape();
  Var<T> tok = linear(tape.constant(std::move(patches)), p("encoder.patch_proj.w"),
                      p("encoder.patch_proj.b"));
  Var<T> seq = concat_rows<T>({p("encoder.cls"), tok});

  Var<T> pos = p("encoder.pos");
  if (gh != cfg.grid_h() || gw != cfg.grid_w())
    pos = tape.constant(
        interpolate_pos_embed(pos.value(), cfg.grid_h(), cfg.grid_w(), gh, gw));
  return add(seq, pos);
}

// Full backbone graph: global/local descriptors plus the class-token
// attention row of the last layer.
template <typename T>
struct EncoderGraph {
  Var<T> global;    // 1 x global_dim, unit norm
  Var<T> locals;    // n x local_dim, unit-norm rows
  Var<T> attn_row;  // 1 x (n+1), head-averaged CLS row of the last layer
  int grid_h = 0, grid_w = 0;
};

template <typename T>
EncoderGraph<T> encode_graph(BoundParams<T>& p, const Tensor<T>& image,
                             const EncoderConfig& cfg) {
  Var<T> seq = patchify(p, image, cfg);
  const int n = seq.rows() - 1;
  const int gh = image.shape[0] / cfg.patch, gw = image.shape[1] / cfg.patch;

  Var<T> penultimate;
  Var<T> last_attn;
  for (int l = 0; l < cfg.depth; ++l) {
    LayerOut<T> out =
        transformer_layer(seq, p.layer_weights("encoder.layer" + std::to_string(l)), cfg.heads);
    if (l == cfg.depth - 2) penultimate = out.tokens;
    if (l == cfg.depth - 1) last_attn = out.attn;
    seq = out.tokens;
  }

  Var<T> global = l2norm_rows(
      linear(slice_rows(seq, 0, 1), p("encoder.global_head.w"), p("encoder.global_head.b")));
  Var<T> locals = l2norm_rows(linear(slice_rows(penultimate, 1, n + 1),
                                     p("encoder.local_head.w"), p("encoder.local_head.b")));
  Var<T> attn_row = slice_rows(last_attn, 0, 1);
  return {global, locals, attn_row, gh, gw};
}

// Normalized patch-center coordinates in row-major token order.
std::vector<std::pair<float, float>> token_coords(int grid_h, int grid_w);

// Inference-path encode: runs the graph on a scratch tape over read-only
// parameters and extracts plain tensors. Deterministic per (params, image).
EncodedImage encode(const ParamSet<float>& params, const Image& image,
                    const EncoderConfig& cfg);

// Encoder config <-> checkpoint meta array.
std::vector<float> encoder_config_to_meta(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_meta(const std::vector<float>& meta);

}  // namespace vpr
