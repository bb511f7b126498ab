#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "vpr/checkpoint.hpp"
#include "vpr/encoder.hpp"
#include "vpr/io.hpp"

using namespace vpr;

namespace {

ParamSet<float> toy_params(const EncoderConfig& cfg, uint64_t seed) {
  ParamSet<float> ps;
  std::mt19937_64 rng(seed);
  add_encoder_params(ps, cfg, rng);
  return ps;
}

Image random_image(int h, int w, uint64_t seed) {
  Image img(h, w, 3);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : img.pix) v = d(rng);
  return img;
}

}  // namespace

TEST_CASE("patchify produces 1200 tokens for 640x480 at patch 16") {
  EncoderConfig cfg;
  cfg.image_h = 480;
  cfg.image_w = 640;
  cfg.patch = 16;
  cfg.depth = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.channels = 1;
  ParamSet<float> ps = toy_params(cfg, 1);
  Tape<float> tape;
  BoundParams<float> bound(tape, ps);
  Tensor<float> image({480, 640, 1});
  Var<float> seq = patchify(bound, image, cfg);
  CHECK(seq.rows() == 1201);  // 1200 patch tokens plus the class token
  CHECK(seq.cols() == 8);
}

TEST_CASE("patchify grid arithmetic and divisibility error") {
  EncoderConfig cfg;  // 64x64, patch 8
  ParamSet<float> ps = toy_params(cfg, 2);
  Tape<float> tape;
  BoundParams<float> bound(tape, ps);
  Var<float> seq = patchify(bound, Tensor<float>({64, 64, 3}), cfg);
  CHECK(seq.rows() == 65);
  CHECK(cfg.grid_h() == 8);
  CHECK(cfg.grid_w() == 8);

  CHECK_THROWS_AS((void)patchify(bound, Tensor<float>({60, 64, 3}), cfg), ShapeError);
}

TEST_CASE("zero image with zero projection bias yields the position rows") {
  EncoderConfig cfg;
  ParamSet<float> ps = toy_params(cfg, 3);
  auto& bias = ps.at("encoder.patch_proj.b").value;
  std::fill(bias.data.begin(), bias.data.end(), 0.0f);  // default init centers mid-gray
  Tape<float> tape;
  BoundParams<float> bound(tape, ps);
  Var<float> seq = patchify(bound, Tensor<float>({64, 64, 3}), cfg);
  const Tensor<float>& pos = ps.at("encoder.pos").value;
  for (int i = 1; i < seq.rows(); ++i)
    for (int j = 0; j < seq.cols(); ++j) CHECK(seq.value().at(i, j) == pos.at(i, j));
}

TEST_CASE("position interpolation: unchanged grid is bit-identical") {
  std::mt19937_64 rng(4);
  Tensor<float> pe = randn<float>({8 * 8 + 1, 16}, rng, 1.0f);
  Tensor<float> out = interpolate_pos_embed(pe, 8, 8, 8, 8);
  REQUIRE(out.shape == pe.shape);
  for (size_t i = 0; i < pe.data.size(); ++i) CHECK(out.data[i] == pe.data[i]);
}

TEST_CASE("position interpolation preserves constant rows") {
  Tensor<float> pe = Tensor<float>::full({2 * 2 + 1, 4}, 0.625f);
  Tensor<float> out = interpolate_pos_embed(pe, 2, 2, 5, 3);
  CHECK(out.rows() == 16);
  for (float v : out.data) CHECK(v == doctest::Approx(0.625f));
}

TEST_CASE("position interpolation matches hand-evaluated bilinear weights") {
  // 2x2 grid with values 0,1,2,3 upsampled to 3x3
  Tensor<float> pe({5, 1});
  pe.data = {9.0f, 0.0f, 1.0f, 2.0f, 3.0f};  // row 0 is the class position
  Tensor<float> out = interpolate_pos_embed(pe, 2, 2, 3, 3);
  CHECK(out.data[0] == 9.0f);  // class row untouched
  const float expected[9] = {0.0f, 0.5f, 1.0f, 1.0f, 1.5f, 2.0f, 2.0f, 2.5f, 3.0f};
  for (int i = 0; i < 9; ++i)
    CHECK(out.data[static_cast<size_t>(i) + 1] == doctest::Approx(expected[i]).epsilon(1e-7));
}

TEST_CASE("encode emits the documented shapes and unit-norm descriptors") {
  EncoderConfig cfg;  // 64x64, p=8, L=4, d=64
  ParamSet<float> ps = toy_params(cfg, 5);
  Image img = random_image(64, 64, 6);
  EncodedImage enc = encode(ps, img, cfg);

  CHECK(enc.global.size() == 256);
  CHECK(enc.locals.rows() == 64);
  CHECK(enc.locals.cols() == 128);
  CHECK(enc.attn_map.rows() == 8);
  CHECK(enc.attn_map.cols() == 8);
  CHECK(enc.coords.size() == 64);

  double norm = 0;
  for (float v : enc.global) norm += static_cast<double>(v) * v;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
  for (int i = 0; i < enc.locals.rows(); ++i) {
    double rn = 0;
    for (int j = 0; j < enc.locals.cols(); ++j)
      rn += static_cast<double>(enc.locals.at(i, j)) * enc.locals.at(i, j);
    CHECK(std::sqrt(rn) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("encoding is deterministic") {
  EncoderConfig cfg;
  ParamSet<float> ps = toy_params(cfg, 7);
  Image img = random_image(64, 64, 8);
  EncodedImage a = encode(ps, img, cfg);
  EncodedImage b = encode(ps, img, cfg);
  CHECK(a.global == b.global);
  CHECK(a.locals.data == b.locals.data);
  CHECK(a.attn_map.data == b.attn_map.data);
}

TEST_CASE("attention map plus the CLS self-attention entry sums to one") {
  EncoderConfig cfg;
  ParamSet<float> ps = toy_params(cfg, 9);
  Image img = random_image(64, 64, 10);
  EncodedImage enc = encode(ps, img, cfg);
  double sum = enc.cls_self_attention;
  for (float v : enc.attn_map.data) {
    CHECK(v >= 0.0f);
    sum += v;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  // patch entries alone stay at or below one
  CHECK(sum - enc.cls_self_attention <= 1.0 + 1e-5);
}

TEST_CASE("changing resolution changes token count but not descriptor dims") {
  EncoderConfig cfg;
  ParamSet<float> ps = toy_params(cfg, 11);
  EncodedImage small = encode(ps, random_image(64, 64, 12), cfg);
  EncodedImage tall = encode(ps, random_image(96, 64, 13), cfg);
  CHECK(small.locals.rows() == 64);
  CHECK(tall.locals.rows() == 96);        // 12 x 8 grid
  CHECK(tall.attn_map.rows() == 12);
  CHECK(tall.locals.cols() == 128);
  CHECK(tall.global.size() == 256);
}

TEST_CASE("checkpoint round-trips parameters bit for bit") {
  EncoderConfig cfg;
  cfg.depth = 2;
  ParamSet<float> ps = toy_params(cfg, 14);
  const std::string path = "test_ckpt_roundtrip.r2pk";
  save_checkpoint(path, ps, {{"meta.encoder", encoder_config_to_meta(cfg)}});
  Checkpoint ck = load_checkpoint(path);
  std::remove(path.c_str());

  EncoderConfig cfg2 = encoder_config_from_meta(ck.meta.at("meta.encoder"));
  CHECK(cfg2.image_h == cfg.image_h);
  CHECK(cfg2.depth == cfg.depth);
  size_t checked = 0;
  for (const auto& [name, p] : ps) {
    const auto& q = ck.params.at(name);
    REQUIRE(q.value.shape == p.value.shape);
    CHECK(q.value.data == p.value.data);
    ++checked;
  }
  CHECK(checked == ps.size());
}

TEST_CASE("checkpoint loader reports truncation with an offset") {
  EncoderConfig cfg;
  cfg.depth = 2;
  ParamSet<float> ps = toy_params(cfg, 15);
  const std::string path = "test_ckpt_trunc.r2pk";
  save_checkpoint(path, ps, {});
  auto bytes = read_file(path);
  bytes.resize(bytes.size() / 2);
  write_file(path, bytes);
  CHECK_THROWS_AS((void)load_checkpoint(path), FormatError);
  std::remove(path.c_str());
}
