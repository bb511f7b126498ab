#include "vpr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vpr/error.hpp"
#include "vpr/io.hpp"
#include "vpr/util.hpp"

namespace fs = std::filesystem;

namespace vpr {

void WorldSpec::validate() const {
  if (n_places < 2) throw ConfigError("need at least two places");
  if (views_per_place < 2 || refs_per_place < 1 || refs_per_place >= views_per_place)
    throw ConfigError("each place needs at least one reference and one query view");
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_places))));
  const double cell = extent_m / side;
  if (cell < min_spacing_m)
    throw ConfigError("extent too small for the place spacing: " + std::to_string(side) +
                      " cells of " + std::to_string(cell) + " m < " +
                      std::to_string(min_spacing_m) + " m");
  if (2.0 * geo_jitter_m * 1.4143 >= 10.0)
    throw ConfigError("geo jitter too large: same-place views must stay within 10 m");
}

namespace {

struct Style {
  float c0[3], c1[3];
  float fx, fy, phase, amp;
};

Style make_style(uint64_t seed, int style_id) {
  std::mt19937_64 rng = make_rng(seed, 0x57, static_cast<uint64_t>(style_id));
  std::uniform_real_distribution<float> mid(0.25f, 0.75f);
  std::uniform_real_distribution<float> freq(1.0f, 3.0f);
  std::uniform_real_distribution<float> ph(0.0f, 6.28318f);
  Style s;
  for (int c = 0; c < 3; ++c) s.c0[c] = mid(rng);
  for (int c = 0; c < 3; ++c) s.c1[c] = mid(rng);
  s.fx = freq(rng);
  s.fy = freq(rng);
  s.phase = ph(rng);
  s.amp = 0.08f;
  return s;
}

struct Glyph {
  int type;  // 0 rect, 1 disc, 2 checker, 3 cross
  int x, y, size;
  float color[3];
};

// Scene canvas before per-view augmentation.
Image render_place(const WorldSpec& spec, int place) {
  const Style style = make_style(spec.seed, place % spec.n_styles);
  Image img(spec.image_h, spec.image_w, 3);
  for (int y = 0; y < spec.image_h; ++y)
    for (int x = 0; x < spec.image_w; ++x) {
      const float u = static_cast<float>(x + y) / (spec.image_w + spec.image_h);
      const float wave = style.amp * std::sin(6.28318f * (style.fx * x / spec.image_w +
                                                          style.fy * y / spec.image_h) +
                                              style.phase);
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = style.c0[c] * (1.0f - u) + style.c1[c] * u + wave;
    }

  std::mt19937_64 rng = make_rng(spec.seed, 0x91ace, static_cast<uint64_t>(place));
  std::uniform_int_distribution<int> type_d(0, 3);
  std::uniform_int_distribution<int> size_d(14, 18);
  std::uniform_real_distribution<float> dark(0.02f, 0.22f);
  std::uniform_real_distribution<float> bright(0.78f, 0.98f);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int g = 0; g < spec.glyphs_per_place; ++g) {
    Glyph gl;
    gl.type = type_d(rng);
    gl.size = size_d(rng);
    std::uniform_int_distribution<int> pos_x(2, std::max(3, spec.image_w - gl.size - 2));
    std::uniform_int_distribution<int> pos_y(2, std::max(3, spec.image_h - gl.size - 2));
    gl.x = (pos_x(rng) / 4) * 4;
    gl.y = (pos_y(rng) / 4) * 4;
    for (int c = 0; c < 3; ++c) gl.color[c] = coin(rng) ? bright(rng) : dark(rng);

    for (int dy = 0; dy < gl.size; ++dy)
      for (int dx = 0; dx < gl.size; ++dx) {
        bool inside = true;
        const float cx = gl.size / 2.0f - 0.5f;
        switch (gl.type) {
          case 1: {
            const float rx = dx - cx, ry = dy - cx;
            inside = rx * rx + ry * ry <= cx * cx;
            break;
          }
          case 2:
            inside = ((dx / 4) + (dy / 4)) % 2 == 0;
            break;
          case 3:
            inside = std::abs(dx - cx) < 3.0f || std::abs(dy - cx) < 3.0f;
            break;
          default:
            break;
        }
        if (!inside) continue;
        const int px = gl.x + dx, py = gl.y + dy;
        if (px < 0 || px >= spec.image_w || py < 0 || py >= spec.image_h) continue;
        for (int c = 0; c < 3; ++c) img.at(py, px, c) = gl.color[c];
      }
  }
  for (auto& v : img.pix) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

Image augment_view(const WorldSpec& spec, const Image& canvas, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> shift_d(-spec.shift_px, spec.shift_px);
  std::uniform_real_distribution<float> unit(-1.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_sigma));
  const int dx = shift_d(rng), dy = shift_d(rng);
  const float gain = 1.0f + unit(rng) * static_cast<float>(spec.brightness);

  Image out(canvas.h, canvas.w, 3);
  for (int y = 0; y < canvas.h; ++y)
    for (int x = 0; x < canvas.w; ++x) {
      const int sy = std::clamp(y + dy, 0, canvas.h - 1);
      const int sx = std::clamp(x + dx, 0, canvas.w - 1);
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = std::clamp(canvas.at(sy, sx, c) * gain + noise(rng), 0.0f, 1.0f);
    }
  return out;
}

}  // namespace

Dataset generate(const WorldSpec& spec) {
  spec.validate();
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.n_places))));
  const double cell = spec.extent_m / side;
  const double center_jitter = std::min(15.0, (cell - spec.min_spacing_m) / 2.0);

  Dataset ds;
  char idbuf[64];
  for (int place = 0; place < spec.n_places; ++place) {
    std::mt19937_64 geo_rng = make_rng(spec.seed, 0x6e0, static_cast<uint64_t>(place));
    std::uniform_real_distribution<double> jit(-center_jitter, center_jitter);
    const double cx = (place % side + 0.5) * cell + jit(geo_rng);
    const double cy = (place / side + 0.5) * cell + jit(geo_rng);

    const Image canvas = render_place(spec, place);
    for (int view = 0; view < spec.views_per_place; ++view) {
      std::mt19937_64 view_rng =
          make_rng(spec.seed, 0xa1b2, static_cast<uint64_t>(place), static_cast<uint64_t>(view));
      std::uniform_real_distribution<double> vjit(-spec.geo_jitter_m, spec.geo_jitter_m);
      DataImage img;
      std::snprintf(idbuf, sizeof(idbuf), "p%04d_v%d", place, view);
      img.id = idbuf;
      img.east = cx + vjit(view_rng);
      img.north = cy + vjit(view_rng);
      img.split = view < spec.refs_per_place ? Split::reference : Split::query;
      img.image = augment_view(spec, canvas, view_rng);
      ds.images.push_back(std::move(img));
    }
  }
  ds.rebuild_index();
  return ds;
}

std::vector<PlaceRecord> ingest(const std::string& features_dir) {
  const fs::path dir(features_dir);
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error("cannot open manifest in " + features_dir);

  std::vector<std::string> problems;
  std::vector<PlaceRecord> records;
  std::string line;
  bool first = true;
  std::vector<std::string> manifest_ids;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      continue;
    }
    std::stringstream ss(line);
    std::string id, east, north, split;
    if (!std::getline(ss, id, ',') || !std::getline(ss, east, ',') ||
        !std::getline(ss, north, ',') || !std::getline(ss, split)) {
      problems.push_back("malformed manifest row: " + line);
      continue;
    }
    manifest_ids.push_back(id);
    const fs::path feat = dir / (id + ".feat");
    if (!fs::exists(feat)) {
      problems.push_back("missing feature file for manifest id '" + id + "'");
      continue;
    }
    PlaceRecord rec;
    rec.id = id;
    rec.east = std::stod(east);
    rec.north = std::stod(north);
    if (split == "query")
      rec.split = Split::query;
    else if (split == "reference")
      rec.split = Split::reference;
    else {
      problems.push_back("unknown split '" + split + "' for " + id);
      continue;
    }
    try {
      const std::vector<uint8_t> bytes = read_file(feat.string());
      ByteReader r(bytes);
      rec.global.resize(kGlobalDim);
      r.get_bytes(rec.global.data(), rec.global.size() * sizeof(float), "global descriptor");
      rec.locals = dequantize_from(r);
      if (!r.at_end()) throw FormatError("trailing bytes", r.offset());
    } catch (const std::exception& e) {
      problems.push_back(id + ": " + e.what());
      continue;
    }
    double gnorm = 0;
    for (float v : rec.global) gnorm += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(gnorm) - 1.0) > 1e-2) {
      problems.push_back(id + ": global descriptor is not unit-norm; L2-normalize before ingest");
      continue;
    }
    bool locals_ok = true;
    for (const auto& lr : rec.locals.records) {
      double n = 0;
      for (float v : lr.feature) n += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(n) - 1.0) > 1e-2) {
        problems.push_back(id + ": local feature is not unit-norm; L2-normalize before ingest");
        locals_ok = false;
        break;
      }
    }
    if (!locals_ok) continue;
    records.push_back(std::move(rec));
  }

  // feature files with no manifest row are reported too
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".feat") continue;
    const std::string stem = entry.path().stem().string();
    if (std::find(manifest_ids.begin(), manifest_ids.end(), stem) == manifest_ids.end())
      problems.push_back("feature file '" + stem + "' has no manifest row");
  }

  if (!problems.empty()) {
    std::string msg = "ingest found " + std::to_string(problems.size()) + " problem(s):";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw Error(msg);
  }
  return records;
}

void export_features(const FeatureStore& store, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw Error("cannot write manifest in " + dir);
  manifest << "id,east_m,north_m,split\n";
  manifest.precision(17);
  for (const auto& rec : store.records()) {
    manifest << rec.id << ',' << rec.east << ',' << rec.north << ','
             << (rec.split == Split::query ? "query" : "reference") << '\n';
    ByteWriter w;
    w.put_bytes(rec.global.data(), rec.global.size() * sizeof(float));
    quantize_into(w, rec.locals, store.local_dtype());
    write_file((fs::path(dir) / (rec.id + ".feat")).string(), w.bytes());
  }
}

}  // namespace vpr
