#pragma once

#include <string>
#include <vector>

#include "vpr/dataset.hpp"
#include "vpr/store.hpp"

namespace vpr {

// Procedural world on a planar meter grid. Places sit on well-separated grid
// cells; views of one place are augmented renderings of the same scene with
// a few meters of geo jitter. Backgrounds come from a small shared style
// pool so places are globally confusable, while per-place glyphs keep them
// locally distinctive.
struct WorldSpec {
  uint64_t seed = 7;
  int n_places = 200;
  int views_per_place = 4;
  int refs_per_place = 2;  // remaining views become queries
  double extent_m = 2000.0;
  int image_h = 64, image_w = 64;
  double min_spacing_m = 60.0;

  // augmentation ranges
  int shift_px = 3;
  double brightness = 0.15;
  double noise_sigma = 0.02;
  double geo_jitter_m = 3.5;  // keeps same-place views within 10 m of each other

  int n_styles = 8;
  int glyphs_per_place = 8;

  void validate() const;
};

Dataset generate(const WorldSpec& spec);

// Externally computed features: a manifest.csv plus one <id>.feat per image,
// each holding the store record layout (global 256 x f32, then the local
// descriptor blob). Validation failures are collected and reported together.
std::vector<PlaceRecord> ingest(const std::string& features_dir);

// Writes a store back out in the ingest layout.
void export_features(const FeatureStore& store, const std::string& dir);

}  // namespace vpr
