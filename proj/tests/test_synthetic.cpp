#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vpr/synthetic.hpp"

using namespace vpr;
namespace fs = std::filesystem;

namespace {
WorldSpec small_spec(uint64_t seed = 7) {
  WorldSpec spec;
  spec.seed = seed;
  spec.n_places = 12;
  spec.views_per_place = 4;
  spec.refs_per_place = 2;
  spec.extent_m = 500.0;
  return spec;
}
}  // namespace

TEST_CASE("generation is deterministic under a fixed seed") {
  Dataset a = generate(small_spec());
  Dataset b = generate(small_spec());
  REQUIRE(a.images.size() == b.images.size());
  for (size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].id == b.images[i].id);
    CHECK(a.images[i].east == b.images[i].east);
    CHECK(a.images[i].north == b.images[i].north);
    CHECK(a.images[i].image.pix == b.images[i].image.pix);
  }
  Dataset c = generate(small_spec(8));
  CHECK(c.images[0].image.pix != a.images[0].image.pix);
}

TEST_CASE("distinct places stay at least 60 m apart") {
  Dataset ds = generate(small_spec());
  // compare per-place centers via their first view; views jitter <= ~5 m
  for (size_t i = 0; i < ds.images.size(); ++i)
    for (size_t j = i + 1; j < ds.images.size(); ++j) {
      const auto& a = ds.images[i];
      const auto& b = ds.images[j];
      const bool same_place = a.id.substr(0, 5) == b.id.substr(0, 5);
      const double d = std::hypot(a.east - b.east, a.north - b.north);
      if (same_place)
        CHECK(d < 10.0);  // positives stay inside the 10 m threshold
      else
        CHECK(d > 25.0);  // everything else is a valid negative
    }
}

TEST_CASE("counts, splits, and the 25 m guarantee hold") {
  WorldSpec spec = small_spec();
  spec.n_places = 20;
  Dataset ds = generate(spec);
  CHECK(ds.images.size() == 80u);
  const auto queries = ds.indices_of(Split::query);
  const auto refs = ds.indices_of(Split::reference);
  CHECK(queries.size() == 40u);
  CHECK(refs.size() == 40u);
  for (int qi : queries) {
    bool close = false;
    for (int ri : refs) {
      const auto& q = ds.images[static_cast<size_t>(qi)];
      const auto& r = ds.images[static_cast<size_t>(ri)];
      if (std::hypot(q.east - r.east, q.north - r.north) <= 25.0) close = true;
    }
    CHECK(close);
  }
}

TEST_CASE("a too-small extent is rejected") {
  WorldSpec spec = small_spec();
  spec.extent_m = 100.0;  // 4x4 grid of 25 m cells, under the 60 m spacing
  CHECK_THROWS_AS((void)generate(spec), ConfigError);
}

TEST_CASE("dataset round-trips through the on-disk layout") {
  WorldSpec spec = small_spec();
  spec.n_places = 4;
  Dataset ds = generate(spec);
  const std::string dir = "test_ds_roundtrip";
  write_dataset(ds, dir);
  Dataset back = load_dataset(dir);
  REQUIRE(back.images.size() == ds.images.size());
  for (size_t i = 0; i < ds.images.size(); ++i) {
    CHECK(back.images[i].id == ds.images[i].id);
    CHECK(back.images[i].split == ds.images[i].split);
    CHECK(std::abs(back.images[i].east - ds.images[i].east) < 1e-9);
    // pixel data quantized to 8 bits on write
    REQUIRE(back.images[i].image.pix.size() == ds.images[i].image.pix.size());
    for (size_t p = 0; p < ds.images[i].image.pix.size(); ++p)
      CHECK(std::abs(back.images[i].image.pix[p] - ds.images[i].image.pix[p]) <= 0.5f / 255.0f + 1e-6f);
  }
  fs::remove_all(dir);
}

TEST_CASE("ingest round-trips an exported store") {
  std::mt19937_64 rng(3);
  FeatureStore store;
  for (int i = 0; i < 6; ++i) {
    PlaceRecord rec;
    rec.id = "img" + std::to_string(i);
    rec.east = i * 50.0;
    rec.north = 1.0;
    rec.split = i % 2 ? Split::query : Split::reference;
    std::normal_distribution<double> d(0.0, 1.0);
    rec.global.resize(kGlobalDim);
    double norm = 0;
    for (auto& v : rec.global) {
      v = static_cast<float>(d(rng));
      norm += static_cast<double>(v) * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : rec.global) v = static_cast<float>(v / norm);
    for (int t = 0; t < 5; ++t) {
      LocalDescriptor lr;
      lr.x = 0.1f * t;
      lr.y = 0.2f;
      lr.attention = 0.5f - 0.01f * t;
      lr.feature.assign(kLocalFeatureDim, 0.0f);
      lr.feature[static_cast<size_t>(t)] = 1.0f;
      rec.locals.records.push_back(std::move(lr));
    }
    store.add(std::move(rec));
  }
  const std::string dir = "test_ingest_roundtrip";
  export_features(store, dir);
  std::vector<PlaceRecord> records = ingest(dir);
  REQUIRE(records.size() == store.size());
  FeatureStore rebuilt;
  for (auto& rec : records) rebuilt.add(std::move(rec));
  for (size_t i = 0; i < store.size(); ++i) {
    CHECK(rebuilt.at(store.at(i).id).global == store.at(i).global);
    CHECK(rebuilt.at(store.at(i).id).locals.size() == store.at(i).locals.size());
  }
  fs::remove_all(dir);
}

TEST_CASE("ingest reports missing files and bad norms by name") {
  std::mt19937_64 rng(4);
  FeatureStore store;
  PlaceRecord rec;
  rec.id = "keep";
  rec.split = Split::reference;
  std::normal_distribution<double> d(0.0, 1.0);
  rec.global.resize(kGlobalDim);
  double norm = 0;
  for (auto& v : rec.global) {
    v = static_cast<float>(d(rng));
    norm += static_cast<double>(v) * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : rec.global) v = static_cast<float>(v / norm);
  store.add(rec);

  const std::string dir = "test_ingest_errors";
  export_features(store, dir);

  // manifest row without a feature file
  {
    std::ofstream m(fs::path(dir) / "manifest.csv", std::ios::app);
    m << "ghost,0,0,reference\n";
  }
  try {
    (void)ingest(dir);
    FAIL("expected an ingest error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("ghost") != std::string::npos);
  }
  fs::remove_all(dir);

  // non-unit local feature gets a normalization hint
  FeatureStore store2;
  PlaceRecord rec2 = rec;
  rec2.id = "badloc";
  LocalDescriptor lr;
  lr.feature.assign(kLocalFeatureDim, 0.5f);  // norm far from 1
  rec2.locals.records.push_back(lr);
  store2.add(rec2);
  export_features(store2, dir);
  try {
    (void)ingest(dir);
    FAIL("expected an ingest error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("badloc") != std::string::npos);
    CHECK(msg.find("L2-normalize") != std::string::npos);
  }
  fs::remove_all(dir);
}
