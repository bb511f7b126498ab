#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>

#include "vpr/half.hpp"
#include "vpr/local_features.hpp"
#include "vpr/store.hpp"

using namespace vpr;

namespace {

EncodedImage fake_encoded(int grid, uint64_t seed, int attn_levels = 0) {
  EncodedImage enc;
  const int n = grid * grid;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  enc.attn_map = Tensor<float>({grid, grid});
  for (auto& v : enc.attn_map.data) {
    v = d(rng);
    if (attn_levels > 0) v = std::floor(v * attn_levels) / attn_levels;  // force ties
  }
  enc.locals = Tensor<float>({n, kLocalFeatureDim});
  for (int i = 0; i < n; ++i) {
    double norm = 0;
    for (int j = 0; j < kLocalFeatureDim; ++j) {
      enc.locals.at(i, j) = d(rng) - 0.5f;
      norm += static_cast<double>(enc.locals.at(i, j)) * enc.locals.at(i, j);
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < kLocalFeatureDim; ++j)
      enc.locals.at(i, j) = static_cast<float>(enc.locals.at(i, j) / norm);
  }
  enc.coords = token_coords(grid, grid);
  return enc;
}

std::vector<float> random_unit(std::mt19937_64& rng, int dim = kGlobalDim) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<float> v(static_cast<size_t>(dim));
  double norm = 0;
  for (auto& x : v) {
    x = static_cast<float>(d(rng));
    norm += static_cast<double>(x) * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x = static_cast<float>(x / norm);
  return v;
}

PlaceRecord make_record(const std::string& id, double e, double n, Split split,
                        std::mt19937_64& rng) {
  PlaceRecord rec;
  rec.id = id;
  rec.east = e;
  rec.north = n;
  rec.split = split;
  rec.global = random_unit(rng);
  return rec;
}

}  // namespace

TEST_CASE("select_top_k keeps everything when k exceeds the token count") {
  EncodedImage enc = fake_encoded(8, 1);
  LocalDescriptorSet set = select_top_k(enc, 500);
  CHECK(set.size() == 64);
  for (size_t i = 1; i < set.size(); ++i)
    CHECK(set.records[i - 1].attention >= set.records[i].attention);
}

TEST_CASE("select_top_k picks the unique argmax for k=1") {
  EncodedImage enc = fake_encoded(4, 2);
  enc.attn_map.data[9] = 2.0f;  // unique maximum
  LocalDescriptorSet set = select_top_k(enc, 1);
  REQUIRE(set.size() == 1);
  CHECK(set.records[0].attention == 2.0f);
  CHECK(set.records[0].x == doctest::Approx((9 % 4 + 0.5f) / 4.0f));
  CHECK(set.records[0].y == doctest::Approx((9 / 4 + 0.5f) / 4.0f));
}

TEST_CASE("select_top_k matches a naive argsort oracle, ties included") {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    EncodedImage enc = fake_encoded(6, 100 + seed, /*attn_levels=*/5);
    const int k = 10;
    LocalDescriptorSet set = select_top_k(enc, k);

    // independent oracle: full stable sort of token indices
    const int n = 36;
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return enc.attn_map.data[static_cast<size_t>(a)] >
             enc.attn_map.data[static_cast<size_t>(b)];
    });
    REQUIRE(set.size() == static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      const int t = idx[static_cast<size_t>(i)];
      CHECK(set.records[static_cast<size_t>(i)].attention ==
            enc.attn_map.data[static_cast<size_t>(t)]);
      CHECK(set.records[static_cast<size_t>(i)].x ==
            doctest::Approx(enc.coords[static_cast<size_t>(t)].first));
      CHECK(set.records[static_cast<size_t>(i)].y ==
            doctest::Approx(enc.coords[static_cast<size_t>(t)].second));
    }
    // no duplicate coordinates
    for (size_t a = 0; a < set.size(); ++a)
      for (size_t b = a + 1; b < set.size(); ++b)
        CHECK((set.records[a].x != set.records[b].x || set.records[a].y != set.records[b].y));
  }
}

TEST_CASE("quantize payload sizes match the 131-dim layout exactly") {
  CHECK(local_payload_bytes(500, ScalarType::f32) == 262000);
  CHECK(local_payload_bytes(500, ScalarType::f16) == 131000);

  EncodedImage enc = fake_encoded(8, 3);
  LocalDescriptorSet set = select_top_k(enc, 64);
  const auto f32_bytes = quantize(set, ScalarType::f32);
  const auto f16_bytes = quantize(set, ScalarType::f16);
  CHECK(f32_bytes.size() == 5 + local_payload_bytes(64, ScalarType::f32));
  CHECK(f16_bytes.size() == 5 + local_payload_bytes(64, ScalarType::f16));
}

TEST_CASE("f32 quantization round-trips bit-exactly") {
  EncodedImage enc = fake_encoded(8, 4);
  LocalDescriptorSet set = select_top_k(enc, 20);
  LocalDescriptorSet back = dequantize(quantize(set, ScalarType::f32));
  REQUIRE(back.size() == set.size());
  for (size_t i = 0; i < set.size(); ++i) {
    CHECK(back.records[i].x == set.records[i].x);
    CHECK(back.records[i].y == set.records[i].y);
    CHECK(back.records[i].attention == set.records[i].attention);
    CHECK(back.records[i].feature == set.records[i].feature);
  }
}

TEST_CASE("f16 round-trip error stays within 2^-10 per component") {
  EncodedImage enc = fake_encoded(8, 5);
  LocalDescriptorSet set = select_top_k(enc, 64);
  LocalDescriptorSet back = dequantize(quantize(set, ScalarType::f16));
  const float bound = 1.0f / 1024.0f;
  for (size_t i = 0; i < set.size(); ++i) {
    CHECK(std::abs(back.records[i].x - set.records[i].x) <= bound);
    CHECK(std::abs(back.records[i].attention - set.records[i].attention) <= bound);
    for (size_t j = 0; j < set.records[i].feature.size(); ++j)
      CHECK(std::abs(back.records[i].feature[j] - set.records[i].feature[j]) <= bound);
  }
}

TEST_CASE("half conversion: exact values survive, specials behave") {
  for (float v : {0.0f, 1.0f, -1.0f, 0.5f, -0.25f, 0.125f, 2.0f})
    CHECK(half_to_float(float_to_half(v)) == v);
  CHECK(half_to_float(float_to_half(1e9f)) ==
        std::numeric_limits<float>::infinity());  // overflow saturates to inf
  CHECK(half_to_float(float_to_half(1e-9f)) == 0.0f);  // underflow to zero

  // subnormal half range round-trips exactly on representable points
  const float smallest = std::ldexp(1.0f, -24);
  CHECK(float_to_half(smallest) == 0x0001);
  CHECK(half_to_float(0x0001) == smallest);
  CHECK(float_to_half(std::ldexp(1.0f, -15)) == 0x0200);
  CHECK(half_to_float(float_to_half(std::ldexp(3.0f, -17))) == std::ldexp(3.0f, -17));
  for (int i = 1; i < 1024; i += 37) {
    const float v = static_cast<float>(i) * smallest;
    CHECK(half_to_float(float_to_half(v)) == v);
  }
  // round-to-nearest-even at the subnormal midpoints
  CHECK(float_to_half(1.5f * smallest) == 0x0002);       // tie -> even
  CHECK(float_to_half(2.5f * smallest) == 0x0002);       // tie -> even
  CHECK(float_to_half(2.6f * smallest) == 0x0003);
}

TEST_CASE("corrupt local blobs fail with format errors") {
  EncodedImage enc = fake_encoded(4, 6);
  LocalDescriptorSet set = select_top_k(enc, 8);
  auto bytes = quantize(set, ScalarType::f32);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 7);
  CHECK_THROWS_AS((void)dequantize(truncated), FormatError);

  auto bad_dtype = bytes;
  bad_dtype[4] = 9;
  CHECK_THROWS_AS((void)dequantize(bad_dtype), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS((void)dequantize(trailing), FormatError);
}

TEST_CASE("store add increments count and rejects duplicates") {
  std::mt19937_64 rng(7);
  FeatureStore store;
  store.add(make_record("a", 0, 0, Split::reference, rng));
  CHECK(store.size() == 1);
  CHECK_THROWS_AS(store.add(make_record("a", 1, 1, Split::reference, rng)), Error);
  CHECK(store.size() == 1);
  CHECK_THROWS_AS(store.knn(random_unit(rng), 0), ConfigError);
}

TEST_CASE("store rejects non-unit globals") {
  std::mt19937_64 rng(8);
  PlaceRecord rec = make_record("x", 0, 0, Split::reference, rng);
  for (auto& v : rec.global) v *= 2.0f;
  FeatureStore store;
  CHECK_THROWS_AS(store.add(rec), Error);
}

TEST_CASE("knn: a stored global queried against itself ranks first with score 1") {
  std::mt19937_64 rng(9);
  FeatureStore store;
  for (int i = 0; i < 10; ++i)
    store.add(make_record("r" + std::to_string(i), i * 100.0, 0, Split::reference, rng));
  const auto& target = store.at("r3");
  CandidateList result = store.knn(target.global, 5);
  REQUIRE(!result.empty());
  CHECK(result[0].id == "r3");
  CHECK(result[0].score == doctest::Approx(1.0f).epsilon(1e-5));
}

TEST_CASE("knn: orthogonal references sort by similarity") {
  FeatureStore store;
  for (int i = 0; i < 3; ++i) {
    PlaceRecord rec;
    rec.id = "r" + std::to_string(i);
    rec.east = i * 100.0;
    rec.split = Split::reference;
    rec.global.assign(kGlobalDim, 0.0f);
    rec.global[static_cast<size_t>(i)] = 1.0f;
    store.add(rec);
  }
  std::vector<float> q(kGlobalDim, 0.0f);
  q[2] = 1.0f;
  CandidateList result = store.knn(q, 3);
  CHECK(result[0].id == "r2");
  CHECK(result[0].score == doctest::Approx(1.0f));
  CHECK(result[1].score == doctest::Approx(0.0f));
  CHECK(result[2].score == doctest::Approx(0.0f));
  // tie between r0 and r1 resolves lexicographically
  CHECK(result[1].id == "r0");
  CHECK(result[2].id == "r1");
}

TEST_CASE("knn matches an exhaustive-sort oracle on 1000 records") {
  std::mt19937_64 rng(10);
  FeatureStore store;
  std::vector<std::string> ids;
  for (int i = 0; i < 1000; ++i) {
    std::string id = "ref" + std::to_string(i);
    PlaceRecord rec = make_record(id, i * 30.0, 0, Split::reference, rng);
    if (i % 97 == 0 && i > 0) rec.global = store.at("ref0").global;  // force exact ties
    store.add(rec);
    ids.push_back(id);
  }
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> q = random_unit(rng);
    CandidateList got = store.knn(q, 100);

    // independent oracle: compute all similarities, full sort
    std::vector<std::pair<float, std::string>> all;
    for (const auto& id : ids) {
      const auto& g = store.at(id).global;
      double dot = 0;
      for (int j = 0; j < kGlobalDim; ++j)
        dot += static_cast<double>(q[static_cast<size_t>(j)]) * g[static_cast<size_t>(j)];
      all.emplace_back(static_cast<float>(dot), id);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    REQUIRE(got.size() == 100);
    for (int i = 0; i < 100; ++i) {
      CHECK(got[static_cast<size_t>(i)].id == all[static_cast<size_t>(i)].second);
    }
    // scores non-increasing
    for (size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].score >= got[i].score);
  }
}

TEST_CASE("recall@k: basic distance arithmetic") {
  std::mt19937_64 rng(11);
  FeatureStore store;
  store.add(make_record("q1", 0, 0, Split::query, rng));
  store.add(make_record("near", 10, 0, Split::reference, rng));   // 10 m
  store.add(make_record("far", 30, 0, Split::reference, rng));    // 30 m
  store.add(make_record("close5", 0, 5, Split::reference, rng));  // 5 m

  {
    CandidateList top = {{"near", 0.9f}};
    RecallResult r = recall_at_k(store, {"q1"}, {top}, {1});
    CHECK(r.recall.at(1) == doctest::Approx(1.0));
  }
  {
    CandidateList top = {{"far", 0.9f}, {"far", 0.8f}, {"far", 0.7f}, {"close5", 0.6f}};
    RecallResult r = recall_at_k(store, {"q1"}, {top}, {1, 5});
    CHECK(r.recall.at(1) == doctest::Approx(0.0));
    CHECK(r.recall.at(5) == doctest::Approx(1.0));
  }
  {
    RecallResult r = recall_at_k(store, {"q1"}, {CandidateList{}}, {1, 5});
    CHECK(r.recall.at(1) == doctest::Approx(0.0));  // empty result list is a miss
  }
}

TEST_CASE("recall@k equals a brute-force oracle on random geometry") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> pos(0.0, 300.0);
  FeatureStore store;
  std::vector<std::string> qids;
  for (int i = 0; i < 40; ++i)
    store.add(make_record("ref" + std::to_string(i), pos(rng), pos(rng), Split::reference, rng));
  for (int i = 0; i < 50; ++i) {
    std::string id = "q" + std::to_string(i);
    store.add(make_record(id, pos(rng), pos(rng), Split::query, rng));
    qids.push_back(id);
  }
  std::vector<CandidateList> results;
  for (const auto& qid : qids) results.push_back(store.knn(store.at(qid).global, 10));

  RecallResult got = recall_at_k(store, qids, results, {1, 5, 10});

  // oracle: plain per-query distance checks
  int evaluated = 0;
  std::map<int, int> hits = {{1, 0}, {5, 0}, {10, 0}};
  for (size_t qi = 0; qi < qids.size(); ++qi) {
    const auto& q = store.at(qids[qi]);
    bool any_close = false;
    for (int i = 0; i < 40; ++i)
      if (geo_distance(q, store.at("ref" + std::to_string(i))) <= 25.0) any_close = true;
    if (!any_close) continue;
    ++evaluated;
    for (int k : {1, 5, 10}) {
      bool hit = false;
      for (int i = 0; i < std::min<int>(k, static_cast<int>(results[qi].size())); ++i)
        if (geo_distance(q, store.at(results[qi][static_cast<size_t>(i)].id)) <= 25.0)
          hit = true;
      if (hit) ++hits[k];
    }
  }
  CHECK(got.evaluated == evaluated);
  CHECK(got.excluded == 50 - evaluated);
  for (int k : {1, 5, 10})
    CHECK(got.recall.at(k) ==
          doctest::Approx(evaluated ? static_cast<double>(hits[k]) / evaluated : 0.0));
  // monotone in k
  CHECK(got.recall.at(1) <= got.recall.at(5));
  CHECK(got.recall.at(5) <= got.recall.at(10));
}

TEST_CASE("store save/load round-trips globals bit for bit") {
  std::mt19937_64 rng(13);
  FeatureStore store;
  EncodedImage enc = fake_encoded(8, 14);
  for (int i = 0; i < 100; ++i) {
    PlaceRecord rec = make_record("r" + std::to_string(i), i, -i,
                                  i % 4 == 0 ? Split::query : Split::reference, rng);
    rec.locals = select_top_k(enc, 16);
    store.add(rec);
  }
  const std::string path = "test_store_roundtrip.r2fs";
  store.save(path);
  FeatureStore back = FeatureStore::load(path);
  std::remove(path.c_str());

  REQUIRE(back.size() == store.size());
  for (size_t i = 0; i < store.size(); ++i) {
    CHECK(back.at(i).id == store.at(i).id);
    CHECK(back.at(i).global == store.at(i).global);
    CHECK(back.at(i).east == store.at(i).east);
    CHECK(back.at(i).split == store.at(i).split);
    CHECK(back.at(i).locals.size() == store.at(i).locals.size());
    CHECK(back.at(i).locals.records[0].feature == store.at(i).locals.records[0].feature);
  }
}

TEST_CASE("truncated store file fails with an offset diagnostic") {
  std::mt19937_64 rng(15);
  FeatureStore store;
  store.add(make_record("a", 0, 0, Split::reference, rng));
  store.add(make_record("b", 1, 0, Split::reference, rng));
  const std::string path = "test_store_trunc.r2fs";
  store.save(path);
  auto bytes = read_file(path);
  bytes.resize(bytes.size() - 200);
  write_file(path, bytes);
  try {
    (void)FeatureStore::load(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("f16 store reload nudges local cosines by less than 1e-2") {
  std::mt19937_64 rng(16);
  EncodedImage enc_a = fake_encoded(8, 17);
  EncodedImage enc_b = fake_encoded(8, 18);
  FeatureStore store;
  PlaceRecord a = make_record("a", 0, 0, Split::reference, rng);
  a.locals = select_top_k(enc_a, 32);
  PlaceRecord b = make_record("b", 5, 0, Split::reference, rng);
  b.locals = select_top_k(enc_b, 32);
  store.add(a);
  store.add(b);
  store.set_local_dtype(ScalarType::f16);
  const std::string path = "test_store_f16.r2fs";
  store.save(path);
  FeatureStore back = FeatureStore::load(path);
  std::remove(path.c_str());

  for (size_t i = 0; i < 32; ++i)
    for (size_t j = 0; j < 32; ++j) {
      double before = 0, after = 0;
      for (int d = 0; d < kLocalFeatureDim; ++d) {
        before += static_cast<double>(a.locals.records[i].feature[static_cast<size_t>(d)]) *
                  b.locals.records[j].feature[static_cast<size_t>(d)];
        after += static_cast<double>(
                     back.at("a").locals.records[i].feature[static_cast<size_t>(d)]) *
                 back.at("b").locals.records[j].feature[static_cast<size_t>(d)];
      }
      CHECK(std::abs(before - after) < 1e-2);
    }
}

TEST_CASE("per-image byte accounting extrapolates to the expected footprint") {
  // 18,871 images at 500 f32 records each
  const double bytes = 18871.0 * static_cast<double>(local_payload_bytes(500, ScalarType::f32));
  const double gb = bytes / 1e9;
  CHECK(gb == doctest::Approx(4.944).epsilon(1e-3));
  CHECK(std::abs(gb - 4.79) / 4.79 < 0.05);
}
