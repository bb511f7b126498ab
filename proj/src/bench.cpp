#include "vpr/bench.hpp"

#include <algorithm>

#include "vpr/util.hpp"

namespace vpr {

namespace {
double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace

CostReport run_bench(const FeatureStore& store, const ParamSet<float>& params,
                     const EncoderConfig& enc_cfg, const RerankerConfig& rcfg, int topk,
                     int reps, const Dataset* images) {
  if (store.size() == 0) throw Error("empty store");
  reps = std::max(reps, 1);
  CostReport report;
  report.reps = reps;
  report.topk = topk;

  // extraction latency
  Image probe;
  if (images && !images->images.empty()) {
    probe = images->images[0].image;
  } else {
    probe = Image(enc_cfg.image_h, enc_cfg.image_w, enc_cfg.channels);
    std::mt19937_64 rng = make_rng(0xBE7C, 1);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& v : probe.pix) v = d(rng);
  }
  std::vector<double> t_extract;
  for (int r = 0; r < reps; ++r) {
    Stopwatch sw;
    EncodedImage enc = encode(params, probe, enc_cfg);
    t_extract.push_back(sw.ms());
    if (enc.global.empty()) throw Error("encode produced no descriptor");
  }
  report.extract_ms = median(t_extract);

  // pick a probe query: first query record, else the first record
  const PlaceRecord* query = nullptr;
  for (const auto& rec : store.records())
    if (rec.split == Split::query && !rec.locals.empty()) {
      query = &rec;
      break;
    }
  if (!query) query = &store.at(static_cast<size_t>(0));

  std::vector<double> t_knn;
  CandidateList cands;
  for (int r = 0; r < reps; ++r) {
    Stopwatch sw;
    cands = store.knn(query->global, topk);
    t_knn.push_back(sw.ms());
  }
  report.retrieval_ms = median(t_knn);

  if (!query->locals.empty()) {
    std::vector<double> t_rerank;
    for (int r = 0; r < reps; ++r) {
      Stopwatch sw;
      CandidateList out = rerank(*query, cands, store, params, rcfg);
      t_rerank.push_back(sw.ms());
      if (out.size() != cands.size()) throw Error("rerank dropped candidates");
    }
    report.rerank_ms = median(t_rerank);
  }

  // byte accounting from the exact layout formula
  int count = 0;
  for (const auto& rec : store.records()) {
    count = std::max(count, static_cast<int>(rec.locals.size()));
    report.store_local_bytes_total += local_payload_bytes(rec.locals.size(), store.local_dtype());
  }
  report.local_count = count;
  report.local_bytes_f32 = local_payload_bytes(static_cast<size_t>(count), ScalarType::f32);
  report.local_bytes_f16 = local_payload_bytes(static_cast<size_t>(count), ScalarType::f16);

  report.encode = encode_flops(enc_cfg);
  report.rerank_rows = 2 * count;
  report.rerank_per_pair = rerank_pair_flops(report.rerank_rows, rcfg.nn, rcfg);
  return report;
}

}  // namespace vpr
