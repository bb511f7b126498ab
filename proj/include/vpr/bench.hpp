#pragma once

#include <optional>
#include <string>

#include "vpr/dataset.hpp"
#include "vpr/reranker.hpp"

namespace vpr {

struct CostReport {
  double extract_ms = 0;    // per image, median
  double retrieval_ms = 0;  // per query, median
  double rerank_ms = 0;     // per query, one batch over topk candidates, median
  int reps = 0;
  int topk = 0;

  int local_count = 0;  // selected tokens per image in this store
  size_t local_bytes_f32 = 0;
  size_t local_bytes_f16 = 0;
  size_t store_local_bytes_total = 0;

  FlopCount encode;           // analytic, checkpoint encoder config
  FlopCount rerank_per_pair;  // analytic, at this store's pair size
  int rerank_rows = 0;
};

// Wall-clock medians over `reps` repetitions plus the analytic cost
// formulas. Read-only over the store. The image used for extraction timing
// comes from `images` when given, otherwise a seeded random image.
CostReport run_bench(const FeatureStore& store, const ParamSet<float>& params,
                     const EncoderConfig& enc_cfg, const RerankerConfig& rcfg, int topk,
                     int reps = 20, const Dataset* images = nullptr);

}  // namespace vpr
