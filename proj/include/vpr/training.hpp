#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vpr/dataset.hpp"
#include "vpr/reranker.hpp"

namespace vpr {

enum class Stage { retrieval, rerank, finetune, end2end };

Stage stage_from_string(const std::string& s);
std::string stage_to_string(Stage s);

struct TrainConfig {
  double margin = 0.1;
  double lr = 5e-4;
  int batch_triplets = 64;
  int epochs = 50;
  int mining_subset = 1000;  // partial-mining candidate pool
  uint64_t seed = 1;
  double weight_decay = 0.05;
  double val_fraction = 0.25;  // queries held out for per-epoch metrics
  int val_topk = 20;           // candidates reranked during validation
  int val_max_queries = 0;     // 0 = all validation queries
  EncoderConfig encoder;
  RerankerConfig reranker;
  AblationFlags ablation;  // applies to reranker training and validation
};

// --- losses ---------------------------------------------------------------

// max(|eq-ep|^2 - |eq-en|^2 + margin, 0) on unit embeddings.
double triplet_loss(const std::vector<float>& eq, const std::vector<float>& ep,
                    const std::vector<float>& en, double margin);

// Cross-entropy of softmax(two logits) against a True/False label.
double rerank_ce_loss(float logit_false, float logit_true, bool label_true);

template <typename T>
Var<T> triplet_loss_graph(Var<T> eq, Var<T> ep, Var<T> en, T margin) {
  Var<T> dp = sub(eq, ep);
  Var<T> dn = sub(eq, en);
  Var<T> gap = add(sub(sum_all(mul(dp, dp)), sum_all(mul(dn, dn))),
                   eq.tape->constant(Tensor<T>::scalar(margin)));
  return relu(gap);
}

// --- positive assignment and negative mining -------------------------------
// All take embeddings aligned with data.images and return image indices.

// Nearest reference in embedding space among those within radius_m; -1 when
// no reference is close enough.
int assign_positive(const Dataset& data, const std::vector<std::vector<float>>& emb,
                    int query_idx, double radius_m = 10.0);

// Hardest (closest in embedding space) reference in a random subset of the
// valid negatives (farther than negative_radius_m); -1 when none exist.
int mine_partial(const Dataset& data, const std::vector<std::vector<float>>& emb, int query_idx,
                 int subset_size, std::mt19937_64& rng, double negative_radius_m = 25.0);

// All valid negatives sorted by ascending embedding distance, truncated to
// the requested count.
std::vector<int> mine_hardest_negatives(const Dataset& data,
                                        const std::vector<std::vector<float>>& emb,
                                        int query_idx, int top = 100,
                                        double negative_radius_m = 25.0);

// --- pipeline helpers -------------------------------------------------------

std::vector<EncodedImage> encode_all(const ParamSet<float>& params, const Dataset& data,
                                     const EncoderConfig& cfg);

FeatureStore build_store(const ParamSet<float>& params, const Dataset& data,
                         const EncoderConfig& cfg, int top_k_tokens,
                         ScalarType dtype = ScalarType::f32);

struct EvalResult {
  RecallResult pre;   // retrieval only
  RecallResult post;  // after reranking the top candidates
  int topk = 0;
};

EvalResult evaluate_store(const FeatureStore& store, const ParamSet<float>& params,
                          const RerankerConfig& cfg, const AblationFlags& flags, int topk,
                          const std::vector<int>& ks = {1, 5, 10});

// --- training ---------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double loss = 0;
  double recall1 = 0, recall5 = 0, recall10 = 0;
  double lr = 0;
  int skipped_queries = 0;  // queries with no positive inside 10 m
};

struct TrainResult {
  ParamSet<float> params;  // best checkpoint by validation recall@5
  std::vector<EpochMetrics> log;
  double best_recall5 = -1;
  int best_epoch = -1;
  bool diverged = false;
};

// Stage semantics:
//   retrieval: trains encoder.* with the margin loss and partial mining.
//   rerank:    requires an init checkpoint with encoder.*; freezes it,
//              precomputes features once, mines the global hardest negatives
//              once, and trains rerank.* with the pair cross-entropy.
//   finetune:  requires encoder.* and rerank.*; trains both jointly with
//              partial mining.
//   end2end:   fresh init of both parts, then the finetune procedure.
// A non-finite batch loss aborts training and returns the best checkpoint so
// far with diverged set.
TrainResult train(Stage stage, const TrainConfig& cfg, const Dataset& data,
                  const ParamSet<float>* init = nullptr,
                  const std::string& metrics_jsonl_path = "");

}  // namespace vpr
