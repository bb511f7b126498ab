#include "vpr/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "vpr/util.hpp"

namespace vpr {

Stage stage_from_string(const std::string& s) {
  if (s == "retrieval") return Stage::retrieval;
  if (s == "rerank") return Stage::rerank;
  if (s == "finetune") return Stage::finetune;
  if (s == "end2end") return Stage::end2end;
  throw ConfigError("unknown stage: " + s);
}

std::string stage_to_string(Stage s) {
  switch (s) {
    case Stage::retrieval: return "retrieval";
    case Stage::rerank: return "rerank";
    case Stage::finetune: return "finetune";
    case Stage::end2end: return "end2end";
  }
  return "?";
}

// --- losses -----------------------------------------------------------------

double triplet_loss(const std::vector<float>& eq, const std::vector<float>& ep,
                    const std::vector<float>& en, double margin) {
  if (eq.size() != ep.size() || eq.size() != en.size())
    throw ShapeError("triplet_loss: embedding dims differ");
  double dp = 0, dn = 0;
  for (size_t i = 0; i < eq.size(); ++i) {
    const double a = static_cast<double>(eq[i]) - ep[i];
    const double b = static_cast<double>(eq[i]) - en[i];
    dp += a * a;
    dn += b * b;
  }
  return std::max(dp - dn + margin, 0.0);
}

double rerank_ce_loss(float logit_false, float logit_true, bool label_true) {
  const double l0 = logit_false, l1 = logit_true;
  const double m = std::max(l0, l1);
  const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
  return lse - (label_true ? l1 : l0);
}

// --- mining -----------------------------------------------------------------

namespace {

double emb_cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double acc = 0;
  for (size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double geo_dist(const DataImage& a, const DataImage& b) {
  const double de = a.east - b.east, dn = a.north - b.north;
  return std::sqrt(de * de + dn * dn);
}

}  // namespace

int assign_positive(const Dataset& data, const std::vector<std::vector<float>>& emb,
                    int query_idx, double radius_m) {
  const DataImage& q = data.images[static_cast<size_t>(query_idx)];
  int best = -1;
  double best_cos = -2.0;
  for (size_t i = 0; i < data.images.size(); ++i) {
    const DataImage& r = data.images[i];
    if (r.split != Split::reference) continue;
    if (geo_dist(q, r) > radius_m) continue;
    const double c = emb_cosine(emb[static_cast<size_t>(query_idx)], emb[i]);
    if (c > best_cos) {  // ties keep the lower index
      best_cos = c;
      best = static_cast<int>(i);
    }
  }
  return best;
}

int mine_partial(const Dataset& data, const std::vector<std::vector<float>>& emb, int query_idx,
                 int subset_size, std::mt19937_64& rng, double negative_radius_m) {
  const DataImage& q = data.images[static_cast<size_t>(query_idx)];
  std::vector<int> valid;
  for (size_t i = 0; i < data.images.size(); ++i) {
    const DataImage& r = data.images[i];
    if (r.split != Split::reference) continue;
    if (geo_dist(q, r) > negative_radius_m) valid.push_back(static_cast<int>(i));
  }
  if (valid.empty()) return -1;
  std::shuffle(valid.begin(), valid.end(), rng);
  const int take = std::min<int>(subset_size, static_cast<int>(valid.size()));
  int best = -1;
  double best_cos = -2.0;
  for (int s = 0; s < take; ++s) {
    const int i = valid[static_cast<size_t>(s)];
    const double c = emb_cosine(emb[static_cast<size_t>(query_idx)], emb[static_cast<size_t>(i)]);
    if (c > best_cos || (c == best_cos && i < best)) {
      best_cos = c;
      best = i;
    }
  }
  return best;
}

std::vector<int> mine_hardest_negatives(const Dataset& data,
                                        const std::vector<std::vector<float>>& emb,
                                        int query_idx, int top, double negative_radius_m) {
  const DataImage& q = data.images[static_cast<size_t>(query_idx)];
  std::vector<std::pair<double, int>> valid;  // (-cosine, idx) so sort is ascending distance
  for (size_t i = 0; i < data.images.size(); ++i) {
    const DataImage& r = data.images[i];
    if (r.split != Split::reference) continue;
    if (geo_dist(q, r) > negative_radius_m)
      valid.emplace_back(-emb_cosine(emb[static_cast<size_t>(query_idx)], emb[i]),
                         static_cast<int>(i));
  }
  std::sort(valid.begin(), valid.end());
  std::vector<int> out;
  for (size_t i = 0; i < valid.size() && static_cast<int>(i) < top; ++i)
    out.push_back(valid[i].second);
  return out;
}

// --- pipeline helpers ---------------------------------------------------------

std::vector<EncodedImage> encode_all(const ParamSet<float>& params, const Dataset& data,
                                     const EncoderConfig& cfg) {
  std::vector<EncodedImage> out(data.images.size());
  parallel_for(static_cast<int>(data.images.size()), [&](int i) {
    out[static_cast<size_t>(i)] = encode(params, data.images[static_cast<size_t>(i)].image, cfg);
  });
  return out;
}

FeatureStore build_store(const ParamSet<float>& params, const Dataset& data,
                         const EncoderConfig& cfg, int top_k_tokens, ScalarType dtype) {
  const std::vector<EncodedImage> encs = encode_all(params, data, cfg);
  FeatureStore store;
  store.set_local_dtype(dtype);
  for (size_t i = 0; i < data.images.size(); ++i) {
    const DataImage& img = data.images[i];
    PlaceRecord rec;
    rec.id = img.id;
    rec.east = img.east;
    rec.north = img.north;
    rec.split = img.split;
    rec.global = encs[i].global;
    rec.locals = select_top_k(encs[i], top_k_tokens);
    store.add(std::move(rec));
  }
  return store;
}

EvalResult evaluate_store(const FeatureStore& store, const ParamSet<float>& params,
                          const RerankerConfig& cfg, const AblationFlags& flags, int topk,
                          const std::vector<int>& ks) {
  std::vector<std::string> qids;
  for (const auto& rec : store.records())
    if (rec.split == Split::query) qids.push_back(rec.id);

  std::vector<CandidateList> retrieved(qids.size());
  std::vector<CandidateList> reranked(qids.size());
  parallel_for(static_cast<int>(qids.size()), [&](int i) {
    const PlaceRecord& q = store.at(qids[static_cast<size_t>(i)]);
    retrieved[static_cast<size_t>(i)] = store.knn(q.global, topk);
    reranked[static_cast<size_t>(i)] =
        rerank(q, retrieved[static_cast<size_t>(i)], store, params, cfg, flags);
  });

  EvalResult out;
  out.topk = topk;
  out.pre = recall_at_k(store, qids, retrieved, ks);
  out.post = recall_at_k(store, qids, reranked, ks);
  return out;
}

// --- training ----------------------------------------------------------------

namespace {

constexpr int kGradChunk = 8;

void add_grads(GradMap<float>& into, const GradMap<float>& from) {
  for (const auto& [name, g] : from) {
    if (g.empty()) continue;
    auto it = into.find(name);
    if (it == into.end() || it->second.empty()) {
      into[name] = g;
    } else {
      auto& dst = it->second.data;
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += g.data[i];
    }
  }
}

// Runs item_fn over [0, n) in fixed chunks and merges per-chunk gradient maps
// in chunk order, so the result does not depend on the worker count.
double batched_gradients(int n, const std::function<double(int, GradMap<float>&)>& item_fn,
                         GradMap<float>& out) {
  const int chunks = (n + kGradChunk - 1) / kGradChunk;
  std::vector<GradMap<float>> partials(static_cast<size_t>(chunks));
  std::vector<double> losses(static_cast<size_t>(n), 0.0);
  parallel_for(chunks, [&](int c) {
    const int lo = c * kGradChunk, hi = std::min(n, lo + kGradChunk);
    for (int i = lo; i < hi; ++i)
      losses[static_cast<size_t>(i)] = item_fn(i, partials[static_cast<size_t>(c)]);
  });
  for (int c = 0; c < chunks; ++c) add_grads(out, partials[static_cast<size_t>(c)]);
  double sum = 0;
  for (double l : losses) sum += l;
  return sum / std::max(1, n);
}

// Scales gradients so their global norm stays at or below max_norm.
void clip_grad_norm(GradMap<float>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (float v : g.data) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0) return;
  const float scale = static_cast<float>(max_norm / norm);
  for (auto& [name, g] : grads)
    for (float& v : g.data) v *= scale;
}

class AdamW {
 public:
  void step(ParamSet<float>& params, const GradMap<float>& grads, double lr, double wd) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      if (g.empty()) continue;
      auto& p = params.at(name).value;
      auto& [m, v] = state_[name];
      if (m.size() != g.data.size()) {
        m.assign(g.data.size(), 0.0f);
        v.assign(g.data.size(), 0.0f);
      }
      for (size_t i = 0; i < g.data.size(); ++i) {
        m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g.data[i]);
        v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g.data[i] * g.data[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.data[i] = static_cast<float>(p.data[i] -
                                       lr * (mhat / (std::sqrt(vhat) + eps) + wd * p.data[i]));
      }
    }
  }

 private:
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> state_;
  long t_ = 0;
};

// Cosine decay with a linear warmup ramp. Without the warmup the reranking
// transformer reliably collapses to the constant predictor in its first few
// steps at desk scale and never recovers.
double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const long warmup = std::max<long>(1, total / 8);
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t = std::min(1.0, static_cast<double>(step - warmup) /
                                     std::max<double>(1.0, static_cast<double>(total - warmup)));
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::vector<std::vector<float>> globals_of(const std::vector<EncodedImage>& encs) {
  std::vector<std::vector<float>> out(encs.size());
  for (size_t i = 0; i < encs.size(); ++i) out[i] = encs[i].global;
  return out;
}

bool all_finite(const std::vector<std::vector<float>>& emb) {
  for (const auto& e : emb)
    for (float v : e)
      if (!std::isfinite(v)) return false;
  return true;
}

struct QuerySplit {
  std::vector<int> train;
  std::vector<int> val;
};

QuerySplit split_queries(const Dataset& data, double val_fraction, uint64_t seed) {
  std::vector<int> queries = data.indices_of(Split::query);
  QuerySplit out;
  if (queries.empty()) return out;
  std::mt19937_64 rng = make_rng(seed, 0x5B117);
  std::shuffle(queries.begin(), queries.end(), rng);
  int n_val = static_cast<int>(std::lround(val_fraction * static_cast<double>(queries.size())));
  if (queries.size() > 1) n_val = std::clamp(n_val, 1, static_cast<int>(queries.size()) - 1);
  else n_val = 0;
  for (size_t i = 0; i < queries.size(); ++i)
    (static_cast<int>(i) < n_val ? out.val : out.train).push_back(queries[i]);
  return out;
}

// Store over current encodings for validation: references plus val queries.
FeatureStore make_val_store(const Dataset& data, const std::vector<EncodedImage>& encs,
                            const std::vector<int>& val_queries, int top_k_tokens,
                            bool with_locals) {
  FeatureStore store;
  for (size_t i = 0; i < data.images.size(); ++i)
    if (data.images[i].split == Split::reference) {
      PlaceRecord rec;
      rec.id = data.images[i].id;
      rec.east = data.images[i].east;
      rec.north = data.images[i].north;
      rec.split = Split::reference;
      rec.global = encs[i].global;
      if (with_locals) rec.locals = select_top_k(encs[i], top_k_tokens);
      store.add(std::move(rec));
    }
  for (int qi : val_queries) {
    const DataImage& img = data.images[static_cast<size_t>(qi)];
    PlaceRecord rec;
    rec.id = img.id;
    rec.east = img.east;
    rec.north = img.north;
    rec.split = Split::query;
    rec.global = encs[static_cast<size_t>(qi)].global;
    if (with_locals) rec.locals = select_top_k(encs[static_cast<size_t>(qi)], top_k_tokens);
    store.add(std::move(rec));
  }
  return store;
}

RecallResult validate_retrieval(const Dataset& data, const std::vector<EncodedImage>& encs,
                                const std::vector<int>& val_queries) {
  FeatureStore store = make_val_store(data, encs, val_queries, 0, false);
  std::vector<std::string> qids;
  std::vector<CandidateList> results(val_queries.size());
  for (int qi : val_queries) qids.push_back(data.images[static_cast<size_t>(qi)].id);
  parallel_for(static_cast<int>(val_queries.size()), [&](int i) {
    results[static_cast<size_t>(i)] = store.knn(store.at(qids[static_cast<size_t>(i)]).global, 10);
  });
  return recall_at_k(store, qids, results, {1, 5, 10});
}

RecallResult validate_reranked(const FeatureStore& store, const std::vector<std::string>& qids,
                               const ParamSet<float>& params, const RerankerConfig& rcfg,
                               const AblationFlags& flags, int topk) {
  std::vector<CandidateList> results(qids.size());
  parallel_for(static_cast<int>(qids.size()), [&](int i) {
    const PlaceRecord& q = store.at(qids[static_cast<size_t>(i)]);
    CandidateList cands = store.knn(q.global, topk);
    results[static_cast<size_t>(i)] = rerank(q, cands, store, params, rcfg, flags);
  });
  return recall_at_k(store, qids, results, {1, 5, 10});
}

void append_metrics(const std::string& path, Stage stage, const EpochMetrics& m) {
  if (path.empty()) return;
  nlohmann::json j{{"epoch", m.epoch},       {"stage", stage_to_string(stage)},
                   {"loss", m.loss},         {"recall1", m.recall1},
                   {"recall5", m.recall5},   {"recall10", m.recall10},
                   {"lr", m.lr},             {"skipped_queries", m.skipped_queries}};
  std::ofstream f(path, std::ios::app);
  f << j.dump() << "\n";
}

bool starts_with(const std::string& s, const char* prefix) {
  return s.rfind(prefix, 0) == 0;
}

}  // namespace

TrainResult train(Stage stage, const TrainConfig& cfg, const Dataset& data,
                  const ParamSet<float>* init, const std::string& metrics_path) {
  cfg.encoder.validate();
  cfg.reranker.validate();
  if (cfg.batch_triplets < 1 || cfg.epochs < 1) throw ConfigError("bad batch/epoch settings");
  if (cfg.margin <= 0 || cfg.lr <= 0) throw ConfigError("margin and lr must be positive");

  ParamSet<float> params;
  std::mt19937_64 init_rng = make_rng(cfg.seed, 0x1417);
  switch (stage) {
    case Stage::retrieval:
      if (init)
        params = *init;
      else
        add_encoder_params(params, cfg.encoder, init_rng);
      break;
    case Stage::rerank:
      if (!init || !init->has("encoder.patch_proj.w"))
        throw ConfigError("rerank stage requires a retrieval checkpoint");
      params = *init;
      if (!params.has("rerank.input_proj.w")) add_reranker_params(params, cfg.reranker, init_rng);
      break;
    case Stage::finetune:
      if (!init || !init->has("encoder.patch_proj.w") || !init->has("rerank.input_proj.w"))
        throw ConfigError("finetune requires a checkpoint holding both modules");
      params = *init;
      break;
    case Stage::end2end:
      if (init) {
        params = *init;
      } else {
        add_encoder_params(params, cfg.encoder, init_rng);
        add_reranker_params(params, cfg.reranker, init_rng);
      }
      break;
  }

  std::function<bool(const std::string&)> trainable;
  switch (stage) {
    case Stage::retrieval:
      trainable = [](const std::string& n) { return starts_with(n, "encoder."); };
      break;
    case Stage::rerank:
      trainable = [](const std::string& n) { return starts_with(n, "rerank."); };
      break;
    default:
      trainable = [](const std::string&) { return true; };
  }

  const QuerySplit split = split_queries(data, cfg.val_fraction, cfg.seed);
  std::vector<int> val_queries = split.val;
  if (cfg.val_max_queries > 0 && static_cast<int>(val_queries.size()) > cfg.val_max_queries)
    val_queries.resize(static_cast<size_t>(cfg.val_max_queries));

  TrainResult result;
  AdamW opt;
  const long steps_per_epoch =
      std::max<long>(1, (static_cast<long>(split.train.size()) + cfg.batch_triplets - 1) /
                            cfg.batch_triplets);
  const long total_steps = steps_per_epoch * cfg.epochs;
  long step = 0;

  // Frozen-backbone precomputation for the rerank stage.
  std::vector<EncodedImage> frozen_encs;
  std::vector<LocalDescriptorSet> frozen_sel;
  std::vector<int> frozen_pos(data.images.size(), -1);
  std::vector<std::vector<int>> frozen_hard(data.images.size());
  FeatureStore frozen_val_store;
  std::vector<std::string> val_ids;
  for (int qi : val_queries) val_ids.push_back(data.images[static_cast<size_t>(qi)].id);

  if (stage == Stage::rerank) {
    frozen_encs = encode_all(params, data, cfg.encoder);
    const auto emb = globals_of(frozen_encs);
    if (!all_finite(emb)) {
      result.diverged = true;
      result.params = params;
      return result;
    }
    frozen_sel.resize(data.images.size());
    parallel_for(static_cast<int>(data.images.size()), [&](int i) {
      frozen_sel[static_cast<size_t>(i)] =
          select_top_k(frozen_encs[static_cast<size_t>(i)], cfg.reranker.top_k_tokens);
    });
    for (int qi : split.train) {
      frozen_pos[static_cast<size_t>(qi)] = assign_positive(data, emb, qi);
      frozen_hard[static_cast<size_t>(qi)] = mine_hardest_negatives(data, emb, qi, 100);
    }
    frozen_val_store =
        make_val_store(data, frozen_encs, val_queries, cfg.reranker.top_k_tokens, true);
  }

  for (int epoch = 0; epoch < cfg.epochs && !result.diverged; ++epoch) {
    EpochMetrics metrics;
    metrics.epoch = epoch;
    std::mt19937_64 erng = make_rng(cfg.seed, 0xE72C4, static_cast<uint64_t>(epoch));

    double epoch_loss = 0;
    long epoch_items = 0;

    if (stage == Stage::rerank) {
      // one (positive, mined-negative) pair of pairs per query
      std::vector<int> order;
      for (int qi : split.train)
        if (frozen_pos[static_cast<size_t>(qi)] >= 0 &&
            !frozen_hard[static_cast<size_t>(qi)].empty())
          order.push_back(qi);
        else
          ++metrics.skipped_queries;
      std::shuffle(order.begin(), order.end(), erng);

      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_triplets)) {
        const int bn = static_cast<int>(
            std::min<size_t>(cfg.batch_triplets, order.size() - start));
        std::vector<std::pair<int, int>> batch;  // (query, negative)
        for (int b = 0; b < bn; ++b) {
          const int qi = order[start + static_cast<size_t>(b)];
          const auto& hard = frozen_hard[static_cast<size_t>(qi)];
          std::uniform_int_distribution<size_t> pick(0, hard.size() - 1);
          batch.emplace_back(qi, hard[pick(erng)]);
        }
        GradMap<float> grads;
        const double mean_loss = batched_gradients(
            bn,
            [&](int b, GradMap<float>& gm) -> double {
              const auto [qi, ni] = batch[static_cast<size_t>(b)];
              const int pi = frozen_pos[static_cast<size_t>(qi)];
              Tape<float> tape;
              BoundParams<float> bp(tape, params, &gm, trainable);
              PairTensor tp = build_pair_features(frozen_sel[static_cast<size_t>(qi)],
                                                  frozen_sel[static_cast<size_t>(pi)],
                                                  cfg.reranker.nn);
              PairTensor tn = build_pair_features(frozen_sel[static_cast<size_t>(qi)],
                                                  frozen_sel[static_cast<size_t>(ni)],
                                                  cfg.reranker.nn);
              Var<float> ce_p = cross_entropy_logits(
                  rerank_logits_const(bp, tp, cfg.reranker, cfg.ablation).logits, 1);
              Var<float> ce_n = cross_entropy_logits(
                  rerank_logits_const(bp, tn, cfg.reranker, cfg.ablation).logits, 0);
              Var<float> loss = scale(add(ce_p, ce_n), 0.5f);
              const double lv = loss.value().data[0];
              if (std::isfinite(lv)) tape.backward(loss, 1.0f / static_cast<float>(bn));
              return lv;
            },
            grads);
        if (!std::isfinite(mean_loss)) {
          result.diverged = true;
          break;
        }
        const double lr_now = cosine_lr(cfg.lr, step, total_steps);
        ++step;
        clip_grad_norm(grads, 1.0);
        opt.step(params, grads, lr_now, cfg.weight_decay);
        metrics.lr = lr_now;
        epoch_loss += mean_loss * bn;
        epoch_items += bn;
      }
      if (!result.diverged && !val_ids.empty()) {
        RecallResult r = validate_reranked(frozen_val_store, val_ids, params, cfg.reranker,
                                           cfg.ablation, cfg.val_topk);
        metrics.recall1 = r.recall.at(1);
        metrics.recall5 = r.recall.at(5);
        metrics.recall10 = r.recall.at(10);
      }
    } else {
      // retrieval / finetune / end2end: triplet-based epochs over fresh encodings
      const std::vector<EncodedImage> encs = encode_all(params, data, cfg.encoder);
      const auto emb = globals_of(encs);
      if (!all_finite(emb)) {
        result.diverged = true;
        break;
      }

      std::vector<std::array<int, 3>> triplets;
      std::vector<int> order = split.train;
      std::shuffle(order.begin(), order.end(), erng);
      for (int qi : order) {
        const int pi = assign_positive(data, emb, qi);
        if (pi < 0) {
          ++metrics.skipped_queries;
          continue;
        }
        const int ni = mine_partial(data, emb, qi, cfg.mining_subset, erng);
        if (ni < 0) {
          ++metrics.skipped_queries;
          continue;
        }
        triplets.push_back({qi, pi, ni});
      }

      const bool joint = stage != Stage::retrieval;
      for (size_t start = 0; start < triplets.size();
           start += static_cast<size_t>(cfg.batch_triplets)) {
        const int bn =
            static_cast<int>(std::min<size_t>(cfg.batch_triplets, triplets.size() - start));
        GradMap<float> grads;
        const double mean_loss = batched_gradients(
            bn,
            [&](int b, GradMap<float>& gm) -> double {
              const auto [qi, pi, ni] = triplets[start + static_cast<size_t>(b)];
              Tape<float> tape;
              BoundParams<float> bp(tape, params, &gm, trainable);
              EncoderGraph<float> gq =
                  encode_graph(bp, data.images[static_cast<size_t>(qi)].image.to_tensor(),
                               cfg.encoder);
              EncoderGraph<float> gp =
                  encode_graph(bp, data.images[static_cast<size_t>(pi)].image.to_tensor(),
                               cfg.encoder);
              EncoderGraph<float> gn =
                  encode_graph(bp, data.images[static_cast<size_t>(ni)].image.to_tensor(),
                               cfg.encoder);
              Var<float> loss = triplet_loss_graph(gq.global, gp.global, gn.global,
                                                   static_cast<float>(cfg.margin));
              if (joint) {
                SelectedGraph<float> sq = select_top_k_graph(gq, cfg.reranker.top_k_tokens);
                SelectedGraph<float> sp = select_top_k_graph(gp, cfg.reranker.top_k_tokens);
                SelectedGraph<float> sn = select_top_k_graph(gn, cfg.reranker.top_k_tokens);
                PairGraph<float> pos = build_pair_features_graph(sq, sp, cfg.reranker.nn);
                PairGraph<float> neg = build_pair_features_graph(sq, sn, cfg.reranker.nn);
                Var<float> ce_p = cross_entropy_logits(
                    rerank_logits(bp, pos.matrix, pos.valid, pos.nn, cfg.reranker, cfg.ablation)
                        .logits,
                    1);
                Var<float> ce_n = cross_entropy_logits(
                    rerank_logits(bp, neg.matrix, neg.valid, neg.nn, cfg.reranker, cfg.ablation)
                        .logits,
                    0);
                loss = add(loss, scale(add(ce_p, ce_n), 0.5f));
              }
              const double lv = loss.value().data[0];
              if (std::isfinite(lv)) tape.backward(loss, 1.0f / static_cast<float>(bn));
              return lv;
            },
            grads);
        if (!std::isfinite(mean_loss)) {
          result.diverged = true;
          break;
        }
        const double lr_now = cosine_lr(cfg.lr, step, total_steps);
        ++step;
        clip_grad_norm(grads, 1.0);
        opt.step(params, grads, lr_now, cfg.weight_decay);
        metrics.lr = lr_now;
        epoch_loss += mean_loss * bn;
        epoch_items += bn;
      }

      if (!result.diverged && !val_ids.empty()) {
        const std::vector<EncodedImage> val_encs = encode_all(params, data, cfg.encoder);
        if (stage == Stage::retrieval) {
          RecallResult r = validate_retrieval(data, val_encs, val_queries);
          metrics.recall1 = r.recall.at(1);
          metrics.recall5 = r.recall.at(5);
          metrics.recall10 = r.recall.at(10);
        } else {
          FeatureStore vs =
              make_val_store(data, val_encs, val_queries, cfg.reranker.top_k_tokens, true);
          RecallResult r =
              validate_reranked(vs, val_ids, params, cfg.reranker, cfg.ablation, cfg.val_topk);
          metrics.recall1 = r.recall.at(1);
          metrics.recall5 = r.recall.at(5);
          metrics.recall10 = r.recall.at(10);
        }
      }
    }

    metrics.loss = epoch_items > 0 ? epoch_loss / static_cast<double>(epoch_items) : 0.0;
    result.log.push_back(metrics);
    append_metrics(metrics_path, stage, metrics);

    if (!result.diverged && metrics.recall5 > result.best_recall5) {
      result.best_recall5 = metrics.recall5;
      result.best_epoch = epoch;
      result.params = params;
    }
  }

  // keep the best validation checkpoint; fall back to the last state
  if (result.best_epoch < 0) result.params = params;
  return result;
}

}  // namespace vpr
