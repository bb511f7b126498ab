#include "vpr/reranker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vpr/util.hpp"

namespace vpr {

MatchScore make_match_score(float logit_false, float logit_true) {
  MatchScore s;
  s.logit_false = logit_false;
  s.logit_true = logit_true;
  const double diff = static_cast<double>(logit_false) - static_cast<double>(logit_true);
  s.prob_true = 1.0 / (1.0 + std::exp(diff));
  return s;
}

PairTensor build_pair_features(const LocalDescriptorSet& q, const LocalDescriptorSet& r,
                               int nn) {
  if (q.empty() || r.empty())
    throw Error("build_pair_features: both descriptor sets must be non-empty");
  if (nn < 1) throw ConfigError("build_pair_features: nn must be at least 1");
  const int kq = static_cast<int>(q.size());
  const int kr = static_cast<int>(r.size());
  const int dim = q.feature_dim();
  if (dim != r.feature_dim())
    throw ShapeError("build_pair_features: feature dims differ");

  // full similarity matrix, fixed accumulation order
  std::vector<float> sims(static_cast<size_t>(kq) * kr);
  for (int i = 0; i < kq; ++i) {
    const auto& fq = q.records[static_cast<size_t>(i)].feature;
    for (int j = 0; j < kr; ++j) {
      const auto& fr = r.records[static_cast<size_t>(j)].feature;
      float acc = 0;
      for (int d = 0; d < dim; ++d) acc += fq[static_cast<size_t>(d)] * fr[static_cast<size_t>(d)];
      sims[static_cast<size_t>(i) * kr + j] = acc;
    }
  }

  PairTensor t;
  t.rows = kq + kr;
  t.query_rows = kq;
  t.nn = nn;
  t.data.assign(static_cast<size_t>(t.rows) * nn * kPairChannels, 0.0f);
  t.valid.assign(static_cast<size_t>(t.rows), 1);

  for (int i = 0; i < kq; ++i) {
    const auto& own = q.records[static_cast<size_t>(i)];
    const std::vector<int> nb = top_neighbors(sims.data() + static_cast<size_t>(i) * kr, kr, nn);
    for (int s = 0; s < nn; ++s) {
      const auto& other = r.records[static_cast<size_t>(nb[static_cast<size_t>(s)])];
      t.at(i, s, kQx) = own.x;
      t.at(i, s, kQy) = own.y;
      t.at(i, s, kQa) = own.attention;
      t.at(i, s, kRx) = other.x;
      t.at(i, s, kRy) = other.y;
      t.at(i, s, kRa) = other.attention;
      t.at(i, s, kSim) = sims[static_cast<size_t>(i) * kr + nb[static_cast<size_t>(s)]];
    }
  }
  std::vector<float> col(static_cast<size_t>(kq));
  for (int j = 0; j < kr; ++j) {
    for (int i = 0; i < kq; ++i) col[static_cast<size_t>(i)] = sims[static_cast<size_t>(i) * kr + j];
    const auto& own = r.records[static_cast<size_t>(j)];
    const std::vector<int> nb = top_neighbors(col.data(), kq, nn);
    for (int s = 0; s < nn; ++s) {
      const auto& other = q.records[static_cast<size_t>(nb[static_cast<size_t>(s)])];
      const int row = kq + j;
      t.at(row, s, kQx) = own.x;
      t.at(row, s, kQy) = own.y;
      t.at(row, s, kQa) = own.attention;
      t.at(row, s, kRx) = other.x;
      t.at(row, s, kRy) = other.y;
      t.at(row, s, kRa) = other.attention;
      t.at(row, s, kSim) = col[static_cast<size_t>(nb[static_cast<size_t>(s)])];
    }
  }
  return t;
}

ScoreResult score_pair(const PairTensor& t, const ParamSet<float>& params,
                       const RerankerConfig& cfg, const AblationFlags& flags) {
  Tape<float> tape;
  BoundParams<float> bound(tape, params);
  RerankGraphOut<float> out = rerank_logits_const(bound, t, cfg, flags);
  ScoreResult res;
  res.score = make_match_score(out.logits.value().data[0], out.logits.value().data[1]);
  if (!out.row_attention.empty()) {
    // drop the class position; keep the row-token columns
    res.row_attention.assign(out.row_attention.data.begin() + 1, out.row_attention.data.end());
  }
  return res;
}

CandidateList rerank_with(const PlaceRecord& query, const CandidateList& candidates,
                          const FeatureStore& store, const PairScorer& scorer) {
  const int n = static_cast<int>(candidates.size());
  std::vector<double> prob(static_cast<size_t>(n), -1.0);  // negative marks unscored
  parallel_for(n, [&](int i) {
    prob[static_cast<size_t>(i)] = scorer(query, store.at(candidates[static_cast<size_t>(i)].id));
  });

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const bool sa = prob[static_cast<size_t>(a)] >= 0, sb = prob[static_cast<size_t>(b)] >= 0;
    if (sa != sb) return sa;  // scored candidates first
    if (!sa) return false;    // both unscored: keep retrieval order
    return prob[static_cast<size_t>(a)] > prob[static_cast<size_t>(b)];
  });

  CandidateList out;
  out.reserve(static_cast<size_t>(n));
  for (int idx : order) {
    Candidate c = candidates[static_cast<size_t>(idx)];
    if (prob[static_cast<size_t>(idx)] >= 0)
      c.score = static_cast<float>(prob[static_cast<size_t>(idx)]);
    out.push_back(std::move(c));
  }
  return out;
}

CandidateList rerank(const PlaceRecord& query, const CandidateList& candidates,
                     const FeatureStore& store, const ParamSet<float>& params,
                     const RerankerConfig& cfg, const AblationFlags& flags,
                     std::vector<MatchScore>* scores_out) {
  std::unordered_map<std::string, size_t> slot;
  for (size_t i = 0; i < candidates.size(); ++i) slot.emplace(candidates[i].id, i);
  std::vector<MatchScore> by_slot(candidates.size());

  auto scorer = [&](const PlaceRecord& q, const PlaceRecord& cand) -> double {
    if (q.locals.empty() || cand.locals.empty()) return -1.0;
    PairTensor t = build_pair_features(q.locals, cand.locals, cfg.nn);
    ScoreResult r = score_pair(t, params, cfg, flags);
    by_slot[slot.at(cand.id)] = r.score;
    return r.score.prob_true;
  };
  CandidateList out = rerank_with(query, candidates, store, scorer);
  if (scores_out) {
    scores_out->clear();
    for (const Candidate& c : out) scores_out->push_back(by_slot[slot.at(c.id)]);
  }
  return out;
}

std::vector<AttentionPair> top_attention_pairs(const PairTensor& t,
                                               const ParamSet<float>& params,
                                               const RerankerConfig& cfg,
                                               const AblationFlags& flags, int m) {
  if (!flags.use_block2)
    throw ConfigError("top_attention_pairs needs the row-aggregation transformer");
  ScoreResult res = score_pair(t, params, cfg, flags);
  std::vector<int> order;
  for (int r = 0; r < t.rows; ++r)
    if (t.valid[static_cast<size_t>(r)]) order.push_back(r);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const float wa = res.row_attention[static_cast<size_t>(a)];
    const float wb = res.row_attention[static_cast<size_t>(b)];
    if (wa != wb) return wa > wb;
    return a < b;
  });
  const int keep = std::min<int>(m, static_cast<int>(order.size()));
  std::vector<AttentionPair> out;
  out.reserve(static_cast<size_t>(keep));
  for (int i = 0; i < keep; ++i) {
    const int r = order[static_cast<size_t>(i)];
    AttentionPair p;
    p.row = r;
    p.x = t.at(r, 0, kQx);
    p.y = t.at(r, 0, kQy);
    p.x2 = t.at(r, 0, kRx);
    p.y2 = t.at(r, 0, kRy);
    p.similarity = t.at(r, 0, kSim);
    p.weight = res.row_attention[static_cast<size_t>(r)];
    out.push_back(p);
  }
  return out;
}

FlopCount rerank_pair_flops(int rows, int nn, const RerankerConfig& cfg) {
  const double d = cfg.dim;
  FlopCount f;
  f.linear_macs += static_cast<double>(rows) * nn * kPairChannels * d;  // input projection
  // per token per layer: qkv + output projection 4d^2, MLP 8d^2
  const double per_token = 12.0 * d * d;
  f.linear_macs += static_cast<double>(cfg.block1_layers) * rows * (nn + 1) * per_token;
  f.linear_macs += static_cast<double>(cfg.block2_layers) * (rows + 1) * per_token;
  f.linear_macs += 2.0 * d;  // head
  f.attention_macs +=
      static_cast<double>(cfg.block1_layers) * rows * 2.0 * (nn + 1) * (nn + 1) * d;
  f.attention_macs += static_cast<double>(cfg.block2_layers) * 2.0 * (rows + 1.0) * (rows + 1.0) * d;
  return f;
}

FlopCount encode_flops(const EncoderConfig& cfg) {
  const double d = cfg.dim;
  const double n = cfg.tokens();
  const double s = n + 1;
  FlopCount f;
  f.linear_macs += n * (static_cast<double>(cfg.patch) * cfg.patch * cfg.channels) * d;
  f.linear_macs += static_cast<double>(cfg.depth) * s * 12.0 * d * d;
  f.linear_macs += n * d * cfg.local_dim + d * cfg.global_dim;
  f.attention_macs += static_cast<double>(cfg.depth) * 2.0 * s * s * d;
  return f;
}

std::vector<float> reranker_config_to_meta(const RerankerConfig& cfg) {
  return {static_cast<float>(cfg.dim),   static_cast<float>(cfg.block1_layers),
          static_cast<float>(cfg.block2_layers), static_cast<float>(cfg.heads),
          static_cast<float>(cfg.nn),    static_cast<float>(cfg.top_k_tokens)};
}

RerankerConfig reranker_config_from_meta(const std::vector<float>& meta) {
  if (meta.size() != 6) throw FormatError("bad reranker meta length");
  RerankerConfig cfg;
  cfg.dim = static_cast<int>(meta[0]);
  cfg.block1_layers = static_cast<int>(meta[1]);
  cfg.block2_layers = static_cast<int>(meta[2]);
  cfg.heads = static_cast<int>(meta[3]);
  cfg.nn = static_cast<int>(meta[4]);
  cfg.top_k_tokens = static_cast<int>(meta[5]);
  cfg.validate();
  return cfg;
}

}  // namespace vpr
