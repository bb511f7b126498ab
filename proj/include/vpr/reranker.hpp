#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "vpr/local_features.hpp"
#include "vpr/store.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

struct RerankerConfig {
  int dim = 32;
  int block1_layers = 2;
  int block2_layers = 6;
  int heads = 4;
  int nn = 5;             // feature-space neighbors per token
  int top_k_tokens = 500; // local descriptors kept per image

  void validate() const {
    if (dim % heads != 0) throw ConfigError("reranker dim must be divisible by heads");
    if (nn < 1) throw ConfigError("reranker needs at least one neighbor");
    if (block1_layers < 0 || block2_layers < 0) throw ConfigError("negative layer count");
  }
};

// Component toggles. Channel zeroing touches only the named channels of the
// input tensor; block toggles swap a transformer stage for mean pooling.
struct AblationFlags {
  bool use_pos_embed = true;
  bool use_block1 = true;
  bool use_block2 = true;
  bool zero_attention = false;    // zero A and A'
  bool zero_xy = false;           // zero x, y, x', y'
  bool zero_correlation = false;  // zero S

  bool any_zeroing() const { return zero_attention || zero_xy || zero_correlation; }
};

// Channel layout of one pair entry.
enum PairChannel : int { kQx = 0, kQy = 1, kQa = 2, kRx = 3, kRy = 4, kRa = 5, kSim = 6 };
constexpr int kPairChannels = 7;

// All-pairs nearest-neighbor tensor between two images' local descriptors:
// one row per owning token (query rows first), nn entries of
// (x, y, A, x', y', A', S) per row, S non-increasing across entries.
struct PairTensor {
  int rows = 0;
  int query_rows = 0;
  int nn = 0;
  std::vector<float> data;     // rows * nn * kPairChannels
  std::vector<uint8_t> valid;  // per row

  float& at(int row, int slot, int ch) {
    return data[(static_cast<size_t>(row) * nn + slot) * kPairChannels + ch];
  }
  float at(int row, int slot, int ch) const {
    return data[(static_cast<size_t>(row) * nn + slot) * kPairChannels + ch];
  }
  int valid_rows() const {
    int c = 0;
    for (uint8_t v : valid) c += v ? 1 : 0;
    return c;
  }
};

struct MatchScore {
  float logit_false = 0;
  float logit_true = 0;
  double prob_true = 0.5;
};

// prob_true from the logit difference; adding the same constant to both
// logits cannot change it.
MatchScore make_match_score(float logit_false, float logit_true);

// Neighbor selection: indices of the nn largest similarities, descending,
// ties toward the lower index; repeats the last neighbor when fewer exist.
template <typename T>
std::vector<int> top_neighbors(const T* sims, int count, int nn) {
  std::vector<int> order(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return a < b;
  });
  std::vector<int> out;
  out.reserve(static_cast<size_t>(nn));
  for (int s = 0; s < nn; ++s)
    out.push_back(s < count ? order[static_cast<size_t>(s)]
                            : order[static_cast<size_t>(count - 1)]);
  return out;
}

// Builds the pair tensor for (query, reference): per query token its nn most
// similar reference tokens, then symmetrically per reference token, rows
// concatenated query-side first.
PairTensor build_pair_features(const LocalDescriptorSet& q, const LocalDescriptorSet& r,
                               int nn = 5);

struct ScoreResult {
  MatchScore score;
  // Head-averaged class-row attention of the last Block-2 layer over the row
  // tokens; empty when Block-2 is ablated away.
  std::vector<float> row_attention;
};

ScoreResult score_pair(const PairTensor& t, const ParamSet<float>& params,
                       const RerankerConfig& cfg, const AblationFlags& flags = {});

// Pair scorer: probability that query and candidate show the same place, or
// a negative value when the candidate cannot be scored.
using PairScorer = std::function<double(const PlaceRecord& query, const PlaceRecord& cand)>;

// Reordering core: candidates sort by descending scorer output, stably, so
// equal scores keep retrieval order; unscorable candidates keep their
// retrieval score and sort after all scored ones.
CandidateList rerank_with(const PlaceRecord& query, const CandidateList& candidates,
                          const FeatureStore& store, const PairScorer& scorer);

// Reorders candidates by descending prob_true of the learned scorer, one
// batch over all candidate pairs.
CandidateList rerank(const PlaceRecord& query, const CandidateList& candidates,
                     const FeatureStore& store, const ParamSet<float>& params,
                     const RerankerConfig& cfg, const AblationFlags& flags = {},
                     std::vector<MatchScore>* scores_out = nullptr);

struct AttentionPair {
  float x = 0, y = 0;    // owning token
  float x2 = 0, y2 = 0;  // its rank-1 neighbor
  float weight = 0;      // class-row attention mass
  float similarity = 0;
  int row = 0;
};

// The m rows with the largest Block-2 class attention, reported with their
// top-neighbor coordinates. Weights come straight out of the stored
// attention matrix.
std::vector<AttentionPair> top_attention_pairs(const PairTensor& t,
                                               const ParamSet<float>& params,
                                               const RerankerConfig& cfg,
                                               const AblationFlags& flags = {}, int m = 20);

// ---------------------------------------------------------------------------
// Parameters and the differentiable scoring graph.
// ---------------------------------------------------------------------------

// Init scale matters here: at ViT-style 0.02 the attention logits start so
// close to uniform that the class readout is input-independent, per-example
// gradients nearly cancel, and training stalls on the ln(2) plateau. 0.35
// lets signal and gradient pass through the 2+6-layer stack from the first
// step (gradient clipping in the trainer handles the rougher landscape).
// The input projection rows are additionally scaled by the inverse spread of
// their channel, so the narrow-band attention and similarity channels
// contribute as much initial variance as the wide coordinate channels.
template <typename T>
void add_reranker_params(ParamSet<T>& ps, const RerankerConfig& cfg, std::mt19937_64& rng,
                         T std_ = T(0.35)) {
  cfg.validate();
  Tensor<T> proj = randn<T>({kPairChannels, cfg.dim}, rng, T(0.4));
  const T channel_gain[kPairChannels] = {T(1), T(1), T(12), T(1), T(1), T(12), T(6)};
  for (int ch = 0; ch < kPairChannels; ++ch)
    for (int j = 0; j < cfg.dim; ++j) proj.at(ch, j) *= channel_gain[ch];
  ps.add("rerank.input_proj.w", std::move(proj));
  ps.add("rerank.input_proj.b", Tensor<T>::zeros({1, cfg.dim}));
  ps.add("rerank.final_ln.g", Tensor<T>::full({1, cfg.dim}, T(1)));
  ps.add("rerank.final_ln.b", Tensor<T>::zeros({1, cfg.dim}));
  // zero-initialized class tokens: the class stream starts as pure attention
  // readout, so the logits depend on the pair data from the first step
  ps.add("rerank.cls1", Tensor<T>::zeros({1, cfg.dim}));
  ps.add("rerank.cls2", Tensor<T>::zeros({1, cfg.dim}));
  for (int l = 0; l < cfg.block1_layers; ++l)
    add_layer_params(ps, "rerank.block1.layer" + std::to_string(l), cfg.dim, rng, std_);
  for (int l = 0; l < cfg.block2_layers; ++l)
    add_layer_params(ps, "rerank.block2.layer" + std::to_string(l), cfg.dim, rng, std_);
  ps.add("rerank.head.w", randn<T>({cfg.dim, 2}, rng, std_));
  ps.add("rerank.head.b", Tensor<T>::zeros({1, 2}));
}

template <typename T>
struct RerankGraphOut {
  Var<T> logits;             // 1 x 2 (False, True)
  Tensor<T> row_attention;   // 1 x (rows+1) class row, empty unless Block-2 ran
};

// Scores one pair tensor given as a (rows*nn) x 7 matrix variable. Ablation
// channel masks are applied inside so gradients stop at zeroed channels.
template <typename T>
RerankGraphOut<T> rerank_logits(BoundParams<T>& p, Var<T> pair_matrix,
                                const std::vector<uint8_t>& row_valid, int nn,
                                const RerankerConfig& cfg, const AblationFlags& flags) {
  cfg.validate();
  Tape<T>& tape = p.tape();
  const int total = pair_matrix.rows();
  if (nn < 1 || total % nn != 0) throw ShapeError("rerank_logits: rows not divisible by nn");
  const int rows = total / nn;
  if (static_cast<int>(row_valid.size()) != rows)
    throw ShapeError("rerank_logits: row mask length mismatch");
  int valid_count = 0;
  for (uint8_t v : row_valid) valid_count += v ? 1 : 0;
  if (valid_count == 0) throw Error("rerank_logits: all rows are masked out");

  Var<T> x = pair_matrix;
  if (flags.any_zeroing()) {
    Tensor<T> mask = Tensor<T>::full({total, kPairChannels}, T(1));
    auto zero_channel = [&](int ch) {
      for (int i = 0; i < total; ++i) mask.at(i, ch) = T(0);
    };
    if (flags.zero_attention) {
      zero_channel(kQa);
      zero_channel(kRa);
    }
    if (flags.zero_xy) {
      zero_channel(kQx);
      zero_channel(kQy);
      zero_channel(kRx);
      zero_channel(kRy);
    }
    if (flags.zero_correlation) zero_channel(kSim);
    x = mul(x, tape.constant(std::move(mask)));
  }

  Var<T> proj = linear(x, p("rerank.input_proj.w"), p("rerank.input_proj.b"));

  // Positional tables enter at reduced amplitude: at this width a full-scale
  // sinusoid is an example-independent component large enough to drown the
  // pair features during cold-start training.
  const T pe_amp = T(0.15);

  // Block-1: per-row aggregation of the nn pair entries into one token.
  Var<T> row_tokens;
  if (flags.use_block1) {
    Var<T> seq = prepend_cls_blocks(proj, p("rerank.cls1"), nn);
    if (flags.use_pos_embed) {
      Tensor<T> table = sinusoidal_position_table<T>(nn + 1, cfg.dim);
      Tensor<T> tiled({rows * (nn + 1), cfg.dim});
      for (int r = 0; r < rows * (nn + 1); ++r)
        for (int j = 0; j < cfg.dim; ++j) tiled.at(r, j) = pe_amp * table.at(r % (nn + 1), j);
      seq = add(seq, tape.constant(std::move(tiled)));
    }
    for (int l = 0; l < cfg.block1_layers; ++l)
      seq = transformer_layer_blocked(
          seq, p.layer_weights("rerank.block1.layer" + std::to_string(l)), cfg.heads, nn + 1);
    std::vector<int> cls_ids(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) cls_ids[static_cast<size_t>(r)] = r * (nn + 1);
    row_tokens = gather_rows(seq, std::move(cls_ids));
  } else {
    row_tokens = block_mean_rows(proj, nn);
  }

  // Block-2: aggregation across all rows into one class token.
  Var<T> cls_out;
  Tensor<T> row_attention;
  if (flags.use_block2) {
    Var<T> seq = concat_rows<T>({p("rerank.cls2"), row_tokens});
    if (flags.use_pos_embed) {
      Tensor<T> table = sinusoidal_position_table<T>(rows + 1, cfg.dim);
      for (auto& v : table.data) v *= pe_amp;
      seq = add(seq, tape.constant(std::move(table)));
    }
    std::vector<uint8_t> key_valid(static_cast<size_t>(rows) + 1, 1);
    for (int r = 0; r < rows; ++r) key_valid[static_cast<size_t>(r) + 1] = row_valid[static_cast<size_t>(r)];
    for (int l = 0; l < cfg.block2_layers; ++l) {
      const bool last = l == cfg.block2_layers - 1;
      seq = transformer_layer_blocked(
          seq, p.layer_weights("rerank.block2.layer" + std::to_string(l)), cfg.heads, rows + 1,
          &key_valid, last ? &row_attention : nullptr);
    }
    cls_out = slice_rows(seq, 0, 1);
  } else {
    cls_out = mean_over_rows(row_tokens, &row_valid);
  }

  cls_out = layernorm_rows(cls_out, p("rerank.final_ln.g"), p("rerank.final_ln.b"));
  Var<T> logits = linear(cls_out, p("rerank.head.w"), p("rerank.head.b"));
  return {logits, std::move(row_attention)};
}

// Lifts a plain pair tensor into the graph as a constant and scores it.
template <typename T>
RerankGraphOut<T> rerank_logits_const(BoundParams<T>& p, const PairTensor& t,
                                      const RerankerConfig& cfg, const AblationFlags& flags) {
  Tensor<T> m({t.rows * t.nn, kPairChannels});
  for (size_t i = 0; i < t.data.size(); ++i) m.data[i] = static_cast<T>(t.data[i]);
  return rerank_logits(p, p.tape().constant(std::move(m)), t.valid, t.nn, cfg, flags);
}

// ---------------------------------------------------------------------------
// Differentiable pair construction, used when the backbone trains jointly
// with the reranker. Selection and neighbor indices come from current values
// (not differentiated); gradients flow through the gathered features,
// attention values, and similarities.
// ---------------------------------------------------------------------------

template <typename T>
struct SelectedGraph {
  Var<T> locals;  // k x local_dim, unit rows
  Var<T> attn;    // k x 1 attention values
  std::vector<std::pair<float, float>> coords;
};

template <typename T>
SelectedGraph<T> select_top_k_graph(const EncoderGraph<T>& enc, int k) {
  const Tensor<T>& row = enc.attn_row.value();
  const int n = row.cols() - 1;
  const std::vector<int> idx = top_attention_indices(row.data.data() + 1, n, k);

  SelectedGraph<T> out;
  out.locals = gather_rows(enc.locals, idx);
  std::vector<std::pair<int, int>> rc;
  rc.reserve(idx.size());
  for (int i : idx) rc.emplace_back(0, i + 1);  // column 0 is the CLS self-entry
  out.attn = gather_entries(enc.attn_row, std::move(rc));
  const auto all = token_coords(enc.grid_h, enc.grid_w);
  for (int i : idx) out.coords.push_back(all[static_cast<size_t>(i)]);
  return out;
}

template <typename T>
struct PairGraph {
  Var<T> matrix;  // (rows*nn) x 7, same values as the plain builder
  std::vector<uint8_t> valid;
  int rows = 0, query_rows = 0, nn = 0;
};

template <typename T>
PairGraph<T> build_pair_features_graph(const SelectedGraph<T>& q, const SelectedGraph<T>& r,
                                       int nn) {
  Tape<T>& tape = *q.locals.tape;
  const int kq = q.locals.rows(), kr = r.locals.rows();
  if (kq == 0 || kr == 0) throw Error("build_pair_features_graph: empty side");
  Var<T> sims = matmul(q.locals, r.locals, false, true);
  const Tensor<T>& sv = sims.value();

  std::vector<std::vector<int>> qnb(static_cast<size_t>(kq)), rnb(static_cast<size_t>(kr));
  for (int i = 0; i < kq; ++i)
    qnb[static_cast<size_t>(i)] = top_neighbors(sv.data.data() + static_cast<size_t>(i) * kr, kr, nn);
  std::vector<T> col(static_cast<size_t>(kq));
  for (int j = 0; j < kr; ++j) {
    for (int i = 0; i < kq; ++i) col[static_cast<size_t>(i)] = sv.at(i, j);
    rnb[static_cast<size_t>(j)] = top_neighbors(col.data(), kq, nn);
  }

  const int rows = kq + kr;
  const int total = rows * nn;
  Tensor<T> cx({total, 1}), cy({total, 1}), cx2({total, 1}), cy2({total, 1});
  std::vector<std::pair<int, int>> own_a, nb_a_q, nb_a_r, s_q, s_r;
  std::vector<std::pair<int, int>> own_a_r;
  int at = 0;
  for (int i = 0; i < kq; ++i)
    for (int s = 0; s < nn; ++s, ++at) {
      const int j = qnb[static_cast<size_t>(i)][static_cast<size_t>(s)];
      cx.data[static_cast<size_t>(at)] = static_cast<T>(q.coords[static_cast<size_t>(i)].first);
      cy.data[static_cast<size_t>(at)] = static_cast<T>(q.coords[static_cast<size_t>(i)].second);
      cx2.data[static_cast<size_t>(at)] = static_cast<T>(r.coords[static_cast<size_t>(j)].first);
      cy2.data[static_cast<size_t>(at)] = static_cast<T>(r.coords[static_cast<size_t>(j)].second);
      own_a.emplace_back(i, 0);
      nb_a_r.emplace_back(j, 0);
      s_q.emplace_back(i, j);
    }
  for (int j = 0; j < kr; ++j)
    for (int s = 0; s < nn; ++s, ++at) {
      const int i = rnb[static_cast<size_t>(j)][static_cast<size_t>(s)];
      cx.data[static_cast<size_t>(at)] = static_cast<T>(r.coords[static_cast<size_t>(j)].first);
      cy.data[static_cast<size_t>(at)] = static_cast<T>(r.coords[static_cast<size_t>(j)].second);
      cx2.data[static_cast<size_t>(at)] = static_cast<T>(q.coords[static_cast<size_t>(i)].first);
      cy2.data[static_cast<size_t>(at)] = static_cast<T>(q.coords[static_cast<size_t>(i)].second);
      own_a_r.emplace_back(j, 0);
      nb_a_q.emplace_back(i, 0);
      s_r.emplace_back(i, j);
    }

  Var<T> a_own = concat_rows<T>({gather_entries(q.attn, own_a), gather_entries(r.attn, own_a_r)});
  Var<T> a_nb = concat_rows<T>({gather_entries(r.attn, nb_a_r), gather_entries(q.attn, nb_a_q)});
  Var<T> s_col = concat_rows<T>({gather_entries(sims, s_q), gather_entries(sims, s_r)});

  PairGraph<T> out;
  out.matrix = concat_cols<T>({tape.constant(std::move(cx)), tape.constant(std::move(cy)), a_own,
                               tape.constant(std::move(cx2)), tape.constant(std::move(cy2)), a_nb,
                               s_col});
  out.valid.assign(static_cast<size_t>(rows), 1);
  out.rows = rows;
  out.query_rows = kq;
  out.nn = nn;
  return out;
}

// Analytic per-forward cost. linear_macs counts dense-layer
// multiply-accumulates (the convention used by common FLOP profilers, which
// is what published cost tables report); attention_macs counts the QK^T and
// attention-weighted sums those profilers skip.
struct FlopCount {
  double linear_macs = 0;
  double attention_macs = 0;
};

FlopCount rerank_pair_flops(int rows, int nn, const RerankerConfig& cfg);
FlopCount encode_flops(const EncoderConfig& cfg);

std::vector<float> reranker_config_to_meta(const RerankerConfig& cfg);
RerankerConfig reranker_config_from_meta(const std::vector<float>& meta);

}  // namespace vpr
