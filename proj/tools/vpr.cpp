#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "vpr/bench.hpp"
#include "vpr/checkpoint.hpp"
#include "vpr/config.hpp"
#include "vpr/synthetic.hpp"
#include "vpr/training.hpp"
#include "vpr/util.hpp"

using nlohmann::json;
using namespace vpr;

namespace {

void emit(const json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream f(out_path);
    if (!f) throw Error("cannot write " + out_path);
    f << j.dump(2) << "\n";
  }
}

json candidates_json(const CandidateList& list) {
  json arr = json::array();
  for (const auto& c : list) arr.push_back({{"id", c.id}, {"score", c.score}});
  return arr;
}

json recall_json(const RecallResult& r) {
  json j;
  for (const auto& [k, v] : r.recall) j["recall@" + std::to_string(k)] = v;
  j["evaluated"] = r.evaluated;
  j["excluded"] = r.excluded;
  return j;
}

std::string hash_hex(uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct LoadedCheckpoint {
  ParamSet<float> params;
  EncoderConfig encoder;
  RerankerConfig reranker;
  bool has_reranker_weights = false;
};

LoadedCheckpoint load_pipeline(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  LoadedCheckpoint out;
  if (ck.meta.count("meta.encoder"))
    out.encoder = encoder_config_from_meta(ck.meta.at("meta.encoder"));
  if (ck.meta.count("meta.reranker"))
    out.reranker = reranker_config_from_meta(ck.meta.at("meta.reranker"));
  out.has_reranker_weights = ck.params.has("rerank.input_proj.w");
  out.params = std::move(ck.params);
  return out;
}

void save_pipeline(const std::string& path, const ParamSet<float>& params,
                   const EncoderConfig& enc, const RerankerConfig& rr) {
  save_checkpoint(path, params,
                  {{"meta.encoder", encoder_config_to_meta(enc)},
                   {"meta.reranker", reranker_config_to_meta(rr)}});
}

const PlaceRecord& resolve_query(const FeatureStore& store, const std::string& query_id,
                                 const std::string& image_path, const std::string& params_path,
                                 PlaceRecord& scratch) {
  if (store.size() == 0) throw Error("empty store");
  if (!query_id.empty()) return store.at(query_id);
  if (image_path.empty()) throw ConfigError("need --query or --image");
  if (params_path.empty()) throw ConfigError("--image requires --params to encode it");
  LoadedCheckpoint ck = load_pipeline(params_path);
  EncodedImage enc = encode(ck.params, read_ppm(image_path), ck.encoder);
  scratch.id = "<image:" + image_path + ">";
  scratch.split = Split::query;
  scratch.global = enc.global;
  scratch.locals = select_top_k(enc, ck.reranker.top_k_tokens);
  return scratch;
}

Image attention_overlay(const Image& img, const Tensor<float>& attn) {
  float mx = 0;
  for (float v : attn.data) mx = std::max(mx, v);
  if (mx <= 0) mx = 1;
  Image out(img.h, img.w, 3);
  const int gh = attn.rows(), gw = attn.cols();
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      // bilinear sample of the normalized map at this pixel's grid position
      const double fy = (y + 0.5) / img.h * gh - 0.5;
      const double fx = (x + 0.5) / img.w * gw - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, gh - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, gw - 1);
      const int y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
      const double wy = std::clamp(fy - y0, 0.0, 1.0), wx = std::clamp(fx - x0, 0.0, 1.0);
      const double v = (attn.at(y0, x0) * (1 - wx) + attn.at(y0, x1) * wx) * (1 - wy) +
                       (attn.at(y1, x0) * (1 - wx) + attn.at(y1, x1) * wx) * wy;
      const float heat = static_cast<float>(v / mx);
      const float gray =
          0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
      out.at(y, x, 0) = 0.45f * gray + 0.55f * heat;
      out.at(y, x, 1) = 0.45f * gray + 0.55f * 0.25f * heat;
      out.at(y, x, 2) = 0.45f * gray + 0.55f * (1.0f - heat);
    }
  return out;
}

json pairs_json(const std::vector<AttentionPair>& pairs) {
  json arr = json::array();
  for (const auto& p : pairs)
    arr.push_back({{"x", p.x},
                   {"y", p.y},
                   {"x2", p.x2},
                   {"y2", p.y2},
                   {"weight", p.weight},
                   {"similarity", p.similarity},
                   {"row", p.row}});
  return arr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified place-recognition pipeline: global retrieval + learned reranking"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "cap on worker threads (0 = hardware)");

  // ---- generate -------------------------------------------------------------
  auto* cmd_gen = app.add_subcommand("generate", "produce a synthetic dataset with ground truth");
  WorldSpec wspec;
  std::string gen_out;
  cmd_gen->add_option("--out", gen_out, "output dataset directory")->required();
  cmd_gen->add_option("--seed", wspec.seed, "world seed");
  cmd_gen->add_option("--places", wspec.n_places, "number of places");
  cmd_gen->add_option("--views", wspec.views_per_place, "views per place");
  cmd_gen->add_option("--refs", wspec.refs_per_place, "reference views per place");
  cmd_gen->add_option("--extent", wspec.extent_m, "world side length in meters");
  cmd_gen->add_option("--image-h", wspec.image_h, "image height");
  cmd_gen->add_option("--image-w", wspec.image_w, "image width");
  cmd_gen->add_option("--shift", wspec.shift_px, "max augmentation shift in pixels");
  cmd_gen->add_option("--brightness", wspec.brightness, "brightness jitter range");
  cmd_gen->add_option("--noise", wspec.noise_sigma, "additive noise sigma");
  cmd_gen->add_option("--styles", wspec.n_styles, "background style pool size");
  cmd_gen->add_option("--glyphs", wspec.glyphs_per_place, "distinctive glyphs per place");

  // ---- train ----------------------------------------------------------------
  auto* cmd_train = app.add_subcommand("train", "run one training stage");
  std::string tr_stage, tr_config, tr_data, tr_out, tr_init, tr_metrics;
  int tr_epochs = -1;
  long long tr_seed = -1;
  cmd_train->add_option("--stage", tr_stage, "retrieval|rerank|finetune|end2end")->required();
  cmd_train->add_option("--config", tr_config, "TOML-style config file");
  cmd_train->add_option("--data", tr_data, "dataset directory")->required();
  cmd_train->add_option("--out", tr_out, "output checkpoint path")->required();
  cmd_train->add_option("--init", tr_init, "checkpoint to start from");
  cmd_train->add_option("--metrics", tr_metrics, "line-delimited JSON metrics log");
  cmd_train->add_option("--epochs", tr_epochs, "override epoch count");
  cmd_train->add_option("--seed", tr_seed, "override training seed");

  // ---- build-index ----------------------------------------------------------
  auto* cmd_index = app.add_subcommand("build-index", "build a feature store");
  std::string ix_features, ix_data, ix_params, ix_out;
  bool ix_half = false;
  int ix_k = -1;
  cmd_index->add_option("--features", ix_features, "pre-extracted feature directory");
  cmd_index->add_option("--data", ix_data, "dataset directory (needs --params)");
  cmd_index->add_option("--params", ix_params, "checkpoint for encoding images");
  cmd_index->add_option("--out", ix_out, "output store path")->required();
  cmd_index->add_flag("--half", ix_half, "store local features as float16");
  cmd_index->add_option("--k", ix_k, "local descriptors kept per image");

  // ---- query ----------------------------------------------------------------
  auto* cmd_query = app.add_subcommand("query", "retrieve nearest references for one query");
  std::string q_store, q_id, q_image, q_params, q_out;
  int q_k = 10;
  cmd_query->add_option("--store", q_store, "feature store")->required();
  cmd_query->add_option("--query", q_id, "id of a stored query record");
  cmd_query->add_option("--image", q_image, "PPM image to encode as the query");
  cmd_query->add_option("--params", q_params, "checkpoint (required with --image)");
  cmd_query->add_option("--k", q_k, "number of candidates");
  cmd_query->add_option("--out", q_out, "write JSON here instead of stdout");

  // ---- evaluate ---------------------------------------------------------------
  auto* cmd_eval = app.add_subcommand("evaluate", "recall@k before and after reranking");
  std::string ev_store, ev_params, ev_out, ev_config;
  int ev_topk = 100;
  bool ev_details = false;
  cmd_eval->add_option("--store", ev_store, "feature store")->required();
  cmd_eval->add_option("--params", ev_params, "checkpoint")->required();
  cmd_eval->add_option("--topk", ev_topk, "candidates reranked per query");
  cmd_eval->add_option("--config", ev_config, "config file (ablation flags)");
  cmd_eval->add_flag("--details", ev_details, "include per-query candidate lists");
  cmd_eval->add_option("--out", ev_out, "write JSON here instead of stdout");

  // ---- rerank -----------------------------------------------------------------
  auto* cmd_rerank = app.add_subcommand("rerank", "rerank the top candidates for one query");
  std::string rr_store, rr_params, rr_id, rr_image, rr_out;
  int rr_topk = 100;
  bool rr_dump_pairs = false;
  cmd_rerank->add_option("--store", rr_store, "feature store")->required();
  cmd_rerank->add_option("--params", rr_params, "checkpoint")->required();
  cmd_rerank->add_option("--query", rr_id, "id of a stored query record");
  cmd_rerank->add_option("--image", rr_image, "PPM image to encode as the query");
  cmd_rerank->add_option("--topk", rr_topk, "candidates to rerank");
  cmd_rerank->add_option("--out", rr_out, "results JSON path")->required();
  cmd_rerank->add_flag("--dump-pairs", rr_dump_pairs,
                       "include the top-20 attention pairs for the best match");

  // ---- bench ------------------------------------------------------------------
  auto* cmd_bench = app.add_subcommand("bench", "latency, bytes, and FLOP accounting");
  std::string be_store, be_params, be_data, be_out;
  int be_topk = 100, be_reps = 20;
  cmd_bench->add_option("--store", be_store, "feature store")->required();
  cmd_bench->add_option("--params", be_params, "checkpoint")->required();
  cmd_bench->add_option("--topk", be_topk, "candidates reranked per query");
  cmd_bench->add_option("--reps", be_reps, "timing repetitions (median reported)");
  cmd_bench->add_option("--data", be_data, "dataset directory for a real probe image");
  cmd_bench->add_option("--out", be_out, "write JSON here instead of stdout");

  // ---- visualize-attention ------------------------------------------------------
  auto* cmd_vis = app.add_subcommand("visualize-attention",
                                     "attention-map overlay and optional match pairs");
  std::string vz_params, vz_image, vz_other, vz_out;
  cmd_vis->add_option("--params", vz_params, "checkpoint")->required();
  cmd_vis->add_option("--image", vz_image, "input PPM")->required();
  cmd_vis->add_option("--other", vz_other, "second image for pair visualization");
  cmd_vis->add_option("--out", vz_out, "output path prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return 2;
  }

  worker_threads() = threads;

  try {
    if (*cmd_gen) {
      Dataset ds = generate(wspec);
      write_dataset(ds, gen_out);
      Config eff;
      eff.set("cmd", "generate");
      eff.set("seed", std::to_string(wspec.seed));
      eff.set("places", std::to_string(wspec.n_places));
      eff.set("views", std::to_string(wspec.views_per_place));
      emit(json{{"dir", gen_out},
                {"images", ds.images.size()},
                {"places", wspec.n_places},
                {"seed", wspec.seed},
                {"config_hash", hash_hex(eff.hash())}},
           "");
    } else if (*cmd_train) {
      TrainConfig cfg;
      Config file_cfg;
      if (!tr_config.empty()) file_cfg = Config::parse_file(tr_config);
      file_cfg.apply(cfg);
      if (tr_epochs > 0) cfg.epochs = tr_epochs;
      if (tr_seed >= 0) cfg.seed = static_cast<uint64_t>(tr_seed);

      const Stage stage = stage_from_string(tr_stage);
      Dataset data = load_dataset(tr_data);

      std::optional<LoadedCheckpoint> init;
      if (!tr_init.empty()) {
        init = load_pipeline(tr_init);
        cfg.encoder = init->encoder;  // stages must agree on the backbone shape
        if (init->has_reranker_weights) cfg.reranker = init->reranker;
      }

      TrainResult res = train(stage, cfg, data, init ? &init->params : nullptr, tr_metrics);
      save_pipeline(tr_out, res.params, cfg.encoder, cfg.reranker);

      Config eff;
      eff.set("cmd", "train");
      eff.set("stage", tr_stage);
      eff.set("cfg", file_cfg.canonical());
      eff.set("epochs", std::to_string(cfg.epochs));
      json j{{"stage", tr_stage},
             {"epochs", cfg.epochs},
             {"best_epoch", res.best_epoch},
             {"best_recall5", res.best_recall5},
             {"diverged", res.diverged},
             {"checkpoint", tr_out},
             {"seed", cfg.seed},
             {"config_hash", hash_hex(eff.hash())}};
      emit(j, "");
      if (res.diverged) {
        std::cerr << "training diverged: non-finite loss; best checkpoint kept\n";
        return 1;
      }
    } else if (*cmd_index) {
      if (ix_features.empty() == ix_data.empty())
        throw ConfigError("build-index needs exactly one of --features or --data");
      FeatureStore store;
      if (!ix_features.empty()) {
        for (auto& rec : ingest(ix_features)) store.add(std::move(rec));
        if (ix_half) store.set_local_dtype(ScalarType::f16);
      } else {
        if (ix_params.empty()) throw ConfigError("--data requires --params");
        LoadedCheckpoint ck = load_pipeline(ix_params);
        const int k = ix_k > 0 ? ix_k : ck.reranker.top_k_tokens;
        Dataset data = load_dataset(ix_data);
        store = build_store(ck.params, data, ck.encoder, k,
                            ix_half ? ScalarType::f16 : ScalarType::f32);
      }
      store.save(ix_out);
      size_t local_bytes = 0;
      for (const auto& rec : store.records())
        local_bytes += local_payload_bytes(rec.locals.size(), store.local_dtype());
      emit(json{{"store", ix_out},
                {"records", store.size()},
                {"references", store.reference_count()},
                {"local_payload_bytes", local_bytes},
                {"dtype", store.local_dtype() == ScalarType::f16 ? "f16" : "f32"}},
           "");
    } else if (*cmd_query) {
      FeatureStore store = FeatureStore::load(q_store);
      PlaceRecord scratch;
      const PlaceRecord& q = resolve_query(store, q_id, q_image, q_params, scratch);
      CandidateList cands = store.knn(q.global, q_k);
      Config eff;
      eff.set("cmd", "query");
      eff.set("k", std::to_string(q_k));
      emit(json{{"query", q.id},
                {"candidates", candidates_json(cands)},
                {"config_hash", hash_hex(eff.hash())}},
           q_out);
    } else if (*cmd_eval) {
      FeatureStore store = FeatureStore::load(ev_store);
      LoadedCheckpoint ck = load_pipeline(ev_params);
      AblationFlags flags;
      Config file_cfg;
      if (!ev_config.empty()) {
        file_cfg = Config::parse_file(ev_config);
        file_cfg.apply(flags);
        file_cfg.apply(ck.reranker);
      }
      EvalResult res = evaluate_store(store, ck.params, ck.reranker, flags, ev_topk);
      Config eff;
      eff.set("cmd", "evaluate");
      eff.set("topk", std::to_string(ev_topk));
      eff.set("cfg", file_cfg.canonical());
      json j{{"topk", ev_topk},
             {"pre_rerank", recall_json(res.pre)},
             {"post_rerank", recall_json(res.post)},
             {"config_hash", hash_hex(eff.hash())}};
      if (ev_details) {
        json queries = json::array();
        for (const auto& rec : store.records()) {
          if (rec.split != Split::query) continue;
          CandidateList pre = store.knn(rec.global, ev_topk);
          CandidateList post = rerank(rec, pre, store, ck.params, ck.reranker, flags);
          json pre_ids = json::array(), post_ids = json::array();
          for (const auto& c : pre) pre_ids.push_back(c.id);
          for (const auto& c : post) post_ids.push_back(c.id);
          queries.push_back({{"id", rec.id}, {"pre", pre_ids}, {"post", post_ids}});
        }
        j["queries"] = queries;
      }
      emit(j, ev_out);
    } else if (*cmd_rerank) {
      FeatureStore store = FeatureStore::load(rr_store);
      LoadedCheckpoint ck = load_pipeline(rr_params);
      PlaceRecord scratch;
      const PlaceRecord& q = resolve_query(store, rr_id, rr_image, rr_params, scratch);
      CandidateList pre = store.knn(q.global, rr_topk);
      std::vector<MatchScore> scores;
      CandidateList post = rerank(q, pre, store, ck.params, ck.reranker, {}, &scores);

      json post_arr = json::array();
      for (size_t i = 0; i < post.size(); ++i)
        post_arr.push_back({{"id", post[i].id},
                            {"prob_true", scores[i].prob_true},
                            {"logit_false", scores[i].logit_false},
                            {"logit_true", scores[i].logit_true}});
      Config eff;
      eff.set("cmd", "rerank");
      eff.set("topk", std::to_string(rr_topk));
      json j{{"query", q.id},
             {"topk", rr_topk},
             {"pre_rerank", candidates_json(pre)},
             {"post_rerank", post_arr},
             {"config_hash", hash_hex(eff.hash())}};
      if (rr_dump_pairs && !post.empty() && !q.locals.empty()) {
        const PlaceRecord& best = store.at(post[0].id);
        if (!best.locals.empty()) {
          PairTensor t = build_pair_features(q.locals, best.locals, ck.reranker.nn);
          j["pairs"] = pairs_json(top_attention_pairs(t, ck.params, ck.reranker, {}, 20));
          j["pairs_candidate"] = best.id;
        }
      }
      emit(j, rr_out);
    } else if (*cmd_bench) {
      FeatureStore store = FeatureStore::load(be_store);
      LoadedCheckpoint ck = load_pipeline(be_params);
      Dataset data;
      const Dataset* data_ptr = nullptr;
      if (!be_data.empty()) {
        data = load_dataset(be_data);
        data_ptr = &data;
      }
      CostReport r = run_bench(store, ck.params, ck.encoder, ck.reranker, be_topk, be_reps,
                               data_ptr);
      Config eff;
      eff.set("cmd", "bench");
      eff.set("topk", std::to_string(be_topk));
      emit(json{{"extract_ms", r.extract_ms},
                {"retrieval_ms", r.retrieval_ms},
                {"rerank_ms", r.rerank_ms},
                {"reps", r.reps},
                {"topk", r.topk},
                {"local_count", r.local_count},
                {"local_bytes_f32", r.local_bytes_f32},
                {"local_bytes_f16", r.local_bytes_f16},
                {"store_local_bytes_total", r.store_local_bytes_total},
                {"encode_gflops", r.encode.linear_macs / 1e9},
                {"encode_attention_gmacs", r.encode.attention_macs / 1e9},
                {"rerank_rows", r.rerank_rows},
                {"rerank_pair_gflops", r.rerank_per_pair.linear_macs / 1e9},
                {"rerank_pair_attention_gmacs", r.rerank_per_pair.attention_macs / 1e9},
                {"config_hash", hash_hex(eff.hash())}},
           be_out);
    } else if (*cmd_vis) {
      LoadedCheckpoint ck = load_pipeline(vz_params);
      Image img = read_ppm(vz_image);
      EncodedImage enc = encode(ck.params, img, ck.encoder);
      write_ppm(vz_out + ".ppm", attention_overlay(img, enc.attn_map));
      json j{{"overlay", vz_out + ".ppm"},
             {"grid_h", enc.attn_map.rows()},
             {"grid_w", enc.attn_map.cols()},
             {"cls_self_attention", enc.cls_self_attention}};
      if (!vz_other.empty()) {
        Image other = read_ppm(vz_other);
        EncodedImage enc2 = encode(ck.params, other, ck.encoder);
        write_ppm(vz_out + "_other.ppm", attention_overlay(other, enc2.attn_map));
        LocalDescriptorSet a = select_top_k(enc, ck.reranker.top_k_tokens);
        LocalDescriptorSet b = select_top_k(enc2, ck.reranker.top_k_tokens);
        PairTensor t = build_pair_features(a, b, ck.reranker.nn);
        ScoreResult score = score_pair(t, ck.params, ck.reranker);
        j["pairs"] = pairs_json(top_attention_pairs(t, ck.params, ck.reranker, {}, 20));
        j["prob_true"] = score.score.prob_true;
        j["other_overlay"] = vz_out + "_other.ppm";
      }
      emit(j, vz_out + ".json");
      std::cout << "wrote " << vz_out << ".ppm and " << vz_out << ".json\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
