#include "vpr/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "vpr/error.hpp"

namespace vpr {

namespace {
std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}
}  // namespace

Config Config::parse_string(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash_at = line.find('#');
    if (hash_at != std::string::npos) line = line.substr(0, hash_at);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!value.empty() && value.front() == '"' && value.back() == '"' && value.size() >= 2)
      value = value.substr(1, value.size() - 2);
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    cfg.kv_[section.empty() ? key : section + "." + key] = value;
  }
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_string(ss.str());
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

double Config::get_num(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (...) {
    throw ConfigError("key '" + key + "' is not a number: " + it->second);
  }
}

int Config::get_int(const std::string& key, int fallback) const {
  const double v = get_num(key, fallback);
  const int i = static_cast<int>(v);
  if (static_cast<double>(i) != v) throw ConfigError("key '" + key + "' is not an integer");
  return i;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("key '" + key + "' is not a bool: " + it->second);
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : kv_) {  // std::map is already sorted
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

uint64_t Config::hash() const {
  const std::string c = canonical();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : c) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

void Config::apply(EncoderConfig& cfg) const {
  cfg.image_h = get_int("encoder.image_h", cfg.image_h);
  cfg.image_w = get_int("encoder.image_w", cfg.image_w);
  cfg.patch = get_int("encoder.patch", cfg.patch);
  cfg.depth = get_int("encoder.depth", cfg.depth);
  cfg.dim = get_int("encoder.dim", cfg.dim);
  cfg.heads = get_int("encoder.heads", cfg.heads);
  cfg.channels = get_int("encoder.channels", cfg.channels);
  cfg.global_dim = get_int("encoder.global_dim", cfg.global_dim);
  cfg.local_dim = get_int("encoder.local_dim", cfg.local_dim);
}

void Config::apply(RerankerConfig& cfg) const {
  cfg.dim = get_int("reranker.dim", cfg.dim);
  cfg.block1_layers = get_int("reranker.block1_layers", cfg.block1_layers);
  cfg.block2_layers = get_int("reranker.block2_layers", cfg.block2_layers);
  cfg.heads = get_int("reranker.heads", cfg.heads);
  cfg.nn = get_int("reranker.nn", cfg.nn);
  cfg.top_k_tokens = get_int("reranker.top_k_tokens", cfg.top_k_tokens);
}

void Config::apply(AblationFlags& flags) const {
  flags.use_pos_embed = get_bool("ablation.use_pos_embed", flags.use_pos_embed);
  flags.use_block1 = get_bool("ablation.use_block1", flags.use_block1);
  flags.use_block2 = get_bool("ablation.use_block2", flags.use_block2);
  flags.zero_attention = get_bool("ablation.zero_attention", flags.zero_attention);
  flags.zero_xy = get_bool("ablation.zero_xy", flags.zero_xy);
  flags.zero_correlation = get_bool("ablation.zero_correlation", flags.zero_correlation);
}

void Config::apply(TrainConfig& cfg) const {
  cfg.margin = get_num("train.margin", cfg.margin);
  cfg.lr = get_num("train.lr", cfg.lr);
  cfg.batch_triplets = get_int("train.batch_triplets", cfg.batch_triplets);
  cfg.epochs = get_int("train.epochs", cfg.epochs);
  cfg.mining_subset = get_int("train.mining_subset", cfg.mining_subset);
  cfg.seed = static_cast<uint64_t>(get_num("train.seed", static_cast<double>(cfg.seed)));
  cfg.weight_decay = get_num("train.weight_decay", cfg.weight_decay);
  cfg.val_fraction = get_num("train.val_fraction", cfg.val_fraction);
  cfg.val_topk = get_int("train.val_topk", cfg.val_topk);
  cfg.val_max_queries = get_int("train.val_max_queries", cfg.val_max_queries);
  apply(cfg.encoder);
  apply(cfg.reranker);
  apply(cfg.ablation);
}

}  // namespace vpr
