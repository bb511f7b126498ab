#include "vpr/store.hpp"

#include <algorithm>
#include <cmath>

#include "vpr/io.hpp"

namespace vpr {

namespace {
constexpr char kMagic[4] = {'R', '2', 'F', 'S'};
constexpr uint16_t kVersion = 1;
}  // namespace

void FeatureStore::add(PlaceRecord rec) {
  if (index_.count(rec.id)) throw Error("duplicate id: " + rec.id);
  if (static_cast<int>(rec.global.size()) != kGlobalDim)
    throw ShapeError("global descriptor must have " + std::to_string(kGlobalDim) +
                     " dimensions");
  double norm = 0;
  for (float v : rec.global) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  if (std::abs(norm - 1.0) > 1e-3)
    throw Error("global descriptor for " + rec.id + " is not unit-norm (|v| = " +
                std::to_string(norm) + ")");
  if (!std::isfinite(rec.east) || !std::isfinite(rec.north))
    throw Error("non-finite geo for " + rec.id);
  index_.emplace(rec.id, records_.size());
  records_.push_back(std::move(rec));
}

const PlaceRecord& FeatureStore::at(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error("unknown id: " + id);
  return records_[it->second];
}

size_t FeatureStore::reference_count() const {
  size_t n = 0;
  for (const auto& r : records_)
    if (r.split == Split::reference) ++n;
  return n;
}

CandidateList FeatureStore::knn(const std::vector<float>& query_global, int k) const {
  if (records_.empty()) throw Error("empty store");
  if (k <= 0) throw ConfigError("knn: k must be positive");
  if (static_cast<int>(query_global.size()) != kGlobalDim)
    throw ShapeError("knn: query dimension mismatch");

  CandidateList scored;
  scored.reserve(records_.size());
  for (const auto& rec : records_) {
    if (rec.split != Split::reference) continue;
    float dot = 0;
    for (int j = 0; j < kGlobalDim; ++j)
      dot += query_global[static_cast<size_t>(j)] * rec.global[static_cast<size_t>(j)];
    scored.push_back({rec.id, dot});
  }
  if (scored.empty()) throw Error("store has no reference records");
  std::sort(scored.begin(), scored.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  if (static_cast<int>(scored.size()) > k) scored.resize(static_cast<size_t>(k));
  return scored;
}

double geo_distance(const PlaceRecord& a, const PlaceRecord& b) {
  const double de = a.east - b.east, dn = a.north - b.north;
  return std::sqrt(de * de + dn * dn);
}

RecallResult recall_at_k(const FeatureStore& store, const std::vector<std::string>& query_ids,
                         const std::vector<CandidateList>& results, const std::vector<int>& ks,
                         double radius_m) {
  if (query_ids.size() != results.size())
    throw ShapeError("recall_at_k: queries and result lists differ in length");
  RecallResult out;
  std::map<int, int> hits;
  for (int k : ks) hits[k] = 0;

  for (size_t qi = 0; qi < query_ids.size(); ++qi) {
    const PlaceRecord& q = store.at(query_ids[qi]);
    bool has_close_ref = false;
    for (const auto& rec : store.records()) {
      if (rec.split != Split::reference) continue;
      if (geo_distance(q, rec) <= radius_m) {
        has_close_ref = true;
        break;
      }
    }
    if (!has_close_ref) {
      ++out.excluded;
      continue;
    }
    ++out.evaluated;
    const CandidateList& cands = results[qi];
    for (int k : ks) {
      bool hit = false;
      for (int i = 0; i < std::min<int>(k, static_cast<int>(cands.size())); ++i) {
        if (geo_distance(q, store.at(cands[static_cast<size_t>(i)].id)) <= radius_m) {
          hit = true;
          break;
        }
      }
      if (hit) ++hits[k];
    }
  }
  for (int k : ks)
    out.recall[k] = out.evaluated == 0 ? 0.0 : static_cast<double>(hits[k]) / out.evaluated;
  return out;
}

void FeatureStore::save(const std::string& path) const {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<uint16_t>(kVersion);
  w.put<uint64_t>(records_.size());
  for (const auto& rec : records_) {
    w.put_string(rec.id);
    w.put<double>(rec.east);
    w.put<double>(rec.north);
    w.put<uint8_t>(static_cast<uint8_t>(rec.split));
    w.put_bytes(rec.global.data(), rec.global.size() * sizeof(float));
    quantize_into(w, rec.locals, local_dtype_);
  }
  write_file(path, w.bytes());
}

FeatureStore FeatureStore::load(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  ByteReader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad store magic in " + path, 0);
  const uint16_t version = r.get<uint16_t>("version");
  if (version != kVersion)
    throw FormatError("unsupported store version " + std::to_string(version), 4);
  const uint64_t count = r.get<uint64_t>("record count");

  FeatureStore store;
  for (uint64_t i = 0; i < count; ++i) {
    PlaceRecord rec;
    rec.id = r.get_string("record id");
    rec.east = r.get<double>("east");
    rec.north = r.get<double>("north");
    const uint8_t split = r.get<uint8_t>("split");
    if (split > 1) throw FormatError("bad split tag", r.offset() - 1);
    rec.split = static_cast<Split>(split);
    rec.global.resize(kGlobalDim);
    r.get_bytes(rec.global.data(), rec.global.size() * sizeof(float), "global descriptor");
    rec.locals = dequantize_from(r);
    store.add(std::move(rec));
  }
  if (!r.at_end()) throw FormatError("trailing bytes in store", r.offset());
  return store;
}

}  // namespace vpr
