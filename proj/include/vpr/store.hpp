#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "vpr/local_features.hpp"

namespace vpr {

constexpr int kGlobalDim = 256;

enum class Split : uint8_t { reference = 0, query = 1 };

struct PlaceRecord {
  std::string id;
  double east = 0, north = 0;  // planar meters
  Split split = Split::reference;
  std::vector<float> global;  // unit-norm, kGlobalDim
  LocalDescriptorSet locals;
};

struct Candidate {
  std::string id;
  float score = 0;  // cosine similarity, or prob_true after reranking
};
using CandidateList = std::vector<Candidate>;

struct RecallResult {
  std::map<int, double> recall;  // k -> fraction
  int evaluated = 0;
  int excluded = 0;  // queries with no reference inside the radius
};

// In-memory feature store with exhaustive kNN retrieval. At this scale brute
// force is exact and fast; there is no approximate index.
class FeatureStore {
 public:
  // Rejects duplicate ids and globals that are not unit-norm.
  void add(PlaceRecord rec);

  size_t size() const { return records_.size(); }
  bool has(const std::string& id) const { return index_.count(id) != 0; }
  const PlaceRecord& at(const std::string& id) const;
  const PlaceRecord& at(size_t i) const { return records_[i]; }
  const std::vector<PlaceRecord>& records() const { return records_; }

  // The k reference records most cosine-similar to the query embedding.
  // Equal scores break toward the lexicographically smaller id.
  CandidateList knn(const std::vector<float>& query_global, int k) const;

  size_t reference_count() const;

  // Scalar type used for local features on save.
  void set_local_dtype(ScalarType t) { local_dtype_ = t; }
  ScalarType local_dtype() const { return local_dtype_; }

  void save(const std::string& path) const;
  static FeatureStore load(const std::string& path);

 private:
  std::vector<PlaceRecord> records_;
  std::unordered_map<std::string, size_t> index_;
  ScalarType local_dtype_ = ScalarType::f32;
};

// recall@k with a metric correctness radius. Queries with no reference within
// the radius are excluded from the denominator and counted.
RecallResult recall_at_k(const FeatureStore& store, const std::vector<std::string>& query_ids,
                         const std::vector<CandidateList>& results, const std::vector<int>& ks,
                         double radius_m = 25.0);

double geo_distance(const PlaceRecord& a, const PlaceRecord& b);

}  // namespace vpr
