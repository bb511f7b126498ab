#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "vpr/image.hpp"
#include "vpr/store.hpp"

namespace vpr {

struct DataImage {
  std::string id;
  double east = 0, north = 0;
  Split split = Split::reference;
  Image image;
};

struct Dataset {
  std::vector<DataImage> images;

  const DataImage& by_id(const std::string& id) const;
  bool has(const std::string& id) const { return index_.count(id) != 0; }
  void rebuild_index();
  std::vector<int> indices_of(Split s) const;

 private:
  std::unordered_map<std::string, size_t> index_;
};

// Manifest is a UTF-8 CSV: id,east_m,north_m,split with a header row.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace vpr
