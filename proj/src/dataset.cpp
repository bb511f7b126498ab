#include "vpr/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vpr/error.hpp"

namespace fs = std::filesystem;

namespace vpr {

const DataImage& Dataset::by_id(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error("unknown image id: " + id);
  return images[it->second];
}

void Dataset::rebuild_index() {
  index_.clear();
  for (size_t i = 0; i < images.size(); ++i) {
    if (!index_.emplace(images[i].id, i).second)
      throw Error("duplicate image id: " + images[i].id);
  }
}

std::vector<int> Dataset::indices_of(Split s) const {
  std::vector<int> out;
  for (size_t i = 0; i < images.size(); ++i)
    if (images[i].split == s) out.push_back(static_cast<int>(i));
  return out;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw Error("cannot write manifest in " + dir);
  manifest << "id,east_m,north_m,split\n";
  manifest.precision(17);
  for (const auto& img : ds.images) {
    manifest << img.id << ',' << img.east << ',' << img.north << ','
             << (img.split == Split::query ? "query" : "reference") << '\n';
    write_ppm((fs::path(dir) / "images" / (img.id + ".ppm")).string(), img.image);
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw Error("cannot open manifest in " + dir);
  Dataset ds;
  std::string line;
  bool first = true;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (first) {  // header
      first = false;
      continue;
    }
    std::stringstream ss(line);
    std::string id, east, north, split;
    if (!std::getline(ss, id, ',') || !std::getline(ss, east, ',') ||
        !std::getline(ss, north, ',') || !std::getline(ss, split))
      throw FormatError("malformed manifest row: " + line);
    DataImage img;
    img.id = id;
    img.east = std::stod(east);
    img.north = std::stod(north);
    if (split == "query")
      img.split = Split::query;
    else if (split == "reference")
      img.split = Split::reference;
    else
      throw FormatError("unknown split '" + split + "' for " + id);
    img.image = read_ppm((fs::path(dir) / "images" / (id + ".ppm")).string());
    ds.images.push_back(std::move(img));
  }
  ds.rebuild_index();
  return ds;
}

}  // namespace vpr
