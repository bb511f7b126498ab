#include "vpr/checkpoint.hpp"

#include "vpr/io.hpp"

namespace vpr {

namespace {
constexpr char kMagic[4] = {'R', '2', 'P', 'K'};
constexpr uint16_t kVersion = 1;

void write_array(ByteWriter& w, const std::string& name, const std::vector<int>& shape,
                 const std::vector<float>& data) {
  w.put_string(name);
  w.put<uint8_t>(static_cast<uint8_t>(shape.size()));
  for (int e : shape) w.put<uint32_t>(static_cast<uint32_t>(e));
  w.put_bytes(data.data(), data.size() * sizeof(float));
}
}  // namespace

void save_checkpoint(const std::string& path, const ParamSet<float>& params,
                     const std::map<std::string, std::vector<float>>& meta) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<uint16_t>(kVersion);
  w.put<uint32_t>(static_cast<uint32_t>(params.size() + meta.size()));
  for (const auto& [name, vec] : meta)
    write_array(w, name, {1, static_cast<int>(vec.size())}, vec);
  for (const auto& [name, p] : params) write_array(w, name, p.value.shape, p.value.data);
  write_file(path, w.bytes());
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  ByteReader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad checkpoint magic in " + path, 0);
  const uint16_t version = r.get<uint16_t>("version");
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const uint32_t count = r.get<uint32_t>("array count");

  Checkpoint ck;
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string("array name");
    const uint8_t ndim = r.get<uint8_t>("ndim");
    std::vector<int> shape;
    size_t numel = 1;
    for (uint8_t d = 0; d < ndim; ++d) {
      const uint32_t e = r.get<uint32_t>("dim");
      shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    std::vector<float> data(numel);
    r.get_bytes(data.data(), numel * sizeof(float), name.c_str());
    if (name.rfind("meta.", 0) == 0)
      ck.meta.emplace(name, std::move(data));
    else
      ck.params.add(name, Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.at_end()) throw FormatError("trailing bytes in checkpoint", r.offset());
  return ck;
}

}  // namespace vpr
