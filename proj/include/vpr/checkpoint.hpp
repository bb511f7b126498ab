#pragma once

#include <map>
#include <string>
#include <vector>

#include "vpr/tensor.hpp"

namespace vpr {

// Parameter checkpoint: magic "R2PK", version u16, then named f32 arrays,
// each with a shape prefix. Little-endian throughout.
//
//   entry := name_len u16, name bytes, ndim u8, dims u32[ndim], data f32[]
//
// Arrays named "meta.*" carry small config vectors instead of weights.
struct Checkpoint {
  ParamSet<float> params;
  std::map<std::string, std::vector<float>> meta;
};

void save_checkpoint(const std::string& path, const ParamSet<float>& params,
                     const std::map<std::string, std::vector<float>>& meta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vpr
