#pragma once

#include <string>
#include <vector>

#include "vpr/tensor.hpp"

namespace vpr {

// Interleaved float image, values in [0, 1].
struct Image {
  int h = 0, w = 0, c = 3;
  std::vector<float> pix;

  Image() = default;
  Image(int height, int width, int channels)
      : h(height), w(width), c(channels),
        pix(static_cast<size_t>(height) * width * channels, 0.0f) {}

  float& at(int y, int x, int ch) {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  float at(int y, int x, int ch) const {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }

  Tensor<float> to_tensor() const { return Tensor<float>({h, w, c}, pix); }
};

// Binary 8-bit PPM (P6).
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

}  // namespace vpr
