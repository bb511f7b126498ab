#include "vpr/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "vpr/error.hpp"

namespace vpr {

void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw Error("write_ppm: expected 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for writing: " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(img.at(y, x, ch), 0.0f, 1.0f);
        row[static_cast<size_t>(x) * 3 + ch] =
            static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw Error("write failed: " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw FormatError("not a binary PPM (P6): " + path);
  // skip whitespace and comments
  auto next_int = [&]() -> int {
    int ch = f.get();
    while (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '#') {
      if (ch == '#')
        while (ch != '\n' && ch != EOF) ch = f.get();
      ch = f.get();
    }
    int v = 0;
    bool any = false;
    while (ch >= '0' && ch <= '9') {
      v = v * 10 + (ch - '0');
      any = true;
      ch = f.get();
    }
    if (!any) throw FormatError("bad PPM header: " + path);
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw FormatError("unsupported PPM maxval: " + path);
  Image img(h, w, 3);
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw FormatError("truncated PPM payload: " + path);
  for (size_t i = 0; i < raw.size(); ++i) img.pix[i] = raw[i] / 255.0f;
  return img;
}

}  // namespace vpr
