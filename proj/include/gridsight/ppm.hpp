#pragma once

// Binary PPM (P6, maxval 255) reader/writer. The only image codec the
// pipeline depends on; writes are canonical so outputs are byte-stable.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gridsight {

struct Image {
  int w = 0, h = 0;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

  uint8_t* px(int x, int y) { return rgb.data() + (int64_t(y) * w + x) * 3; }
  const uint8_t* px(int x, int y) const { return rgb.data() + (int64_t(y) * w + x) * 3; }
};

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

// Plain stretch resize, nearest-neighbor sampling.
Image resize_image(const Image& img, int size);

}  // namespace gridsight
