#include "gridsight/ppm.hpp"

#include <fstream>

#include "gridsight/tensor.hpp"

namespace gridsight {

namespace {

// next whitespace-delimited token, '#' comments run to end of line
std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(char(c));
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open image: " + path.string());
  if (next_token(in) != "P6") throw input_error("not a binary PPM (P6): " + path.string());
  Image img;
  try {
    img.w = std::stoi(next_token(in));
    img.h = std::stoi(next_token(in));
    int maxval = std::stoi(next_token(in));
    if (maxval != 255) throw input_error("unsupported PPM maxval in " + path.string());
  } catch (const std::logic_error&) {
    throw input_error("malformed PPM header: " + path.string());
  }
  if (img.w <= 0 || img.h <= 0) throw input_error("bad PPM dimensions: " + path.string());
  img.rgb.resize(size_t(img.w) * img.h * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
  if (in.gcount() != std::streamsize(img.rgb.size()))
    throw input_error("truncated PPM payload: " + path.string());
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot write image: " + path.string());
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
  if (!out) throw input_error("failed writing image: " + path.string());
}

Image resize_image(const Image& img, int size) {
  if (size < 1) throw input_error("resize_image: bad size");
  if (img.w == size && img.h == size) return img;
  Image out;
  out.w = out.h = size;
  out.rgb.resize(size_t(size) * size * 3);
  for (int y = 0; y < size; ++y) {
    int sy = int(int64_t(y) * img.h / size);
    for (int x = 0; x < size; ++x) {
      int sx = int(int64_t(x) * img.w / size);
      const uint8_t* s = img.px(sx, sy);
      uint8_t* d = out.px(x, y);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  }
  return out;
}

}  // namespace gridsight
