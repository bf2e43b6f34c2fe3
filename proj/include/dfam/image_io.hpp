#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "dfam/tensor.hpp"

namespace dfam {

// Binary 16-bit PPM (P6, maxval 65535). Writing quantizes each channel value to
// round(v * 65535); images whose values already lie on that grid round-trip
// bit-identically.

inline void write_ppm(const std::string& path, const Tensor& img) {
  require_rank(img, 3, "write_ppm image");
  if (img.dim(0) != 3) throw ShapeError("write_ppm: expected [3,H,W]");
  const int H = img.dim(1), W = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ShapeError("write_ppm: cannot open " + path);
  f << "P6\n" << W << " " << H << "\n65535\n";
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = img.at3(c, y, x);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        const auto q = static_cast<uint16_t>(std::lround(v * 65535.0));
        const unsigned char bytes[2] = {static_cast<unsigned char>(q >> 8),
                                        static_cast<unsigned char>(q & 0xff)};
        f.write(reinterpret_cast<const char*>(bytes), 2);
      }
  if (!f) throw ShapeError("write_ppm: write failed for " + path);
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ShapeError("read_ppm: cannot open " + path);
  std::string magic;
  int W = 0, H = 0, maxval = 0;
  f >> magic >> W >> H >> maxval;
  if (magic != "P6" || W <= 0 || H <= 0 || (maxval != 255 && maxval != 65535))
    throw ShapeError("read_ppm: unsupported header in " + path);
  f.get();  // single whitespace after maxval
  Tensor img({3, H, W});
  const int bytes = maxval == 65535 ? 2 : 1;
  std::string buf(static_cast<size_t>(W) * 3 * static_cast<size_t>(bytes), '\0');
  for (int y = 0; y < H; ++y) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw ShapeError("read_ppm: truncated pixel data in " + path);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const size_t o = (static_cast<size_t>(x) * 3 + static_cast<size_t>(c)) * static_cast<size_t>(bytes);
        int v = static_cast<unsigned char>(buf[o]);
        if (bytes == 2) v = (v << 8) | static_cast<unsigned char>(buf[o + 1]);
        img.at3(c, y, x) = static_cast<double>(v) / maxval;
      }
  }
  return img;
}

}  // namespace dfam
