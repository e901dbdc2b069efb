// Binary PGM (P5) image read/write, 8-bit grayscale.
#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mv3d {

struct PgmImage {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major
};

inline void write_pgm(const std::string& path, const PgmImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: not a P5 file: " + path);
  int w, h, maxval;
  is >> w >> h >> maxval;
  if (maxval != 255) throw std::runtime_error("read_pgm: expected 8-bit data in " + path);
  is.get();  // single whitespace after header
  PgmImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<size_t>(w) * h);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw std::runtime_error("read_pgm: truncated file " + path);
  return img;
}

}  // namespace mv3d
