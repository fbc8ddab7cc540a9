#pragma once

// Binary PGM/PPM (P5/P6) readers and writers, 8- and 16-bit.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "xmodal/error.hpp"

namespace xmodal {

struct RawImage {
  std::size_t width = 0, height = 0, channels = 1;
  unsigned maxval = 255;
  std::vector<std::uint16_t> samples;  ///< interleaved, row-major
};

inline void write_pnm(const std::string& path, const RawImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  const bool wide = img.maxval > 255;
  for (auto v : img.samples) {
    if (wide) os.put(static_cast<char>(v >> 8));
    os.put(static_cast<char>(v & 0xFF));
  }
  if (!os) throw IoError("write failed: " + path);
}

inline RawImage read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image: " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t += c;
    }
    return t;
  };
  RawImage img;
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw IoError("unsupported image format '" + magic + "' in " + path);
  img.channels = magic == "P6" ? 3 : 1;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    img.maxval = static_cast<unsigned>(std::stoul(token()));
  } catch (const std::exception&) {
    throw IoError("corrupt image header in " + path);
  }
  if (img.maxval == 0 || img.maxval > 65535) throw IoError("bad maxval in " + path);
  const bool wide = img.maxval > 255;
  const std::size_t n = img.width * img.height * img.channels;
  img.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    int hi = 0;
    if (wide) hi = is.get();
    const int lo = is.get();
    if (!is) throw IoError("truncated pixel data in " + path);
    img.samples[i] = static_cast<std::uint16_t>((hi << 8) | lo);
  }
  return img;
}

}  // namespace xmodal
