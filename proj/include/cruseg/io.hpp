#pragma once

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/image.hpp"

namespace cruseg {

namespace fs = std::filesystem;

/// Writes through `<path>.tmp` and renames on success, so a failed write
/// never leaves a partial file at `path`.
inline void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
      body(out);
      out.flush();
      if (!out) throw std::runtime_error("write to " + tmp.string() + " failed");
    }
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& o) { o << text; });
}

/// Raw grey levels plus the declared maximum.
struct Pgm {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 255;
  std::vector<std::uint16_t> values;
};

namespace detail {

inline std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline unsigned long pgm_field(const std::string& buf, std::size_t& pos, const fs::path& path,
                               const char* what) {
  for (;;) {
    while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos) throw std::runtime_error(path.string() + ": malformed PGM header (" + what + ")");
  return std::stoul(buf.substr(start, pos - start));
}

}  // namespace detail

/// Binary PGM (P5), 8 or 16 bits per sample; 16-bit samples are big-endian.
inline Pgm read_pgm(const fs::path& path) {
  const std::string buf = detail::read_all(path);
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') {
    throw std::runtime_error(path.string() + ": not a binary PGM (P5) file");
  }
  std::size_t pos = 2;
  Pgm p;
  p.width = detail::pgm_field(buf, pos, path, "width");
  p.height = detail::pgm_field(buf, pos, path, "height");
  const auto maxval = detail::pgm_field(buf, pos, path, "maxval");
  if (p.width == 0 || p.height == 0) throw std::runtime_error(path.string() + ": zero image size");
  if (maxval == 0 || maxval > 65535) {
    throw std::runtime_error(path.string() + ": maxval " + std::to_string(maxval) + " out of range");
  }
  p.maxval = static_cast<unsigned>(maxval);
  ++pos;  // single whitespace before the raster
  const std::size_t bytes = p.maxval < 256 ? 1 : 2;
  const std::size_t n = p.width * p.height;
  if (buf.size() < pos + n * bytes) throw std::runtime_error(path.string() + ": truncated PGM raster");
  p.values.resize(n);
  const auto* d = reinterpret_cast<const unsigned char*>(buf.data() + pos);
  for (std::size_t i = 0; i < n; ++i) {
    p.values[i] = bytes == 1 ? d[i] : static_cast<std::uint16_t>((d[2 * i] << 8) | d[2 * i + 1]);
  }
  return p;
}

inline void write_pgm(const fs::path& path, const Pgm& p) {
  const bool wide = p.maxval > 255;
  atomic_write(path, [&](std::ostream& o) {
    o << "P5\n" << p.width << ' ' << p.height << '\n' << p.maxval << '\n';
    std::string raster;
    raster.reserve(p.values.size() * (wide ? 2 : 1));
    for (auto v : p.values) {
      if (wide) raster.push_back(static_cast<char>(v >> 8));
      raster.push_back(static_cast<char>(v & 0xff));
    }
    o.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  });
}

/// Quantizes [0,1] intensities to `bits` (8 or 16) and writes a PGM.
inline void write_gray_pgm(const fs::path& path, const GrayImage& img, int bits = 16) {
  if (bits != 8 && bits != 16) throw std::invalid_argument("PGM depth must be 8 or 16 bits");
  Pgm p{img.width, img.height, bits == 8 ? 255u : 65535u, {}};
  p.values.reserve(img.size());
  for (double v : img.pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("write_gray_pgm: intensity outside [0,1]");
    p.values.push_back(static_cast<std::uint16_t>(std::lround(v * p.maxval)));
  }
  write_pgm(path, p);
}

inline void write_mask_pgm(const fs::path& path, const Mask& m) {
  require_binary(m);
  Pgm p{m.width, m.height, 255, {}};
  for (auto v : m.pixels) p.values.push_back(v ? 255 : 0);
  write_pgm(path, p);
}

/// Mask PGM: 0 is background, maxval (255 for 8-bit files) is foreground.
inline Mask read_mask_pgm(const fs::path& path) {
  const Pgm p = read_pgm(path);
  Mask m(p.width, p.height);
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const auto v = p.values[i];
    if (v != 0 && v != p.maxval) {
      throw std::runtime_error(path.string() + ": mask value " + std::to_string(v) + " at pixel " +
                               std::to_string(i) + " is neither 0 nor " + std::to_string(p.maxval));
    }
    m.pixels[i] = v ? 1 : 0;
  }
  return m;
}

/// Little-endian float32 raster; dimensions live in `<path>.dims` as "W H".
inline GrayImage read_raw_f32(const fs::path& path) {
  fs::path dims = path;
  dims += ".dims";
  std::ifstream d(dims);
  if (!d) throw std::runtime_error("cannot open dimension file " + dims.string());
  std::size_t w = 0, h = 0;
  if (!(d >> w >> h) || w == 0 || h == 0) throw std::runtime_error(dims.string() + ": expected \"W H\"");
  const std::string buf = detail::read_all(path);
  if (buf.size() != w * h * 4) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(w * h * 4) +
                             " bytes, found " + std::to_string(buf.size()));
  }
  GrayImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(buf[4 * i + b]);
    img.pixels[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return img;
}

inline void write_raw_f32(const fs::path& path, const GrayImage& img) {
  atomic_write(path, [&](std::ostream& o) {
    for (double v : img.pixels) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const char le[4] = {static_cast<char>(bits), static_cast<char>(bits >> 8),
                          static_cast<char>(bits >> 16), static_cast<char>(bits >> 24)};
      o.write(le, 4);
    }
  });
  fs::path dims = path;
  dims += ".dims";
  write_text(dims, std::to_string(img.width) + " " + std::to_string(img.height) + "\n");
}

/// Grey levels as doubles; PGM samples are returned unscaled.
inline GrayImage read_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".raw" || ext == ".f32") return read_raw_f32(path);
  const Pgm p = read_pgm(path);
  GrayImage img(p.width, p.height);
  for (std::size_t i = 0; i < p.values.size(); ++i) img.pixels[i] = p.values[i];
  return img;
}

}  // namespace cruseg
