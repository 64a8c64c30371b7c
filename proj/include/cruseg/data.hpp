#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cruseg/image.hpp"
#include "cruseg/io.hpp"
#include "cruseg/resize.hpp"

namespace cruseg {

enum class Split { train, test };
enum class Augmentation { none, hflip, vflip, hvflip };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline const char* to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::hflip: return "hflip";
    case Augmentation::vflip: return "vflip";
    case Augmentation::hvflip: return "hvflip";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train or test)");
}

struct RoiSample {
  GrayImage image;
  Mask mask;
  std::string id;
  Split split = Split::train;
  Augmentation augmentation = Augmentation::none;

  void validate() const {
    if (!image.same_extent(mask)) throw std::invalid_argument(id + ": image and mask sizes differ");
    for (double v : image.pixels) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(id + ": intensity outside [0,1]");
    }
    require_binary(mask, (id + " mask").c_str());
  }
};

struct BBox {
  long x0 = 0;
  long y0 = 0;
  long width = 0;
  long height = 0;

  std::string str() const {
    return "(" + std::to_string(x0) + ", " + std::to_string(y0) + ", " + std::to_string(width) +
           "x" + std::to_string(height) + ")";
  }
};

inline void require_box_inside(const BBox& b, std::size_t w, std::size_t h) {
  if (b.width < 1 || b.height < 1) throw std::invalid_argument("box " + b.str() + " is empty");
  if (b.x0 < 0 || b.y0 < 0 || b.x0 + b.width > static_cast<long>(w) ||
      b.y0 + b.height > static_cast<long>(h)) {
    throw std::out_of_range("box " + b.str() + " exceeds the " + std::to_string(w) + "x" +
                            std::to_string(h) + " source");
  }
}

template <class T>
Image<T> crop(const Image<T>& src, const BBox& b) {
  require_box_inside(b, src.width, src.height);
  Image<T> out(static_cast<std::size_t>(b.width), static_cast<std::size_t>(b.height));
  for (long y = 0; y < b.height; ++y) {
    for (long x = 0; x < b.width; ++x) out(x, y) = src(b.x0 + x, b.y0 + y);
  }
  return out;
}

/// Rescales to [0,1]; a constant image maps to all zeros.
inline GrayImage minmax_normalize(GrayImage img) {
  if (img.empty()) return img;
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double a = *lo, span = *hi - *lo;
  for (double& v : img.pixels) v = span > 0 ? (v - a) / span : 0.0;
  return img;
}

/// Crops both rasters to `box` and resamples to size x size. The mask is
/// resampled with the same bicubic filter and thresholded at 0.5. If the box
/// holds no foreground the sample is still returned and a note is appended
/// to `warnings` (when given).
inline RoiSample extract_and_resize(const GrayImage& source, const Mask& mask, const BBox& box,
                                    std::size_t size = 40,
                                    std::vector<std::string>* warnings = nullptr) {
  if (!source.same_extent(mask)) {
    throw std::invalid_argument("source image is " + std::to_string(source.width) + "x" +
                                std::to_string(source.height) + " but mask is " +
                                std::to_string(mask.width) + "x" + std::to_string(mask.height));
  }
  require_binary(mask);
  const GrayImage img = crop(source, box);
  const Mask m = crop(mask, box);

  RoiSample s;
  s.image = minmax_normalize(resize_bicubic(img, size, size));
  GrayImage mf(m.width, m.height);
  for (std::size_t i = 0; i < m.size(); ++i) mf.pixels[i] = m.pixels[i];
  const GrayImage mr = resize_bicubic(mf, size, size);
  s.mask = Mask(size, size);
  for (std::size_t i = 0; i < mr.size(); ++i) s.mask.pixels[i] = mr.pixels[i] >= 0.5 ? 1 : 0;
  if (warnings && count_foreground(m) == 0) {
    warnings->push_back("box " + box.str() + " contains no foreground");
  }
  return s;
}

template <class T>
Image<T> flip_horizontal(const Image<T>& a) {
  Image<T> o(a.width, a.height);
  for (std::size_t y = 0; y < a.height; ++y) {
    for (std::size_t x = 0; x < a.width; ++x) o(x, y) = a(a.width - 1 - x, y);
  }
  return o;
}

template <class T>
Image<T> flip_vertical(const Image<T>& a) {
  Image<T> o(a.width, a.height);
  for (std::size_t y = 0; y < a.height; ++y) {
    for (std::size_t x = 0; x < a.width; ++x) o(x, y) = a(x, a.height - 1 - y);
  }
  return o;
}

inline RoiSample apply_augmentation(const RoiSample& s, Augmentation a) {
  RoiSample o = s;
  o.augmentation = a;
  if (a == Augmentation::hflip || a == Augmentation::hvflip) {
    o.image = flip_horizontal(o.image);
    o.mask = flip_horizontal(o.mask);
  }
  if (a == Augmentation::vflip || a == Augmentation::hvflip) {
    o.image = flip_vertical(o.image);
    o.mask = flip_vertical(o.mask);
  }
  return o;
}

/// The original plus its three flips, in {none, hflip, vflip, hvflip} order.
inline std::vector<RoiSample> augment(const RoiSample& s) {
  if (s.split != Split::train) {
    throw std::invalid_argument("augment: sample '" + s.id + "' belongs to the test split");
  }
  if (s.augmentation != Augmentation::none) {
    throw std::invalid_argument("augment: sample '" + s.id + "' is already augmented");
  }
  return {s, apply_augmentation(s, Augmentation::hflip), apply_augmentation(s, Augmentation::vflip),
          apply_augmentation(s, Augmentation::hvflip)};
}

/// Quadruples training samples and passes test samples through.
inline std::vector<RoiSample> augment_stream(const std::vector<RoiSample>& in) {
  std::vector<RoiSample> out;
  for (const auto& s : in) {
    if (s.split == Split::train) {
      for (auto& a : augment(s)) out.push_back(std::move(a));
    } else {
      out.push_back(s);
    }
  }
  return out;
}

/// Fisher-Yates over [0, n) driven by mt19937_64, which unlike
/// std::shuffle gives the same order on every standard library.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// ---- manifest ------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  fs::path image_path;  // resolved against the manifest directory
  fs::path mask_path;   // empty when a polygon is given
  std::vector<std::pair<double, double>> polygon;
  BBox box;
  Split split = Split::train;
  std::size_t line = 0;
};

struct DatasetManifest {
  fs::path source;
  std::vector<ManifestRecord> records;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == s; }));
  }
};

inline constexpr const char* kManifestHeader = "id\timage_path\tmask_path\tx0\ty0\tw\th\tsplit";

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

template <class N>
N parse_number(const std::string& s, const std::string& where, const char* field) {
  N v{};
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc{} || r.ptr != end) {
    throw std::runtime_error(where + ": field " + field + " is not a number: '" + s + "'");
  }
  return v;
}

inline std::vector<std::pair<double, double>> parse_polygon(const std::string& spec,
                                                            const std::string& where) {
  std::vector<std::pair<double, double>> pts;
  std::stringstream ss(spec);
  std::string pair;
  while (std::getline(ss, pair, ';')) {
    const auto comma = pair.find(',');
    if (comma == std::string::npos) throw std::runtime_error(where + ": bad polygon vertex '" + pair + "'");
    pts.emplace_back(std::stod(pair.substr(0, comma)), std::stod(pair.substr(comma + 1)));
  }
  if (pts.size() < 3) throw std::runtime_error(where + ": polygon needs at least 3 vertices");
  return pts;
}

}  // namespace detail

/// Even-odd fill, sampled at pixel centres.
inline Mask rasterize_polygon(const std::vector<std::pair<double, double>>& poly, std::size_t width,
                              std::size_t height) {
  Mask m(width, height);
  const std::size_t n = poly.size();
  for (std::size_t y = 0; y < height; ++y) {
    const double py = static_cast<double>(y) + 0.5;
    for (std::size_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      bool in = false;
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto [xi, yi] = poly[i];
        const auto [xj, yj] = poly[j];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) in = !in;
      }
      m(x, y) = in ? 1 : 0;
    }
  }
  return m;
}

/// Parses a tab-separated manifest with header
/// `id image_path mask_path x0 y0 w h split`. mask_path may instead be
/// `polygon:x,y;x,y;...` in source pixel coordinates. Blank lines and lines
/// starting with '#' are skipped. An empty file is an empty manifest.
inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  DatasetManifest m;
  m.source = path;
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (!header) {
      if (line != kManifestHeader) {
        throw std::runtime_error(where + ": malformed header, expected the tab-separated columns "
                                 "id image_path mask_path x0 y0 w h split");
      }
      header = true;
      continue;
    }
    const auto f = detail::split_tabs(line);
    if (f.size() != 8) {
      throw std::runtime_error(where + ": malformed record, expected 8 tab-separated fields, got " +
                               std::to_string(f.size()));
    }
    ManifestRecord r;
    r.line = lineno;
    r.id = f[0];
    if (r.id.empty()) throw std::runtime_error(where + ": malformed record, empty id");
    if (!seen.insert(r.id).second) throw std::runtime_error(where + ": duplicate id '" + r.id + "'");
    r.image_path = base / f[1];
    if (!fs::exists(r.image_path)) {
      throw std::runtime_error(where + ": missing image file " + r.image_path.string());
    }
    if (f[2].rfind("polygon:", 0) == 0) {
      r.polygon = detail::parse_polygon(f[2].substr(8), where);
    } else {
      r.mask_path = base / f[2];
      if (!fs::exists(r.mask_path)) {
        throw std::runtime_error(where + ": missing mask file " + r.mask_path.string());
      }
    }
    r.box.x0 = detail::parse_number<long>(f[3], where, "x0");
    r.box.y0 = detail::parse_number<long>(f[4], where, "y0");
    r.box.width = detail::parse_number<long>(f[5], where, "w");
    r.box.height = detail::parse_number<long>(f[6], where, "h");
    if (r.box.width < 1 || r.box.height < 1) {
      throw std::runtime_error(where + ": malformed record, box width and height must be >= 1");
    }
    try {
      r.split = parse_split(f[7]);
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline RoiSample load_record(const ManifestRecord& r, std::size_t size = 40,
                             std::vector<std::string>* warnings = nullptr) {
  const std::string where = "record '" + r.id + "'";
  try {
    const GrayImage img = read_image(r.image_path);
    const Mask mask = r.polygon.empty() ? read_mask_pgm(r.mask_path)
                                        : rasterize_polygon(r.polygon, img.width, img.height);
    std::vector<std::string> notes;
    RoiSample s = extract_and_resize(img, mask, r.box, size, &notes);
    if (warnings) {
      for (auto& n : notes) warnings->push_back(where + ": " + n);
    }
    s.id = r.id;
    s.split = r.split;
    return s;
  } catch (const std::exception& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
}

struct SplitStreams {
  std::vector<RoiSample> train;
  std::vector<RoiSample> test;
};

/// Loads every record. Within each split, samples keep manifest order, or
/// follow a seeded permutation when `shuffle_seed` is given.
inline SplitStreams materialize(const DatasetManifest& m, std::optional<std::uint64_t> shuffle_seed = {},
                                std::size_t size = 40, std::vector<std::string>* warnings = nullptr) {
  SplitStreams out;
  for (const auto& r : m.records) {
    auto s = load_record(r, size, warnings);
    (r.split == Split::train ? out.train : out.test).push_back(std::move(s));
  }
  if (shuffle_seed) {
    auto permute = [](std::vector<RoiSample>& v, std::uint64_t seed) {
      std::vector<RoiSample> o;
      o.reserve(v.size());
      for (auto i : shuffled_indices(v.size(), seed)) o.push_back(std::move(v[i]));
      v = std::move(o);
    };
    permute(out.train, *shuffle_seed);
    permute(out.test, *shuffle_seed + 1);
  }
  return out;
}

/// Writes samples as 16-bit image PGMs, 8-bit mask PGMs and a manifest whose
/// boxes cover each full ROI.
inline void write_corpus(const fs::path& dir, const std::vector<RoiSample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ostringstream manifest;
  manifest << kManifestHeader << '\n';
  for (const auto& s : samples) {
    const std::string img = "images/" + s.id + ".pgm";
    const std::string msk = "masks/" + s.id + ".pgm";
    write_gray_pgm(dir / img, s.image, 16);
    write_mask_pgm(dir / msk, s.mask);
    manifest << s.id << '\t' << img << '\t' << msk << "\t0\t0\t" << s.image.width << '\t'
             << s.image.height << '\t' << to_string(s.split) << '\n';
  }
  write_text(dir / "manifest.tsv", manifest.str());
}

}  // namespace cruseg
