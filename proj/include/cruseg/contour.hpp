#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "cruseg/image.hpp"

namespace cruseg {

struct Point {
  double x = 0;
  double y = 0;
  bool operator==(const Point&) const = default;
};

/// A closed polyline; the first point is not repeated at the end.
using Polygon = std::vector<Point>;

/// Marching squares over the 0.5 level of a binary mask. Pixel (x, y) sits at
/// (x, y); the mask is padded with background so every contour closes.
/// Saddle cells keep diagonal foreground pixels apart. Contours come out in
/// scan order of their first segment.
inline std::vector<Polygon> mask_contours(const Mask& m) {
  const long W = static_cast<long>(m.width);
  const long H = static_cast<long>(m.height);
  auto at = [&](long x, long y) -> int {
    return (x < 0 || y < 0 || x >= W || y >= H) ? 0 : (m(x, y) != 0);
  };
  // Endpoints are kept in doubled coordinates so edge midpoints are integers.
  using Key = std::pair<long, long>;
  std::vector<std::array<Key, 2>> segs;
  for (long y = -1; y < H; ++y) {
    for (long x = -1; x < W; ++x) {
      const int tl = at(x, y), tr = at(x + 1, y), br = at(x + 1, y + 1), bl = at(x, y + 1);
      const int code = tl << 3 | tr << 2 | br << 1 | bl;
      const Key top{2 * x + 1, 2 * y}, right{2 * x + 2, 2 * y + 1}, bottom{2 * x + 1, 2 * y + 2},
          left{2 * x, 2 * y + 1};
      switch (code) {
        case 0: case 15: break;
        case 1: case 14: segs.push_back({left, bottom}); break;
        case 2: case 13: segs.push_back({bottom, right}); break;
        case 3: case 12: segs.push_back({left, right}); break;
        case 4: case 11: segs.push_back({top, right}); break;
        case 6: case 9: segs.push_back({top, bottom}); break;
        case 7: case 8: segs.push_back({left, top}); break;
        case 5:  // tr and bl set: cut each off on its own
          segs.push_back({top, right});
          segs.push_back({left, bottom});
          break;
        case 10:  // tl and br set
          segs.push_back({left, top});
          segs.push_back({bottom, right});
          break;
      }
    }
  }

  std::map<Key, std::vector<std::size_t>> by_point;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    by_point[segs[i][0]].push_back(i);
    by_point[segs[i][1]].push_back(i);
  }
  std::vector<char> used(segs.size(), 0);
  std::vector<Polygon> out;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    if (used[s]) continue;
    used[s] = 1;
    const Key start = segs[s][0];
    Key cur = segs[s][1];
    Polygon poly{{start.first / 2.0, start.second / 2.0}};
    while (cur != start) {
      poly.push_back({cur.first / 2.0, cur.second / 2.0});
      std::size_t next = segs.size();
      for (auto i : by_point[cur]) {
        if (!used[i]) {
          next = i;
          break;
        }
      }
      if (next == segs.size()) break;  // unreachable for padded masks
      used[next] = 1;
      cur = segs[next][0] == cur ? segs[next][1] : segs[next][0];
    }
    out.push_back(std::move(poly));
  }
  return out;
}

}  // namespace cruseg
