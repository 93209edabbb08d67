#pragma once

#include <algorithm>
#include <cmath>

namespace camfool {

// Axis-aligned rectangle in pixel coordinates, half-open: [x0, x0+w) x [y0, y0+h).
struct Rect {
  int x0 = 0, y0 = 0, w = 0, h = 0;

  int x1() const { return x0 + w; }
  int y1() const { return y0 + h; }
  long long area() const { return static_cast<long long>(w) * h; }
  bool empty() const { return w <= 0 || h <= 0; }

  bool contains(int x, int y) const { return x >= x0 && x < x1() && y >= y0 && y < y1(); }

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline Rect intersect(const Rect& a, const Rect& b) {
  const int x0 = std::max(a.x0, b.x0);
  const int y0 = std::max(a.y0, b.y0);
  const int x1 = std::min(a.x1(), b.x1());
  const int y1 = std::min(a.y1(), b.y1());
  if (x1 <= x0 || y1 <= y0) return Rect{};
  return Rect{x0, y0, x1 - x0, y1 - y0};
}

inline bool disjoint(const Rect& a, const Rect& b) { return intersect(a, b).empty(); }

inline double iou(const Rect& a, const Rect& b) {
  if (a.empty() || b.empty()) return 0.0;
  const double inter = static_cast<double>(intersect(a, b).area());
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Patch side for a square image: scaled from a 64px patch on a 224px image,
// i.e. about 8.2% of the image area.
inline int default_patch_side(int image_side) {
  return std::max(1, static_cast<int>(std::lround(image_side * 64.0 / 224.0)));
}

inline Rect default_patch_rect(int image_side) {
  const int s = default_patch_side(image_side);
  return Rect{0, 0, s, s};
}

// Decoy region mirrors the patch into the top-right corner.
inline Rect default_decoy_rect(int image_side) {
  const int s = default_patch_side(image_side);
  return Rect{image_side - s, 0, s, s};
}

}  // namespace camfool
