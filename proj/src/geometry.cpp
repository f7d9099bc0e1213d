#include "wssod/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace wssod {

bool BoxCCWH::valid() const {
  return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) && w > 0.0 &&
         h > 0.0;
}

bool BoxXYXY::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 &&
         y1 < y2;
}

BoxXYXY to_corners(const BoxCCWH& b) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) {
    throw GeometryError("degenerate box " + to_string(b));
  }
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

BoxCCWH from_corners(const BoxXYXY& b) {
  if (!(b.x2 > b.x1) || !(b.y2 > b.y1)) {
    throw GeometryError("degenerate corner box");
  }
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1};
}

BoxCCWH clamp_to_image(const BoxCCWH& b) {
  const double w = std::max(b.w, kMinBoxSide);
  const double h = std::max(b.h, kMinBoxSide);
  // already inside: return untouched rather than round-tripping through corners
  if (b.w >= kMinBoxSide && b.h >= kMinBoxSide && b.cx - 0.5 * w >= 0.0 && b.cx + 0.5 * w <= 1.0 &&
      b.cy - 0.5 * h >= 0.0 && b.cy + 0.5 * h <= 1.0)
    return b;
  double x1 = std::clamp(b.cx - 0.5 * w, 0.0, 1.0 - kMinBoxSide);
  double y1 = std::clamp(b.cy - 0.5 * h, 0.0, 1.0 - kMinBoxSide);
  double x2 = std::clamp(b.cx + 0.5 * w, x1 + kMinBoxSide, 1.0);
  double y2 = std::clamp(b.cy + 0.5 * h, y1 + kMinBoxSide, 1.0);
  return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
}

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  if (uni <= 0.0 || hull <= 0.0) return 0.0;
  return inter / uni - (hull - uni) / hull;
}

double l1_box(const BoxCCWH& a, const BoxCCWH& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

std::string to_string(const BoxCCWH& b) {
  std::ostringstream os;
  os << "(" << b.cx << ", " << b.cy << ", " << b.w << ", " << b.h << ")";
  return os.str();
}

}  // namespace wssod
