#pragma once

#include <stdexcept>
#include <string>

namespace wssod {

/// Normalized image coordinate: x is a fraction of width, y of height.
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  bool valid() const { return x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0; }
  bool operator==(const Point2&) const = default;
};

struct BoxXYXY;

/// Normalized center-format box. This is the canonical storage form.
struct BoxCCWH {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  bool valid() const;
  bool operator==(const BoxCCWH&) const = default;
};

/// Corner-format box, used for overlap arithmetic.
struct BoxXYXY {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 1.0;
  double y2 = 1.0;

  bool valid() const;
  double area() const { return (x2 - x1) * (y2 - y1); }
  bool contains(const Point2& p) const { return p.x > x1 && p.x < x2 && p.y > y1 && p.y < y2; }
  bool operator==(const BoxXYXY&) const = default;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Smallest width/height a predicted box may take before loss or overlap math.
inline constexpr double kMinBoxSide = 1e-4;

BoxXYXY to_corners(const BoxCCWH& b);
BoxCCWH from_corners(const BoxXYXY& b);

/// Clips the corner form to [0,1]^2 and floors w/h at kMinBoxSide.
BoxCCWH clamp_to_image(const BoxCCWH& b);

double iou(const BoxXYXY& a, const BoxXYXY& b);
double giou(const BoxXYXY& a, const BoxXYXY& b);
inline double iou(const BoxCCWH& a, const BoxCCWH& b) { return iou(to_corners(a), to_corners(b)); }
inline double giou(const BoxCCWH& a, const BoxCCWH& b) { return giou(to_corners(a), to_corners(b)); }

/// Sum of absolute coordinate differences in ccwh form.
double l1_box(const BoxCCWH& a, const BoxCCWH& b);

// Left-right mirror. The flip axis is fixed; see FlipAxis in config for the recorded value.
inline Point2 hflip_point(const Point2& p) { return {1.0 - p.x, p.y}; }
inline BoxCCWH hflip_box(const BoxCCWH& b) { return {1.0 - b.cx, b.cy, b.w, b.h}; }

std::string to_string(const BoxCCWH& b);

}  // namespace wssod
