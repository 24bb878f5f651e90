#pragma once

#include <array>
#include <string>

namespace dana::detector {

/// Axis-aligned box in image pixels, corners (x1, y1) top-left and (x2, y2)
/// bottom-right.
struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x2 > x1 && y2 > y1; }
  std::array<double, 4> as_array() const { return {x1, y1, x2, y2}; }

  bool operator==(const BoxXYXY&) const = default;
};

/// Intersection over union; 0 when either box is degenerate.
double iou(const BoxXYXY& a, const BoxXYXY& b);

/// Clip to [0, width] x [0, height].
BoxXYXY clip(const BoxXYXY& b, double width, double height);

std::string to_string(const BoxXYXY& b);

}  // namespace dana::detector
