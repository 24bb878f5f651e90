#include "dana/detector/box.hpp"

#include <algorithm>
#include <sstream>

namespace dana::detector {

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double area_a = a.area(), area_b = b.area();
  if (area_a <= 0 || area_b <= 0) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

BoxXYXY clip(const BoxXYXY& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

std::string to_string(const BoxXYXY& b) {
  std::ostringstream os;
  os << '(' << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ')';
  return os.str();
}

}  // namespace dana::detector
