#include "dana/episodes/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "dana/util/hash.hpp"

namespace dana::episodes {

namespace {

constexpr double kLow = 0.45, kMid = 0.60, kHigh = 0.75, kBand = 0.2;

constexpr std::array<ShapeCategory, kNumCategories> kCategories{{
    {0, ShapeKind::kCircle, "circle", kHigh, kHigh + kBand, Texture::kSolid},
    {1, ShapeKind::kSquare, "square", kMid, kMid + kBand, Texture::kSolid},
    {2, ShapeKind::kTriangle, "triangle", kHigh, kHigh + kBand, Texture::kStriped},
    {3, ShapeKind::kRing, "ring", kMid, kMid + kBand, Texture::kSolid},
    {4, ShapeKind::kCross, "cross", kLow, kLow + kBand, Texture::kSolid},
    {5, ShapeKind::kDiamond, "diamond", kMid, kMid + kBand, Texture::kStriped},
    {6, ShapeKind::kStar5, "star5", kHigh, kHigh + kBand, Texture::kSolid},
    {7, ShapeKind::kHexagon, "hexagon", kLow, kLow + kBand, Texture::kStriped},
    {8, ShapeKind::kLBar, "Lbar", kHigh, kHigh + kBand, Texture::kSolid},
    {9, ShapeKind::kTBar, "Tbar", kMid, kMid + kBand, Texture::kSolid},
    {10, ShapeKind::kCrescent, "crescent", kMid, kMid + kBand, Texture::kSolid},
    {11, ShapeKind::kChevron, "chevron", kLow, kLow + kBand, Texture::kStriped},
    {12, ShapeKind::kPlus, "plus", kHigh, kHigh + kBand, Texture::kStriped},
    {13, ShapeKind::kBowtie, "bowtie", kMid, kMid + kBand, Texture::kSolid},
}};

struct Pt {
  double x, y;
};

bool in_polygon(const std::vector<Pt>& poly, double u, double v) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Pt& a = poly[i];
    const Pt& b = poly[j];
    if ((a.y > v) != (b.y > v) && u < (b.x - a.x) * (v - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

std::vector<Pt> regular_polygon(int n, double radius, double phase) {
  std::vector<Pt> pts;
  for (int i = 0; i < n; ++i) {
    const double t = phase + 2.0 * std::numbers::pi * i / n;
    pts.push_back({radius * std::cos(t), radius * std::sin(t)});
  }
  return pts;
}

const std::vector<Pt>& star_polygon() {
  static const std::vector<Pt> pts = [] {
    std::vector<Pt> p;
    for (int i = 0; i < 10; ++i) {
      const double r = i % 2 == 0 ? 1.0 : 0.42;
      const double t = -std::numbers::pi / 2 + std::numbers::pi * i / 5;
      p.push_back({r * std::cos(t), r * std::sin(t)});
    }
    return p;
  }();
  return pts;
}

bool in_box(double u, double v, double u0, double u1, double v0, double v1) {
  return u >= u0 && u <= u1 && v >= v0 && v <= v1;
}

}  // namespace

const std::array<ShapeCategory, kNumCategories>& categories() { return kCategories; }

const ShapeCategory& category(int id) {
  if (id < 0 || id >= kNumCategories) throw std::out_of_range("category id " + std::to_string(id));
  return kCategories[static_cast<std::size_t>(id)];
}

ClassSplit ClassSplit::preset(std::string_view name) {
  if (name == "default-10/4") {
    return ClassSplit{"default-10/4", {0, 1, 2, 3, 4, 5, 7, 8, 9, 12}, {6, 10, 11, 13}};
  }
  throw std::invalid_argument("unknown class split preset '" + std::string(name) + "'");
}

bool ClassSplit::is_base(int id) const { return std::find(base.begin(), base.end(), id) != base.end(); }
bool ClassSplit::is_novel(int id) const { return std::find(novel.begin(), novel.end(), id) != novel.end(); }

bool inside_shape(ShapeKind kind, double u, double v) {
  const double r2 = u * u + v * v;
  switch (kind) {
    case ShapeKind::kCircle:
      return r2 <= 1.0;
    case ShapeKind::kSquare:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::kTriangle: {
      static const auto tri = regular_polygon(3, 1.0, -std::numbers::pi / 2);
      return in_polygon(tri, u, v);
    }
    case ShapeKind::kRing:
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case ShapeKind::kCross: {
      const double d1 = std::abs(u - v) / std::numbers::sqrt2;
      const double d2 = std::abs(u + v) / std::numbers::sqrt2;
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8 && (d1 <= 0.22 || d2 <= 0.22);
    }
    case ShapeKind::kDiamond:
      return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeKind::kStar5:
      return in_polygon(star_polygon(), u, v);
    case ShapeKind::kHexagon: {
      static const auto hex = regular_polygon(6, 1.0, 0.0);
      return in_polygon(hex, u, v);
    }
    case ShapeKind::kLBar:
      return in_box(u, v, -0.8, -0.3, -0.9, 0.9) || in_box(u, v, -0.8, 0.8, 0.4, 0.9);
    case ShapeKind::kTBar:
      return in_box(u, v, -0.9, 0.9, -0.9, -0.45) || in_box(u, v, -0.25, 0.25, -0.9, 0.9);
    case ShapeKind::kCrescent: {
      const double du = u - 0.45;
      return r2 <= 1.0 && du * du + v * v > 0.8 * 0.8;
    }
    case ShapeKind::kChevron: {
      static const std::vector<Pt> chevron{{-0.9, 0.1}, {0.0, -0.7}, {0.9, 0.1},
                                           {0.9, 0.6},  {0.0, -0.2}, {-0.9, 0.6}};
      return in_polygon(chevron, u, v);
    }
    case ShapeKind::kPlus:
      return in_box(u, v, -0.25, 0.25, -0.9, 0.9) || in_box(u, v, -0.9, 0.9, -0.25, 0.25);
    case ShapeKind::kBowtie:
      return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 * std::abs(u);
  }
  return false;
}

BoxXYXY nominal_box(const Instance& inst) {
  const double h = inst.scale / 2;
  return {inst.cx - h, inst.cy - h, inst.cx + h, inst.cy + h};
}

RenderedScene render_scene(const SceneSpec& spec) {
  if (spec.height == 0 || spec.width == 0) throw InvalidScene("empty image size");
  for (std::size_t i = 0; i < spec.instances.size(); ++i) {
    const auto& inst = spec.instances[i];
    category(inst.category);
    if (inst.scale < kMinScale || inst.scale > kMaxScale) {
      throw InvalidScene("instance scale " + std::to_string(inst.scale) + " outside [10, 28]");
    }
    const auto b = nominal_box(inst);
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > static_cast<double>(spec.width) ||
        b.y2 > static_cast<double>(spec.height)) {
      throw InvalidScene("instance " + std::to_string(i) + " leaves the image");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (detector::iou(b, nominal_box(spec.instances[j])) >= kMaxInstanceIoU) {
        throw InvalidScene("instances " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
      }
    }
  }

  const std::size_t h = spec.height, w = spec.width;
  std::mt19937_64 rng(util::derive_seed(spec.seed, 0x7363656eULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  RenderedScene out;
  out.image = Image{h, w, std::vector<double>(h * w * 3)};
  auto& px = out.image.rgb;

  // Background: dim gray with a gentle linear gradient.
  const double base = 0.08 + 0.25 * unit(rng);
  const double gx = (unit(rng) - 0.5) * 0.15, gy = (unit(rng) - 0.5) * 0.15;
  const std::array<double, 3> tint{0.9 + 0.2 * unit(rng), 0.9 + 0.2 * unit(rng), 0.9 + 0.2 * unit(rng)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double level = base + gx * (static_cast<double>(x) / w - 0.5) + gy * (static_cast<double>(y) / h - 0.5);
      for (int c = 0; c < 3; ++c) px[(y * w + x) * 3 + c] = level * tint[c];
    }

  // Speckles are drawn before instances so shapes stay intact.
  for (int s = 0; s < spec.clutter; ++s) {
    const auto sx = static_cast<std::size_t>(unit(rng) * static_cast<double>(w - 1));
    const auto sy = static_cast<std::size_t>(unit(rng) * static_cast<double>(h - 1));
    const std::size_t size = 1 + static_cast<std::size_t>(unit(rng) * 2.0);
    const std::array<double, 3> col{unit(rng), unit(rng), unit(rng)};
    for (std::size_t y = sy; y < std::min(h, sy + size); ++y)
      for (std::size_t x = sx; x < std::min(w, sx + size); ++x)
        for (int c = 0; c < 3; ++c) px[(y * w + x) * 3 + c] = 0.3 + 0.6 * col[c];
  }

  constexpr int kSub = 4;
  for (const auto& inst : spec.instances) {
    const auto& cat = category(inst.category);
    const double half = inst.scale / 2;
    const double cr = std::cos(inst.rotation), sr = std::sin(inst.rotation);
    // The rotated local frame fits within the circumscribed radius half*sqrt2.
    const double reach = half * std::numbers::sqrt2 + 1;
    const auto x0 = static_cast<long>(std::max(0.0, std::floor(inst.cx - reach)));
    const auto x1 = static_cast<long>(std::min(static_cast<double>(w) - 1, std::ceil(inst.cx + reach)));
    const auto y0 = static_cast<long>(std::max(0.0, std::floor(inst.cy - reach)));
    const auto y1 = static_cast<long>(std::min(static_cast<double>(h) - 1, std::ceil(inst.cy + reach)));
    // Annotation: union of the covered sub-pixel cells.
    double bx1 = static_cast<double>(w), by1 = static_cast<double>(h), bx2 = -1, by2 = -1;
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        int hits = 0;
        double stripe_acc = 0.0;
        for (int sy = 0; sy < kSub; ++sy)
          for (int sx = 0; sx < kSub; ++sx) {
            const double dx = static_cast<double>(x) + (sx + 0.5) / kSub - inst.cx;
            const double dy = static_cast<double>(y) + (sy + 0.5) / kSub - inst.cy;
            const double u = (cr * dx + sr * dy) / half;
            const double v = (-sr * dx + cr * dy) / half;
            if (inside_shape(cat.kind, u, v)) {
              ++hits;
              const double ex = dx + inst.cx, ey = dy + inst.cy, r = 0.5 / kSub;
              bx1 = std::min(bx1, ex - r);
              by1 = std::min(by1, ey - r);
              bx2 = std::max(bx2, ex + r);
              by2 = std::max(by2, ey + r);
              if (cat.texture == Texture::kStriped) {
                stripe_acc += static_cast<long>(std::floor((u + 1.0) * 2.5)) % 2 == 0 ? 1.0 : 0.45;
              } else {
                stripe_acc += 1.0;
              }
            }
          }
        if (hits == 0) continue;
        const double cov = static_cast<double>(hits) / (kSub * kSub);
        const double shade = stripe_acc / hits;
        for (int c = 0; c < 3; ++c) {
          double& p = px[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3 + c];
          p = (1 - cov) * p + cov * inst.intensity * inst.hue[c] * shade;
        }
      }
    if (bx2 >= 0) {
      out.annotations.push_back({BoxXYXY{bx1, by1, bx2, by2}, inst.category});
    }
  }

  if (spec.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (double& p : px) p += noise(rng);
  }
  for (double& p : px) p = std::clamp(p, 0.0, 1.0);
  return out;
}

std::uint64_t image_hash(const Image& image) {
  util::Fnv1a h;
  h.update(std::span<const double>(image.rgb));
  return h.digest();
}

}  // namespace dana::episodes
