#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dana/detector/box.hpp"

namespace dana::episodes {

using detector::BoxXYXY;

enum class ShapeKind {
  kCircle,
  kSquare,
  kTriangle,
  kRing,
  kCross,
  kDiamond,
  kStar5,
  kHexagon,
  kLBar,
  kTBar,
  kCrescent,
  kChevron,
  kPlus,
  kBowtie,
};

enum class Texture { kSolid, kStriped };

struct ShapeCategory {
  int id;
  ShapeKind kind;
  std::string_view name;
  double intensity_lo, intensity_hi;  // fill brightness band
  Texture texture;
};

inline constexpr int kNumCategories = 14;

const std::array<ShapeCategory, kNumCategories>& categories();
const ShapeCategory& category(int id);

/// Disjoint base/novel partition of the 14 categories.
struct ClassSplit {
  std::string name;
  std::vector<int> base;
  std::vector<int> novel;

  /// Presets: "default-10/4".
  static ClassSplit preset(std::string_view name);
  bool is_base(int id) const;
  bool is_novel(int id) const;
};

/// Membership test in the shape's local frame, where the shape spans roughly
/// [-1, 1] on both axes.
bool inside_shape(ShapeKind kind, double u, double v);

struct Instance {
  int category = 0;
  double cx = 0, cy = 0;  // center, pixels
  double scale = 16;      // extent (diameter of the local [-1,1] frame), pixels
  double rotation = 0;    // radians
  double intensity = 0.8;
  std::array<double, 3> hue{1.0, 1.0, 1.0};
};

inline constexpr double kMinScale = 10.0;
inline constexpr double kMaxScale = 28.0;
inline constexpr double kMaxInstanceIoU = 0.3;

struct SceneSpec {
  std::uint64_t seed = 0;  // drives background, clutter and noise
  std::vector<Instance> instances;
  int clutter = 0;         // number of distractor speckles
  double noise_sigma = 0.0;
  std::size_t height = 64, width = 64;
};

struct Annotation {
  BoxXYXY box;
  int category = 0;
  bool operator==(const Annotation&) const = default;
};

/// H x W x 3 image, channels interleaved, values in [0, 1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<double> rgb;
};

struct RenderedScene {
  Image image;
  std::vector<Annotation> annotations;
};

/// Thrown for scene specs that violate placement or scale constraints.
class InvalidScene : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Axis-aligned square of side `scale` around the instance center.
BoxXYXY nominal_box(const Instance& inst);

/// Anti-aliased rasterization (4x4 supersampling) plus background gradient,
/// speckles and Gaussian noise. Deterministic given the SceneSpec. Each
/// annotation is the bound of the 1/4-pixel cells the instance covers.
RenderedScene render_scene(const SceneSpec& spec);

std::uint64_t image_hash(const Image& image);

}  // namespace dana::episodes
