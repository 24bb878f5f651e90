#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dana/episodes/shapes.hpp"

namespace dana::episodes {

/// Train pool draws base categories only, test pool novel categories only.
enum class Pool { kTrain, kTest };

std::string_view to_string(Pool pool);
Pool parse_pool(std::string_view s);
const std::vector<int>& pool_categories(const ClassSplit& split, Pool pool);

/// Appearance knobs shared by queries and supports.
struct SceneStyle {
  int clutter_min = 2, clutter_max = 10;
  double noise_sigma = 0.03;
  std::size_t image_size = 64;
  double support_scale_min = 18.0;
  double support_scale_max = 28.0;
};

/// A query image with its full annotation list.
struct QueryScene {
  std::uint64_t seed = 0;
  Image image;
  std::vector<Annotation> annotations;
};

/// K support images of one category.
struct SupportSet {
  int category = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<Image> images;
};

struct EpisodeTask {
  std::vector<SupportSet> ways;  // N support sets
  QueryScene query;
  int n = 1, k = 1;
  int m = 0;  // ways whose category appears in the query

  /// Ground-truth boxes of way `w` in the query.
  std::vector<BoxXYXY> targets(std::size_t w) const;
};

/// 1-3 instances from `cats`, pairwise nominal IoU < 0.3, placed by
/// rejection sampling. When `required` is set, the first instance has that
/// category. Throws InvalidScene after 100 failed placements of an instance.
SceneSpec sample_scene_spec(std::uint64_t seed, const std::vector<int>& cats, const SceneStyle& style,
                            std::optional<int> required = std::nullopt);

QueryScene make_query(std::uint64_t seed, const std::vector<int>& cats, const SceneStyle& style = {},
                      std::optional<int> required = std::nullopt);

/// One centered instance of `category` plus background clutter and noise.
Image make_support(std::uint64_t seed, int category, const SceneStyle& style = {});
SupportSet make_support_set(std::uint64_t seed, int category, int k, const SceneStyle& style = {});

/// Pure function of its arguments. The query contains at least one
/// instance of at least one sampled way; the other N - M ways are drawn from
/// the pool categories absent from the query.
EpisodeTask sample_episode(const ClassSplit& split, std::uint64_t seed, int n, int k, Pool pool,
                           const SceneStyle& style = {});

/// Where training queries come from: generated online, or replayed from the
/// seeds of a dataset manifest.
struct QuerySource {
  std::vector<std::uint64_t> manifest_seeds;  // empty: generate online
};

/// Two-way contrastive training sample: the same query paired with a
/// positive support set (category present) and a negative one (absent).
struct ContrastiveBatch {
  QueryScene query;
  SupportSet positive;
  SupportSet negative;
  std::vector<BoxXYXY> positive_targets;
};

ContrastiveBatch build_contrastive_batch(const ClassSplit& split, std::uint64_t seed, int k,
                                         const SceneStyle& style = {}, const QuerySource& source = {});

/// Fixed query set for the support-sensitivity study.
std::vector<QueryScene> sensitivity_queries(const ClassSplit& split, Pool pool, std::size_t count,
                                            std::uint64_t seed, const SceneStyle& style = {});

/// T independent K-shot support sets for `category`; draw t depends only on
/// (seed, category, t). The query set is not touched.
std::vector<SupportSet> sensitivity_support_draws(const std::vector<QueryScene>& fixed_queries,
                                                  int category, int k, int t, std::uint64_t seed,
                                                  const SceneStyle& style = {});

std::uint64_t query_set_hash(const std::vector<QueryScene>& queries);

// ---------------------------------------------------------------------------
// Dataset manifest: one JSON object per line with keys in this order:
//   path         image file relative to the manifest directory (binary P6)
//   seed         scene seed; make_query(seed, pool categories) re-renders it
//   pool         "train" | "test"
//   annotations  [[category, x1, y1, x2, y2], ...]

struct ManifestRecord {
  std::string path;
  std::uint64_t seed = 0;
  Pool pool = Pool::kTrain;
  std::vector<Annotation> annotations;
};

std::string manifest_line(const ManifestRecord& rec);
ManifestRecord parse_manifest_line(const std::string& line);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Renders `count` query scenes of `pool` into `dir` (PPM images plus
/// manifest.jsonl). Refuses to overwrite an existing manifest unless `force`.
std::vector<ManifestRecord> generate_dataset(const std::filesystem::path& dir, const ClassSplit& split,
                                             Pool pool, std::size_t count, std::uint64_t seed,
                                             const SceneStyle& style = {}, bool force = false);

}  // namespace dana::episodes
