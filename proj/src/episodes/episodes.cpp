#include "dana/episodes/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "dana/util/hash.hpp"
#include "dana/util/pnm.hpp"

namespace dana::episodes {

namespace {

constexpr int kMaxPlacementTries = 100;

enum Stream : std::uint64_t {
  kEpisodeRng = 1,
  kQuery = 2,
  kSupport = 3,
  kShot = 4,
  kContrastive = 5,
  kSensitivity = 6,
  kDataset = 7,
};

Instance random_appearance(std::mt19937_64& rng, int cat) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& c = category(cat);
  Instance inst;
  inst.category = cat;
  inst.rotation = unit(rng) * 2.0 * std::numbers::pi;
  inst.intensity = c.intensity_lo + (c.intensity_hi - c.intensity_lo) * unit(rng);
  double mx = 0.0;
  for (auto& h : inst.hue) {
    h = 0.35 + 0.65 * unit(rng);
    mx = std::max(mx, h);
  }
  for (auto& h : inst.hue) h /= mx;
  return inst;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(v.size()) - 1))];
}

std::vector<int> present_categories(const std::vector<Annotation>& anns) {
  std::vector<int> out;
  for (const auto& a : anns) {
    if (std::find(out.begin(), out.end(), a.category) == out.end()) out.push_back(a.category);
  }
  return out;
}

}  // namespace

std::string_view to_string(Pool pool) { return pool == Pool::kTrain ? "train" : "test"; }

Pool parse_pool(std::string_view s) {
  if (s == "train" || s == "base") return Pool::kTrain;
  if (s == "test" || s == "novel") return Pool::kTest;
  throw std::invalid_argument("unknown pool '" + std::string(s) + "' (train|test)");
}

const std::vector<int>& pool_categories(const ClassSplit& split, Pool pool) {
  return pool == Pool::kTrain ? split.base : split.novel;
}

std::vector<BoxXYXY> EpisodeTask::targets(std::size_t w) const {
  std::vector<BoxXYXY> out;
  for (const auto& a : query.annotations) {
    if (a.category == ways.at(w).category) out.push_back(a.box);
  }
  return out;
}

SceneSpec sample_scene_spec(std::uint64_t seed, const std::vector<int>& cats, const SceneStyle& style,
                            std::optional<int> required) {
  if (cats.empty()) throw std::invalid_argument("sample_scene_spec: no categories");
  std::mt19937_64 rng(util::derive_seed(seed, kQuery));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSpec spec;
  spec.seed = seed;
  spec.height = spec.width = style.image_size;
  spec.noise_sigma = style.noise_sigma;
  spec.clutter = uniform_int(rng, style.clutter_min, style.clutter_max);
  const int count = uniform_int(rng, 1, 3);
  const auto size = static_cast<double>(style.image_size);
  for (int i = 0; i < count; ++i) {
    const int cat = (i == 0 && required) ? *required : pick(rng, cats);
    Instance inst = random_appearance(rng, cat);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementTries && !placed; ++attempt) {
      inst.scale = kMinScale + (kMaxScale - kMinScale) * unit(rng);
      const double half = inst.scale / 2;
      inst.cx = half + (size - inst.scale) * unit(rng);
      inst.cy = half + (size - inst.scale) * unit(rng);
      placed = std::all_of(spec.instances.begin(), spec.instances.end(), [&](const Instance& other) {
        return detector::iou(nominal_box(inst), nominal_box(other)) < kMaxInstanceIoU;
      });
    }
    if (!placed) throw InvalidScene("could not place instance " + std::to_string(i) + " after 100 samples");
    spec.instances.push_back(inst);
  }
  return spec;
}

QueryScene make_query(std::uint64_t seed, const std::vector<int>& cats, const SceneStyle& style,
                      std::optional<int> required) {
  auto rendered = render_scene(sample_scene_spec(seed, cats, style, required));
  return QueryScene{seed, std::move(rendered.image), std::move(rendered.annotations)};
}

Image make_support(std::uint64_t seed, int category, const SceneStyle& style) {
  std::mt19937_64 rng(util::derive_seed(seed, kSupport));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSpec spec;
  spec.seed = seed;
  spec.height = spec.width = style.image_size;
  spec.noise_sigma = style.noise_sigma;
  spec.clutter = uniform_int(rng, style.clutter_min, style.clutter_max);
  Instance inst = random_appearance(rng, category);
  inst.scale = style.support_scale_min + (style.support_scale_max - style.support_scale_min) * unit(rng);
  inst.cx = inst.cy = static_cast<double>(style.image_size) / 2;
  spec.instances.push_back(inst);
  return render_scene(spec).image;
}

SupportSet make_support_set(std::uint64_t seed, int category, int k, const SceneStyle& style) {
  if (k < 1) throw std::invalid_argument("support set needs K >= 1");
  SupportSet set;
  set.category = category;
  for (int i = 0; i < k; ++i) {
    const auto s = util::derive_seed(seed, kShot, static_cast<std::uint64_t>(i));
    set.seeds.push_back(s);
    set.images.push_back(make_support(s, category, style));
  }
  return set;
}

EpisodeTask sample_episode(const ClassSplit& split, std::uint64_t seed, int n, int k, Pool pool,
                           const SceneStyle& style) {
  const auto& cats = pool_categories(split, pool);
  if (n < 1 || k < 1) throw std::invalid_argument("episode needs N >= 1 and K >= 1");
  if (static_cast<std::size_t>(n) > cats.size()) {
    throw std::invalid_argument("N = " + std::to_string(n) + " exceeds the " + std::to_string(cats.size()) +
                                " categories of the " + std::string(to_string(pool)) + " pool");
  }
  std::mt19937_64 rng(util::derive_seed(seed, kEpisodeRng));
  EpisodeTask task;
  task.n = n;
  task.k = k;
  task.query = make_query(util::derive_seed(seed, kQuery), cats, style);

  auto present = present_categories(task.query.annotations);
  std::shuffle(present.begin(), present.end(), rng);
  std::vector<int> absent;
  for (int c : cats) {
    if (std::find(present.begin(), present.end(), c) == present.end()) absent.push_back(c);
  }
  std::shuffle(absent.begin(), absent.end(), rng);
  task.m = std::min<int>(n, static_cast<int>(present.size()));
  std::vector<int> way_cats(present.begin(), present.begin() + task.m);
  way_cats.insert(way_cats.end(), absent.begin(), absent.begin() + (n - task.m));
  std::shuffle(way_cats.begin(), way_cats.end(), rng);
  for (std::size_t w = 0; w < way_cats.size(); ++w) {
    task.ways.push_back(make_support_set(util::derive_seed(seed, kSupport, w), way_cats[w], k, style));
  }
  return task;
}

ContrastiveBatch build_contrastive_batch(const ClassSplit& split, std::uint64_t seed, int k,
                                         const SceneStyle& style, const QuerySource& source) {
  std::mt19937_64 rng(util::derive_seed(seed, kContrastive));
  ContrastiveBatch batch;
  // Online queries are conditioned on a uniformly drawn positive class so
  // positives stay balanced; replayed queries pick among what is present.
  int pos = -1;
  if (source.manifest_seeds.empty()) {
    pos = pick(rng, split.base);
    batch.query = make_query(util::derive_seed(seed, kQuery), split.base, style, pos);
  } else {
    batch.query = make_query(pick(rng, source.manifest_seeds), split.base, style);
  }
  const auto present = present_categories(batch.query.annotations);
  std::vector<int> absent;
  for (int c : split.base) {
    if (std::find(present.begin(), present.end(), c) == present.end()) absent.push_back(c);
  }
  if (pos < 0) pos = pick(rng, present);
  const int neg = pick(rng, absent);
  batch.positive = make_support_set(util::derive_seed(seed, kSupport, 0), pos, k, style);
  batch.negative = make_support_set(util::derive_seed(seed, kSupport, 1), neg, k, style);
  for (const auto& a : batch.query.annotations) {
    if (a.category == pos) batch.positive_targets.push_back(a.box);
  }
  return batch;
}

std::vector<QueryScene> sensitivity_queries(const ClassSplit& split, Pool pool, std::size_t count,
                                            std::uint64_t seed, const SceneStyle& style) {
  std::vector<QueryScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(make_query(util::derive_seed(seed, kSensitivity, i), pool_categories(split, pool), style));
  }
  return out;
}

std::vector<SupportSet> sensitivity_support_draws(const std::vector<QueryScene>& /*fixed_queries*/,
                                                  int category, int k, int t, std::uint64_t seed,
                                                  const SceneStyle& style) {
  if (t < 2) throw std::invalid_argument("sensitivity study needs T >= 2 draws");
  std::vector<SupportSet> draws;
  draws.reserve(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    const auto s = util::derive_seed(util::derive_seed(seed, kSensitivity, static_cast<std::uint64_t>(category)),
                                     kSupport, static_cast<std::uint64_t>(i));
    draws.push_back(make_support_set(s, category, k, style));
  }
  return draws;
}

std::uint64_t query_set_hash(const std::vector<QueryScene>& queries) {
  util::Fnv1a h;
  for (const auto& q : queries) h.update(std::span<const double>(q.image.rgb));
  return h.digest();
}

std::string manifest_line(const ManifestRecord& rec) {
  nlohmann::ordered_json j;
  j["path"] = rec.path;
  j["seed"] = rec.seed;
  j["pool"] = to_string(rec.pool);
  auto anns = nlohmann::ordered_json::array();
  for (const auto& a : rec.annotations) {
    anns.push_back({a.category, a.box.x1, a.box.y1, a.box.x2, a.box.y2});
  }
  j["annotations"] = std::move(anns);
  return j.dump();
}

ManifestRecord parse_manifest_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  ManifestRecord rec;
  rec.path = j.at("path").get<std::string>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.pool = parse_pool(j.at("pool").get<std::string>());
  for (const auto& a : j.at("annotations")) {
    if (a.size() != 5) throw std::invalid_argument("manifest annotation needs 5 fields");
    rec.annotations.push_back(
        {BoxXYXY{a[1].get<double>(), a[2].get<double>(), a[3].get<double>(), a[4].get<double>()},
         a[0].get<int>()});
  }
  return rec;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_manifest_line(line));
  }
  return out;
}

std::vector<ManifestRecord> generate_dataset(const std::filesystem::path& dir, const ClassSplit& split,
                                             Pool pool, std::size_t count, std::uint64_t seed,
                                             const SceneStyle& style, bool force) {
  const auto manifest = dir / "manifest.jsonl";
  if (std::filesystem::exists(manifest) && !force) {
    throw std::runtime_error(manifest.string() + " exists (use --force to overwrite)");
  }
  std::filesystem::create_directories(dir / "images");
  std::vector<ManifestRecord> records;
  records.reserve(count);
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + manifest.string());
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = util::derive_seed(seed, kDataset, i);
    auto q = make_query(s, pool_categories(split, pool), style);
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.ppm", i);
    util::write_ppm(dir / name, q.image.height, q.image.width, q.image.rgb);
    ManifestRecord rec{name, s, pool, q.annotations};
    out << manifest_line(rec) << '\n';
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace dana::episodes
