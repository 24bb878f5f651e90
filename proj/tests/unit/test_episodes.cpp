#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "dana/episodes/episodes.hpp"
#include "dana/util/hash.hpp"

using namespace dana;
using namespace dana::episodes;

namespace {

const ClassSplit kSplit = ClassSplit::preset("default-10/4");

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

bool has_category(const std::vector<Annotation>& anns, int cat) {
  return std::any_of(anns.begin(), anns.end(), [&](const Annotation& a) { return a.category == cat; });
}

// Bound of the continuous shape clipped to the image, sampled densely in its
// local frame.
BoxXYXY continuous_box(const Instance& inst) {
  const double half = inst.scale / 2, cr = std::cos(inst.rotation), sr = std::sin(inst.rotation);
  BoxXYXY b{1e9, 1e9, -1e9, -1e9};
  constexpr int kN = 400;
  for (int i = 0; i <= kN; ++i)
    for (int j = 0; j <= kN; ++j) {
      const double u = -1.5 + 3.0 * i / kN, v = -1.5 + 3.0 * j / kN;
      if (!inside_shape(category(inst.category).kind, u, v)) continue;
      const double x = inst.cx + half * (cr * u - sr * v), y = inst.cy + half * (sr * u + cr * v);
      b = {std::min(b.x1, x), std::min(b.y1, y), std::max(b.x2, x), std::max(b.y2, y)};
    }
  return detector::clip(b, 64, 64);
}

}  // namespace

TEST_SUITE("episodes") {
  TEST_CASE("class split is a disjoint 10/4 partition") {
    CHECK(kSplit.base.size() == 10);
    CHECK(kSplit.novel.size() == 4);
    std::set<int> all(kSplit.base.begin(), kSplit.base.end());
    all.insert(kSplit.novel.begin(), kSplit.novel.end());
    CHECK(all.size() == 14);
    CHECK_THROWS(ClassSplit::preset("nope"));
    CHECK(parse_pool("base") == Pool::kTrain);
    CHECK(parse_pool("novel") == Pool::kTest);
  }

  TEST_CASE("rendering is deterministic") {
    const auto a = make_query(42, kSplit.base);
    const auto b = make_query(42, kSplit.base);
    CHECK(a.image.rgb == b.image.rgb);
    CHECK(a.annotations == b.annotations);
    CHECK(image_hash(a.image) == image_hash(b.image));
    CHECK(image_hash(make_query(43, kSplit.base).image) != image_hash(a.image));
  }

  TEST_CASE("centered circle annotation") {
    SceneSpec spec;
    spec.instances.push_back({0, 32, 32, 16, 0, 0.8, {1, 1, 1}});
    const auto r = render_scene(spec);
    REQUIRE(r.annotations.size() == 1);
    const auto& b = r.annotations[0].box;
    CHECK(std::abs(b.x1 - 24) <= 1);
    CHECK(std::abs(b.y1 - 24) <= 1);
    CHECK(std::abs(b.x2 - 40) <= 1);
    CHECK(std::abs(b.y2 - 40) <= 1);
    for (double v : r.image.rgb) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  TEST_CASE("empty scene renders with no annotations") {
    SceneSpec spec;
    spec.clutter = 5;
    const auto r = render_scene(spec);
    CHECK(r.annotations.empty());
    CHECK(r.image.rgb.size() == 64 * 64 * 3);
  }

  TEST_CASE("invalid scenes are rejected") {
    SceneSpec small;
    small.instances.push_back({0, 32, 32, 8, 0});
    CHECK_THROWS_AS(render_scene(small), InvalidScene);
    SceneSpec outside;
    outside.instances.push_back({0, 5, 32, 20, 0});
    CHECK_THROWS_AS(render_scene(outside), InvalidScene);
    SceneSpec overlap;
    overlap.instances.push_back({0, 30, 30, 20, 0});
    overlap.instances.push_back({1, 32, 32, 20, 0});
    CHECK_THROWS_AS(render_scene(overlap), InvalidScene);
  }

  TEST_CASE("annotations bound the continuous shapes") {
    double worst = 1.0;
    for (std::uint64_t s = 0; s < 60; ++s) {
      const auto spec = sample_scene_spec(s, s % 2 ? kSplit.base : kSplit.novel, {});
      const auto r = render_scene(spec);
      REQUIRE(r.annotations.size() == spec.instances.size());
      for (std::size_t i = 0; i < spec.instances.size(); ++i) {
        CHECK(r.annotations[i].category == spec.instances[i].category);
        worst = std::min(worst, detector::iou(r.annotations[i].box, continuous_box(spec.instances[i])));
      }
    }
    CHECK(worst >= 0.9);
  }

  TEST_CASE("scene sampling respects scale and overlap limits") {
    for (std::uint64_t s = 0; s < 200; ++s) {
      const auto spec = sample_scene_spec(s, kSplit.base, {}, 3);
      REQUIRE(!spec.instances.empty());
      CHECK(spec.instances.size() <= 3);
      CHECK(spec.instances[0].category == 3);
      for (std::size_t i = 0; i < spec.instances.size(); ++i) {
        CHECK(contains(kSplit.base, spec.instances[i].category));
        CHECK(spec.instances[i].scale >= kMinScale);
        CHECK(spec.instances[i].scale <= kMaxScale);
        for (std::size_t j = 0; j < i; ++j)
          CHECK(detector::iou(nominal_box(spec.instances[i]), nominal_box(spec.instances[j])) < kMaxInstanceIoU);
      }
    }
  }

  TEST_CASE("episode structure") {
    for (int n : {1, 2, 3}) {
      for (int k : {1, 5}) {
        const auto e = sample_episode(kSplit, 100 + n * 10 + k, n, k, Pool::kTest);
        CHECK(e.ways.size() == static_cast<std::size_t>(n));
        CHECK(e.m >= 1);
        CHECK(e.m <= n);
        std::set<int> cats;
        int present = 0;
        for (std::size_t w = 0; w < e.ways.size(); ++w) {
          CHECK(e.ways[w].images.size() == static_cast<std::size_t>(k));
          cats.insert(e.ways[w].category);
          if (!e.targets(w).empty()) ++present;
        }
        CHECK(cats.size() == static_cast<std::size_t>(n));
        CHECK(present == e.m);
      }
    }
    CHECK_THROWS(sample_episode(kSplit, 1, 5, 1, Pool::kTest));
    CHECK_THROWS(sample_episode(kSplit, 1, 0, 1, Pool::kTest));
    const auto a = sample_episode(kSplit, 77, 2, 2, Pool::kTrain);
    const auto b = sample_episode(kSplit, 77, 2, 2, Pool::kTrain);
    CHECK(a.query.image.rgb == b.query.image.rgb);
    CHECK(a.ways[1].images[1].rgb == b.ways[1].images[1].rgb);
  }

  TEST_CASE("no novel category leaks into training episodes") {
    for (std::uint64_t s = 0; s < 10000; ++s) {
      const auto e = sample_episode(kSplit, s, 2, 1, Pool::kTrain);
      for (const auto& a : e.query.annotations) REQUIRE(kSplit.is_base(a.category));
      for (const auto& w : e.ways) REQUIRE(kSplit.is_base(w.category));
    }
  }

  TEST_CASE("contrastive batches") {
    std::map<int, int> counts;
    // The seeds of the first 125 training steps at batch size 8.
    for (std::uint64_t s = 0; s < 1000; ++s) {
      const auto b = build_contrastive_batch(
          kSplit, util::derive_seed(util::derive_seed(0, 21, s / 8), 21, s % 8), 2);
      REQUIRE(b.positive.category != b.negative.category);
      REQUIRE(has_category(b.query.annotations, b.positive.category));
      REQUIRE(!has_category(b.query.annotations, b.negative.category));
      REQUIRE(kSplit.is_base(b.positive.category));
      REQUIRE(kSplit.is_base(b.negative.category));
      std::size_t want = 0;
      for (const auto& a : b.query.annotations) want += a.category == b.positive.category;
      REQUIRE(b.positive_targets.size() == want);
      REQUIRE(b.positive.images.size() == 2);
      ++counts[b.positive.category];
    }
    // Positive classes are roughly balanced across the base pool.
    for (int c : kSplit.base) {
      CAPTURE(c);
      CHECK(counts[c] >= 80);
      CHECK(counts[c] <= 120);
    }
  }

  TEST_CASE("contrastive batches replay manifest seeds") {
    const QuerySource src{{11, 22, 33}};
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto b = build_contrastive_batch(kSplit, s, 1, {}, src);
      bool found = false;
      for (auto seed : src.manifest_seeds)
        found = found || make_query(seed, kSplit.base).image.rgb == b.query.image.rgb;
      CHECK(found);
    }
  }

  TEST_CASE("sensitivity support draws") {
    const auto queries = sensitivity_queries(kSplit, Pool::kTest, 10, 5);
    const auto h = query_set_hash(queries);
    const auto draws = sensitivity_support_draws(queries, 6, 2, 5, 5);
    CHECK(draws.size() == 5);
    std::set<std::uint64_t> distinct;
    for (const auto& d : draws) {
      CHECK(d.category == 6);
      distinct.insert(image_hash(d.images[0]));
    }
    CHECK(distinct.size() == 5);
    CHECK(query_set_hash(queries) == h);
    CHECK(query_set_hash(sensitivity_queries(kSplit, Pool::kTest, 10, 5)) == h);
    const auto again = sensitivity_support_draws(queries, 6, 2, 5, 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(again[i].images[1].rgb == draws[i].images[1].rgb);
    // Draw t does not depend on T.
    const auto longer = sensitivity_support_draws(queries, 6, 2, 8, 5);
    CHECK(longer[3].images[0].rgb == draws[3].images[0].rgb);
    CHECK_THROWS(sensitivity_support_draws(queries, 6, 2, 1, 5));
  }

  TEST_CASE("support images hold one centered instance") {
    const SceneStyle style;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto img = make_support(s, static_cast<int>(s % 14), style);
      CHECK(img.height == 64);
      CHECK(img.width == 64);
    }
  }

  TEST_CASE("manifest roundtrip and dataset generation") {
    ManifestRecord rec{"images/000001.ppm", 123456789012345ULL, Pool::kTest,
                       {{{1.0, 2.0, 30.0, 40.0}, 6}, {{5.5, 6.0, 7.0, 8.0}, 10}}};
    const auto back = parse_manifest_line(manifest_line(rec));
    CHECK(back.path == rec.path);
    CHECK(back.seed == rec.seed);
    CHECK(back.pool == rec.pool);
    CHECK(back.annotations == rec.annotations);
    CHECK(manifest_line(rec).rfind("{\"path\":", 0) == 0);

    const auto dir = std::filesystem::temp_directory_path() / "dana_dataset_test";
    std::filesystem::remove_all(dir);
    const auto recs = generate_dataset(dir, kSplit, Pool::kTest, 5, 9);
    CHECK(recs.size() == 5);
    const auto read = read_manifest(dir / "manifest.jsonl");
    REQUIRE(read.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(std::filesystem::exists(dir / read[i].path));
      CHECK(read[i].annotations == make_query(read[i].seed, kSplit.novel).annotations);
      for (const auto& a : read[i].annotations) CHECK(kSplit.is_novel(a.category));
    }
    CHECK_THROWS(generate_dataset(dir, kSplit, Pool::kTest, 5, 9));
    CHECK_NOTHROW(generate_dataset(dir, kSplit, Pool::kTest, 3, 9, {}, true));
    CHECK(read_manifest(dir / "manifest.jsonl").size() == 3);
    std::filesystem::remove_all(dir);
  }
}
