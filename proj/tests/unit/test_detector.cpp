#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dana/detector/checkpoint.hpp"
#include "dana/detector/detector.hpp"
#include "dana/episodes/episodes.hpp"
#include "dana/tensor/ops.hpp"
#include "helpers.hpp"

using namespace dana;
using namespace dana::detector;
using dana::testing::random_tensor;

namespace {

episodes::Image test_query(std::uint64_t seed = 5) {
  return episodes::make_query(seed, {0, 1, 2}).image;
}

std::vector<episodes::Image> test_supports(int k, std::uint64_t seed = 9, int category = 0) {
  return episodes::make_support_set(seed, category, k).images;
}

double checksum(const Tensor& t) {
  double s = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) s += t[i] * static_cast<double>(i % 7 + 1);
  return s;
}

bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b, double tol) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].box.as_array(), y = b[i].box.as_array();
    for (int j = 0; j < 4; ++j)
      if (std::abs(x[j] - y[j]) > tol) return false;
    if (std::abs(a[i].score - b[i].score) > tol) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("detector") {
  TEST_CASE("config json roundtrip and validation") {
    DetectorConfig cfg;
    cfg.denoise = Denoise::kMask;
    cfg.fuse = FuseMode::kProduct;
    const auto back = DetectorConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.hash() == cfg.hash());
    CHECK(back.hash() != DetectorConfig{}.hash());
    auto j = nlohmann::json(cfg.to_json());
    j["bogus"] = 1;
    CHECK_THROWS(DetectorConfig::from_json(j));
    DetectorConfig bad;
    bad.qpa_average = false;
    bad.fuse = FuseMode::kProduct;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("backbone output shape and zero weights") {
    const DetectorConfig cfg;
    auto params = init_params(cfg, 1);
    const auto x = backbone_forward(image_tensor(test_query()), params);
    CHECK(x.shape() == Shape{32, 8, 8});
    for (auto& [name, t] : params)
      if (name.rfind("backbone.", 0) == 0) t = Tensor(t.shape(), 0.0);
    const auto z = backbone_forward(image_tensor(test_query()), params);
    for (double v : z.data()) CHECK(v == 0.0);
    CHECK_THROWS(backbone_forward(Tensor(Shape{3, 60, 64}, 0.0), params));
  }

  // Frozen from the first run; a change here means rendering or the
  // backbone changed numerically.
  TEST_CASE("golden backbone checksums") {
    const DetectorConfig cfg;
    const auto params = init_params(cfg, 1);
    const auto q = image_tensor(test_query());
    CHECK(checksum(q) == doctest::Approx(13738.613755382559).epsilon(1e-12));
    CHECK(checksum(backbone_forward(q, params)) == doctest::Approx(1268.5025598489935).epsilon(1e-10));
  }

  TEST_CASE("box coding") {
    const BoxXYXY anchor{0, 0, 10, 10}, gt{5, 5, 15, 15};
    const auto d = encode_box(gt, anchor);
    CHECK(d[0] == doctest::Approx(0.5));
    CHECK(d[1] == doctest::Approx(0.5));
    CHECK(d[2] == doctest::Approx(0.0));
    CHECK(d[3] == doctest::Approx(0.0));
    CHECK(iou(anchor, gt) == doctest::Approx(1.0 / 7).epsilon(1e-15));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(1, 50);
    for (int t = 0; t < 100; ++t) {
      const double ax = u(rng), ay = u(rng), gx = u(rng), gy = u(rng);
      const BoxXYXY a{ax, ay, ax + u(rng), ay + u(rng)}, g{gx, gy, gx + u(rng), gy + u(rng)};
      const auto r = decode_box(encode_box(g, a), a).as_array();
      const auto ga = g.as_array();
      for (int j = 0; j < 4; ++j) CHECK(std::abs(r[j] - ga[j]) <= 1e-9);
    }
    CHECK_THROWS(encode_box(gt, BoxXYXY{3, 3, 3, 8}));
    CHECK_THROWS(encode_box(BoxXYXY{1, 1, 0, 4}, anchor));
  }

  TEST_CASE("anchor grid layout") {
    const DetectorConfig cfg;
    const auto grid = make_anchors(cfg);
    CHECK(grid.boxes.size() == 192);
    // Anchor a at cell (y, x) is centered on the cell center.
    for (std::size_t a = 0; a < 3; ++a) {
      const auto& b = grid.boxes[a * 64 + 2 * 8 + 5];
      CHECK((b.x1 + b.x2) / 2 == doctest::Approx(5 * 8 + 4));
      CHECK((b.y1 + b.y2) / 2 == doctest::Approx(2 * 8 + 4));
      CHECK(b.width() == doctest::Approx(cfg.anchor_scales[a]));
    }
  }

  TEST_CASE("anchor matching gives every gt a positive") {
    const DetectorConfig cfg;
    const auto grid = make_anchors(cfg);
    const std::vector<BoxXYXY> gts{{3, 3, 13, 13}, {30, 20, 60, 55}};
    const auto m = match_anchors(grid.boxes, gts);
    for (int g = 0; g < 2; ++g) {
      bool found = false;
      for (std::size_t i = 0; i < m.labels.size(); ++i)
        if (m.labels[i] == AnchorLabel::kPositive && m.gt_index[i] == g) found = true;
      CHECK(found);
    }
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      double best = 0;
      for (const auto& g : gts) best = std::max(best, iou(grid.boxes[i], g));
      if (best >= 0.5) CHECK(m.labels[i] == AnchorLabel::kPositive);
      if (m.labels[i] == AnchorLabel::kNegative) CHECK(best < 0.3);
    }
    const auto none = match_anchors(grid.boxes, {});
    for (auto l : none.labels) CHECK(l == AnchorLabel::kNegative);
  }

  TEST_CASE("zero head weights give bias logits everywhere") {
    const DetectorConfig cfg;
    auto params = init_params(cfg, 2);
    params.at("rpn.cls.weight") = Tensor(params.at("rpn.cls.weight").shape(), 0.0);
    std::mt19937_64 rng(4);
    const auto out = proposal_forward(random_tensor(rng, {cfg.fused_channels(), 8, 8}), params);
    CHECK(out.logits.shape() == Shape{3, 8, 8});
    CHECK(out.deltas.shape() == Shape{12, 8, 8});
    const auto& b = params.at("rpn.cls.bias");
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t i = 0; i < 64; ++i) CHECK(out.logits[a * 64 + i] == b[a]);
  }

  TEST_CASE("nms hand trace") {
    // A: 0.9 at (0,0,10,10); B: 0.8 overlaps A with IoU 0.81; C: 0.7 far;
    // D: 0.6 overlaps C with IoU 1/3; E: 0.9 tie with A but further right.
    std::vector<Detection> d{{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 8.1}, 0.8, 0}, {{20, 20, 30, 30}, 0.7, 0},
                             {{25, 20, 35, 30}, 0.6, 0}, {{40, 0, 50, 10}, 0.9, 0}};
    const auto kept = nms(d, 0.5);
    REQUIRE(kept.size() == 4);
    CHECK(kept[0].box.x1 == 0);
    CHECK(kept[1].box.x1 == 40);
    CHECK(kept[2].box.x1 == 20);
    CHECK(kept[3].box.x1 == 25);
    const auto strict = nms(d, 0.3);
    CHECK(strict.size() == 3);
    std::reverse(d.begin(), d.end());
    const auto again = nms(d, 0.5);
    CHECK(same_detections(kept, again, 0.0));
  }

  TEST_CASE("select_proposals keeps k and suppresses overlaps") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 50), s(0, 1);
    std::vector<Proposal> props;
    for (int i = 0; i < 200; ++i) {
      const double x = u(rng), y = u(rng);
      props.push_back({{x, y, x + 12, y + 12}, s(rng)});
    }
    const auto kept = select_proposals(props, 16, 0.5);
    CHECK(kept.size() <= 16);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i > 0) CHECK(kept[i - 1].objectness >= kept[i].objectness);
      for (std::size_t j = i + 1; j < kept.size(); ++j) CHECK(iou(kept[i].box, kept[j].box) <= 0.5);
    }
  }

  TEST_CASE("roi_crop") {
    const DetectorConfig cfg;
    const auto flat = roi_crop(Tensor(Shape{2, 8, 8}, 0.25), {5, 7, 40, 33}, cfg);
    CHECK(flat.shape() == Shape{2, 4, 4});
    for (double v : flat.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

    std::mt19937_64 rng(7);
    const auto f = random_tensor(rng, {3, 8, 8});
    // A box covering cells [2, 6) in both axes samples cell centers exactly.
    const auto exact = roi_crop(f, {16, 16, 48, 48}, cfg);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
          CHECK(exact[(c * 4 + i) * 4 + j] == doctest::Approx(f[(c * 8 + i + 2) * 8 + j + 2]).epsilon(1e-14));

    // Off-grid box against a direct bilinear evaluation.
    const BoxXYXY box{3.0, 9.5, 41.0, 30.0};
    const auto crop = roi_crop(f, box, cfg);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const double py = (box.y1 + (i + 0.5) * box.height() / 4) / 8 - 0.5;
        const double px = (box.x1 + (j + 0.5) * box.width() / 4) / 8 - 0.5;
        const double cy = std::clamp(py, 0.0, 7.0), cx = std::clamp(px, 0.0, 7.0);
        const auto y0 = static_cast<std::size_t>(cy), x0 = static_cast<std::size_t>(cx);
        const std::size_t y1 = std::min<std::size_t>(y0 + 1, 7), x1 = std::min<std::size_t>(x0 + 1, 7);
        const double ly = cy - y0, lx = cx - x0;
        const double want = (1 - ly) * (1 - lx) * f[y0 * 8 + x0] + (1 - ly) * lx * f[y0 * 8 + x1] +
                            ly * (1 - lx) * f[y1 * 8 + x0] + ly * lx * f[y1 * 8 + x1];
        CHECK(crop[i * 4 + j] == doctest::Approx(want).epsilon(1e-13));
      }
    CHECK_THROWS(roi_crop(f, {70, 70, 90, 90}, cfg));
    CHECK_THROWS(roi_crop(f, {10, 10, 10, 30}, cfg));
  }

  TEST_CASE("detect: K identical shots match one shot") {
    const DetectorConfig cfg;
    const auto params = init_params(cfg, 3);
    const auto q = test_query();
    const auto one = test_supports(1);
    const std::vector<episodes::Image> three{one[0], one[0], one[0]};
    CHECK(same_detections(detect(q, one, params, cfg), detect(q, three, params, cfg), 1e-9));
  }

  TEST_CASE("detect: support order does not matter") {
    for (auto row_cfg : {DetectorConfig{}, [] {
                           DetectorConfig c;
                           c.qpa_average = false;
                           c.denoise = Denoise::kNone;
                           return c;
                         }()}) {
      const auto params = init_params(row_cfg, 4);
      const auto q = test_query(11);
      auto sup = test_supports(4, 13);
      const auto ref = detect(q, sup, params, row_cfg);
      std::mt19937_64 rng(5);
      for (int t = 0; t < 3; ++t) {
        std::shuffle(sup.begin(), sup.end(), rng);
        CHECK(same_detections(ref, detect(q, sup, params, row_cfg), 1e-9));
      }
    }
  }

  TEST_CASE("detect: output postconditions") {
    DetectorConfig cfg;
    cfg.score_threshold = 0.0;  // keep everything the RoI head scores
    const auto params = init_params(cfg, 5);
    const auto dets = detect(test_query(21), test_supports(2, 22), params, cfg, 7);
    CHECK(!dets.empty());
    CHECK(dets.size() <= cfg.proposals);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      CHECK(dets[i].category == 7);
      CHECK(dets[i].box.valid());
      CHECK(dets[i].box.x1 >= 0);
      CHECK(dets[i].box.x2 <= 64);
      if (i > 0) CHECK(dets[i - 1].score >= dets[i].score);
      for (std::size_t j = i + 1; j < dets.size(); ++j) CHECK(iou(dets[i].box, dets[j].box) <= cfg.nms_iou);
    }
  }

  TEST_CASE("checkpoint roundtrip is bit-identical") {
    const DetectorConfig cfg;
    const auto params = init_params(cfg, 6);
    const auto dir = std::filesystem::temp_directory_path() / "dana_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.bin";
    Checkpoint ck{cfg.hash(), {}};
    for (const auto& [k, v] : params) ck.tensors.emplace(k, v);
    save_checkpoint(path, ck);
    const auto back = load_checkpoint(path);
    CHECK(back.config_hash == cfg.hash());
    REQUIRE(back.tensors.size() == params.size());
    ParamSet loaded(back.tensors.begin(), back.tensors.end());
    for (const auto& [k, v] : params) {
      const auto& w = loaded.at(k);
      REQUIRE(w.shape() == v.shape());
      for (std::size_t i = 0; i < v.numel(); ++i) CHECK(w[i] == v[i]);
    }
    CHECK(same_detections(detect(test_query(), test_supports(2), params, cfg),
                          detect(test_query(), test_supports(2), loaded, cfg), 0.0));
    {
      std::ofstream(dir / "bad.bin", std::ios::binary) << "NOTACKPT";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), CheckpointError);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("attention image scaling") {
    const Tensor a(Shape{2, 4}, {0, 1, 2, 4, 3, 3, 3, 3});
    const auto img = attention_image(a, 0, 2, 2);
    CHECK(img == std::vector<std::uint8_t>{0, 64, 128, 255});
    const auto flat = attention_image(a, 1, 2, 2);
    CHECK(flat == std::vector<std::uint8_t>{128, 128, 128, 128});
  }

  TEST_CASE("gradients reach every parameter group") {
    for (auto mode : {Denoise::kBA, Denoise::kMask}) {
      DetectorConfig cfg;
      cfg.denoise = mode;
      const auto init = init_params(cfg, 8);
      Tape tape;
      ParamSet p;
      for (const auto& [k, v] : init) p.emplace(k, tape.leaf(v));
      const auto x = backbone_forward(image_tensor(test_query(31)), p);
      std::vector<Tensor> sf;
      for (const auto& s : test_supports(2, 32)) sf.push_back(backbone_forward(image_tensor(s), p));
      const auto enc = encode_supports(sf, cfg, p);
      const auto fused = fuse_with_supports(x, enc, cfg, p, "cisa1");
      const auto out = proposal_forward(fused.map, p);
      const auto roi = roi_forward(x, {{4, 4, 30, 30}, {20, 10, 60, 50}}, enc, cfg, p);
      auto sq = [](const Tensor& t) { return sum(mul(t, t)); };
      const auto loss = add(add(sq(out.logits), sq(out.deltas)), add(sq(roi.logits), sq(roi.deltas)));
      const auto grads = tape.backward(loss);
      for (const auto& [k, v] : p) {
        CAPTURE(k);
        double mx = 0;
        for (double g : grads.of(v).data()) mx = std::max(mx, std::abs(g));
        CHECK(mx > 0.0);
      }
    }
  }

  TEST_CASE("parameter sets follow the denoise mode") {
    DetectorConfig ba, none, mask;
    none.denoise = Denoise::kNone;
    mask.denoise = Denoise::kMask;
    const auto pb = init_params(ba, 1), pn = init_params(none, 1), pm = init_params(mask, 1);
    CHECK(pb.count("ba.w_e") == 1);
    CHECK(pn.count("ba.w_e") == 0);
    CHECK(pm.count("mask.weight") == 1);
    CHECK(parameter_count(pb) == parameter_count(pn) + ba.channels);
    CHECK(pb.count("cisa1.w_q") == 1);
    CHECK(pb.count("cisa2.w_q") == 1);
  }
}
