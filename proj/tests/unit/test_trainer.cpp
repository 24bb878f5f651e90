#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dana/detector/checkpoint.hpp"
#include "dana/tensor/ops.hpp"
#include "dana/trainer/trainer.hpp"

using namespace dana;
using namespace dana::trainer;
using detector::AnchorGrid;
using detector::AnchorLabel;
using detector::AnchorMatch;

namespace {

const episodes::ClassSplit kSplit = episodes::ClassSplit::preset("default-10/4");

double softplus(double z) { return std::log1p(std::exp(z)); }

double huber(double x) { return std::abs(x) < 1 ? 0.5 * x * x : std::abs(x) - 0.5; }

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.total_steps = 4;
  cfg.checkpoint_every = 0;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("balanced BCE") {
    CHECK(balanced_bce(Tensor(Shape{3}, {40, -40, -40}), {1, 0, 0}, {1, 1, 1}).item() < 1e-15);
    // Two negatives and one positive: each class carries half the mass.
    const double v = balanced_bce(Tensor(Shape{3}, {0.3, -0.2, 1.1}), {1, 0, 0}, {1, 1, 1}).item();
    CHECK(v == doctest::Approx(0.5 * softplus(-0.3) + 0.25 * (softplus(-0.2) + softplus(1.1))).epsilon(1e-14));
    // All negatives: plain mean; zero weight drops an entry.
    const double n = balanced_bce(Tensor(Shape{3}, {0.3, -0.2, 9.0}), {0, 0, 1}, {1, 1, 0}).item();
    CHECK(n == doctest::Approx(0.5 * (softplus(0.3) + softplus(-0.2))).epsilon(1e-14));
    CHECK(balanced_bce(Tensor(Shape{1}, 1.0), {1}, {0}).item() == 0.0);
  }

  TEST_CASE("crafted two-anchor proposal loss") {
    AnchorGrid grid;
    grid.grid_h = grid.grid_w = 1;
    grid.scales = {8, 16};
    grid.boxes = {{0, 0, 8, 8}, {20, 20, 36, 36}};
    const std::vector<BoxXYXY> gts{{1, 1, 9, 10}};
    AnchorMatch m{{AnchorLabel::kPositive, AnchorLabel::kNegative}, {0, -1}};
    const detector::ProposalOutput out{Tensor(Shape{2, 1, 1}, {0.7, -0.4}),
                                       Tensor(Shape{8, 1, 1}, {0.1, -0.2, 0.3, 1.5, 9, 9, 9, 9})};
    const auto terms = rpn_losses(out, grid, m, gts);
    const auto enc = detector::encode_box(gts[0], grid.boxes[0]);
    const double want_cls = 0.5 * softplus(-0.7) + 0.5 * softplus(-0.4);
    const double want_box = huber(0.1 - enc[0]) + huber(-0.2 - enc[1]) + huber(0.3 - enc[2]) + huber(1.5 - enc[3]);
    CHECK(terms.rpn_cls.item() == doctest::Approx(want_cls).epsilon(1e-14));
    CHECK(terms.rpn_box.item() == doctest::Approx(want_box).epsilon(1e-14));
    CHECK(terms.rpn_positives == 1);
  }

  TEST_CASE("exact targets give zero loss") {
    AnchorGrid grid;
    grid.grid_h = grid.grid_w = 1;
    grid.scales = {8, 16};
    grid.boxes = {{0, 0, 8, 8}, {20, 20, 36, 36}};
    const std::vector<BoxXYXY> gts{{1, 1, 9, 10}};
    AnchorMatch m{{AnchorLabel::kPositive, AnchorLabel::kNegative}, {0, -1}};
    const auto enc = detector::encode_box(gts[0], grid.boxes[0]);
    const detector::ProposalOutput out{Tensor(Shape{2, 1, 1}, {50.0, -50.0}),
                                       Tensor(Shape{8, 1, 1}, {enc[0], enc[1], enc[2], enc[3], 3, 3, 3, 3})};
    const auto terms = rpn_losses(out, grid, m, gts);
    CHECK(terms.rpn_cls.item() < 1e-15);
    CHECK(terms.rpn_box.item() == 0.0);

    const std::vector<BoxXYXY> rois{{0, 0, 9, 10}, {40, 40, 50, 50}};
    const auto t = roi_targets(rois, gts);
    CHECK(t.labels == std::vector<double>{1, 0});
    const auto d = t.deltas[0];
    const detector::RoiOutput ro{Tensor(Shape{2, 1}, {50.0, -50.0}), Tensor(Shape{2, 4}, {d[0], d[1], d[2], d[3], 1, 1, 1, 1})};
    const auto rt = roi_losses(ro, t);
    CHECK(rt.roi_cls.item() < 1e-15);
    CHECK(rt.roi_box.item() == 0.0);
  }

  TEST_CASE("negative branch has no box loss") {
    const detector::DetectorConfig cfg;
    const auto params = detector::init_params(cfg, 1);
    const auto b = episodes::build_contrastive_batch(kSplit, 1, 1);
    const auto x = detector::backbone_forward(detector::image_tensor(b.query.image), params);
    const std::vector<Tensor> sf{detector::backbone_forward(detector::image_tensor(b.negative.images[0]), params)};
    const auto neg = branch_losses(x, sf, {}, params, cfg);
    CHECK(neg.rpn_box.item() == 0.0);
    CHECK(neg.roi_box.item() == 0.0);
    CHECK(neg.rpn_cls.item() > 0.0);
    const auto pos = branch_losses(x, sf, b.positive_targets, params, cfg);
    CHECK(pos.rpn_positives > 0);
    CHECK(pos.roi_positives >= b.positive_targets.size());
  }

  TEST_CASE("sgd: vanilla step and zero gradient") {
    ParamSet p{{"w", Tensor(Shape{2}, {1.0, -2.0})}};
    OptimState st{{}, 0.1, 0.0, 0.0, 0};
    sgd_step(p, {{"w", Tensor(Shape{2}, {0.5, 1.0})}}, st);
    CHECK(p.at("w")[0] == doctest::Approx(0.95));
    CHECK(p.at("w")[1] == doctest::Approx(-2.1));
    CHECK(st.step == 1);
    OptimState mom{{}, 0.1, 0.9, 0.0, 0};
    ParamSet q{{"w", Tensor(Shape{2}, {1.0, -2.0})}};
    for (int i = 0; i < 3; ++i) sgd_step(q, {{"w", Tensor(Shape{2}, 0.0)}}, mom);
    CHECK(q.at("w")[0] == 1.0);
    CHECK(q.at("w")[1] == -2.0);
  }

  TEST_CASE("sgd: two momentum steps on a half square") {
    // f = p^2 / 2, g = p, p0 = 1, lr 0.1, m 0.9:
    // v1 = 1, p1 = 0.9; v2 = 0.9 + 0.9 = 1.8, p2 = 0.72.
    ParamSet p{{"p", Tensor(Shape{1}, 1.0)}};
    OptimState st{{}, 0.1, 0.9, 0.0, 0};
    sgd_step(p, {{"p", Tensor(Shape{1}, p.at("p")[0])}}, st);
    CHECK(p.at("p")[0] == doctest::Approx(0.9).epsilon(1e-15));
    sgd_step(p, {{"p", Tensor(Shape{1}, p.at("p")[0])}}, st);
    CHECK(p.at("p")[0] == doctest::Approx(0.72).epsilon(1e-15));
    CHECK(st.velocity.at("p")[0] == doctest::Approx(1.8).epsilon(1e-15));
  }

  TEST_CASE("sgd: weight decay enters the velocity") {
    ParamSet p{{"p", Tensor(Shape{1}, 2.0)}};
    OptimState st{{}, 0.5, 0.0, 0.1, 0};
    sgd_step(p, {{"p", Tensor(Shape{1}, 0.0)}}, st);
    CHECK(p.at("p")[0] == doctest::Approx(2.0 - 0.5 * 0.2));
  }

  TEST_CASE("sgd: non-finite gradients reject the whole step") {
    ParamSet p{{"a", Tensor(Shape{1}, 1.0)}, {"b", Tensor(Shape{1}, 1.0)}};
    OptimState st;
    CHECK_THROWS_AS(sgd_step(p, {{"a", Tensor(Shape{1}, 1.0)}, {"b", Tensor(Shape{1}, std::nan(""))}}, st),
                    NonFiniteGradient);
    CHECK(p.at("a")[0] == 1.0);
    CHECK(st.step == 0);
    CHECK_THROWS(sgd_step(p, {{"a", Tensor(Shape{2}, 1.0)}}, st));
    CHECK_THROWS(sgd_step(p, {{"zz", Tensor(Shape{1}, 1.0)}}, st));
  }

  TEST_CASE("sgd: one step decreases a positive-definite quadratic") {
    // f = (p0^2 + 4 p1^2) / 2, L = 4, lr below 2/L.
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-3, 3), lr(0.01, 0.49);
    auto f = [](const Tensor& t) { return 0.5 * (t[0] * t[0] + 4 * t[1] * t[1]); };
    for (int i = 0; i < 50; ++i) {
      ParamSet p{{"p", Tensor(Shape{2}, {u(rng), u(rng)})}};
      const double before = f(p.at("p"));
      OptimState st{{}, lr(rng), 0.0, 0.0, 0};
      sgd_step(p, {{"p", Tensor(Shape{2}, {p.at("p")[0], 4 * p.at("p")[1]})}}, st);
      CHECK(f(p.at("p")) < before);
    }
  }

  TEST_CASE("gradient clipping preserves direction") {
    GradMap g{{"a", Tensor(Shape{2}, {3.0, 0.0})}, {"b", Tensor(Shape{1}, 4.0)}};
    CHECK(grad_norm(g) == doctest::Approx(5.0));
    const double c = clip_gradients(g, 1.0);
    CHECK(c == doctest::Approx(0.2));
    CHECK(g.at("a")[0] == doctest::Approx(0.6));
    CHECK(g.at("b")[0] == doctest::Approx(0.8));
    CHECK(clip_gradients(g, 10.0) == 1.0);
    CHECK(g.at("a")[0] == doctest::Approx(0.6));
  }

  TEST_CASE("ablation rows carry the right flags") {
    CHECK(ablation_rows().size() == 5);
    const auto a = apply_ablation({}, 'a');
    CHECK_FALSE(a.qpa_average);
    CHECK(a.denoise == attention::Denoise::kNone);
    CHECK(a.fuse == attention::FuseMode::kConcat);
    const auto b = apply_ablation({}, 'b');
    CHECK(b.qpa_average);
    CHECK(b.denoise == attention::Denoise::kNone);
    CHECK(apply_ablation({}, 'c').fuse == attention::FuseMode::kProduct);
    CHECK(apply_ablation({}, 'd').denoise == attention::Denoise::kMask);
    const auto f = apply_ablation({}, 'f');
    CHECK(f.qpa_average);
    CHECK(f.denoise == attention::Denoise::kBA);
    CHECK(f.fuse == attention::FuseMode::kConcat);
    CHECK_THROWS(apply_ablation({}, 'e'));

    const auto pa = detector::init_params(a, 1), pb = detector::init_params(b, 1);
    const auto pd = detector::init_params(apply_ablation({}, 'd'), 1), pf = detector::init_params(f, 1);
    CHECK(pa.count("cisa1.w_q") == 0);
    CHECK(pb.count("cisa1.w_q") == 1);
    CHECK(pd.count("mask.weight") == 1);
    CHECK(pf.count("ba.w_e") == 1);
    CHECK(detector::parameter_count(pf) != detector::parameter_count(pb));
    CHECK(detector::parameter_count(pf) == detector::parameter_count(pb) + f.channels);
  }

  TEST_CASE("train config json and schedule") {
    TrainConfig cfg;
    cfg.total_steps = 300;
    cfg.model = apply_ablation(cfg.model, 'd');
    CHECK(cfg.effective_decay_step() == 200);
    CHECK(cfg.lr_at(199) == doctest::Approx(0.001));
    CHECK(cfg.lr_at(200) == doctest::Approx(0.0001));
    const auto back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    auto j = nlohmann::json(cfg.to_json());
    j["learning_rate"] = 1;
    CHECK_THROWS(TrainConfig::from_json(j));
    TrainConfig bad;
    bad.batch_size = 0;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("training is deterministic") {
    const auto cfg = tiny_config();
    const auto a = train(cfg, kSplit);
    const auto b = train(cfg, kSplit);
    REQUIRE(a.curve.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a.curve[i].loss.total == b.curve[i].loss.total);
    for (const auto& [k, v] : a.state.params)
      for (std::size_t i = 0; i < v.numel(); ++i) REQUIRE(v[i] == b.state.params.at(k)[i]);
    for (const auto& r : a.curve) CHECK(std::isfinite(r.loss.total));
  }

  TEST_CASE("resuming from a checkpoint continues the same run") {
    auto cfg = tiny_config();
    cfg.decay_step = 3;  // same schedule for the short and the full run
    const auto full = train(cfg, kSplit);
    cfg.total_steps = 2;
    const auto half = train(cfg, kSplit);
    const auto dir = std::filesystem::temp_directory_path() / "dana_resume_test";
    std::filesystem::create_directories(dir);
    detector::save_checkpoint(dir / "c.bin", to_checkpoint(half.state, cfg.model));
    const auto state = from_checkpoint(detector::load_checkpoint(dir / "c.bin"), cfg.model);
    CHECK(state.optim.step == 2);
    cfg.total_steps = 4;
    TrainOptions opts;
    opts.resume = &state;
    const auto rest = train(cfg, kSplit, opts);
    REQUIRE(rest.curve.size() == 2);
    CHECK(rest.curve[0].step == 2);
    CHECK(rest.curve[0].loss.total == full.curve[2].loss.total);
    CHECK(rest.curve[1].loss.total == full.curve[3].loss.total);
    auto other = cfg.model;
    other.denoise = attention::Denoise::kNone;
    CHECK_THROWS(from_checkpoint(detector::load_checkpoint(dir / "c.bin"), other));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("overfit smoke fails without learning") {
    TrainConfig cfg;
    cfg.lr = 0.0;
    const auto r = overfit_smoke(cfg, 60);
    CHECK_FALSE(r.pass);
    CHECK(r.final_loss == doctest::Approx(r.initial_loss));
  }
}
