#include "dana/trainer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <thread>

#include "dana/tensor/ops.hpp"
#include "dana/util/hash.hpp"
#include "dana/util/parallel.hpp"

namespace dana::trainer {

namespace {

constexpr std::uint64_t kTrainStream = 21;
const std::string kOptimPrefix = "optim/";
const std::string kStepKey = "optim.step";

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.rpn_cls += w * b.rpn_cls;
  acc.rpn_box += w * b.rpn_box;
  acc.roi_cls += w * b.roi_cls;
  acc.roi_box += w * b.roi_box;
  acc.total += w * b.total;
}

}  // namespace

Tensor balanced_bce(const Tensor& logits, const std::vector<double>& labels, const std::vector<double>& weights) {
  if (logits.numel() != labels.size() || labels.size() != weights.size()) {
    throw ShapeError("balanced_bce: logits, labels and weights disagree");
  }
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (weights[i] == 0.0) continue;
    (labels[i] == 1.0 ? pos : neg) += 1;
  }
  if (pos + neg == 0) return Tensor::scalar(0.0);
  const double half = pos && neg ? 0.5 : 1.0;
  Tensor w(logits.shape());
  auto wd = w.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (weights[i] == 0.0) continue;
    wd[i] = half / static_cast<double>(labels[i] == 1.0 ? pos : neg);
  }
  return sum(mul(bce_with_logits(logits, Tensor(logits.shape(), labels)), w));
}

Tensor LossTerms::total() const { return add(add(rpn_cls, rpn_box), add(roi_cls, roi_box)); }

LossBreakdown LossTerms::values() const {
  LossBreakdown b{rpn_cls.item(), rpn_box.item(), roi_cls.item(), roi_box.item(), 0.0};
  b.total = b.rpn_cls + b.rpn_box + b.roi_cls + b.roi_box;
  return b;
}

LossTerms rpn_losses(const detector::ProposalOutput& out, const detector::AnchorGrid& anchors,
                     const detector::AnchorMatch& match, const std::vector<BoxXYXY>& gts) {
  const std::size_t n = anchors.boxes.size();
  const std::size_t hw = anchors.grid_h * anchors.grid_w;
  if (out.logits.numel() != n || out.deltas.numel() != 4 * n || match.labels.size() != n) {
    throw ShapeError("rpn_losses: outputs, anchors and labels disagree");
  }
  std::vector<double> t(n, 0.0), w(n, 0.0);
  Tensor box_target(out.deltas.shape()), box_mask(out.deltas.shape());
  auto bt = box_target.mutable_data();
  auto bm = box_mask.mutable_data();
  std::size_t labeled = 0, positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = match.labels[i];
    if (label == detector::AnchorLabel::kIgnore) continue;
    ++labeled;
    w[i] = 1.0;
    if (label != detector::AnchorLabel::kPositive) continue;
    ++positives;
    t[i] = 1.0;
    const auto d = detector::encode_box(gts.at(static_cast<std::size_t>(match.gt_index[i])), anchors.boxes[i]);
    const std::size_t a = i / hw, cell = i % hw;
    for (std::size_t k = 0; k < 4; ++k) {
      bt[(a * 4 + k) * hw + cell] = d[k];
      bm[(a * 4 + k) * hw + cell] = 1.0;
    }
  }
  LossTerms terms;
  terms.rpn_positives = positives;
  terms.rpn_cls = labeled ? balanced_bce(out.logits, t, w) : Tensor::scalar(0.0);
  terms.rpn_box = positives ? scale(sum(mul(smooth_l1(out.deltas, box_target), box_mask)), 1.0 / positives)
                            : Tensor::scalar(0.0);
  terms.roi_cls = Tensor::scalar(0.0);
  terms.roi_box = Tensor::scalar(0.0);
  return terms;
}

RoiTargets roi_targets(const std::vector<BoxXYXY>& rois, const std::vector<BoxXYXY>& gts, double pos_iou) {
  RoiTargets t;
  for (const auto& r : rois) {
    double best = 0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = detector::iou(r, gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= pos_iou) {
      t.labels.push_back(1.0);
      t.deltas.push_back(detector::encode_box(gts[static_cast<std::size_t>(best_g)], r));
      ++t.positives;
    } else {
      t.labels.push_back(0.0);
      t.deltas.push_back({0, 0, 0, 0});
    }
  }
  return t;
}

LossTerms roi_losses(const detector::RoiOutput& out, const RoiTargets& targets) {
  const std::size_t r = targets.labels.size();
  if (out.logits.numel() != r || out.deltas.numel() != 4 * r) throw ShapeError("roi_losses: size mismatch");
  Tensor box_target(Shape{r, 4}), box_mask(Shape{r, 4});
  auto bt = box_target.mutable_data();
  auto bm = box_mask.mutable_data();
  for (std::size_t i = 0; i < r; ++i) {
    if (targets.labels[i] != 1.0) continue;
    for (std::size_t k = 0; k < 4; ++k) {
      bt[i * 4 + k] = targets.deltas[i][k];
      bm[i * 4 + k] = 1.0;
    }
  }
  LossTerms terms;
  terms.roi_positives = targets.positives;
  terms.rpn_cls = Tensor::scalar(0.0);
  terms.rpn_box = Tensor::scalar(0.0);
  terms.roi_cls = balanced_bce(out.logits, targets.labels, std::vector<double>(r, 1.0));
  terms.roi_box = targets.positives
                      ? scale(sum(mul(smooth_l1(out.deltas, box_target), box_mask)), 1.0 / targets.positives)
                      : Tensor::scalar(0.0);
  return terms;
}

LossTerms branch_losses(const Tensor& x, const std::vector<Tensor>& support_features,
                        const std::vector<BoxXYXY>& gts, const ParamSet& params, const DetectorConfig& cfg) {
  const auto anchors = detector::make_anchors(cfg);
  const auto enc = detector::encode_supports(support_features, cfg, params);
  const auto fused = detector::fuse_with_supports(x, enc, cfg, params, "cisa1");
  const auto rpn = detector::proposal_forward(fused.map, params);
  const auto match = detector::match_anchors(anchors.boxes, gts);
  LossTerms terms = rpn_losses(rpn, anchors, match, gts);

  // Proposals are constants for the second stage; gts join them as RoIs.
  auto props = detector::select_proposals(detector::decode_proposals(rpn, anchors, cfg), cfg.proposals, cfg.nms_iou);
  std::vector<BoxXYXY> rois;
  for (const auto& p : props) rois.push_back(p.box);
  for (const auto& g : gts) rois.push_back(g);
  if (rois.empty()) return terms;
  const auto roi = detector::roi_forward(x, rois, enc, cfg, params);
  const LossTerms second = roi_losses(roi, roi_targets(rois, gts));
  terms.roi_cls = second.roi_cls;
  terms.roi_box = second.roi_box;
  terms.roi_positives = second.roi_positives;
  return terms;
}

void sgd_step(ParamSet& params, const GradMap& grads, OptimState& state) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match parameter '" + name + "' " +
                       shape_str(it->second.shape()));
    }
    for (double v : g.data()) {
      if (!std::isfinite(v)) throw NonFiniteGradient("non-finite gradient for '" + name + "'; step rejected");
    }
  }
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto& v = state.velocity[name];
    if (v.empty()) v.assign(p.numel(), 0.0);
    auto pd = p.mutable_data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      v[i] = state.momentum * v[i] + gd[i] + state.weight_decay * pd[i];
      pd[i] -= state.lr * v[i];
    }
  }
  ++state.step;
}

double grad_norm(const GradMap& grads) {
  double ss = 0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) ss += v * v;
  return std::sqrt(ss);
}

double clip_gradients(GradMap& grads, double max_norm) {
  const double norm = grad_norm(grads);
  if (!(norm > max_norm)) return 1.0;
  const double c = max_norm / norm;
  for (auto& [name, g] : grads)
    for (double& v : g.mutable_data()) v *= c;
  return c;
}

const std::vector<AblationRow>& ablation_rows() {
  using attention::Denoise;
  using attention::FuseMode;
  static const std::vector<AblationRow> rows{
      {'a', false, Denoise::kNone, FuseMode::kConcat, "global-pool support vector, concat"},
      {'b', true, Denoise::kNone, FuseMode::kConcat, "QPA averaging, concat"},
      {'c', true, Denoise::kNone, FuseMode::kProduct, "QPA averaging, product"},
      {'d', true, Denoise::kMask, FuseMode::kConcat, "QPA averaging, mask denoising, concat"},
      {'f', true, Denoise::kBA, FuseMode::kConcat, "QPA averaging, BA denoising, concat (full)"},
  };
  return rows;
}

const AblationRow& ablation_row(char id) {
  for (const auto& r : ablation_rows()) {
    if (r.id == id) return r;
  }
  throw std::invalid_argument(std::string("unknown ablation row '") + id + "' (a|b|c|d|f)");
}

DetectorConfig apply_ablation(DetectorConfig cfg, char row) {
  const auto& r = ablation_row(row);
  cfg.qpa_average = r.qpa_average;
  cfg.denoise = r.denoise;
  cfg.fuse = r.fuse;
  cfg.validate();
  return cfg;
}

std::size_t TrainConfig::effective_decay_step() const {
  return decay_step ? decay_step : (2 * total_steps) / 3;
}

double TrainConfig::lr_at(std::size_t step) const { return step < effective_decay_step() ? lr : lr * lr_decay; }

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["lr"] = lr;
  j["lr_decay"] = lr_decay;
  j["decay_step"] = effective_decay_step();
  j["batch_size"] = batch_size;
  j["total_steps"] = total_steps;
  j["shots"] = shots;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["clip_norm"] = clip_norm;
  j["negative_weight"] = negative_weight;
  j["checkpoint_every"] = checkpoint_every;
  j["seed"] = seed;
  j["style"] = {{"clutter_min", style.clutter_min},
                {"clutter_max", style.clutter_max},
                {"noise_sigma", style.noise_sigma},
                {"support_scale_min", style.support_scale_min},
                {"support_scale_max", style.support_scale_max}};
  j["model"] = model.to_json();
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") c.lr = value.get<double>();
    else if (key == "lr_decay") c.lr_decay = value.get<double>();
    else if (key == "decay_step") c.decay_step = value.get<std::size_t>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "total_steps") c.total_steps = value.get<std::size_t>();
    else if (key == "shots") c.shots = value.get<int>();
    else if (key == "momentum") c.momentum = value.get<double>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "clip_norm") c.clip_norm = value.get<double>();
    else if (key == "negative_weight") c.negative_weight = value.get<double>();
    else if (key == "checkpoint_every") c.checkpoint_every = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "model") c.model = DetectorConfig::from_json(value);
    else if (key == "style") {
      for (const auto& [sk, sv] : value.items()) {
        if (sk == "clutter_min") c.style.clutter_min = sv.get<int>();
        else if (sk == "clutter_max") c.style.clutter_max = sv.get<int>();
        else if (sk == "noise_sigma") c.style.noise_sigma = sv.get<double>();
        else if (sk == "support_scale_min") c.style.support_scale_min = sv.get<double>();
        else if (sk == "support_scale_max") c.style.support_scale_max = sv.get<double>();
        else throw std::invalid_argument("unknown style key '" + sk + "'");
      }
    } else {
      throw std::invalid_argument("unknown train config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size == 0) throw std::invalid_argument("train.batch_size must be >= 1");
  if (shots < 1) throw std::invalid_argument("train.shots must be >= 1");
  if (lr < 0 || lr_decay < 0 || momentum < 0 || weight_decay < 0 || negative_weight < 0) {
    throw std::invalid_argument("train: lr, decay, momentum, weight decay and negative weight must be >= 0");
  }
  if (!(clip_norm > 0)) throw std::invalid_argument("train.clip_norm must be > 0");
  if (style.clutter_min < 0 || style.clutter_max < style.clutter_min) {
    throw std::invalid_argument("train.style: need 0 <= clutter_min <= clutter_max");
  }
}

BatchResult batch_gradients(const ParamSet& params, const DetectorConfig& cfg,
                            const std::vector<episodes::ContrastiveBatch>& batch, double negative_weight) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  struct Slot {
    LossBreakdown loss;
    GradMap grads;
    bool no_positive = false;
  };
  std::vector<Slot> slots(batch.size());
  util::parallel_for(batch.size(), [&](std::size_t e) {
    const auto& ep = batch[e];
    Tape tape;
    ParamSet bound;
    for (const auto& [name, p] : params) bound.emplace(name, tape.leaf(p));
    auto feats = [&](const episodes::SupportSet& s) {
      std::vector<Tensor> out;
      for (const auto& img : s.images) out.push_back(detector::backbone_forward(detector::image_tensor(img), bound));
      return out;
    };
    const Tensor x = detector::backbone_forward(detector::image_tensor(ep.query.image), bound);
    const auto pos = branch_losses(x, feats(ep.positive), ep.positive_targets, bound, cfg);
    const auto neg = branch_losses(x, feats(ep.negative), {}, bound, cfg);
    const Tensor loss = add(pos.total(), scale(neg.total(), negative_weight));

    Slot& slot = slots[e];
    accumulate(slot.loss, pos.values(), 1.0);
    accumulate(slot.loss, neg.values(), negative_weight);
    slot.no_positive = pos.rpn_positives == 0;
    const auto grads = tape.backward(loss);
    for (const auto& [name, leaf] : bound) slot.grads.emplace(name, grads.of(leaf));
  });

  BatchResult out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& slot : slots) {
    accumulate(out.loss, slot.loss, inv);
    out.no_positive += slot.no_positive;
    for (auto& [name, g] : slot.grads) {
      auto it = out.grads.find(name);
      if (it == out.grads.end()) {
        out.grads.emplace(name, Tensor(g.shape(), 0.0));
        it = out.grads.find(name);
      }
      auto acc = it->second.mutable_data();
      const auto gd = g.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += inv * gd[i];
    }
  }
  return out;
}

std::vector<episodes::ContrastiveBatch> training_batch(const TrainConfig& cfg, const episodes::ClassSplit& split,
                                                       std::size_t step, const episodes::QuerySource& source) {
  std::vector<episodes::ContrastiveBatch> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const auto s = util::derive_seed(util::derive_seed(cfg.seed, kTrainStream, step), kTrainStream, i);
    batch.push_back(episodes::build_contrastive_batch(split, s, cfg.shots, cfg.style, source));
  }
  return batch;
}

detector::Checkpoint to_checkpoint(const TrainState& state, const DetectorConfig& cfg) {
  detector::Checkpoint ck;
  ck.config_hash = cfg.hash();
  for (const auto& [name, p] : state.params) {
    ck.tensors.emplace(name, p.detach());
    auto it = state.optim.velocity.find(name);
    if (it != state.optim.velocity.end()) ck.tensors.emplace(kOptimPrefix + name, Tensor(p.shape(), it->second));
  }
  ck.tensors.emplace(kStepKey, Tensor(Shape{1}, static_cast<double>(state.optim.step)));
  return ck;
}

ParamSet params_from_checkpoint(const detector::Checkpoint& ckpt, const DetectorConfig& cfg) {
  if (ckpt.config_hash != cfg.hash()) {
    throw detector::CheckpointError("checkpoint was written for a different model config");
  }
  const ParamSet expected = detector::init_params(cfg, 0);
  ParamSet params;
  for (const auto& [name, p] : expected) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw detector::CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw detector::CheckpointError("checkpoint parameter '" + name + "' has shape " +
                                      shape_str(it->second.shape()));
    }
    params.emplace(name, it->second);
  }
  return params;
}

TrainState from_checkpoint(const detector::Checkpoint& ckpt, const DetectorConfig& cfg) {
  TrainState st;
  st.params = params_from_checkpoint(ckpt, cfg);
  for (const auto& [name, p] : st.params) {
    auto it = ckpt.tensors.find(kOptimPrefix + name);
    if (it != ckpt.tensors.end()) {
      st.optim.velocity[name].assign(it->second.data().begin(), it->second.data().end());
    }
  }
  if (auto it = ckpt.tensors.find(kStepKey); it != ckpt.tensors.end()) {
    st.optim.step = static_cast<std::size_t>(it->second[0]);
  }
  return st;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,lr,rpn_cls,rpn_box,roi_cls,roi_box,total\n" << std::setprecision(17);
  for (const auto& r : curve) {
    os << r.step << ',' << r.lr << ',' << r.loss.rpn_cls << ',' << r.loss.rpn_box << ',' << r.loss.roi_cls << ','
       << r.loss.roi_box << ',' << r.loss.total << '\n';
  }
}

TrainResult train(const TrainConfig& cfg, const episodes::ClassSplit& split, const TrainOptions& opts) {
  cfg.validate();
  TrainResult result;
  TrainState& st = result.state;
  if (opts.resume) {
    st = *opts.resume;
  } else {
    st.params = detector::init_params(cfg.model, cfg.seed);
  }
  st.optim.momentum = cfg.momentum;
  st.optim.weight_decay = cfg.weight_decay;
  const std::size_t start = st.optim.step;
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);

  auto save = [&](const std::string& name) {
    if (opts.out_dir.empty()) return;
    detector::save_checkpoint(opts.out_dir / name, to_checkpoint(st, cfg.model));
  };

  util::BoundedQueue<std::vector<episodes::ContrastiveBatch>> queue(4);
  std::thread producer;
  if (!opts.frozen) {
    producer = std::thread([&] {
      for (std::size_t step = start; step < cfg.total_steps; ++step) {
        queue.push(training_batch(cfg, split, step, opts.source));
      }
      queue.close();
    });
  }
  struct Join {
    std::thread& t;
    util::BoundedQueue<std::vector<episodes::ContrastiveBatch>>& q;
    ~Join() {
      q.close();
      if (t.joinable()) t.join();
    }
  } join{producer, queue};

  for (std::size_t step = start; step < cfg.total_steps; ++step) {
    std::optional<std::vector<episodes::ContrastiveBatch>> fetched;
    const std::vector<episodes::ContrastiveBatch>* batch = opts.frozen;
    if (!batch) {
      fetched = queue.pop();
      if (!fetched) break;
      batch = &*fetched;
    }
    auto br = batch_gradients(st.params, cfg.model, *batch, cfg.negative_weight);
    result.no_positive += br.no_positive;
    StepRecord rec{step, cfg.lr_at(step), br.loss};
    if (!std::isfinite(br.loss.total)) {
      if (!opts.out_dir.empty()) write_loss_csv(opts.out_dir / "loss.csv", result.curve);
      throw TrainingDiverged("total loss is " + std::to_string(br.loss.total) + " at step " + std::to_string(step));
    }
    clip_gradients(br.grads, cfg.clip_norm);
    st.optim.lr = rec.lr;
    sgd_step(st.params, br.grads, st.optim);
    result.curve.push_back(rec);
    if (opts.on_step) opts.on_step(rec);
    if (cfg.checkpoint_every && st.optim.step % cfg.checkpoint_every == 0 && st.optim.step < cfg.total_steps) {
      save("checkpoint_" + std::to_string(st.optim.step) + ".bin");
      if (!opts.out_dir.empty()) write_loss_csv(opts.out_dir / "loss.csv", result.curve);
    }
  }
  save("checkpoint_final.bin");
  if (!opts.out_dir.empty()) write_loss_csv(opts.out_dir / "loss.csv", result.curve);
  return result;
}

SmokeResult overfit_smoke(const TrainConfig& base, std::size_t steps) {
  TrainConfig cfg = base;
  cfg.total_steps = steps;
  cfg.checkpoint_every = 0;
  const auto split = episodes::ClassSplit::preset("default-10/4");
  // One frozen contrastive episode.
  TrainConfig one = cfg;
  one.batch_size = 1;
  const auto frozen = training_batch(one, split, 0, {});
  TrainOptions opts;
  opts.frozen = &frozen;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train(cfg, split, opts);
  SmokeResult s;
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  s.steps = res.curve.size();
  if (res.curve.empty()) return s;
  s.initial_loss = res.curve.front().loss.total;
  const std::size_t tail = std::min<std::size_t>(10, res.curve.size());
  for (std::size_t i = res.curve.size() - tail; i < res.curve.size(); ++i) s.final_loss += res.curve[i].loss.total;
  s.final_loss /= static_cast<double>(tail);
  s.pass = s.final_loss <= 0.5 * s.initial_loss;
  return s;
}

}  // namespace dana::trainer
