#include "dana/detector/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "dana/tensor/ops.hpp"
#include "dana/util/hash.hpp"

namespace dana::detector {

namespace {

// Caps exp() in box decoding at a 1000 px side for a 16 px anchor.
const double kMaxLogScale = std::log(1000.0 / 16.0);

const Tensor& param(const ParamSet& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Tensor normal(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

Tensor conv_layer(const Tensor& x, const ParamSet& p, const std::string& name, std::size_t stride,
                  std::size_t padding) {
  return conv2d(x, param(p, name + ".weight"), param(p, name + ".bias"), stride, padding);
}

Tensor linear(const Tensor& rows, const ParamSet& p, const std::string& name) {
  return add(matmul(rows, param(p, name + ".weight")), param(p, name + ".bias"));
}

bool proposal_before(const BoxXYXY& a, double sa, const BoxXYXY& b, double sb) {
  if (sa != sb) return sa > sb;
  if (a.x1 != b.x1) return a.x1 < b.x1;
  return a.y1 < b.y1;
}

}  // namespace

nlohmann::ordered_json DetectorConfig::to_json() const {
  nlohmann::ordered_json j;
  j["image_size"] = image_size;
  j["channels"] = channels;
  j["c_prime"] = c_prime;
  j["stride"] = stride;
  j["anchor_scales"] = anchor_scales;
  j["rpn_hidden"] = rpn_hidden;
  j["roi_size"] = roi_size;
  j["roi_hidden"] = roi_hidden;
  j["proposals"] = proposals;
  j["nms_iou"] = nms_iou;
  j["score_threshold"] = score_threshold;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["qpa_average"] = qpa_average;
  j["denoise"] = attention::to_string(denoise);
  j["fuse"] = attention::to_string(fuse);
  j["cisa_shared_weights"] = false;
  return j;
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  DetectorConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "image_size") c.image_size = value.get<std::size_t>();
    else if (key == "channels") c.channels = value.get<std::size_t>();
    else if (key == "c_prime") c.c_prime = value.get<std::size_t>();
    else if (key == "stride") c.stride = value.get<std::size_t>();
    else if (key == "anchor_scales") c.anchor_scales = value.get<std::vector<double>>();
    else if (key == "rpn_hidden") c.rpn_hidden = value.get<std::size_t>();
    else if (key == "roi_size") c.roi_size = value.get<std::size_t>();
    else if (key == "roi_hidden") c.roi_hidden = value.get<std::size_t>();
    else if (key == "proposals") c.proposals = value.get<std::size_t>();
    else if (key == "nms_iou") c.nms_iou = value.get<double>();
    else if (key == "score_threshold") c.score_threshold = value.get<double>();
    else if (key == "alpha") c.alpha = value.get<double>();
    else if (key == "beta") c.beta = value.get<double>();
    else if (key == "qpa_average") c.qpa_average = value.get<bool>();
    else if (key == "denoise") c.denoise = attention::parse_denoise(value.get<std::string>());
    else if (key == "fuse") c.fuse = attention::parse_fuse_mode(value.get<std::string>());
    else if (key == "cisa_shared_weights") {
      if (value.get<bool>()) throw std::invalid_argument("model.cisa_shared_weights: only false is supported");
    } else {
      throw std::invalid_argument("unknown model config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::uint64_t DetectorConfig::hash() const { return util::fnv1a(to_json().dump()); }

void DetectorConfig::validate() const {
  if (stride != 8) throw std::invalid_argument("model.stride must be 8 (three stride-2 layers)");
  if (image_size == 0 || image_size % stride != 0) {
    throw std::invalid_argument("model.image_size must be a positive multiple of 8");
  }
  if (channels == 0 || c_prime == 0 || rpn_hidden == 0 || roi_hidden == 0 || roi_size == 0) {
    throw std::invalid_argument("model widths must be >= 1");
  }
  if (anchor_scales.empty()) throw std::invalid_argument("model.anchor_scales must not be empty");
  if (proposals == 0) throw std::invalid_argument("model.proposals must be >= 1");
  if (alpha < 0 || beta < 0) throw std::invalid_argument("model.alpha and model.beta must be >= 0");
  if (!qpa_average && fuse != FuseMode::kConcat) {
    throw std::invalid_argument("global-pool encoding (qpa_average = false) fuses by concat only");
  }
}

ParamSet init_params(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(util::derive_seed(seed, 0x696e6974ULL));
  ParamSet p;
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, double gain = 2.0) {
    p[name + ".weight"] = normal(rng, {out, in, k, k}, std::sqrt(gain / static_cast<double>(in * k * k)));
    p[name + ".bias"] = Tensor(Shape{out}, 0.0);
  };
  auto fc = [&](const std::string& name, std::size_t in, std::size_t out, double stddev) {
    p[name + ".weight"] = normal(rng, {in, out}, stddev);
    p[name + ".bias"] = Tensor(Shape{1, out}, 0.0);
  };
  const std::size_t c = cfg.channels;
  conv("backbone.conv1", 16, 3, 3);
  conv("backbone.conv2", 32, 16, 3);
  conv("backbone.conv3", c, 32, 3);

  const double embed_std = 1.0 / std::sqrt(static_cast<double>(c));
  if (cfg.qpa_average) {
    for (const std::string prefix : {"cisa1", "cisa2"}) {
      p[prefix + ".w_q"] = normal(rng, {c, cfg.c_prime}, embed_std);
      p[prefix + ".w_k"] = normal(rng, {c, cfg.c_prime}, embed_std);
      p[prefix + ".w_r"] = normal(rng, {c, 1}, embed_std);
    }
  }
  if (cfg.denoise == Denoise::kBA) p["ba.w_e"] = normal(rng, {c, 1}, embed_std);
  if (cfg.denoise == Denoise::kMask) conv("mask", 1, c, 1, 1.0);

  const std::size_t fused = cfg.fused_channels();
  const std::size_t a = cfg.anchors_per_cell();
  conv("rpn.conv", cfg.rpn_hidden, fused, 3);
  conv("rpn.cls", a, cfg.rpn_hidden, 1, 0.01);
  conv("rpn.box", 4 * a, cfg.rpn_hidden, 1, 0.01);
  // Start objectness near the background prior.
  for (double& v : p["rpn.cls.bias"].mutable_data()) v = -2.0;

  const std::size_t roi_in = fused * cfg.roi_size * cfg.roi_size;
  fc("roi.fc", roi_in, cfg.roi_hidden, std::sqrt(2.0 / static_cast<double>(roi_in)));
  fc("roi.cls", cfg.roi_hidden, 1, 0.01);
  fc("roi.box", cfg.roi_hidden, 4, 0.01);
  return p;
}

std::size_t parameter_count(const ParamSet& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

Tensor image_tensor(const episodes::Image& image) {
  const std::size_t h = image.height, w = image.width;
  if (image.rgb.size() != h * w * 3) throw ShapeError("image buffer does not match its size");
  std::vector<double> chw(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) chw[(c * h + y) * w + x] = image.rgb[(y * w + x) * 3 + c];
  return Tensor(Shape{3, h, w}, std::move(chw));
}

Tensor backbone_forward(const Tensor& image, const ParamSet& params) {
  if (image.rank() != 3 || image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0) {
    throw ShapeError("backbone: input must be C x H x W with H, W divisible by 8, got " +
                     shape_str(image.shape()));
  }
  Tensor h = leaky_relu(conv_layer(image, params, "backbone.conv1", 2, 1));
  h = leaky_relu(conv_layer(h, params, "backbone.conv2", 2, 1));
  return leaky_relu(conv_layer(h, params, "backbone.conv3", 2, 1));
}

AnchorGrid make_anchors(const DetectorConfig& cfg) {
  AnchorGrid g;
  g.grid_h = g.grid_w = cfg.grid();
  g.stride = static_cast<double>(cfg.stride);
  g.scales = cfg.anchor_scales;
  for (double s : cfg.anchor_scales)
    for (std::size_t y = 0; y < g.grid_h; ++y)
      for (std::size_t x = 0; x < g.grid_w; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * g.stride;
        const double cy = (static_cast<double>(y) + 0.5) * g.stride;
        g.boxes.push_back({cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
  return g;
}

std::array<double, 4> encode_box(const BoxXYXY& gt, const BoxXYXY& anchor) {
  if (!anchor.valid()) throw std::invalid_argument("encode_box: degenerate anchor " + to_string(anchor));
  if (!gt.valid()) throw std::invalid_argument("encode_box: degenerate box " + to_string(gt));
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + aw / 2, acy = anchor.y1 + ah / 2;
  const double gw = gt.width(), gh = gt.height();
  const double gcx = gt.x1 + gw / 2, gcy = gt.y1 + gh / 2;
  return {(gcx - acx) / aw, (gcy - acy) / ah, std::log(gw / aw), std::log(gh / ah)};
}

BoxXYXY decode_box(const std::array<double, 4>& d, const BoxXYXY& anchor) {
  if (!anchor.valid()) throw std::invalid_argument("decode_box: degenerate anchor " + to_string(anchor));
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.x1 + aw / 2 + d[0] * aw;
  const double cy = anchor.y1 + ah / 2 + d[1] * ah;
  const double w = aw * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ah * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

AnchorMatch match_anchors(const std::vector<BoxXYXY>& anchors, const std::vector<BoxXYXY>& gts, double pos_iou,
                          double neg_iou) {
  AnchorMatch m;
  m.labels.assign(anchors.size(), AnchorLabel::kNegative);
  m.gt_index.assign(anchors.size(), -1);
  if (gts.empty()) return m;
  std::vector<double> best_for_gt(gts.size(), 0.0);
  std::vector<std::vector<double>> ious(anchors.size(), std::vector<double>(gts.size()));
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g]);
      ious[a][g] = v;
      best_for_gt[g] = std::max(best_for_gt[g], v);
      if (v > best) {
        best = v;
        m.gt_index[a] = static_cast<int>(g);
      }
    }
    if (best >= pos_iou) m.labels[a] = AnchorLabel::kPositive;
    else if (best >= neg_iou) m.labels[a] = AnchorLabel::kIgnore;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (best_for_gt[g] <= 0) continue;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (ious[a][g] == best_for_gt[g]) {
        m.labels[a] = AnchorLabel::kPositive;
        m.gt_index[a] = static_cast<int>(g);
      }
    }
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (m.labels[a] == AnchorLabel::kNegative) m.gt_index[a] = -1;
  }
  return m;
}

ProposalOutput proposal_forward(const Tensor& fused, const ParamSet& params) {
  Tensor h = leaky_relu(conv_layer(fused, params, "rpn.conv", 1, 1));
  return {conv_layer(h, params, "rpn.cls", 1, 0), conv_layer(h, params, "rpn.box", 1, 0)};
}

std::vector<Proposal> select_proposals(std::vector<Proposal> proposals, std::size_t k, double nms_iou) {
  if (k == 0) throw std::invalid_argument("select_proposals: k must be >= 1");
  std::sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
    return proposal_before(a.box, a.objectness, b.box, b.objectness);
  });
  std::vector<Proposal> kept;
  for (const auto& p : proposals) {
    if (kept.size() == k) break;
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Proposal& q) { return iou(p.box, q.box) > nms_iou; });
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return proposal_before(a.box, a.score, b.box, b.score);
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                        [&](const Detection& q) { return iou(d.box, q.box) > iou_threshold; });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Proposal> decode_proposals(const ProposalOutput& out, const AnchorGrid& anchors,
                                       const DetectorConfig& cfg) {
  const std::size_t n = anchors.boxes.size();
  const std::size_t hw = anchors.grid_h * anchors.grid_w;
  if (out.logits.numel() != n || out.deltas.numel() != 4 * n) {
    throw ShapeError("decode_proposals: head output does not match " + std::to_string(n) + " anchors");
  }
  const auto size = static_cast<double>(cfg.image_size);
  std::vector<Proposal> props;
  props.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = i / hw, cell = i % hw;
    std::array<double, 4> d{};
    for (std::size_t k = 0; k < 4; ++k) d[k] = out.deltas[(a * 4 + k) * hw + cell];
    const BoxXYXY box = clip(decode_box(d, anchors.boxes[i]), size, size);
    if (box.width() < 1.0 || box.height() < 1.0) continue;
    const double logit = out.logits[i];
    props.push_back({box, 1.0 / (1.0 + std::exp(-logit))});
  }
  return props;
}

Tensor roi_crop(const Tensor& features, const BoxXYXY& box, const DetectorConfig& cfg) {
  const auto size = static_cast<double>(cfg.image_size);
  const BoxXYXY c = clip(box, size, size);
  if (c.area() <= 0) throw std::invalid_argument("roi_crop: box " + to_string(box) + " has no area inside the image");
  return roi_align(features, c.as_array(), 1.0 / static_cast<double>(cfg.stride), cfg.roi_size, cfg.roi_size);
}

attention::CISAParams cisa_params(const ParamSet& params, const std::string& prefix, const DetectorConfig& cfg) {
  return {param(params, prefix + ".w_q"), param(params, prefix + ".w_k"), param(params, prefix + ".w_r"), cfg.beta};
}

attention::DenoiseParams denoise_params(const ParamSet& params, const DetectorConfig& cfg) {
  attention::DenoiseParams d;
  d.mode = cfg.denoise;
  if (cfg.denoise == Denoise::kBA) d.ba = {param(params, "ba.w_e"), cfg.alpha};
  if (cfg.denoise == Denoise::kMask) d.mask = {param(params, "mask.weight"), param(params, "mask.bias")};
  return d;
}

SupportEncoding encode_supports(const std::vector<Tensor>& support_features, const DetectorConfig& cfg,
                                const ParamSet& params) {
  if (support_features.empty()) throw std::invalid_argument("need at least one support image");
  SupportEncoding enc;
  const auto dn = denoise_params(params, cfg);
  for (const auto& y : support_features) enc.maps.push_back(attention::denoise_support(y, dn));
  return enc;
}

attention::FusedMap fuse_with_supports(const Tensor& x, const SupportEncoding& enc, const DetectorConfig& cfg,
                                       const ParamSet& params, const std::string& cisa_prefix,
                                       std::vector<Tensor>* attention_out) {
  if (!cfg.qpa_average) return attention::global_pool_baseline(enc.maps, x);
  Tensor p = attention::dana_qpa_from_z(x, enc.maps, cisa_params(params, cisa_prefix, cfg), attention_out);
  return attention::fuse(p, x, cfg.fuse);
}

RoiOutput roi_forward(const Tensor& x, const std::vector<BoxXYXY>& boxes, const SupportEncoding& enc,
                      const DetectorConfig& cfg, const ParamSet& params) {
  if (boxes.empty()) throw std::invalid_argument("roi_forward: no boxes");
  std::vector<Tensor> rows;
  rows.reserve(boxes.size());
  for (const auto& b : boxes) {
    Tensor r = roi_crop(x, b, cfg);
    Tensor fused = fuse_with_supports(r, enc, cfg, params, "cisa2").map;
    rows.push_back(reshape(fused, Shape{1, fused.numel()}));
  }
  Tensor h = leaky_relu(linear(concat_channels(rows), params, "roi.fc"));
  return {linear(h, params, "roi.cls"), linear(h, params, "roi.box")};
}

std::vector<Detection> detect_features(const Tensor& x, const std::vector<Tensor>& support_features,
                                       const ParamSet& params, const DetectorConfig& cfg, int category) {
  const auto enc = encode_supports(support_features, cfg, params);
  const auto fused = fuse_with_supports(x, enc, cfg, params, "cisa1");
  const auto rpn = proposal_forward(fused.map, params);
  const auto props = select_proposals(decode_proposals(rpn, make_anchors(cfg), cfg), cfg.proposals, cfg.nms_iou);
  if (props.empty()) return {};
  std::vector<BoxXYXY> boxes;
  for (const auto& p : props) boxes.push_back(p.box);
  const auto roi = roi_forward(x, boxes, enc, cfg, params);
  const auto size = static_cast<double>(cfg.image_size);
  std::vector<Detection> dets;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const double logit = roi.logits[r];
    const double score = 1.0 / (1.0 + std::exp(-logit));
    if (score < cfg.score_threshold) continue;
    const std::array<double, 4> d{roi.deltas[r * 4], roi.deltas[r * 4 + 1], roi.deltas[r * 4 + 2],
                                  roi.deltas[r * 4 + 3]};
    const BoxXYXY box = clip(decode_box(d, boxes[r]), size, size);
    if (!box.valid()) continue;
    dets.push_back({box, score, category});
  }
  return nms(std::move(dets), cfg.nms_iou);
}

std::vector<Detection> detect(const episodes::Image& query, const std::vector<episodes::Image>& supports,
                              const ParamSet& params, const DetectorConfig& cfg, int category) {
  if (supports.empty()) throw std::invalid_argument("detect: need K >= 1 support images");
  const Tensor x = backbone_forward(image_tensor(query), params);
  std::vector<Tensor> ys;
  ys.reserve(supports.size());
  for (const auto& s : supports) ys.push_back(backbone_forward(image_tensor(s), params));
  return detect_features(x, ys, params, cfg, category);
}

}  // namespace dana::detector
