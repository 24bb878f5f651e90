#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dana/attention/dana.hpp"
#include "dana/detector/box.hpp"
#include "dana/episodes/shapes.hpp"
#include "dana/tensor/tensor.hpp"

namespace dana::detector {

using attention::Denoise;
using attention::FuseMode;

/// Named parameter tensors. In training the values are tape leaves; at
/// inference they are plain tensors shared read-only across threads.
using ParamSet = std::map<std::string, Tensor>;

struct DetectorConfig {
  std::size_t image_size = 64;
  std::size_t channels = 32;  // backbone output C
  std::size_t c_prime = 8;    // CISA embedding width, C/4
  std::size_t stride = 8;
  std::vector<double> anchor_scales{12.0, 24.0, 48.0};
  std::size_t rpn_hidden = 32;
  std::size_t roi_size = 4;
  std::size_t roi_hidden = 64;
  std::size_t proposals = 16;
  double nms_iou = 0.5;
  double score_threshold = 0.5;
  double alpha = attention::kDefaultAlpha;
  double beta = attention::kDefaultBeta;
  // Ablation switches. qpa_average = false selects the global-pool support
  // encoding (no CISA blocks).
  bool qpa_average = true;
  Denoise denoise = Denoise::kBA;
  FuseMode fuse = FuseMode::kConcat;

  std::size_t grid() const { return image_size / stride; }
  std::size_t anchors_per_cell() const { return anchor_scales.size(); }
  std::size_t fused_channels() const { return fuse == FuseMode::kConcat ? 2 * channels : channels; }

  nlohmann::ordered_json to_json() const;
  /// Rejects unknown keys.
  static DetectorConfig from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON; stored in checkpoints.
  std::uint64_t hash() const;
  void validate() const;
};

/// Deterministic initialization (He-normal convs, small heads).
ParamSet init_params(const DetectorConfig& cfg, std::uint64_t seed);
std::size_t parameter_count(const ParamSet& params);

/// H x W x 3 interleaved image -> 3 x H x W tensor.
Tensor image_tensor(const episodes::Image& image);

/// Three stride-2 3x3 conv + LeakyReLU layers: 3 x H x W -> C x H/8 x W/8.
Tensor backbone_forward(const Tensor& image, const ParamSet& params);

// ---------------------------------------------------------------------------
// Anchors and box coding

struct AnchorGrid {
  std::size_t grid_h = 0, grid_w = 0;
  double stride = 8;
  std::vector<double> scales;
  /// Index a * (H*W) + y * W + x, matching the head's channel layout.
  std::vector<BoxXYXY> boxes;
};

AnchorGrid make_anchors(const DetectorConfig& cfg);

/// Center-size deltas (dx, dy, dw, dh) of `gt` relative to `anchor`.
std::array<double, 4> encode_box(const BoxXYXY& gt, const BoxXYXY& anchor);
BoxXYXY decode_box(const std::array<double, 4>& delta, const BoxXYXY& anchor);

enum class AnchorLabel : std::int8_t { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct AnchorMatch {
  std::vector<AnchorLabel> labels;
  std::vector<int> gt_index;  // matched gt per anchor, -1 if none
};

/// Positive at IoU >= pos_iou, negative below neg_iou, ignored between. The
/// best anchor of every gt is also positive so no gt goes unmatched.
AnchorMatch match_anchors(const std::vector<BoxXYXY>& anchors, const std::vector<BoxXYXY>& gts,
                          double pos_iou = 0.5, double neg_iou = 0.3);

// ---------------------------------------------------------------------------
// Heads

struct Proposal {
  BoxXYXY box;
  double objectness = 0;  // sigmoid of the logit
};

struct Detection {
  BoxXYXY box;
  double score = 0;
  int category = -1;
};

/// Objectness logits [A, H, W] and deltas [4A, H, W].
struct ProposalOutput {
  Tensor logits;
  Tensor deltas;
};

ProposalOutput proposal_forward(const Tensor& fused, const ParamSet& params);

/// Sort by objectness (ties: x1 asc, then y1 asc), greedy NMS, keep k.
std::vector<Proposal> select_proposals(std::vector<Proposal> proposals, std::size_t k, double nms_iou);

/// Greedy NMS over score-sorted detections (same tie-break as proposals).
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

/// Decodes every anchor into a clipped proposal box.
std::vector<Proposal> decode_proposals(const ProposalOutput& out, const AnchorGrid& anchors,
                                       const DetectorConfig& cfg);

/// Bilinear C x s x s crop of the feature map; rejects boxes with no area
/// left after clipping to the image.
Tensor roi_crop(const Tensor& features, const BoxXYXY& box, const DetectorConfig& cfg);

/// Support-side state shared by both attention stages.
struct SupportEncoding {
  std::vector<Tensor> maps;  // denoised maps Z (or raw maps for global pooling)
};

SupportEncoding encode_supports(const std::vector<Tensor>& support_features, const DetectorConfig& cfg,
                                const ParamSet& params);

/// Query map fused with support information through the block named
/// `cisa_prefix` ("cisa1" before the proposal head, "cisa2" on RoIs).
attention::FusedMap fuse_with_supports(const Tensor& x, const SupportEncoding& enc, const DetectorConfig& cfg,
                                       const ParamSet& params, const std::string& cisa_prefix,
                                       std::vector<Tensor>* attention_out = nullptr);

/// Binary logits [R, 1] and box deltas [R, 4] for R boxes.
struct RoiOutput {
  Tensor logits;
  Tensor deltas;
};

RoiOutput roi_forward(const Tensor& x, const std::vector<BoxXYXY>& boxes, const SupportEncoding& enc,
                      const DetectorConfig& cfg, const ParamSet& params);

/// Full pipeline conditioned on K support images of one category.
std::vector<Detection> detect(const episodes::Image& query, const std::vector<episodes::Image>& supports,
                              const ParamSet& params, const DetectorConfig& cfg, int category = -1);

/// Same, with the backbone already applied to query and supports.
std::vector<Detection> detect_features(const Tensor& x, const std::vector<Tensor>& support_features,
                                       const ParamSet& params, const DetectorConfig& cfg, int category = -1);

/// Views of the attention parameters inside a ParamSet.
attention::CISAParams cisa_params(const ParamSet& params, const std::string& prefix, const DetectorConfig& cfg);
attention::DenoiseParams denoise_params(const ParamSet& params, const DetectorConfig& cfg);

}  // namespace dana::detector
