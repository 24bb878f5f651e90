#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dana/detector/checkpoint.hpp"
#include "dana/detector/detector.hpp"
#include "dana/episodes/episodes.hpp"

namespace dana::trainer {

using detector::BoxXYXY;
using detector::DetectorConfig;
using detector::ParamSet;

struct LossBreakdown {
  double rpn_cls = 0, rpn_box = 0, roi_cls = 0, roi_box = 0, total = 0;
};

/// Differentiable parts of one branch; total = sum of the four.
struct LossTerms {
  Tensor rpn_cls, rpn_box, roi_cls, roi_box;
  std::size_t rpn_positives = 0;
  std::size_t roi_positives = 0;

  Tensor total() const;
  LossBreakdown values() const;
};

/// BCE with positives and negatives weighted to equal total mass (half each)
/// when both are present, else a plain mean. Entries with weight 0 are
/// skipped.
Tensor balanced_bce(const Tensor& logits, const std::vector<double>& labels, const std::vector<double>& weights);

/// Balanced objectness BCE over labeled anchors, smooth-L1 on the deltas of
/// positive anchors averaged over positives (0 when there are none).
/// Logits are [A, H, W] and deltas [4A, H, W] in anchor-index order.
LossTerms rpn_losses(const detector::ProposalOutput& out, const detector::AnchorGrid& anchors,
                     const detector::AnchorMatch& match, const std::vector<BoxXYXY>& gts);

/// RoI labels: positive when IoU with some gt >= pos_iou.
struct RoiTargets {
  std::vector<double> labels;
  std::vector<std::array<double, 4>> deltas;  // zero for negatives
  std::size_t positives = 0;
};
RoiTargets roi_targets(const std::vector<BoxXYXY>& rois, const std::vector<BoxXYXY>& gts, double pos_iou = 0.5);

/// Balanced BCE over RoIs; smooth-L1 over positive RoIs averaged over positives.
LossTerms roi_losses(const detector::RoiOutput& out, const RoiTargets& targets);

/// Both stages for one (query, support set) pair. Empty `gts` is the
/// negative branch: every anchor and RoI is background and no box loss.
LossTerms branch_losses(const Tensor& query_features, const std::vector<Tensor>& support_features,
                        const std::vector<BoxXYXY>& gts, const ParamSet& params, const DetectorConfig& cfg);

struct OptimState {
  std::map<std::string, std::vector<double>> velocity;
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t step = 0;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using GradMap = std::map<std::string, Tensor>;

/// v <- m v + g + wd p; p <- p - lr v. A non-finite gradient rejects the
/// whole step (nothing is modified) with NonFiniteGradient.
void sgd_step(ParamSet& params, const GradMap& grads, OptimState& state);

double grad_norm(const GradMap& grads);
/// Scales every gradient by c = min(1, max_norm / norm); returns c.
double clip_gradients(GradMap& grads, double max_norm);

/// Table rows of the ablation study.
struct AblationRow {
  char id;
  bool qpa_average;
  attention::Denoise denoise;
  attention::FuseMode fuse;
  const char* description;
};
const std::vector<AblationRow>& ablation_rows();
const AblationRow& ablation_row(char id);
DetectorConfig apply_ablation(DetectorConfig cfg, char row);

struct TrainConfig {
  DetectorConfig model;
  double lr = 0.001;
  double lr_decay = 0.1;
  std::size_t decay_step = 0;  // 0: two thirds of total_steps
  std::size_t batch_size = 8;
  std::size_t total_steps = 30000;
  int shots = 1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 10.0;
  double negative_weight = 1.0;
  std::size_t checkpoint_every = 1000;
  std::uint64_t seed = 0;
  episodes::SceneStyle style;

  std::size_t effective_decay_step() const;
  double lr_at(std::size_t step) const;

  nlohmann::ordered_json to_json() const;
  /// Rejects unknown keys; "model" is parsed by DetectorConfig.
  static TrainConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  LossBreakdown loss;
};

/// Loss and averaged gradient of one contrastive batch.
struct BatchResult {
  LossBreakdown loss;
  GradMap grads;
  std::size_t no_positive = 0;  // positive branches without a positive anchor
};

BatchResult batch_gradients(const ParamSet& params, const DetectorConfig& cfg,
                            const std::vector<episodes::ContrastiveBatch>& batch, double negative_weight);

/// The episodes used at `step`; a pure function of (seed, step).
std::vector<episodes::ContrastiveBatch> training_batch(const TrainConfig& cfg, const episodes::ClassSplit& split,
                                                       std::size_t step, const episodes::QuerySource& source);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainState {
  ParamSet params;
  OptimState optim;
};

detector::Checkpoint to_checkpoint(const TrainState& state, const DetectorConfig& cfg);
/// Restores params and optimizer buffers; rejects a config hash mismatch.
TrainState from_checkpoint(const detector::Checkpoint& ckpt, const DetectorConfig& cfg);
ParamSet params_from_checkpoint(const detector::Checkpoint& ckpt, const DetectorConfig& cfg);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files
  const TrainState* resume = nullptr;
  episodes::QuerySource source;
  std::function<void(const StepRecord&)> on_step;
  /// Replays this batch every step instead of sampling (overfit smoke).
  const std::vector<episodes::ContrastiveBatch>* frozen = nullptr;
};

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> curve;
  std::size_t no_positive = 0;
};

/// Episodic contrastive training. Batches are produced on a worker thread
/// through a bounded queue. Writes loss.csv, checkpoint_<step>.bin at
/// intervals and checkpoint_final.bin when out_dir is set. A NaN loss throws
/// TrainingDiverged; the last written checkpoint stays intact.
TrainResult train(const TrainConfig& cfg, const episodes::ClassSplit& split, const TrainOptions& opts = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve);

struct SmokeResult {
  bool pass = false;
  double initial_loss = 0;
  double final_loss = 0;  // mean of the last 10 steps
  std::size_t steps = 0;
  double seconds = 0;
};

/// Trains on one frozen contrastive episode for up to 500 steps and checks
/// that the total loss falls to half its initial value.
SmokeResult overfit_smoke(const TrainConfig& cfg, std::size_t steps = 500);

}  // namespace dana::trainer
