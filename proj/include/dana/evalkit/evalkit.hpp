#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dana/detector/detector.hpp"
#include "dana/episodes/episodes.hpp"

namespace dana::evalkit {

using detector::BoxXYXY;
using detector::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
inline constexpr std::size_t kNumIouThresholds = 10;
double iou_threshold(std::size_t i);

struct MatchResult {
  // Per detection, in descending score order.
  std::vector<double> scores;
  std::vector<bool> tp;
  std::vector<int> gt_index;  // -1 for false positives
  std::size_t num_gts = 0;
  std::size_t unmatched_gts = 0;
};

/// Greedy by descending score (ties by x1, then y1): each detection takes the
/// highest-IoU unmatched gt with IoU >= iou_thr.
MatchResult match_detections(std::vector<Detection> dets, const std::vector<BoxXYXY>& gts, double iou_thr);

/// Scored hits for one category at one IoU threshold.
struct HitList {
  std::vector<std::pair<double, bool>> hits;  // (score, tp)
  std::size_t num_gts = 0;

  void add(const MatchResult& m);
  void merge(const HitList& other);
};

/// 101-point interpolated AP; nullopt when there are no gts.
std::optional<double> compute_ap(const HitList& list);
std::optional<double> compute_ap(const std::vector<MatchResult>& results);

/// Match pools per category across all IoU thresholds. Merging is
/// associative and order-free because compute_ap sorts hits totally.
struct MatchPool {
  std::map<int, std::array<HitList, kNumIouThresholds>> categories;

  void add(int category, const std::vector<Detection>& dets, const std::vector<BoxXYXY>& gts);
  void merge(const MatchPool& other);
};

struct CategoryAP {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::size_t num_gts = 0;
  std::size_t num_dets = 0;
};

struct Aggregate {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::size_t categories = 0;
};

struct APReport {
  std::string protocol = "stream";
  int ways = 1;
  int shots = 1;
  std::uint64_t seed = 0;
  std::size_t episode_count = 0;
  std::map<int, CategoryAP> per_category;  // categories with gts only
  std::map<std::string, Aggregate> aggregates;  // "base", "novel", "all"
  std::vector<double> episode_ap50;  // episodes protocol only

  nlohmann::ordered_json to_json() const;
};

/// Per-category APs from a pool; categories without gts are left out and the
/// aggregates are unweighted means over the remaining ones.
APReport make_report(const MatchPool& pool, const episodes::ClassSplit& split);

struct Model {
  detector::ParamSet params;
  detector::DetectorConfig cfg;
};

/// K-shot support sets for N ways and the queries they are run against.
struct EvalEpisode {
  std::vector<episodes::SupportSet> ways;
  std::vector<episodes::QueryScene> queries;
};

EvalEpisode to_eval_episode(const episodes::EpisodeTask& task);

/// Match pool of one episode: detect() for every (query, way) pair, scored
/// against the query's gts of that way's category.
MatchPool episode_pool(const Model& model, const EvalEpisode& episode);

/// Pooled AP over a stream of episodes. Rejects an empty stream.
APReport evaluate(const Model& model, const std::vector<EvalEpisode>& stream, const episodes::ClassSplit& split,
                  int ways, int shots);

/// The stream protocol's episodes: sample_episode(split, derive(seed, e), N, K, pool).
std::vector<EvalEpisode> stream_episodes(const episodes::ClassSplit& split, std::size_t count, int ways, int shots,
                                         episodes::Pool pool, std::uint64_t seed,
                                         const episodes::SceneStyle& style = {});

/// E fixed episodes of N sampled classes, K supports and Q queries per class
/// (each query contains its class).
std::vector<EvalEpisode> protocol_episodes(const episodes::ClassSplit& split, std::size_t count, int ways,
                                           int shots, int queries_per_class, episodes::Pool pool,
                                           std::uint64_t seed, const episodes::SceneStyle& style = {});

/// Per-episode reports averaged: per-category values over the episodes that
/// contain the category, aggregates over episodes.
APReport episode_protocol_evaluate(const Model& model, const std::vector<EvalEpisode>& episodes,
                                   const episodes::ClassSplit& split, int ways, int shots);

double sample_mean(const std::vector<double>& v);
/// 1/(n-1) normalization; requires n >= 2.
double sample_std(const std::vector<double>& v);

struct SensitivityReport {
  std::string method;
  std::vector<double> ap50;  // one per draw
  double mean = 0;
  double std = 0;
};

/// Runs every draw against the fixed queries. draws[c][t] is the t-th
/// support set of category c; a draw's AP50 is the mean over categories.
SensitivityReport sensitivity_stats(const Model& model, const std::vector<episodes::QueryScene>& queries,
                                    const std::vector<std::vector<episodes::SupportSet>>& draws,
                                    const std::string& method);

/// Columns draw_index, ap50, method; one block per report.
void write_sensitivity_csv(const std::filesystem::path& path, const std::vector<SensitivityReport>& reports);

}  // namespace dana::evalkit
