#include "dana/evalkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <stdexcept>

#include "dana/util/hash.hpp"
#include "dana/util/parallel.hpp"

namespace dana::evalkit {

namespace {

enum Stream : std::uint64_t { kStreamEpisode = 11, kProtocolEpisode = 12, kProtocolQuery = 13 };

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  return a.box.y1 < b.box.y1;
}

Aggregate mean_of(const std::vector<const CategoryAP*>& cats) {
  Aggregate a;
  a.categories = cats.size();
  if (cats.empty()) return a;
  for (const auto* c : cats) {
    a.ap += c->ap;
    a.ap50 += c->ap50;
    a.ap75 += c->ap75;
  }
  const auto n = static_cast<double>(cats.size());
  a.ap /= n;
  a.ap50 /= n;
  a.ap75 /= n;
  return a;
}

}  // namespace

double iou_threshold(std::size_t i) { return 0.5 + 0.05 * static_cast<double>(i); }

MatchResult match_detections(std::vector<Detection> dets, const std::vector<BoxXYXY>& gts, double iou_thr) {
  std::stable_sort(dets.begin(), dets.end(), ranks_before);
  MatchResult m;
  m.num_gts = gts.size();
  std::vector<bool> taken(gts.size(), false);
  for (const auto& d : dets) {
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = detector::iou(d.box, gts[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) taken[static_cast<std::size_t>(best)] = true;
    m.scores.push_back(d.score);
    m.tp.push_back(best >= 0);
    m.gt_index.push_back(best);
  }
  m.unmatched_gts = static_cast<std::size_t>(std::count(taken.begin(), taken.end(), false));
  return m;
}

void HitList::add(const MatchResult& m) {
  for (std::size_t i = 0; i < m.scores.size(); ++i) hits.emplace_back(m.scores[i], m.tp[i]);
  num_gts += m.num_gts;
}

void HitList::merge(const HitList& other) {
  hits.insert(hits.end(), other.hits.begin(), other.hits.end());
  num_gts += other.num_gts;
}

std::optional<double> compute_ap(const HitList& list) {
  if (list.num_gts == 0) return std::nullopt;
  auto hits = list.hits;
  // Equal scores rank false positives first, so the result never depends on
  // the order in which pools were merged.
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const auto n_gt = static_cast<double>(list.num_gts);
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (const auto& [score, is_tp] : hits) {
    (is_tp ? tp : fp) += 1;
    recall.push_back(tp / n_gt);
    precision.push_back(tp / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  std::size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0 - 1e-12;
    while (j < recall.size() && recall[j] < level) ++j;
    if (j < recall.size()) sum += precision[j];
  }
  return sum / 101.0;
}

std::optional<double> compute_ap(const std::vector<MatchResult>& results) {
  HitList list;
  for (const auto& m : results) list.add(m);
  return compute_ap(list);
}

void MatchPool::add(int category, const std::vector<Detection>& dets, const std::vector<BoxXYXY>& gts) {
  auto& lists = categories[category];
  for (std::size_t t = 0; t < kNumIouThresholds; ++t) lists[t].add(match_detections(dets, gts, iou_threshold(t)));
}

void MatchPool::merge(const MatchPool& other) {
  for (const auto& [cat, lists] : other.categories) {
    auto& mine = categories[cat];
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) mine[t].merge(lists[t]);
  }
}

nlohmann::ordered_json APReport::to_json() const {
  nlohmann::ordered_json j;
  j["protocol"] = protocol;
  j["ways"] = ways;
  j["shots"] = shots;
  auto per = nlohmann::ordered_json::object();
  for (const auto& [cat, c] : per_category) {
    per[std::string(episodes::category(cat).name)] = {{"id", cat},     {"ap", c.ap},          {"ap50", c.ap50},
                                                      {"ap75", c.ap75}, {"num_gts", c.num_gts}, {"num_dets", c.num_dets}};
  }
  j["per_category"] = std::move(per);
  auto agg = nlohmann::ordered_json::object();
  for (const auto& [name, a] : aggregates) {
    agg[name] = {{"ap", a.ap}, {"ap50", a.ap50}, {"ap75", a.ap75}, {"categories", a.categories}};
  }
  j["aggregates"] = std::move(agg);
  j["seed"] = seed;
  j["episode_count"] = episode_count;
  if (!episode_ap50.empty()) j["episode_ap50"] = episode_ap50;
  return j;
}

APReport make_report(const MatchPool& pool, const episodes::ClassSplit& split) {
  APReport r;
  for (const auto& [cat, lists] : pool.categories) {
    if (lists[0].num_gts == 0) continue;
    CategoryAP c;
    c.num_gts = lists[0].num_gts;
    c.num_dets = lists[0].hits.size();
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
      const double ap = compute_ap(lists[t]).value();
      c.ap += ap;
      if (t == 0) c.ap50 = ap;
      if (t == 5) c.ap75 = ap;
    }
    c.ap /= static_cast<double>(kNumIouThresholds);
    r.per_category[cat] = c;
  }
  std::vector<const CategoryAP*> base, novel, all;
  for (const auto& [cat, c] : r.per_category) {
    all.push_back(&c);
    (split.is_base(cat) ? base : novel).push_back(&c);
  }
  r.aggregates["all"] = mean_of(all);
  r.aggregates["base"] = mean_of(base);
  r.aggregates["novel"] = mean_of(novel);
  return r;
}

EvalEpisode to_eval_episode(const episodes::EpisodeTask& task) { return {task.ways, {task.query}}; }

MatchPool episode_pool(const Model& model, const EvalEpisode& episode) {
  MatchPool pool;
  std::vector<std::vector<Tensor>> way_features;
  for (const auto& way : episode.ways) {
    auto& feats = way_features.emplace_back();
    for (const auto& img : way.images) {
      feats.push_back(detector::backbone_forward(detector::image_tensor(img), model.params));
    }
  }
  for (const auto& q : episode.queries) {
    const Tensor x = detector::backbone_forward(detector::image_tensor(q.image), model.params);
    for (std::size_t w = 0; w < episode.ways.size(); ++w) {
      const int cat = episode.ways[w].category;
      std::vector<BoxXYXY> gts;
      for (const auto& a : q.annotations) {
        if (a.category == cat) gts.push_back(a.box);
      }
      pool.add(cat, detector::detect_features(x, way_features[w], model.params, model.cfg, cat), gts);
    }
  }
  return pool;
}

APReport evaluate(const Model& model, const std::vector<EvalEpisode>& stream, const episodes::ClassSplit& split,
                  int ways, int shots) {
  if (stream.empty()) throw std::invalid_argument("evaluate: empty episode stream");
  std::vector<MatchPool> pools(stream.size());
  util::parallel_for(stream.size(), [&](std::size_t e) { pools[e] = episode_pool(model, stream[e]); });
  MatchPool all;
  for (const auto& p : pools) all.merge(p);
  APReport r = make_report(all, split);
  r.protocol = "stream";
  r.ways = ways;
  r.shots = shots;
  r.episode_count = stream.size();
  return r;
}

std::vector<EvalEpisode> stream_episodes(const episodes::ClassSplit& split, std::size_t count, int ways, int shots,
                                         episodes::Pool pool, std::uint64_t seed,
                                         const episodes::SceneStyle& style) {
  std::vector<EvalEpisode> out(count);
  util::parallel_for(count, [&](std::size_t e) {
    out[e] = to_eval_episode(
        episodes::sample_episode(split, util::derive_seed(seed, kStreamEpisode, e), ways, shots, pool, style));
  });
  return out;
}

std::vector<EvalEpisode> protocol_episodes(const episodes::ClassSplit& split, std::size_t count, int ways,
                                           int shots, int queries_per_class, episodes::Pool pool,
                                           std::uint64_t seed, const episodes::SceneStyle& style) {
  const auto& cats = episodes::pool_categories(split, pool);
  if (ways < 1 || shots < 1 || queries_per_class < 1) {
    throw std::invalid_argument("protocol episodes need N, K, Q >= 1");
  }
  if (static_cast<std::size_t>(ways) > cats.size()) {
    throw std::invalid_argument("N = " + std::to_string(ways) + " exceeds the pool's categories");
  }
  std::vector<EvalEpisode> out(count);
  util::parallel_for(count, [&](std::size_t e) {
    const auto es = util::derive_seed(seed, kProtocolEpisode, e);
    std::mt19937_64 rng(es);
    auto chosen = cats;
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(static_cast<std::size_t>(ways));
    EvalEpisode ep;
    for (std::size_t w = 0; w < chosen.size(); ++w) {
      ep.ways.push_back(episodes::make_support_set(util::derive_seed(es, kProtocolEpisode, w), chosen[w], shots, style));
      for (int q = 0; q < queries_per_class; ++q) {
        const auto qs = util::derive_seed(es, kProtocolQuery, w * 1000003u + static_cast<std::size_t>(q));
        ep.queries.push_back(episodes::make_query(qs, cats, style, chosen[w]));
      }
    }
    out[e] = std::move(ep);
  });
  return out;
}

APReport episode_protocol_evaluate(const Model& model, const std::vector<EvalEpisode>& eps,
                                   const episodes::ClassSplit& split, int ways, int shots) {
  if (eps.empty()) throw std::invalid_argument("episode protocol needs E >= 1");
  std::vector<APReport> reports(eps.size());
  util::parallel_for(eps.size(), [&](std::size_t e) { reports[e] = make_report(episode_pool(model, eps[e]), split); });

  APReport r;
  r.protocol = "episodes";
  r.ways = ways;
  r.shots = shots;
  r.episode_count = eps.size();
  std::map<int, std::size_t> seen;
  std::map<std::string, std::size_t> agg_seen;
  for (const auto& rep : reports) {
    for (const auto& [cat, c] : rep.per_category) {
      auto& acc = r.per_category[cat];
      acc.ap += c.ap;
      acc.ap50 += c.ap50;
      acc.ap75 += c.ap75;
      acc.num_gts += c.num_gts;
      acc.num_dets += c.num_dets;
      ++seen[cat];
    }
    for (const auto& [name, a] : rep.aggregates) {
      if (a.categories == 0) continue;
      auto& acc = r.aggregates[name];
      acc.ap += a.ap;
      acc.ap50 += a.ap50;
      acc.ap75 += a.ap75;
      acc.categories = std::max(acc.categories, a.categories);
      ++agg_seen[name];
    }
    r.episode_ap50.push_back(rep.aggregates.at("all").ap50);
  }
  for (auto& [cat, c] : r.per_category) {
    const auto n = static_cast<double>(seen[cat]);
    c.ap /= n;
    c.ap50 /= n;
    c.ap75 /= n;
  }
  for (const std::string name : {"all", "base", "novel"}) {
    auto& a = r.aggregates[name];
    if (agg_seen[name] == 0) continue;
    const auto n = static_cast<double>(agg_seen[name]);
    a.ap /= n;
    a.ap50 /= n;
    a.ap75 /= n;
  }
  return r;
}

double sample_mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) throw std::invalid_argument("sample std needs at least two values");
  const double m = sample_mean(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

SensitivityReport sensitivity_stats(const Model& model, const std::vector<episodes::QueryScene>& queries,
                                    const std::vector<std::vector<episodes::SupportSet>>& draws,
                                    const std::string& method) {
  if (draws.empty()) throw std::invalid_argument("sensitivity: no categories");
  const std::size_t t_count = draws.front().size();
  for (const auto& d : draws) {
    if (d.size() != t_count) throw std::invalid_argument("sensitivity: ragged draw lists");
  }
  if (t_count < 2) throw std::invalid_argument("sensitivity: T must be >= 2");

  std::vector<Tensor> qfeat(queries.size());
  util::parallel_for(queries.size(), [&](std::size_t i) {
    qfeat[i] = detector::backbone_forward(detector::image_tensor(queries[i].image), model.params);
  });

  SensitivityReport rep;
  rep.method = method;
  rep.ap50.resize(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    double sum = 0;
    std::size_t counted = 0;
    for (const auto& cat_draws : draws) {
      const auto& set = cat_draws[t];
      std::vector<Tensor> sfeat;
      for (const auto& img : set.images) {
        sfeat.push_back(detector::backbone_forward(detector::image_tensor(img), model.params));
      }
      std::vector<MatchResult> results(queries.size());
      util::parallel_for(queries.size(), [&](std::size_t i) {
        std::vector<BoxXYXY> gts;
        for (const auto& a : queries[i].annotations) {
          if (a.category == set.category) gts.push_back(a.box);
        }
        results[i] = match_detections(detector::detect_features(qfeat[i], sfeat, model.params, model.cfg, set.category),
                                      gts, 0.5);
      });
      if (auto ap = compute_ap(results)) {
        sum += *ap;
        ++counted;
      }
    }
    rep.ap50[t] = counted ? sum / static_cast<double>(counted) : 0.0;
  }
  rep.mean = sample_mean(rep.ap50);
  rep.std = sample_std(rep.ap50);
  return rep;
}

void write_sensitivity_csv(const std::filesystem::path& path, const std::vector<SensitivityReport>& reports) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "draw_index,ap50,method\n" << std::setprecision(17);
  for (const auto& r : reports) {
    for (std::size_t t = 0; t < r.ap50.size(); ++t) os << t << ',' << r.ap50[t] << ',' << r.method << '\n';
  }
}

}  // namespace dana::evalkit
