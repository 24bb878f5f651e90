#include "commands.hpp"

#include <fstream>
#include <iostream>
#include <map>

#include "dana/detector/checkpoint.hpp"
#include "dana/evalkit/evalkit.hpp"
#include "dana/util/pnm.hpp"

namespace dana::cli {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

episodes::ClassSplit split_of(const RunConfig& cfg) {
  try {
    return episodes::ClassSplit::preset(cfg.data.split);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string pool_flag(episodes::Pool p) { return p == episodes::Pool::kTrain ? "base" : "novel"; }

evalkit::Model load_model(const fs::path& checkpoint, const detector::DetectorConfig& fallback) {
  if (!fs::exists(checkpoint)) throw DataError("checkpoint " + checkpoint.string() + " does not exist");
  const auto cfg = checkpoint_model_config(checkpoint, fallback);
  try {
    return {trainer::params_from_checkpoint(detector::load_checkpoint(checkpoint), cfg), cfg};
  } catch (const detector::CheckpointError& e) {
    throw DataError(e.what());
  }
}

void check_ways_shots(int ways, const std::vector<int>& shots, const episodes::ClassSplit& split,
                      episodes::Pool pool) {
  const auto n_cats = static_cast<int>(episodes::pool_categories(split, pool).size());
  if (ways < 1 || ways > n_cats) {
    throw UsageError("--ways must be in [1, " + std::to_string(n_cats) + "] for the " + pool_flag(pool) + " pool");
  }
  if (shots.empty()) throw UsageError("need at least one --shots value");
  for (int k : shots) {
    if (k < 1 || k > 10) throw UsageError("--shots values must be in [1, 10]");
  }
}

evalkit::APReport run_eval(const evalkit::Model& model, const RunConfig& cfg, const episodes::ClassSplit& split,
                           int shots) {
  const auto& e = cfg.eval;
  const auto style = cfg.train.style;
  if (e.protocol == "stream") {
    auto stream = evalkit::stream_episodes(split, e.episodes, e.ways, shots, e.pool, cfg.seed, style);
    auto r = evalkit::evaluate(model, stream, split, e.ways, shots);
    r.seed = cfg.seed;
    return r;
  }
  auto eps = evalkit::protocol_episodes(split, e.episodes, e.ways, shots, e.queries_per_class, e.pool, cfg.seed, style);
  auto r = evalkit::episode_protocol_evaluate(model, eps, split, e.ways, shots);
  r.seed = cfg.seed;
  return r;
}

std::string report_name(const RunConfig& cfg, int shots) {
  return "eval_" + cfg.eval.protocol + "_" + pool_flag(cfg.eval.pool) + "_" + std::to_string(cfg.eval.ways) + "way_" +
         std::to_string(shots) + "shot.json";
}

std::vector<int> parse_shots(const nlohmann::json& v) {
  if (v.is_array()) return v.get<std::vector<int>>();
  return {v.get<int>()};
}

episodes::Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("image " + path.string() + " does not exist");
  episodes::Image img;
  try {
    img.rgb = util::read_ppm(path, img.height, img.width);
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return img;
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  RunConfig c;
  nlohmann::json train_doc = nlohmann::json::object();
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "output_dir") c.output_dir = value.get<std::string>();
      else if (key == "data") {
        for (const auto& [k, v] : value.items()) {
          if (k == "split") c.data.split = v.get<std::string>();
          else if (k == "pool") c.data.pool = episodes::parse_pool(v.get<std::string>());
          else if (k == "count") c.data.count = v.get<std::size_t>();
          else if (k == "dir") c.data.dir = v.get<std::string>();
          else throw UsageError("unknown data key '" + k + "'");
        }
      } else if (key == "model") {
        train_doc["model"] = value;
      } else if (key == "train") {
        for (const auto& [k, v] : value.items()) {
          if (k == "model" || k == "seed") throw UsageError("train." + k + " belongs at the top level");
          train_doc[k] = v;
        }
      } else if (key == "eval") {
        for (const auto& [k, v] : value.items()) {
          if (k == "ways") c.eval.ways = v.get<int>();
          else if (k == "shots") c.eval.shots = parse_shots(v);
          else if (k == "pool") c.eval.pool = episodes::parse_pool(v.get<std::string>());
          else if (k == "protocol") c.eval.protocol = v.get<std::string>();
          else if (k == "episodes") c.eval.episodes = v.get<std::size_t>();
          else if (k == "queries_per_class") c.eval.queries_per_class = v.get<int>();
          else if (k == "draws") c.eval.draws = v.get<int>();
          else if (k == "sensitivity_queries") c.eval.sensitivity_queries = v.get<std::size_t>();
          else if (k == "sensitivity_shots") c.eval.sensitivity_shots = v.get<int>();
          else throw UsageError("unknown eval key '" + k + "'");
        }
      } else {
        throw UsageError("unknown config key '" + key + "'");
      }
    }
    c.train = trainer::TrainConfig::from_json(train_doc);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.train.seed = c.seed;
  return c;
}

RunConfig RunConfig::load(const std::optional<fs::path>& path) {
  if (!path) return from_json(nlohmann::json::object());
  std::ifstream is(*path);
  if (!is) throw DataError("cannot read config " + path->string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path->string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["data"] = {{"split", data.split}, {"pool", episodes::to_string(data.pool)}, {"count", data.count}, {"dir", data.dir}};
  auto t = train.to_json();
  j["model"] = t["model"];
  t.erase("model");
  t.erase("seed");
  j["train"] = t;
  j["eval"] = {{"ways", eval.ways},
               {"shots", eval.shots},
               {"pool", episodes::to_string(eval.pool)},
               {"protocol", eval.protocol},
               {"episodes", eval.episodes},
               {"queries_per_class", eval.queries_per_class},
               {"draws", eval.draws},
               {"sensitivity_queries", eval.sensitivity_queries},
               {"sensitivity_shots", eval.sensitivity_shots}};
  return j;
}

void RunConfig::write_resolved(const fs::path& dir) const {
  fs::create_directories(dir);
  write_json(dir / "config.resolved.json", to_json());
}

detector::DetectorConfig checkpoint_model_config(const fs::path& checkpoint, const detector::DetectorConfig& fallback) {
  const auto resolved = checkpoint.parent_path() / "config.resolved.json";
  if (!fs::exists(resolved)) return fallback;
  std::ifstream is(resolved);
  try {
    const auto j = nlohmann::json::parse(is);
    return detector::DetectorConfig::from_json(j.at("model"));
  } catch (const std::exception& e) {
    throw DataError(resolved.string() + ": " + e.what());
  }
}

int cmd_gen_data(const RunConfig& cfg, const GenDataArgs& args) {
  const auto split = split_of(cfg);
  const fs::path dir = cfg.data.dir.empty() ? fs::path(cfg.output_dir) : fs::path(cfg.data.dir);
  try {
    const auto recs = episodes::generate_dataset(dir, split, cfg.data.pool, cfg.data.count, cfg.seed, cfg.train.style,
                                                 args.force);
    cfg.write_resolved(dir);
    std::cerr << "wrote " << recs.size() << " images to " << dir.string() << '\n';
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  return kOk;
}

int cmd_train(const RunConfig& cfg, const TrainArgs& args) {
  const auto split = split_of(cfg);
  const fs::path out = cfg.output_dir;
  trainer::TrainOptions opts;
  if (!cfg.data.dir.empty()) {
    const fs::path manifest = fs::path(cfg.data.dir) / "manifest.jsonl";
    if (!fs::exists(manifest)) throw DataError("dataset manifest " + manifest.string() + " does not exist");
    for (const auto& rec : episodes::read_manifest(manifest)) {
      if (rec.pool != episodes::Pool::kTrain) throw DataError("training reads train-pool datasets only");
      opts.source.manifest_seeds.push_back(rec.seed);
    }
    if (opts.source.manifest_seeds.empty()) throw DataError("dataset manifest is empty");
  }
  std::optional<trainer::TrainState> resume;
  if (args.resume) {
    if (!fs::exists(*args.resume)) throw DataError("checkpoint " + args.resume->string() + " does not exist");
    try {
      resume = trainer::from_checkpoint(detector::load_checkpoint(*args.resume), cfg.train.model);
    } catch (const detector::CheckpointError& e) {
      throw DataError(e.what());
    }
    opts.resume = &*resume;
  }
  cfg.write_resolved(out);
  opts.out_dir = out;
  const std::size_t every = std::max<std::size_t>(1, cfg.train.total_steps / 50);
  if (!args.quiet) {
    opts.on_step = [&](const trainer::StepRecord& r) {
      if (r.step % every == 0 || r.step + 1 == cfg.train.total_steps) {
        std::cerr << "step " << r.step << " lr " << r.lr << " loss " << r.loss.total << '\n';
      }
    };
  }
  const auto res = trainer::train(cfg.train, split, opts);
  nlohmann::ordered_json m;
  m["steps"] = res.state.optim.step;
  m["parameter_count"] = detector::parameter_count(res.state.params);
  m["final_loss"] = res.curve.empty() ? 0.0 : res.curve.back().loss.total;
  m["no_positive_branches"] = res.no_positive;
  write_json(out / "train_metrics.json", m);
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const EvalArgs& args) {
  const auto split = split_of(cfg);
  check_ways_shots(cfg.eval.ways, cfg.eval.shots, split, cfg.eval.pool);
  if (cfg.eval.protocol != "stream" && cfg.eval.protocol != "episodes") {
    throw UsageError("--protocol must be stream or episodes");
  }
  if (cfg.eval.episodes == 0) throw UsageError("--episodes must be >= 1");
  const auto model = load_model(args.checkpoint, cfg.train.model);
  const fs::path out = cfg.output_dir;
  cfg.write_resolved(out);
  for (int k : cfg.eval.shots) {
    const auto r = run_eval(model, cfg, split, k);
    write_json(out / report_name(cfg, k), r.to_json());
    std::cerr << report_name(cfg, k) << ": AP50 " << r.aggregates.at("all").ap50 << '\n';
  }
  return kOk;
}

int cmd_sensitivity(const RunConfig& cfg, const SensitivityArgs& args) {
  const auto split = split_of(cfg);
  if (cfg.eval.draws < 2) throw UsageError("--draws must be >= 2");
  if (args.checkpoints.empty()) throw UsageError("need at least one --checkpoint");
  const auto& cats = episodes::pool_categories(split, cfg.eval.pool);
  const auto queries =
      episodes::sensitivity_queries(split, cfg.eval.pool, cfg.eval.sensitivity_queries, cfg.seed, cfg.train.style);
  std::vector<std::vector<episodes::SupportSet>> draws;
  for (int c : cats) {
    draws.push_back(episodes::sensitivity_support_draws(queries, c, cfg.eval.sensitivity_shots, cfg.eval.draws,
                                                         cfg.seed, cfg.train.style));
  }
  const fs::path out = cfg.output_dir;
  cfg.write_resolved(out);
  std::vector<evalkit::SensitivityReport> reports;
  nlohmann::ordered_json summary;
  summary["query_set_hash"] = episodes::query_set_hash(queries);
  summary["queries"] = queries.size();
  summary["draws"] = cfg.eval.draws;
  summary["shots"] = cfg.eval.sensitivity_shots;
  auto methods = nlohmann::ordered_json::array();
  for (const auto& spec : args.checkpoints) {
    const auto eq = spec.find('=');
    const std::string tag = eq == std::string::npos ? "model" : spec.substr(0, eq);
    const fs::path path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    const auto model = load_model(path, cfg.train.model);
    auto r = evalkit::sensitivity_stats(model, queries, draws, tag);
    methods.push_back({{"method", r.method}, {"mean", r.mean}, {"std", r.std}, {"ap50", r.ap50}});
    std::cerr << tag << ": mean AP50 " << r.mean << " std " << r.std << '\n';
    reports.push_back(std::move(r));
  }
  summary["methods"] = std::move(methods);
  evalkit::write_sensitivity_csv(out / "sensitivity.csv", reports);
  write_json(out / "sensitivity.json", summary);
  return kOk;
}

int cmd_ablate(const RunConfig& cfg, const AblateArgs& args) {
  const auto split = split_of(cfg);
  check_ways_shots(cfg.eval.ways, cfg.eval.shots, split, cfg.eval.pool);
  if (args.rows.empty()) throw UsageError("--rows must name at least one row");
  std::vector<char> rows;
  for (char r : args.rows) {
    try {
      trainer::ablation_row(r);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    rows.push_back(r);
  }
  const fs::path out = cfg.output_dir;
  cfg.write_resolved(out);
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::map<char, double> ap50;
  for (char id : rows) {
    const auto& row = trainer::ablation_row(id);
    RunConfig sub = cfg;
    sub.train.model = trainer::apply_ablation(cfg.train.model, id);
    sub.output_dir = (out / (std::string("row_") + id)).string();
    std::cerr << "ablation row " << id << ": " << row.description << '\n';
    cmd_train(sub, {std::nullopt, true});
    const auto model = load_model(fs::path(sub.output_dir) / "checkpoint_final.bin", sub.train.model);
    nlohmann::ordered_json entry;
    entry["row"] = std::string(1, id);
    entry["description"] = row.description;
    entry["qpa_average"] = row.qpa_average;
    entry["denoise"] = attention::to_string(row.denoise);
    entry["fuse"] = attention::to_string(row.fuse);
    entry["parameter_count"] = detector::parameter_count(model.params);
    auto reports = nlohmann::ordered_json::array();
    for (int k : cfg.eval.shots) {
      const auto r = run_eval(model, sub, split, k);
      write_json(fs::path(sub.output_dir) / report_name(sub, k), r.to_json());
      if (k == cfg.eval.shots.front()) ap50[id] = r.aggregates.at("all").ap50;
      reports.push_back(r.to_json());
    }
    entry["reports"] = std::move(reports);
    table.push_back(std::move(entry));
  }
  nlohmann::ordered_json doc;
  doc["rows"] = std::move(table);
  if (ap50.count('b') && ap50.count('c')) doc["concat_ge_product"] = ap50['b'] >= ap50['c'];
  write_json(out / "ablation.json", doc);
  return kOk;
}

int cmd_dump_attn(const RunConfig& cfg, const DumpAttnArgs& args) {
  if (args.supports.empty()) throw UsageError("need at least one --support image");
  if (args.positions.empty()) throw UsageError("need at least one --position");
  const auto model = load_model(args.checkpoint, cfg.train.model);
  if (!model.cfg.qpa_average) throw UsageError("the global-pool model has no attention maps");
  const auto query = read_image(args.query);
  if (query.height != model.cfg.image_size || query.width != model.cfg.image_size) {
    throw DataError("query image must be " + std::to_string(model.cfg.image_size) + " px square");
  }
  const Tensor x = detector::backbone_forward(detector::image_tensor(query), model.params);
  std::vector<Tensor> ys;
  for (const auto& s : args.supports) {
    const auto img = read_image(s);
    if (img.height % 8 || img.width % 8) throw DataError(s.string() + ": sides must be multiples of 8");
    ys.push_back(detector::backbone_forward(detector::image_tensor(img), model.params));
  }
  const auto enc = detector::encode_supports(ys, model.cfg, model.params);
  std::vector<Tensor> attn;
  detector::fuse_with_supports(x, enc, model.cfg, model.params, "cisa1", &attn);
  const fs::path out = cfg.output_dir;
  cfg.write_resolved(out);
  for (std::size_t pos : args.positions) {
    if (pos >= x.dim(1) * x.dim(2)) {
      throw UsageError("--position " + std::to_string(pos) + " outside the " + std::to_string(x.dim(1)) + "x" +
                       std::to_string(x.dim(2)) + " query grid");
    }
    for (std::size_t k = 0; k < attn.size(); ++k) {
      const std::size_t h = ys[k].dim(1), w = ys[k].dim(2);
      const auto gray = detector::attention_image(attn[k], pos, h, w);
      const auto name = "attn_pos" + std::to_string(pos) + "_shot" + std::to_string(k) + ".pgm";
      util::write_pgm(out / name, h, w, gray);
    }
  }
  return kOk;
}

}  // namespace dana::cli
