// dana: data generation, training, evaluation and attention dumps for the
// toy support-conditioned detector.

#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "dana/trainer/trainer.hpp"

namespace {

using dana::cli::RunConfig;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> split;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON config document (sections: seed, output_dir, data, model, train, eval)")
      ->check(CLI::ExistingFile);
  app->add_option("-o,--out", c.out, "Output directory (overrides output_dir)");
  app->add_option("--seed", c.seed, "Master seed (overrides seed)");
  app->add_option("--split", c.split, "Class split preset (default-10/4)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = RunConfig::load(c.config.empty() ? std::nullopt : std::optional<std::filesystem::path>(c.config));
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed) cfg.seed = cfg.train.seed = *c.seed;
  if (c.split) cfg.data.split = *c.split;
  return cfg;
}

dana::episodes::Pool parse_pool_flag(const std::string& s) {
  try {
    return dana::episodes::parse_pool(s);
  } catch (const std::invalid_argument& e) {
    throw dana::cli::UsageError(e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Support-conditioned few-shot detector on synthetic shapes"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure. DANA_THREADS sets the worker count.");

  // gen-data
  Common gen_c;
  dana::cli::GenDataArgs gen_a;
  std::optional<std::string> gen_pool;
  std::optional<std::size_t> gen_count;
  auto* gen = app.add_subcommand("gen-data", "Render a query dataset (PPM images + manifest.jsonl)");
  add_common(gen, gen_c);
  gen->add_option("--pool", gen_pool, "train|test (alias base|novel)");
  gen->add_option("--count", gen_count, "Number of images");
  gen->add_flag("--force", gen_a.force, "Overwrite an existing manifest");

  // train
  Common tr_c;
  dana::cli::TrainArgs tr_a;
  std::optional<std::string> tr_data, tr_resume, tr_row;
  std::optional<std::size_t> tr_steps, tr_batch;
  std::optional<int> tr_shots;
  auto* tr = app.add_subcommand("train", "Two-way contrastive episodic training on the base classes");
  add_common(tr, tr_c);
  tr->add_option("--data", tr_data, "Dataset directory whose query seeds are replayed");
  tr->add_option("--steps", tr_steps, "Total optimizer steps");
  tr->add_option("--batch", tr_batch, "Episodes per step");
  tr->add_option("--shots", tr_shots, "Support images per set during training");
  tr->add_option("--row", tr_row, "Ablation row a|b|c|d|f (sets qpa_average, denoise, fuse)");
  tr->add_option("--resume", tr_resume, "Checkpoint to resume from");
  tr->add_flag("-q,--quiet", tr_a.quiet, "No progress output");

  // eval
  Common ev_c;
  dana::cli::EvalArgs ev_a;
  std::optional<int> ev_ways;
  std::vector<int> ev_shots;
  std::optional<std::string> ev_pool, ev_protocol;
  std::optional<std::size_t> ev_episodes;
  auto* ev = app.add_subcommand("eval", "Zero-shot evaluation; one report per --shots value");
  add_common(ev, ev_c);
  ev->add_option("--checkpoint", ev_a.checkpoint, "Checkpoint file")->required();
  ev->add_option("--ways", ev_ways, "N ways");
  ev->add_option("--shots", ev_shots, "K shots (repeatable)");
  ev->add_option("--pool", ev_pool, "base|novel");
  ev->add_option("--protocol", ev_protocol, "stream|episodes");
  ev->add_option("--episodes", ev_episodes, "Episode count E");

  // sensitivity
  Common se_c;
  dana::cli::SensitivityArgs se_a;
  std::optional<int> se_draws;
  std::optional<std::size_t> se_queries;
  std::optional<std::string> se_pool;
  auto* se = app.add_subcommand("sensitivity", "AP50 spread over support resamples on a fixed query set");
  add_common(se, se_c);
  se->add_option("--checkpoint", se_a.checkpoints, "tag=path (repeatable)")->required();
  se->add_option("--draws", se_draws, "Resample count T");
  se->add_option("--queries", se_queries, "Fixed query set size");
  se->add_option("--pool", se_pool, "base|novel");

  // ablate
  Common ab_c;
  dana::cli::AblateArgs ab_a;
  std::optional<std::size_t> ab_steps, ab_episodes;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate the ablation rows");
  add_common(ab, ab_c);
  ab->add_option("--rows", ab_a.rows, "Subset of abcdf")->capture_default_str();
  ab->add_option("--steps", ab_steps, "Training steps per row");
  ab->add_option("--episodes", ab_episodes, "Evaluation episodes per row");

  // dump-attn
  Common da_c;
  dana::cli::DumpAttnArgs da_a;
  std::vector<std::string> da_supports;
  std::string da_query;
  auto* da = app.add_subcommand("dump-attn", "Write support attention maps for query positions as PGM");
  add_common(da, da_c);
  da->add_option("--checkpoint", da_a.checkpoint, "Checkpoint file")->required();
  da->add_option("--query", da_query, "Query PPM")->required();
  da->add_option("--support", da_supports, "Support PPM (repeatable)")->required();
  da->add_option("--position", da_a.positions, "Query grid position y*W+x (repeatable)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? dana::cli::kOk : dana::cli::kUsage;
  }

  try {
    if (gen->parsed()) {
      auto cfg = resolve(gen_c);
      if (gen_pool) cfg.data.pool = parse_pool_flag(*gen_pool);
      if (gen_count) cfg.data.count = *gen_count;
      if (!gen_c.out.empty()) cfg.data.dir = gen_c.out;
      return dana::cli::cmd_gen_data(cfg, gen_a);
    }
    if (tr->parsed()) {
      auto cfg = resolve(tr_c);
      if (tr_data) cfg.data.dir = *tr_data;
      if (tr_steps) cfg.train.total_steps = *tr_steps;
      if (tr_batch) cfg.train.batch_size = *tr_batch;
      if (tr_shots) cfg.train.shots = *tr_shots;
      if (tr_row) {
        if (tr_row->size() != 1) throw dana::cli::UsageError("--row takes one letter");
        try {
          cfg.train.model = dana::trainer::apply_ablation(cfg.train.model, (*tr_row)[0]);
        } catch (const std::invalid_argument& e) {
          throw dana::cli::UsageError(e.what());
        }
      }
      try {
        cfg.train.validate();
      } catch (const std::invalid_argument& e) {
        throw dana::cli::UsageError(e.what());
      }
      if (tr_resume) tr_a.resume = *tr_resume;
      return dana::cli::cmd_train(cfg, tr_a);
    }
    if (ev->parsed()) {
      auto cfg = resolve(ev_c);
      if (ev_ways) cfg.eval.ways = *ev_ways;
      if (!ev_shots.empty()) cfg.eval.shots = ev_shots;
      if (ev_pool) cfg.eval.pool = parse_pool_flag(*ev_pool);
      if (ev_protocol) cfg.eval.protocol = *ev_protocol;
      if (ev_episodes) cfg.eval.episodes = *ev_episodes;
      return dana::cli::cmd_eval(cfg, ev_a);
    }
    if (se->parsed()) {
      auto cfg = resolve(se_c);
      if (se_draws) cfg.eval.draws = *se_draws;
      if (se_queries) cfg.eval.sensitivity_queries = *se_queries;
      if (se_pool) cfg.eval.pool = parse_pool_flag(*se_pool);
      return dana::cli::cmd_sensitivity(cfg, se_a);
    }
    if (ab->parsed()) {
      auto cfg = resolve(ab_c);
      if (ab_steps) cfg.train.total_steps = *ab_steps;
      if (ab_episodes) cfg.eval.episodes = *ab_episodes;
      return dana::cli::cmd_ablate(cfg, ab_a);
    }
    if (da->parsed()) {
      auto cfg = resolve(da_c);
      da_a.query = da_query;
      for (const auto& s : da_supports) da_a.supports.emplace_back(s);
      return dana::cli::cmd_dump_attn(cfg, da_a);
    }
  } catch (const dana::cli::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return dana::cli::kUsage;
  } catch (const dana::cli::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return dana::cli::kDataError;
  } catch (const dana::trainer::TrainingDiverged& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return dana::cli::kNumericFailure;
  } catch (const dana::trainer::NonFiniteGradient& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return dana::cli::kNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return dana::cli::kDataError;
  }
  return dana::cli::kUsage;
}
