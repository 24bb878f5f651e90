#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dana/detector/detector.hpp"
#include "dana/episodes/episodes.hpp"
#include "dana/trainer/trainer.hpp"

namespace dana::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericFailure = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::string split = "default-10/4";
  episodes::Pool pool = episodes::Pool::kTrain;
  std::size_t count = 1000;
  std::string dir;  // dataset directory; train replays its query seeds when set
};

struct EvalSection {
  int ways = 1;
  std::vector<int> shots{1};
  episodes::Pool pool = episodes::Pool::kTest;
  std::string protocol = "stream";  // stream | episodes
  std::size_t episodes = 500;
  int queries_per_class = 10;
  int draws = 20;
  std::size_t sensitivity_queries = 200;
  int sensitivity_shots = 1;
};

/// One config document; every section is optional and unknown keys are
/// rejected. Command-line flags override file values.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DataSection data;
  trainer::TrainConfig train;  // includes the model section
  EvalSection eval;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::optional<std::filesystem::path>& path);
  nlohmann::ordered_json to_json() const;
  /// Writes config.resolved.json into `dir`.
  void write_resolved(const std::filesystem::path& dir) const;
};

/// Model config for a checkpoint: config.resolved.json next to it when
/// present, else `fallback`.
detector::DetectorConfig checkpoint_model_config(const std::filesystem::path& checkpoint,
                                                 const detector::DetectorConfig& fallback);

struct GenDataArgs {
  bool force = false;
};
int cmd_gen_data(const RunConfig& cfg, const GenDataArgs& args);

struct TrainArgs {
  std::optional<std::filesystem::path> resume;
  bool quiet = false;
};
int cmd_train(const RunConfig& cfg, const TrainArgs& args);

struct EvalArgs {
  std::filesystem::path checkpoint;
};
int cmd_eval(const RunConfig& cfg, const EvalArgs& args);

struct SensitivityArgs {
  /// tag=path pairs; a bare path is tagged "model".
  std::vector<std::string> checkpoints;
};
int cmd_sensitivity(const RunConfig& cfg, const SensitivityArgs& args);

struct AblateArgs {
  std::string rows = "abcdf";
};
int cmd_ablate(const RunConfig& cfg, const AblateArgs& args);

struct DumpAttnArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path query;
  std::vector<std::filesystem::path> supports;
  std::vector<std::size_t> positions;  // query grid positions (row-major)
};
int cmd_dump_attn(const RunConfig& cfg, const DumpAttnArgs& args);

}  // namespace dana::cli
