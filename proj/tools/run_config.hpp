#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "graftkit/analysis.hpp"
#include "graftkit/diffusion.hpp"
#include "graftkit/graft.hpp"
#include "graftkit/model.hpp"

namespace graftkit::cli {

using json = nlohmann::json;

struct ScheduleSpec {
  std::int64_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return NoiseSchedule(steps, beta_start, beta_end); }
};

struct DataSpec {
  std::int64_t size = 8192;
  std::uint64_t seed = 1;
  double noise_std = 0.05;
};

// Replacement operator for plans built from flags. Width and heads default to
// the model's; `init` "copy" starts distillation from the teacher's own weights.
struct PlanSpec {
  Strategy strategy = Strategy::kInterleaved;
  double ratio = 0.5;
  std::int64_t depth = 0;  // 0 takes the model depth
  Slot slot = Slot::kMixer;
  json replacement = json{{"kind", "hyena_x"}};
  std::string init = "fresh";
};

struct EvalSpec {
  std::int64_t val_count = 512;
  std::uint64_t val_seed = 2;
  std::uint64_t loss_seed = 0;
  std::int64_t samples = 128;
  std::int64_t probe_count = 64;
  std::uint64_t probe_seed = 7;
};

struct RunConfig {
  DiTConfig model = DiTConfig::xs();
  ScheduleSpec schedule;
  DataSpec data;
  TrainConfig train;
  CaptureConfig capture;
  DistillConfig distill;
  std::string objective = "auto";  // auto picks L1 for mixers and L2 for MLPs
  FinetuneConfig finetune;
  SampleConfig sample;
  LocalityConfig locality;
  PlanSpec plan;
  EvalSpec eval;
  int parallelism = 1;

  RunConfig();
  // Objective for a slot after resolving "auto".
  RegressionObjective objective_for(Slot slot) const;
  // Replacement config with model width/heads filled in; the seed is the plan seed.
  OperatorConfig replacement(std::int64_t width, std::int64_t heads) const;
};

// Strict parse: unknown keys and bad values raise ConfigError with the key path.
// A top-level "seed" derives every section seed not given explicitly.
RunConfig run_config_from_json(const json& j);
json to_json(const RunConfig& cfg);

}  // namespace graftkit::cli
