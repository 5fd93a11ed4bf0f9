// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one JSON document (comments allowed) per run.
// Every field has a default; unknown keys are rejected with their path.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "blu/bilevel.hpp"
#include "blu/denoiser.hpp"
#include "blu/diffusion.hpp"
#include "blu/eval.hpp"
#include "blu/mixture.hpp"
#include "blu/objectives.hpp"
#include "blu/pruning.hpp"

namespace blu {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::VariancePreserving;
  int T = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  double time_scale = 1.0;  ///< edm only

  NoiseSchedule build() const;
};

struct TrainConfig {
  std::int64_t iters = 8000;
  std::size_t batch = 256;
  double lr = 2e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  bool cosine_decay = true;  ///< anneal lr to 0 over the run
  double uncond_drop = 0.1;
  std::int64_t log_every = 500;
};

struct PruneConfig {
  std::string strategy = "magnitude";
  PruneOptions options;
};

struct FtConfig {
  std::int64_t iters = 5000;
  std::size_t batch = 64;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  FtWeights weights;
  InitMode init = InitMode::PrunedFromTeacher;
  std::int64_t log_every = 500;
  double uncond_drop = 0.1;
  std::vector<int> concepts;  ///< empty means every real concept
};

struct UnlearnConfig {
  UnlearnSpec spec;
  /// Leave the target concept out of the fine-tuning data used while unlearning.
  bool ft_exclude_target = true;
};

struct TwoStageConfig {
  std::int64_t N = 4250;
  std::int64_t M = 1000;
  double lr = 1e-5;
};

struct EvalConfig {
  std::size_t samples = 1000;
  std::size_t heldout_n = 2000;
  double guidance = 0.0;
};

/// Algorithm defaults with the Adam optimizer used for every other stage.
inline BilevelConfig experiment_bilevel_defaults() {
  BilevelConfig b;
  b.optimizer = OptimizerKind::Adam;
  return b;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  MixtureSpec mixture = circle_mixture();
  ScheduleConfig schedule;
  DenoiserConfig model;
  TrainConfig train;
  PruneConfig prune;
  FtConfig ft;
  UnlearnConfig unlearn;
  BilevelConfig bilevel = experiment_bilevel_defaults();
  TwoStageConfig two_stage;
  EvalConfig eval;

  /// Cross-field checks (model concept count vs mixture, ids, rates).
  void validate() const;
  /// Fine-tuning concepts for the unlearning runs.
  std::vector<int> unlearn_ft_concepts() const;
  EvalOptions eval_options() const;
};

/// Parses a config document. Missing fields take their defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved document, keys sorted, stable across runs.
std::string dump_config(const ExperimentConfig& cfg);
/// SHA-256 (hex) of the resolved document without the output directory.
std::string config_digest(const ExperimentConfig& cfg);
/// Writes <out>/config.resolved.json.
void echo_config(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace blu
