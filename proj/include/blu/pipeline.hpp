// SPDX-License-Identifier: Apache-2.0
//
// The experiment pipeline: base training, pruning, fine-tuning, unlearning
// (bilevel or two-stage) and evaluation. Every stage draws its randomness
// from Stream(cfg.seed) under a fixed stage name, so a stage's output is a
// pure function of (config, input parameters).

#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "blu/bilevel.hpp"
#include "blu/config.hpp"
#include "blu/eval.hpp"
#include "blu/pruning.hpp"

namespace blu {

struct CurveRow {
  std::int64_t iter = 0;
  double train_loss = 0.0;  ///< minibatch loss of the step just taken (NaN at iter 0)
  double heldout_diff_loss = 0.0;
  double heldout_ft_loss = 0.0;
};

/// Columns: arm,iter,train_loss,heldout_diff_loss,heldout_ft_loss
void write_curve_csv(std::ostream& os, const std::string& arm, const std::vector<CurveRow>& rows, bool header = true);

struct TrainResult {
  ParamStore params;
  std::vector<CurveRow> curve;
  std::int64_t steps = 0;
  /// Set when a non-finite loss stopped the run; params are the last good ones.
  std::string error;
};

/// Fixed held-out rows over every real concept (stream "heldout").
DiffusionBatch heldout_set(const ExperimentConfig& cfg);

/// Trains the teacher on the full mixture with unconditional drop.
TrainResult train_base(const ExperimentConfig& cfg);

struct PruneResult {
  ParamStore params;
  PruneReport report;
};
PruneResult prune_model(const ExperimentConfig& cfg, const ParamStore& teacher);

/// Starting point for fine-tuning: the pruned parameters, or a fresh random
/// draw (stream "random-init") carrying the same mask.
ParamStore init_finetune(const ExperimentConfig& cfg, const ParamStore& pruned);

/// Fine-tunes `init` for cfg.ft.iters steps with the configured weights, or
/// the plain denoising loss when `distill` is false. Batches come from stream
/// "finetune-run" and are shared by both arms.
TrainResult finetune(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init, bool distill);

struct UnlearnResult {
  ParamStore theta;
  ParamStore distilled;  ///< two-stage only: the stage-1 model
  std::vector<StepRecord> history;
  FwdCount fwd;
  std::int64_t total_iterations = 0;
};

/// Rejects budgets where E(K+1) and N+M differ by more than one cycle.
void check_budget(const ExperimentConfig& cfg);

UnlearnResult unlearn_bilevel(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init);
UnlearnResult unlearn_two_stage(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init);

EvalReport evaluate_params(const ExperimentConfig& cfg, const ParamStore& params, const ParamStore& teacher,
                           const std::string& label);

}  // namespace blu
