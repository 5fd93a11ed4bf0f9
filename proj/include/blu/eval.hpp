// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth-aware evaluation against a known mixture: removal and
// retention energy distances, held-out losses, and run comparison.

#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "blu/denoiser.hpp"
#include "blu/diffusion.hpp"
#include "blu/mixture.hpp"
#include "blu/objectives.hpp"

namespace blu {

/// V-statistic 2 E|a-b| - E|a-a'| - E|b-b'| over all pairs (rows are points).
double energy_distance(const Tensor& a, const Tensor& b);

/// Fixed labeled rows with fixed (t, eps), all drawn from `rng`.
DiffusionBatch make_heldout(const MixtureSpec& spec, std::span<const int> concepts, std::size_t n,
                            const NoiseSchedule& sched, Stream rng);

struct EvalOptions {
  std::size_t samples = 1000;     ///< model and reference samples per concept
  std::size_t heldout_n = 2000;
  double guidance = 0.0;          ///< sampler guidance scale
  FtWeights ft_weights;           ///< weights of the held-out fine-tune loss
  std::vector<int> heldout_concepts;  ///< empty means every real concept
};

struct EvalReport {
  std::string label;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string spec_digest;  ///< identifies (mixture, target)
  int target = 1;
  double removal_energy = 0.0;
  std::map<int, double> retention_energy;
  double heldout_diff_loss = 0.0;
  double heldout_ft_loss = 0.0;
  std::int64_t fwd_teacher = 0;
  std::int64_t fwd_theta = 0;
  std::int64_t fwd_vartheta = 0;

  double mean_retention() const;
};

/// Digest of (mixture, target) used to refuse comparing unrelated reports.
std::string spec_digest(const MixtureSpec& spec, int target);

/// Samples the model at every real concept and compares with fresh draws
/// from the true components. Without a teacher the fine-tune loss is the
/// plain denoising loss.
EvalReport evaluate(const Denoiser& model, const Denoiser* teacher, const MixtureSpec& spec, int target,
                    const NoiseSchedule& sched, const EvalOptions& opts, std::uint64_t seed);

struct RankingRow {
  std::string label;
  double removal_energy = 0.0;
  double mean_retention = 0.0;
  bool pareto_optimal = true;
  std::vector<std::string> dominates;
};

/// Sorted by removal (desc), then mean retention (asc). Row a dominates b when
/// it is no worse on both axes and strictly better on one.
std::vector<RankingRow> compare_runs(const std::vector<EvalReport>& reports);

/// Shortest round-trip decimal form used by every CSV writer.
std::string fmt_double(double v);

void write_report_csv(std::ostream& os, const std::vector<EvalReport>& reports);
void write_concept_csv(std::ostream& os, const std::vector<EvalReport>& reports);
void write_ranking_csv(std::ostream& os, const std::vector<RankingRow>& rows);

}  // namespace blu
