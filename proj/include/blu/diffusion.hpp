// SPDX-License-Identifier: Apache-2.0
//
// Forward noising x_t = alpha_t x0 + sigma_t eps, the weighted denoising
// objective, and an ancestral sampler with classifier-free guidance.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "blu/autodiff.hpp"
#include "blu/denoiser.hpp"
#include "blu/rng.hpp"
#include "blu/tensor.hpp"

namespace blu {

enum class ScheduleKind { VariancePreserving, Edm };

ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(ScheduleKind kind);

/// Per-timestep tables indexed 0..T. Index 0 is the clean data.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::VariancePreserving;
  int T = 0;
  std::vector<double> alpha;
  std::vector<double> sigma;
  std::vector<double> weight;

  /// beta_t linear in t from beta_start (t = 1) to beta_end (t = T).
  static NoiseSchedule variance_preserving_linear(int T, double beta_start, double beta_end);
  /// alpha_t = 1, sigma_t = time_scale * t.
  static NoiseSchedule edm(int T, double time_scale = 1.0);

  void validate() const;
  void check_timestep(int t) const;
};

struct DiffusionBatch {
  Tensor x0;           ///< [B×d]
  std::vector<int> t;  ///< timesteps in 1..T
  Tensor eps;          ///< [B×d] standard normal
  std::vector<int> c;  ///< concept ids

  std::size_t size() const { return t.size(); }
};

/// Draws t ~ U{1..T} and eps ~ N(0, I) for the given clean rows.
DiffusionBatch make_batch(Tensor x0, std::vector<int> c, const NoiseSchedule& sched, Stream& rng);

/// Row-wise alpha_t x0 + sigma_t eps.
Tensor forward_noise(const DiffusionBatch& batch, const NoiseSchedule& sched);

/// mean_i w_i ||pred_i - target_i||^2 with per-row weights.
Var weighted_row_sq_error(const Var& pred, const Var& target, std::span<const double> row_weights);
/// Same with unit weights.
Var row_sq_error(const Var& pred, const Var& target);

/// Per-row weights w_{t_i}.
std::vector<double> timestep_weights(const DiffusionBatch& batch, const NoiseSchedule& sched);

/// Denoising loss from an existing prediction of eps for `batch`.
Var diffusion_loss_from(const Var& eps_hat, const DiffusionBatch& batch, const NoiseSchedule& sched);

/// mean_i w_{t_i} ||eps_model(x_t_i, t_i, c_i) - eps_i||^2
Var diffusion_loss(const Denoiser& model, Tape& tape, const DiffusionBatch& batch, const NoiseSchedule& sched);

/// Scalar value of the denoising loss without recording anything.
double diffusion_loss_value(const Denoiser& model, const DiffusionBatch& batch, const NoiseSchedule& sched);

/// Ancestral sampling from x_T ~ N(0, (alpha_T^2 + sigma_T^2) I). With
/// guidance g > 0 the prediction is eps_c + g (eps_c - eps_null). The stream
/// is taken by value: the output is a pure function of its arguments.
Tensor ancestral_sample(const Denoiser& model, int concept_id, std::size_t n, const NoiseSchedule& sched,
                        double guidance, Stream rng);

}  // namespace blu
