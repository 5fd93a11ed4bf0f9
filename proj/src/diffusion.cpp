// SPDX-License-Identifier: Apache-2.0

#include "blu/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace blu {

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "variance-preserving" || s == "vp") return ScheduleKind::VariancePreserving;
  if (s == "edm") return ScheduleKind::Edm;
  throw std::invalid_argument("unknown schedule kind '" + s + "' (expected variance-preserving|edm)");
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::Edm ? "edm" : "variance-preserving";
}

NoiseSchedule NoiseSchedule::variance_preserving_linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.kind = ScheduleKind::VariancePreserving;
  s.T = T;
  s.alpha.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  s.weight.assign(T + 1, 1.0);
  double alpha_bar = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    alpha_bar *= 1.0 - beta;
    s.alpha[t] = std::sqrt(alpha_bar);
    s.sigma[t] = std::sqrt(1.0 - alpha_bar);
  }
  return s;
}

NoiseSchedule NoiseSchedule::edm(int T, double time_scale) {
  if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(time_scale > 0.0)) throw std::invalid_argument("schedule: time_scale must be positive");
  NoiseSchedule s;
  s.kind = ScheduleKind::Edm;
  s.T = T;
  s.alpha.assign(T + 1, 1.0);
  s.sigma.resize(T + 1);
  s.weight.assign(T + 1, 1.0);
  for (int t = 0; t <= T; ++t) s.sigma[t] = time_scale * t;
  return s;
}

void NoiseSchedule::validate() const {
  const std::size_t n = static_cast<std::size_t>(T) + 1;
  if (T < 1 || alpha.size() != n || sigma.size() != n || weight.size() != n)
    throw std::invalid_argument("schedule: tables must have length T+1");
  if (sigma[0] != 0.0) throw std::invalid_argument("schedule: sigma_0 must be 0");
  for (int t = 1; t <= T; ++t) {
    if (sigma[t] < sigma[t - 1]) throw std::invalid_argument("schedule: sigma must be non-decreasing");
    if (!(alpha[t] > 0.0)) throw std::invalid_argument("schedule: alpha must be positive");
    if (!(weight[t] >= 0.0)) throw std::invalid_argument("schedule: weights must be non-negative");
    if (kind == ScheduleKind::VariancePreserving &&
        std::abs(alpha[t] * alpha[t] + sigma[t] * sigma[t] - 1.0) > 1e-12)
      throw std::invalid_argument("schedule: variance-preserving tables violate alpha^2 + sigma^2 = 1");
  }
}

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > T)
    throw std::out_of_range("timestep " + std::to_string(t) + " outside 1.." + std::to_string(T));
}

DiffusionBatch make_batch(Tensor x0, std::vector<int> c, const NoiseSchedule& sched, Stream& rng) {
  if (x0.rank() != 2 || x0.dim(0) != c.size())
    throw ShapeError("make_batch: x0 " + shape_str(x0.shape()) + " with " + std::to_string(c.size()) + " concept ids");
  DiffusionBatch b;
  b.t.resize(c.size());
  for (auto& t : b.t) t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
  b.eps = Tensor(x0.shape());
  for (double& v : b.eps.data()) v = rng.normal();
  b.x0 = std::move(x0);
  b.c = std::move(c);
  return b;
}

Tensor forward_noise(const DiffusionBatch& batch, const NoiseSchedule& sched) {
  if (batch.x0.shape() != batch.eps.shape() || batch.x0.rank() != 2 || batch.x0.dim(0) != batch.size())
    throw ShapeError("forward_noise: x0 " + shape_str(batch.x0.shape()) + " vs eps " + shape_str(batch.eps.shape()));
  const std::size_t d = batch.x0.dim(1);
  Tensor out(batch.x0.shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int t = batch.t[i];
    sched.check_timestep(t);
    const double a = sched.alpha[t], s = sched.sigma[t];
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = a * batch.x0.at(i, j) + s * batch.eps.at(i, j);
  }
  return out;
}

Var weighted_row_sq_error(const Var& pred, const Var& target, std::span<const double> row_weights) {
  Tape& tape = *pred.tape();
  const Var diff = sub(pred, target);
  const Tensor& dv = diff.value();
  if (dv.rank() != 2 || dv.dim(0) != row_weights.size())
    throw ShapeError("row weights: " + std::to_string(row_weights.size()) + " for " + shape_str(dv.shape()));
  Tensor w(dv.shape());
  for (std::size_t i = 0; i < dv.dim(0); ++i)
    for (std::size_t j = 0; j < dv.dim(1); ++j) w.at(i, j) = row_weights[i];
  return scale(sum(mul(mul(diff, diff), tape.constant(std::move(w)))), 1.0 / static_cast<double>(dv.dim(0)));
}

Var row_sq_error(const Var& pred, const Var& target) {
  const Var diff = sub(pred, target);
  return scale(sq_norm(diff), 1.0 / static_cast<double>(diff.value().dim(0)));
}

std::vector<double> timestep_weights(const DiffusionBatch& batch, const NoiseSchedule& sched) {
  std::vector<double> w(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    sched.check_timestep(batch.t[i]);
    w[i] = sched.weight[batch.t[i]];
  }
  return w;
}

Var diffusion_loss_from(const Var& eps_hat, const DiffusionBatch& batch, const NoiseSchedule& sched) {
  Tape& tape = *eps_hat.tape();
  const auto w = timestep_weights(batch, sched);
  return weighted_row_sq_error(eps_hat, tape.constant(batch.eps), w);
}

Var diffusion_loss(const Denoiser& model, Tape& tape, const DiffusionBatch& batch, const NoiseSchedule& sched) {
  const Tensor x_t = forward_noise(batch, sched);
  const Prediction p = model.predict(tape, x_t, batch.t, batch.c);
  return diffusion_loss_from(p.eps, batch, sched);
}

double diffusion_loss_value(const Denoiser& model, const DiffusionBatch& batch, const NoiseSchedule& sched) {
  const Tensor x_t = forward_noise(batch, sched);
  const FrozenPrediction p = model.evaluate(x_t, batch.t, batch.c);
  const auto w = timestep_weights(batch, sched);
  const std::size_t d = x_t.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = p.eps.at(i, j) - batch.eps.at(i, j);
      s += e * e;
    }
    total += w[i] * s;
  }
  return total / static_cast<double>(batch.size());
}

Tensor ancestral_sample(const Denoiser& model, int concept_id, std::size_t n, const NoiseSchedule& sched,
                        double guidance, Stream rng) {
  sched.validate();
  if (guidance < 0.0) throw std::invalid_argument("ancestral_sample: guidance must be >= 0");
  const std::size_t d = model.config().input_dim;
  const int T = sched.T;
  const double prior_std = std::sqrt(sched.alpha[T] * sched.alpha[T] + sched.sigma[T] * sched.sigma[T]);
  Tensor x(Shape{n, d});
  for (double& v : x.data()) v = prior_std * rng.normal();

  const std::vector<int> cond(n, concept_id);
  const std::vector<int> null(n, kNullConcept);
  std::vector<int> steps(n);
  for (int t = T; t >= 1; --t) {
    std::fill(steps.begin(), steps.end(), t);
    Tensor eps;
    try {
      eps = model.evaluate(x, steps, cond).eps;
      if (guidance > 0.0 && concept_id != kNullConcept) {
        const Tensor eps_null = model.evaluate(x, steps, null).eps;
        for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += guidance * (eps[i] - eps_null[i]);
      }
    } catch (const NumericError& e) {
      throw NumericError("ancestral_sample: at timestep " + std::to_string(t) + ": " + e.what());
    }
    const int s = t - 1;
    const double at = sched.alpha[t], st = sched.sigma[t];
    const double as = sched.alpha[s], ss = sched.sigma[s];
    const double a_ts = at / as;
    const double var_ts = st * st - a_ts * a_ts * ss * ss;
    const double coef_x = a_ts * ss * ss / (st * st);
    const double coef_x0 = as * var_ts / (st * st);
    const double noise_std = std::sqrt(std::max(0.0, var_ts * ss * ss / (st * st)));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0_hat = (x[i] - st * eps[i]) / at;
      x[i] = coef_x * x[i] + coef_x0 * x0_hat;
    }
    if (s >= 1)
      for (double& v : x.data()) v += noise_std * rng.normal();
    if (!x.all_finite())
      throw NumericError("ancestral_sample: non-finite state at timestep " + std::to_string(t));
  }
  return x;
}

}  // namespace blu
