// SPDX-License-Identifier: Apache-2.0

#include "blu/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace blu {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<int> ft_concepts(const ExperimentConfig& cfg) {
  return cfg.ft.concepts.empty() ? cfg.mixture.real_concepts() : cfg.ft.concepts;
}

OptimizerConfig opt(OptimizerKind kind, double lr) {
  OptimizerConfig o;
  o.kind = kind;
  o.lr = lr;
  return o;
}

}  // namespace

void write_curve_csv(std::ostream& os, const std::string& arm, const std::vector<CurveRow>& rows, bool header) {
  if (header) os << "arm,iter,train_loss,heldout_diff_loss,heldout_ft_loss\n";
  for (const auto& r : rows)
    os << arm << ',' << r.iter << ',' << fmt_double(r.train_loss) << ',' << fmt_double(r.heldout_diff_loss) << ','
       << fmt_double(r.heldout_ft_loss) << '\n';
}

DiffusionBatch heldout_set(const ExperimentConfig& cfg) {
  const auto concepts = cfg.mixture.real_concepts();
  return make_heldout(cfg.mixture, concepts, cfg.eval.heldout_n, cfg.schedule.build(), Stream(cfg.seed).split("heldout"));
}

TrainResult train_base(const ExperimentConfig& cfg) {
  cfg.validate();
  const NoiseSchedule sched = cfg.schedule.build();
  const Stream root = Stream(cfg.seed).split("train-base");
  Stream init = root.split("init");
  const Stream batches = root.split("batch");
  const DiffusionBatch heldout = heldout_set(cfg);
  const auto concepts = cfg.mixture.real_concepts();

  TrainResult out;
  out.params = init_params(cfg.model, init);
  Optimizer optimizer(opt(cfg.train.optimizer, cfg.train.lr));
  auto log = [&](std::int64_t iter, double train_loss) {
    const Denoiser model(cfg.model, std::as_const(out.params));
    out.curve.push_back({iter, train_loss, diffusion_loss_value(model, heldout, sched), kNaN});
  };
  log(0, kNaN);
  for (std::int64_t i = 0; i < cfg.train.iters; ++i) {
    Stream rng = batches.split(static_cast<std::uint64_t>(i));
    const DiffusionBatch b = sample_ft_batch(cfg.mixture, concepts, cfg.train.uncond_drop, cfg.train.batch, sched, rng);
    if (cfg.train.cosine_decay)
      optimizer.set_lr(0.5 * cfg.train.lr *
                       (1.0 + std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(cfg.train.iters))));
    double loss = kNaN;
    try {
      out.params.zero_grad();
      Tape tape;
      const Var l = diffusion_loss(Denoiser(cfg.model, out.params), tape, b, sched);
      loss = l.value().item();
      if (!std::isfinite(loss)) throw NumericError("non-finite loss");
      tape.backward(l);
      ParamStore next = out.params;
      optimizer.step(next);
      for (const auto& [name, p] : next)
        if (!p.value.all_finite()) throw NumericError("non-finite parameter '" + name + "'");
      out.params = std::move(next);
    } catch (const NumericError& e) {
      out.error = "train-base diverged at step " + std::to_string(i) + ": " + e.what();
      out.params.zero_grad();
      return out;
    }
    out.steps = i + 1;
    if ((i + 1) % cfg.train.log_every == 0 || i + 1 == cfg.train.iters) log(i + 1, loss);
  }
  out.params.zero_grad();
  return out;
}

PruneResult prune_model(const ExperimentConfig& cfg, const ParamStore& teacher) {
  cfg.validate();
  auto [mask, report] = magnitude_prune(teacher, cfg.prune.options);
  PruneResult out{teacher, report};
  apply_mask(out.params, mask);
  return out;
}

ParamStore init_finetune(const ExperimentConfig& cfg, const ParamStore& pruned) {
  if (cfg.ft.init == InitMode::PrunedFromTeacher) return pruned;
  Stream rng = Stream(cfg.seed).split("random-init");
  ParamStore fresh = init_student(cfg.model, pruned, InitMode::Random, rng);
  apply_mask(fresh, mask_of(pruned));
  return fresh;
}

TrainResult finetune(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init, bool distill) {
  cfg.validate();
  const NoiseSchedule sched = cfg.schedule.build();
  const Stream batches = Stream(cfg.seed).split("finetune-run");
  const DiffusionBatch heldout = heldout_set(cfg);
  const auto concepts = ft_concepts(cfg);
  const FtWeights w = distill ? cfg.ft.weights : FtWeights{cfg.ft.weights.diff, 0.0, 0.0};
  const Denoiser frozen(cfg.model, teacher);

  TrainResult out;
  out.params = init;
  Optimizer optimizer(opt(cfg.ft.optimizer, cfg.ft.lr));
  auto log = [&](std::int64_t iter, double train_loss) {
    const Denoiser model(cfg.model, std::as_const(out.params));
    out.curve.push_back({iter, train_loss, diffusion_loss_value(model, heldout, sched),
                         ft_loss_value(&frozen, model, heldout, sched, cfg.ft.weights)});
  };
  log(0, kNaN);
  for (std::int64_t i = 0; i < cfg.ft.iters; ++i) {
    Stream rng = batches.split(static_cast<std::uint64_t>(i));
    const DiffusionBatch b = sample_ft_batch(cfg.mixture, concepts, cfg.ft.uncond_drop, cfg.ft.batch, sched, rng);
    double loss = kNaN;
    try {
      out.params.zero_grad();
      Tape tape;
      const Var l = ft_loss(frozen, Denoiser(cfg.model, out.params), tape, b, sched, w);
      loss = l.value().item();
      if (!std::isfinite(loss)) throw NumericError("non-finite loss");
      tape.backward(l);
      ParamStore next = out.params;
      optimizer.step(next);
      out.params = std::move(next);
    } catch (const NumericError& e) {
      out.error = "finetune diverged at step " + std::to_string(i) + ": " + e.what();
      out.params.zero_grad();
      return out;
    }
    out.steps = i + 1;
    if ((i + 1) % cfg.ft.log_every == 0 || i + 1 == cfg.ft.iters) log(i + 1, loss);
  }
  out.params.zero_grad();
  return out;
}

void check_budget(const ExperimentConfig& cfg) {
  const std::int64_t bilevel = cfg.bilevel.total_iterations();
  const std::int64_t two_stage = cfg.two_stage.N + cfg.two_stage.M;
  if (std::llabs(bilevel - two_stage) > cfg.bilevel.K + 1)
    throw ConfigError("unequal budgets: bilevel E(K+1) = " + std::to_string(bilevel) + ", two-stage N+M = " +
                      std::to_string(two_stage) + " (allowed difference: one cycle, " +
                      std::to_string(cfg.bilevel.K + 1) + ")");
}

namespace {

DiffusionProblem make_problem(const ExperimentConfig& cfg, const ParamStore& teacher, const NoiseSchedule& sched) {
  DiffusionDataConfig data;
  data.ft_concepts = cfg.unlearn_ft_concepts();
  data.uncond_drop = cfg.ft.uncond_drop;
  data.ft_batch = cfg.bilevel.batch_size;
  data.cu_batch = cfg.bilevel.batch_size;
  return DiffusionProblem(cfg.model, teacher, cfg.mixture, sched, data, cfg.bilevel.ft_weights, cfg.unlearn.spec,
                          Stream(cfg.seed).split("unlearn-run"));
}

}  // namespace

UnlearnResult unlearn_bilevel(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init) {
  cfg.validate();
  const NoiseSchedule sched = cfg.schedule.build();
  DiffusionProblem problem = make_problem(cfg, teacher, sched);
  BilevelResult r = run_bilevel(init, problem, cfg.bilevel);
  UnlearnResult out;
  out.theta = std::move(r.state.theta);
  out.theta.zero_grad();
  out.history = std::move(r.state.history);
  out.fwd = *problem.counts();
  out.total_iterations = r.total_iterations;
  return out;
}

UnlearnResult unlearn_two_stage(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init) {
  cfg.validate();
  const NoiseSchedule sched = cfg.schedule.build();
  DiffusionProblem problem = make_problem(cfg, teacher, sched);
  TwoStageResult r = run_two_stage(init, problem, cfg.two_stage.N, cfg.two_stage.M, cfg.two_stage.lr, cfg.bilevel);
  UnlearnResult out;
  out.theta = std::move(r.theta);
  out.distilled = std::move(r.distilled);
  out.theta.zero_grad();
  out.distilled.zero_grad();
  out.history = std::move(r.history);
  out.fwd = *problem.counts();
  out.total_iterations = r.total_iterations;
  return out;
}

EvalReport evaluate_params(const ExperimentConfig& cfg, const ParamStore& params, const ParamStore& teacher,
                           const std::string& label) {
  cfg.validate();
  const Denoiser model(cfg.model, params), frozen(cfg.model, teacher);
  EvalReport r = evaluate(model, &frozen, cfg.mixture, cfg.unlearn.spec.target, cfg.schedule.build(),
                          cfg.eval_options(), cfg.seed);
  r.label = label;
  r.config_digest = config_digest(cfg);
  return r;
}

}  // namespace blu
