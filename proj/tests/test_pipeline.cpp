// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>

#include "blu/pipeline.hpp"
#include "doctest.h"

using namespace blu;

namespace {

// Four tight clusters and a small network: trains in a few seconds.
ExperimentConfig small_config() {
  return parse_config(R"({
    "seed": 3,
    "mixture": {"circle": {"count": 4, "radius": 3.0, "variance": 0.1}},
    "model": {"hidden": [64, 64], "time_embed_dim": 8, "concept_embed_dim": 8, "feature_taps": [1]},
    "train": {"iters": 2500, "batch": 128, "lr": 3e-3, "log_every": 500},
    "ft": {"iters": 40, "batch": 32, "log_every": 10},
    "bilevel": {"E": 3, "K": 2, "batch": 16},
    "two_stage": {"N": 6, "M": 3},
    "eval": {"samples": 500, "heldout_n": 400}
  })");
}

const TrainResult& teacher() {
  static const TrainResult r = train_base(small_config());
  return r;
}

// Expected squared error of the exact posterior mean of eps when every
// component is N(mu, s I): d * alpha^2 s / (alpha^2 s + sigma^2), averaged over t.
double bayes_floor(const ExperimentConfig& cfg) {
  const NoiseSchedule s = cfg.schedule.build();
  const double var = 0.1;
  double sum = 0.0;
  for (int t = 1; t <= s.T; ++t) {
    const double a2 = s.alpha[t] * s.alpha[t], s2 = s.sigma[t] * s.sigma[t];
    sum += s.weight[t] * 2.0 * a2 * var / (a2 * var + s2);
  }
  return sum / s.T;
}

bool same_masks(const PruneMask& a, const PruneMask& b) {
  if (a.masks.size() != b.masks.size()) return false;
  for (const auto& [name, m] : a.masks)
    if (!b.masks.count(name) || !m->identical(*b.masks.at(name))) return false;
  return true;
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg = small_config();
  cfg.train.iters = 30;
  cfg.train.log_every = 10;
  return cfg;
}

}  // namespace

TEST_CASE("train-base is bitwise reproducible for a fixed seed") {
  const ExperimentConfig cfg = tiny_config();
  const TrainResult a = train_base(cfg), b = train_base(cfg);
  CHECK(a.error.empty());
  CHECK(a.steps == 30);
  CHECK(a.params.identical_values(b.params));
  REQUIRE(a.curve.size() == 4);
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].heldout_diff_loss == b.curve[i].heldout_diff_loss);
  ExperimentConfig other = cfg;
  other.seed = 4;
  CHECK_FALSE(train_base(other).params.identical_values(a.params));
}

TEST_CASE("trained teacher approaches the analytic loss floor") {
  const ExperimentConfig cfg = small_config();
  const TrainResult& r = teacher();
  REQUIRE(r.error.empty());
  const double floor = bayes_floor(cfg);
  const double untrained = r.curve.front().heldout_diff_loss;
  // The logged held-out set is small; score on a large fresh one.
  const auto concepts = cfg.mixture.real_concepts();
  const DiffusionBatch big = make_heldout(cfg.mixture, concepts, 20000, cfg.schedule.build(), Stream(77));
  const double final_loss = diffusion_loss_value(Denoiser(cfg.model, r.params), big, cfg.schedule.build());
  MESSAGE("untrained " << untrained << ", trained " << final_loss << ", floor " << floor);
  CHECK(final_loss < 1.10 * floor);
  CHECK(final_loss > 0.97 * floor);
  CHECK(untrained > 4.0 * final_loss);
}

TEST_CASE("trained teacher samples land within 3 sigma of their component") {
  const ExperimentConfig cfg = small_config();
  const Denoiser model(cfg.model, teacher().params);
  const double radius = 3.0 * std::sqrt(0.1);
  for (int c : cfg.mixture.real_concepts()) {
    const Tensor x = ancestral_sample(model, c, 1000, cfg.schedule.build(), 0.0, Stream(11).split(c));
    const auto& mu = cfg.mixture.component(c).mean;
    int inside = 0;
    for (std::size_t i = 0; i < 1000; ++i) inside += std::hypot(x.at(i, 0) - mu[0], x.at(i, 1) - mu[1]) <= radius;
    CAPTURE(c);
    CHECK(inside >= 900);
  }
}

TEST_CASE("evaluation of the teacher and of a model sending the target to the marginal") {
  const ExperimentConfig cfg = small_config();
  const ParamStore& params = teacher().params;
  const EvalReport base = evaluate_params(cfg, params, params, "teacher");
  CHECK(base.removal_energy < 0.05);
  CHECK(base.retention_energy.size() == 3);
  CHECK(base.config_digest == config_digest(cfg));

  // Conditioning on the target now reads the null embedding row.
  ParamStore erased = params;
  Tensor& embed = erased.value(kConceptEmbedName);
  for (std::size_t j = 0; j < embed.dim(1); ++j) embed.at(1, j) = embed.at(kNullConcept, j);
  const EvalReport gone = evaluate_params(cfg, erased, params, "erased");

  Stream rng(99);
  const auto concepts = cfg.mixture.real_concepts();
  const Tensor marginal = sample_labeled(cfg.mixture, concepts, 2000, rng).x;
  const Tensor target = sample_component(cfg.mixture, 1, 2000, rng);
  const double expected = energy_distance(marginal, target);
  MESSAGE("removal " << gone.removal_energy << ", marginal-vs-target " << expected);
  CHECK(gone.removal_energy == doctest::Approx(expected).epsilon(0.15));
  for (const auto& [c, e] : gone.retention_energy) CHECK(e == base.retention_energy.at(c));
}

TEST_CASE("pruning at full budget keeps the teacher; partial budget keeps the requested fraction") {
  ExperimentConfig cfg = small_config();
  cfg.prune.options.budget = 1.0;
  const PruneResult full = prune_model(cfg, teacher().params);
  CHECK(full.params.identical_values(teacher().params));
  CHECK(full.params.nnz() == teacher().params.nnz());

  cfg.prune.options.budget = 0.8;
  const PruneResult part = prune_model(cfg, teacher().params);
  std::size_t prunable = 0, kept = 0;
  for (const auto& [name, p] : part.params) {
    if (!is_prunable(name, cfg.prune.options)) continue;
    prunable += p.value.size();
    REQUIRE(p.mask);
    for (double m : p.mask->data()) kept += m != 0.0;
  }
  const double frac = static_cast<double>(kept) / static_cast<double>(prunable);
  CHECK(frac >= 0.8 - 1e-12);
  CHECK(frac <= 0.8 + 0.01);
}

TEST_CASE("fine-tuning keeps the mask and both init modes share it") {
  ExperimentConfig cfg = small_config();
  const PruneResult pruned = prune_model(cfg, teacher().params);
  const std::int64_t nnz = pruned.params.nnz();
  for (InitMode mode : {InitMode::PrunedFromTeacher, InitMode::Random}) {
    cfg.ft.init = mode;
    const ParamStore init = init_finetune(cfg, pruned.params);
    CHECK(init.nnz() <= nnz);
    CHECK(same_masks(mask_of(init), mask_of(pruned.params)));
    for (bool distill : {true, false}) {
      const TrainResult r = finetune(cfg, teacher().params, init, distill);
      CHECK(r.error.empty());
      CHECK(r.steps == 40);
      CHECK(r.curve.size() == 5);
      CHECK(r.params.nnz() == nnz);
    }
  }
}

TEST_CASE("distillation off equals running with zero distillation weights") {
  ExperimentConfig cfg = small_config();
  const PruneResult pruned = prune_model(cfg, teacher().params);
  const TrainResult off = finetune(cfg, teacher().params, pruned.params, false);
  ExperimentConfig zero = cfg;
  zero.ft.weights = FtWeights{cfg.ft.weights.diff, 0.0, 0.0};
  const TrainResult on = finetune(zero, teacher().params, pruned.params, true);
  CHECK(off.params.identical_values(on.params));
  const TrainResult distilled = finetune(cfg, teacher().params, pruned.params, true);
  CHECK_FALSE(distilled.params.identical_values(off.params));
}

TEST_CASE("unlearning runs keep the mask and report budgets and forward counts") {
  ExperimentConfig cfg = small_config();
  const PruneResult pruned = prune_model(cfg, teacher().params);
  const std::int64_t nnz = pruned.params.nnz();
  CHECK_NOTHROW(check_budget(cfg));

  const UnlearnResult bl = unlearn_bilevel(cfg, teacher().params, pruned.params);
  CHECK(bl.total_iterations == 9);
  CHECK(bl.theta.nnz() == nnz);
  CHECK(bl.fwd.teacher.calls == 9);
  CHECK(bl.fwd.theta.calls == 3);
  CHECK(bl.fwd.vartheta.calls == 6);

  const UnlearnResult ts = unlearn_two_stage(cfg, teacher().params, pruned.params);
  CHECK(ts.total_iterations == 9);
  CHECK(ts.theta.nnz() == nnz);
  CHECK(ts.distilled.nnz() == nnz);
  CHECK(ts.fwd.calls() >= bl.fwd.calls());

  const UnlearnResult again = unlearn_bilevel(cfg, teacher().params, pruned.params);
  CHECK(again.theta.identical_values(bl.theta));
}

TEST_CASE("curve CSV layout") {
  std::ostringstream os;
  write_curve_csv(os, "on", {{0, std::nan(""), 1.5, 2.0}, {10, 0.25, 1.0, 0.5}});
  CHECK(os.str() == "arm,iter,train_loss,heldout_diff_loss,heldout_ft_loss\non,0,,1.5,2\non,10,0.25,1,0.5\n");
}
