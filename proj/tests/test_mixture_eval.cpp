// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "blu/eval.hpp"
#include "blu/mixture.hpp"
#include "doctest.h"

using namespace blu;

namespace {

Tensor gaussian_cloud(Stream& rng, std::size_t n, double mx, double my) {
  Tensor x(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    x.at(i, 0) = mx + rng.normal();
    x.at(i, 1) = my + rng.normal();
  }
  return x;
}

DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.hidden = {8, 8};
  cfg.time_embed_dim = 4;
  cfg.concept_embed_dim = 3;
  cfg.feature_taps = {1};
  return cfg;
}

EvalReport report(std::string label, double removal, double retention) {
  EvalReport r;
  r.label = std::move(label);
  r.spec_digest = spec_digest(circle_mixture(), 1);
  r.removal_energy = removal;
  r.retention_energy = {{2, retention}, {3, retention}};
  return r;
}

}  // namespace

TEST_CASE("default mixture: null plus eight components on a radius-5 circle") {
  const MixtureSpec spec = circle_mixture();
  spec.validate();
  CHECK(spec.concept_count == 9);
  CHECK(spec.components.size() == 8);
  CHECK(spec.real_concepts() == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8});
  for (int c = 1; c <= 8; ++c) {
    const auto& comp = spec.component(c);
    CHECK(std::hypot(comp.mean[0], comp.mean[1]) == doctest::Approx(5.0));
    CHECK(comp.cov.at(0, 0) == 0.15);
    CHECK(comp.cov.at(1, 1) == 0.15);
    CHECK(comp.cov.at(0, 1) == 0.0);
    CHECK(comp.weight == doctest::Approx(0.125));
  }
  CHECK_THROWS_AS(spec.component(0), std::out_of_range);
  CHECK_THROWS_AS(spec.component(9), std::out_of_range);
}

TEST_CASE("zero-covariance component yields its mean exactly") {
  MixtureSpec spec = circle_mixture(2, 3.0, 0.0);
  Stream rng(1);
  const Tensor x = sample_component(spec, 2, 50, rng);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(x.at(i, 0) == spec.component(2).mean[0]);
    CHECK(x.at(i, 1) == spec.component(2).mean[1]);
  }
}

TEST_CASE("gen_dataset: empirical means within 3 sigma / sqrt(n) and deterministic") {
  const MixtureSpec spec = circle_mixture();
  const std::size_t n = 4000;
  Stream rng(7);
  const LabeledDataset ds = gen_dataset(spec, n, rng);
  REQUIRE(ds.x.dim(0) == 8 * n);
  const double bound = 3.0 * std::sqrt(0.15) / std::sqrt(static_cast<double>(n));
  for (int c = 1; c <= 8; ++c) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < ds.c.size(); ++i)
      if (ds.c[i] == c) {
        mx += ds.x.at(i, 0);
        my += ds.x.at(i, 1);
      }
    CHECK(std::abs(mx / n - spec.component(c).mean[0]) < bound);
    CHECK(std::abs(my / n - spec.component(c).mean[1]) < bound);
  }
  Stream again(7);
  CHECK(gen_dataset(spec, n, again).x.identical(ds.x));
  Stream zero(7);
  CHECK_THROWS_AS(gen_dataset(spec, 0, zero), std::invalid_argument);
}

TEST_CASE("data_std scales every sample") {
  MixtureSpec spec = circle_mixture(8, 5.0, 0.15);
  MixtureSpec scaled = spec;
  scaled.data_std = 0.5;
  Stream a(3), b(3);
  const Tensor x = sample_component(spec, 4, 20, a);
  const Tensor y = sample_component(scaled, 4, 20, b);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(0.5 * x[i]).epsilon(1e-15));
}

TEST_CASE("mixture validation") {
  MixtureSpec spec = circle_mixture();
  spec.components[0].weight = 0.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = circle_mixture();
  spec.components[3].cov = Tensor::matrix(2, 2, {1.0, 2.0, 2.0, 1.0});
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = circle_mixture();
  spec.components.pop_back();
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("fine-tune batches respect the concept list and unconditional drop") {
  const MixtureSpec spec = circle_mixture();
  const NoiseSchedule sched = NoiseSchedule::variance_preserving_linear(100, 1e-3, 0.2);
  const std::vector<int> concepts{2, 3, 4};
  Stream rng(11);
  const DiffusionBatch b = sample_ft_batch(spec, concepts, 0.25, 8000, sched, rng);
  std::size_t dropped = 0;
  for (int c : b.c) {
    CHECK((c == 0 || c == 2 || c == 3 || c == 4));
    dropped += c == 0;
  }
  const double p = 0.25, n = 8000.0;
  CHECK(std::abs(dropped / n - p) < 3.0 * std::sqrt(p * (1 - p) / n));
  Stream r2(11);
  const DiffusionBatch only = sample_concept_batch(spec, 5, 30, sched, r2);
  for (int c : only.c) CHECK(c == 5);
}

TEST_CASE("energy distance: identical and permuted multisets give zero") {
  Stream rng(5);
  const Tensor a = gaussian_cloud(rng, 200, 0.0, 0.0);
  CHECK(energy_distance(a, a) < 1e-12);
  Tensor perm(a.shape());
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t j = 0; j < 2; ++j) perm.at(i, j) = a.at(199 - i, j);
  CHECK(energy_distance(a, perm) < 1e-12);
}

TEST_CASE("energy distance: two point masses at distance d give 2d") {
  const Tensor a = Tensor::matrix(3, 2, {0, 0, 0, 0, 0, 0});
  const Tensor b = Tensor::matrix(2, 2, {3, 4, 3, 4});
  CHECK(energy_distance(a, b) == doctest::Approx(10.0).epsilon(1e-14));
}

TEST_CASE("energy distance is symmetric and rejects undersized sets") {
  Stream rng(9);
  const Tensor a = gaussian_cloud(rng, 150, 0.0, 0.0);
  const Tensor b = gaussian_cloud(rng, 120, 1.0, -1.0);
  CHECK(energy_distance(a, b) == doctest::Approx(energy_distance(b, a)).epsilon(1e-12));
  const Tensor one = Tensor::matrix(1, 2, {0, 0});
  CHECK_THROWS_AS(energy_distance(a, one), std::invalid_argument);
  CHECK_THROWS_AS(energy_distance(a, Tensor(Shape{4, 3})), ShapeError);
}

TEST_CASE("energy distance of N(0,I) vs N((3,0),I) matches a Monte-Carlo reference") {
  Stream rng(2024);
  Stream s_a = rng.split("a"), s_b = rng.split("b");
  const Tensor a = gaussian_cloud(s_a, 10000, 0.0, 0.0);
  const Tensor b = gaussian_cloud(s_b, 10000, 3.0, 0.0);
  const double measured = energy_distance(a, b);

  // Independent pairs: E|X - Y| and E|X - X'| estimated from 10^6 draws each.
  Stream mc = rng.split("reference");
  double cross = 0.0, within = 0.0;
  const int pairs = 1000000;
  for (int i = 0; i < pairs; ++i) {
    const double dx = 3.0 + std::sqrt(2.0) * mc.normal(), dy = std::sqrt(2.0) * mc.normal();
    cross += std::hypot(dx, dy);
    within += std::hypot(std::sqrt(2.0) * mc.normal(), std::sqrt(2.0) * mc.normal());
  }
  const double reference = 2.0 * cross / pairs - 2.0 * within / pairs;
  CHECK(within / pairs == doctest::Approx(std::sqrt(std::numbers::pi)).epsilon(0.01));
  CHECK(std::abs(measured - reference) < 0.02 * reference);
}

TEST_CASE("evaluate: identical reports for the same model and seed") {
  const DenoiserConfig cfg = tiny_config();
  Stream init(1);
  const ParamStore p = init_params(cfg, init);
  const Denoiser model(cfg, p);
  const MixtureSpec spec = circle_mixture();
  const NoiseSchedule sched = NoiseSchedule::variance_preserving_linear(100, 1e-3, 0.2);
  EvalOptions opts;
  opts.samples = 500;
  opts.heldout_n = 200;
  const EvalReport a = evaluate(model, &model, spec, 3, sched, opts, 42);
  const EvalReport b = evaluate(model, &model, spec, 3, sched, opts, 42);
  CHECK(a.removal_energy == b.removal_energy);
  CHECK(a.retention_energy == b.retention_energy);
  CHECK(a.heldout_ft_loss == b.heldout_ft_loss);
  CHECK(a.heldout_diff_loss == b.heldout_diff_loss);
  CHECK(a.retention_energy.size() == 7);
  CHECK(a.retention_energy.count(3) == 0);
  CHECK(a.removal_energy >= 0.0);
  for (const auto& [c, e] : a.retention_energy) CHECK(e >= 0.0);
  // Teacher equals model: distillation terms vanish.
  CHECK(a.heldout_ft_loss == doctest::Approx(a.heldout_diff_loss).epsilon(1e-12));
  const EvalReport other = evaluate(model, &model, spec, 3, sched, opts, 43);
  CHECK(other.removal_energy != a.removal_energy);

  opts.samples = 499;
  CHECK_THROWS_AS(evaluate(model, &model, spec, 3, sched, opts, 42), std::invalid_argument);
}

TEST_CASE("compare_runs: single report is a trivial table") {
  const auto rows = compare_runs({report("only", 1.0, 0.1)});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].pareto_optimal);
  CHECK(rows[0].dominates.empty());
}

TEST_CASE("compare_runs: dominance, ordering and mismatched specs") {
  const auto rows = compare_runs({report("worse", 1.0, 0.3), report("better", 2.0, 0.1), report("tradeoff", 3.0, 0.5)});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].label == "tradeoff");
  CHECK(rows[1].label == "better");
  CHECK(rows[2].label == "worse");
  CHECK(rows[1].dominates == std::vector<std::string>{"worse"});
  CHECK(rows[0].pareto_optimal);
  CHECK(rows[1].pareto_optimal);
  CHECK_FALSE(rows[2].pareto_optimal);

  EvalReport odd = report("odd", 1.0, 0.1);
  odd.spec_digest = spec_digest(circle_mixture(6), 1);
  CHECK_THROWS_AS(compare_runs({report("a", 1.0, 0.1), odd}), std::invalid_argument);
  EvalReport other_target = report("t", 1.0, 0.1);
  other_target.target = 2;
  CHECK_THROWS_AS(compare_runs({report("a", 1.0, 0.1), other_target}), std::invalid_argument);
}

TEST_CASE("report and ranking CSV layout") {
  std::ostringstream os;
  write_report_csv(os, {report("run", 1.5, 0.25)});
  CHECK(os.str() ==
        "label,seed,config_digest,target,removal_energy,mean_retention_energy,heldout_diff_loss,heldout_ft_loss,"
        "fwd_teacher,fwd_theta,fwd_vartheta\n"
        "run,0,,1,1.5,0.25,0,0,0,0,0\n");
  std::ostringstream cs;
  write_concept_csv(cs, {report("run", 1.5, 0.25)});
  CHECK(cs.str() == "label,seed,concept,role,energy\nrun,0,1,removal,1.5\nrun,0,2,retention,0.25\nrun,0,3,retention,0.25\n");
  CHECK(fmt_double(0.1) == "0.1");
  CHECK(fmt_double(std::nan("")) == "");
}
