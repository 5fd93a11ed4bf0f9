// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>
#include <vector>

#include "blu/bilevel.hpp"
#include "blu/pruning.hpp"
#include "doctest.h"

using namespace blu;

namespace {

Tensor diag(double x, double y) { return Tensor::matrix(2, 2, {x, 0.0, 0.0, y}); }

std::vector<double> theta_of(const ParamStore& s) {
  const auto d = s.value("theta").data();
  return {d.begin(), d.end()};
}

struct Toy {
  DenoiserConfig cfg;
  MixtureSpec spec = circle_mixture(4, 3.0, 0.1);
  NoiseSchedule sched = NoiseSchedule::variance_preserving_linear(100, 1e-3, 0.2);
  ParamStore teacher, student;

  explicit Toy(std::uint64_t seed, double budget = 0.6) {
    cfg.hidden = {10, 8, 6};
    cfg.time_embed_dim = 4;
    cfg.concept_count = 5;
    cfg.concept_embed_dim = 3;
    cfg.feature_taps = {1, 2};
    Stream rng(seed);
    teacher = init_params(cfg, rng);
    student = teacher;
    PruneOptions po;
    po.budget = budget;
    apply_mask(student, magnitude_prune(student, po).first);
  }

  DiffusionProblem problem(std::size_t batch, std::uint64_t seed, FtWeights w = {}) const {
    DiffusionDataConfig data;
    data.ft_batch = batch;
    data.cu_batch = batch;
    data.ft_concepts = {2, 3, 4};
    UnlearnSpec u;
    u.target = 1;
    return DiffusionProblem(cfg, teacher, spec, sched, data, w, u, Stream(seed));
  }
};

BilevelConfig small_cfg() {
  BilevelConfig c;
  c.E = 3;
  c.K = 4;
  c.eta = 1e-2;
  c.zeta = 1e-2;
  return c;
}

}  // namespace

// ---- quadratic -----------------------------------------------------------------

TEST_CASE("lower_step: eta = 0 leaves vartheta unchanged") {
  QuadraticProblem q({0.0, 0.0}, Tensor::identity(2), {0.0, 0.0});
  BilevelConfig cfg;
  cfg.eta = 0.0;
  BilevelState s = BilevelState::start(q.make_store({2.0, 0.0}), cfg);
  lower_step(s, q, cfg);
  CHECK(theta_of(s.vartheta) == std::vector<double>{2.0, 0.0});
  CHECK(s.k == 1);
}

TEST_CASE("lower_step: one step on 1/2 |v|^2 from (2, 0) with eta 0.1 gives (1.8, 0)") {
  QuadraticProblem q({5.0, 5.0}, Tensor::identity(2), {0.0, 0.0});
  BilevelConfig cfg;
  cfg.eta = 0.1;
  BilevelState s = BilevelState::start(q.make_store({2.0, 0.0}), cfg);
  lower_step(s, q, cfg);
  CHECK(s.vartheta.value("theta").at(0, 0) == doctest::Approx(1.8).epsilon(1e-15));
  CHECK(s.vartheta.value("theta").at(0, 1) == 0.0);
  CHECK(theta_of(s.theta) == std::vector<double>{2.0, 0.0});
}

TEST_CASE("K lower steps strictly reduce the lower loss on a convex toy") {
  const Tensor Q = Tensor::matrix(2, 2, {2.0, 0.5, 0.5, 1.0});
  QuadraticProblem q({0.0, 0.0}, Q, {1.0, -1.0});
  BilevelConfig cfg;
  cfg.eta = 0.2;  // below 1 / L
  BilevelState s = BilevelState::start(q.make_store({3.0, 3.0}), cfg);
  double prev = q.l_ft(s.vartheta.value("theta"));
  for (int k = 0; k < 20; ++k) {
    lower_step(s, q, cfg);
    const double now = q.l_ft(s.vartheta.value("theta"));
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("quad reference: Q = 0, b = 0 gives a for every lambda") {
  const auto ref = quad_bilevel_reference({3.0, 4.0}, Tensor(Shape{2, 2}), {0.0, 0.0}, {0.0, 1.0, 100.0});
  CHECK(ref.bilevel == std::vector<double>{3.0, 4.0});
  for (const auto& row : ref.rows) {
    CHECK(row.penalized == std::vector<double>{3.0, 4.0});
    CHECK(row.distance == 0.0);
  }
}

TEST_CASE("quad reference: Q = diag(1, 0), a = (3, 4) gives distance 3 / (1 + lambda)") {
  const std::vector<double> grid{1.0, 10.0, 100.0, 1000.0};
  const auto ref = quad_bilevel_reference({3.0, 4.0}, diag(1.0, 0.0), {0.0, 0.0}, grid);
  CHECK(std::abs(ref.bilevel[0]) < 1e-12);
  CHECK(ref.bilevel[1] == doctest::Approx(4.0).epsilon(1e-12));
  REQUIRE(ref.rows.size() == grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& row = ref.rows[i];
    CHECK(std::abs(row.penalized[0] - 3.0 / (1.0 + grid[i])) < 1e-9);
    CHECK(std::abs(row.penalized[1] - 4.0) < 1e-9);
    CHECK(std::abs(row.distance - 3.0 / (1.0 + grid[i])) < 1e-9);
    if (i > 0) CHECK(row.distance <= ref.rows[i - 1].distance);
  }
}

TEST_CASE("quad reference: general PSD Q and rejection of inconsistent b") {
  // Q has null space along (1, -1); argmin set {theta1 + theta2 = 1}.
  const Tensor Q = Tensor::matrix(2, 2, {1.0, 1.0, 1.0, 1.0});
  const auto sol = bilevel_solution({2.0, 0.0}, Q, {1.0, 1.0});
  CHECK(sol[0] == doctest::Approx(1.5));
  CHECK(sol[1] == doctest::Approx(-0.5));
  CHECK_THROWS_AS(bilevel_solution({0.0, 0.0}, diag(1.0, 0.0), {0.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(bilevel_solution({0.0, 0.0}, Tensor::matrix(2, 2, {1.0, 2.0, 0.0, 1.0}), {0.0, 0.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(bilevel_solution({0.0, 0.0}, diag(-1.0, 1.0), {0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("run_bilevel on the quadratic toy reaches the lambda = 100 minimizer") {
  const std::vector<double> a{3.0, 4.0};
  QuadraticProblem q(a, diag(1.0, 0.0), {0.0, 0.0});
  BilevelConfig cfg;
  cfg.E = 200;
  cfg.K = 10;
  cfg.lambda = 100.0;
  cfg.eta = 0.1;
  cfg.zeta = 0.01;
  const auto res = run_bilevel(q.make_store(a), q, cfg);
  const auto target = penalized_minimizer(a, diag(1.0, 0.0), {0.0, 0.0}, 100.0);
  const auto got = theta_of(res.state.theta);
  CHECK(std::hypot(got[0] - target[0], got[1] - target[1]) < 1e-3);
  CHECK(res.total_iterations == 200 * 10 + 200);
  CHECK(res.state.history.size() == 2200);
}

TEST_CASE("E = 1, K = 1, lambda = 0, zeta = 0 is one fine-tune step on vartheta") {
  QuadraticProblem q({3.0, 4.0}, diag(1.0, 2.0), {1.0, 0.0});
  BilevelConfig cfg;
  cfg.E = 1;
  cfg.K = 1;
  cfg.lambda = 0.0;
  cfg.zeta = 0.0;
  cfg.eta = 0.1;
  const ParamStore init = q.make_store({1.0, 1.0});
  const auto res = run_bilevel(init, q, cfg);
  CHECK(res.state.theta.identical_values(init));
  // grad = Q v - b = (0, 2)
  CHECK(theta_of(res.state.vartheta) == std::vector<double>{1.0, 1.0 - 0.1 * 2.0});
}

// ---- diffusion -----------------------------------------------------------------

TEST_CASE("upper step with lambda = 0 follows the pure unlearning gradient") {
  Toy toy(3);
  auto problem = toy.problem(8, 5);
  ParamStore a = toy.student, b = toy.student;
  a.zero_grad();
  b.zero_grad();
  problem.upper_objective(a, toy.student, 0.0, 2);
  problem.unlearn_objective(b, 2);
  for (const auto& [name, p] : a) {
    CAPTURE(name);
    CHECK(p.grad.identical(b.grad(name)));
  }
}

TEST_CASE("theta update does not depend on vartheta") {
  Toy toy(4);
  auto problem = toy.problem(8, 6);
  BilevelConfig cfg = small_cfg();
  BilevelState s1 = BilevelState::start(toy.student, cfg);
  BilevelState s2 = BilevelState::start(toy.student, cfg);
  for (auto& [name, p] : s2.vartheta)
    for (double& v : p.value.data()) v *= 0.5;
  upper_step(s1, problem, cfg);
  upper_step(s2, problem, cfg);
  CHECK(s1.theta.identical_values(s2.theta));
  CHECK(s1.history.back().l_ft_theta == s2.history.back().l_ft_theta);
  CHECK(s1.history.back().gap != s2.history.back().gap);
}

TEST_CASE("finite-difference check of the upper gradient on 2-sample batches") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CAPTURE(seed);
    Toy toy(100 + seed, 1.0);
    auto problem = toy.problem(2, seed);
    const double lambda = 3.0;
    ParamStore theta = toy.student;
    theta.zero_grad();
    problem.upper_objective(theta, toy.student, lambda, 1);
    Stream pick(seed);
    double worst = 0.0;
    for (auto& [name, p] : theta) {
      for (int trial = 0; trial < 6; ++trial) {
        const std::size_t i = pick.below(p.value.size());
        auto G = [&](double delta) {
          ParamStore probe = theta;
          probe.value(name)[i] += delta;
          probe.zero_grad();
          const auto v = problem.upper_objective(probe, toy.student, lambda, 1);
          return v.l_cu + lambda * v.l_ft_theta;
        };
        const double h = 1e-5;
        const double fd = (G(h) - G(-h)) / (2 * h);
        worst = std::max(worst, std::abs(p.grad[i] - fd) / std::max(1.0, std::abs(fd)));
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("lambda = 0: bilevel theta trajectory equals two-stage stage 2 bitwise") {
  for (OptimizerKind kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
    Toy toy(7);
    BilevelConfig cfg;
    cfg.E = 50;
    cfg.K = 1;
    cfg.lambda = 0.0;
    cfg.eta = 1e-2;
    cfg.zeta = kind == OptimizerKind::Sgd ? 5e-2 : 1e-3;
    cfg.optimizer = kind;
    auto p1 = toy.problem(16, 9);
    auto p2 = toy.problem(16, 9);
    const auto bl = run_bilevel(toy.student, p1, cfg);
    const auto ts = run_two_stage(toy.student, p2, 0, 50, cfg.zeta, cfg);
    CHECK(bl.state.theta.identical_values(ts.theta));
    std::vector<double> bl_cu, ts_cu;
    for (const auto& r : bl.state.history)
      if (r.kind == StepRecord::Kind::Upper) bl_cu.push_back(r.l_cu);
    for (const auto& r : ts.history) ts_cu.push_back(r.l_cu);
    CHECK(bl_cu == ts_cu);
  }
}

TEST_CASE("forward-pass cost of a bilevel cycle does not exceed K + 1 distillation steps") {
  Toy toy(8);
  BilevelConfig cfg = small_cfg();
  auto p1 = toy.problem(8, 1);
  run_bilevel(toy.student, p1, cfg);
  const FwdCount& bl = *p1.counts();
  const std::int64_t cycles = cfg.E, steps = cfg.E * (cfg.K + 1);
  CHECK(bl.teacher.calls == steps);
  CHECK(bl.vartheta.calls == cfg.E * cfg.K);
  CHECK(bl.theta.calls == cfg.E);
  CHECK(bl.diagnostic.calls == cfg.E);

  auto p2 = toy.problem(8, 1);
  run_two_stage(toy.student, p2, steps, 0, 0.0, cfg);
  const FwdCount& ft = *p2.counts();
  CHECK(ft.calls() == 2 * steps);
  CHECK(bl.calls() / cycles <= ft.calls() / cycles);
  CHECK(bl.calls() <= ft.calls());
}

TEST_CASE("masks survive bilevel and two-stage runs; history is well-formed") {
  Toy toy(9);
  const std::int64_t nnz = toy.student.nnz();
  REQUIRE(nnz < static_cast<std::int64_t>(toy.student.parameter_count()));
  for (VarthetaPolicy policy : {VarthetaPolicy::PersistentShadow, VarthetaPolicy::ResyncAfterUpper}) {
    BilevelConfig cfg = small_cfg();
    cfg.vartheta_policy = policy;
    cfg.optimizer = OptimizerKind::Adam;
    auto problem = toy.problem(8, 2);
    const auto res = run_bilevel(toy.student, problem, cfg);
    CHECK(res.state.theta.nnz() == nnz);
    CHECK(res.state.vartheta.nnz() == nnz);
    if (policy == VarthetaPolicy::ResyncAfterUpper) CHECK(res.state.vartheta.identical_values(res.state.theta));
    const auto& h = res.state.history;
    REQUIRE(h.size() == 15);
    CHECK(h[4].kind == StepRecord::Kind::Upper);
    CHECK(h[4].gap == doctest::Approx(h[4].l_ft_theta - h[4].l_ft_vartheta));
    CHECK(std::isnan(h[0].gap));
    CHECK(h[5].e == 1);
    CHECK(h[5].k == 0);
    for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i].fwd_teacher >= h[i - 1].fwd_teacher);
  }
  auto problem = toy.problem(8, 2);
  const auto ts = run_two_stage(toy.student, problem, 5, 5, 1e-2, small_cfg());
  CHECK(ts.distilled.nnz() == nnz);
  CHECK(ts.theta.nnz() == nnz);
  CHECK(ts.total_iterations == 10);
}

TEST_CASE("two-stage with M = 0 is pure fine-tuning") {
  Toy toy(10);
  auto problem = toy.problem(8, 3);
  const auto ts = run_two_stage(toy.student, problem, 6, 0, 1.0, small_cfg());
  CHECK(ts.theta.identical_values(ts.distilled));
  for (const auto& r : ts.history) CHECK(r.kind == StepRecord::Kind::Finetune);
}

TEST_CASE("history CSV layout") {
  StepRecord lower;
  lower.l_ft_vartheta = 0.5;
  lower.fwd_teacher = 1;
  lower.fwd_vartheta = 1;
  StepRecord upper;
  upper.kind = StepRecord::Kind::Upper;
  upper.k = 1;
  upper.l_cu = 2.0;
  upper.l_ft_theta = 0.75;
  upper.l_ft_vartheta = 0.5;
  upper.gap = 0.25;
  std::ostringstream os;
  write_history_csv(os, {lower, upper});
  CHECK(os.str() ==
        "step_kind,e,k,L_cu,L_ft_theta,L_ft_vartheta,gap,fwd_teacher,fwd_theta,fwd_vartheta\n"
        "lower,0,0,,,0.5,,1,0,1\n"
        "upper,0,1,2,0.75,0.5,0.25,0,0,0\n");
}

TEST_CASE("config validation and non-finite losses") {
  BilevelConfig cfg;
  cfg.K = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = BilevelConfig{};
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = BilevelConfig{};
  cfg.zeta = -1e-3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  QuadraticProblem q({0.0, 0.0}, Tensor::identity(2), {0.0, 0.0});
  cfg = BilevelConfig{};
  BilevelState s = BilevelState::start(q.make_store({std::nan(""), 0.0}), cfg);
  try {
    lower_step(s, q, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("lower step (e=0, k=0)") != std::string::npos);
  }
}
