// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: executes the eleven acceptance criteria at their stated
// tolerances and prints one PASS/FAIL line per criterion. Exit status is
// non-zero when any criterion fails.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "blu/checkpoint.hpp"
#include "blu/gradcheck.hpp"
#include "blu/pipeline.hpp"

namespace fs = std::filesystem;
using namespace blu;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Output files of one experiment, by file name.
using Files = std::map<std::string, std::string>;

void write_files(const fs::path& dir, const Files& files) {
  fs::create_directories(dir);
  for (const auto& [name, bytes] : files) std::ofstream(dir / name, std::ios::binary) << bytes;
}

std::string curve_csv(const std::string& arm, const std::vector<CurveRow>& rows) {
  std::ostringstream os;
  write_curve_csv(os, arm, rows);
  return os.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Standard error of the mean.
double sem(const std::vector<double>& v) {
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

// ---- criteria 1-5: exact oracles --------------------------------------------

DenoiserConfig small_model() {
  DenoiserConfig cfg;
  cfg.hidden = {6, 5, 4};
  cfg.time_embed_dim = 4;
  cfg.concept_count = 5;
  cfg.concept_embed_dim = 3;
  cfg.feature_taps = {1, 2};
  return cfg;
}

Outcome gradient_correctness() {
  const DenoiserConfig cfg = small_model();
  const MixtureSpec spec = circle_mixture(4, 3.0, 0.1);
  const NoiseSchedule sched = NoiseSchedule::variance_preserving_linear(100, 1e-3, 0.2);
  UnlearnSpec ng;
  UnlearnSpec anchor;
  anchor.mode = UnlearnMode::AnchorAblation;
  anchor.anchor = 3;
  const std::vector<std::string> names{"denoising", "output-kd", "feature-kd", "fine-tune", "anchor-ablation",
                                       "negative-guidance", "upper-gradient"};
  std::vector<double> worst(names.size(), 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Stream rng = Stream(seed).split("gradcheck");
    const ParamStore teacher = init_params(cfg, rng);
    ParamStore student = init_params(cfg, rng);
    auto batch = [&](std::vector<int> c) {
      Tensor x0(Shape{c.size(), 2});
      for (double& v : x0.data()) v = 2.0 * rng.normal();
      return make_batch(std::move(x0), std::move(c), sched, rng);
    };
    const DiffusionBatch ft = batch({0, 2}), cu = batch({1, 1});
    const Denoiser t(cfg, teacher);
    const std::vector<LossBuilder> losses{
        [&](Tape& tape, ParamStore& s) { return diffusion_loss(Denoiser(cfg, s), tape, ft, sched); },
        [&](Tape& tape, ParamStore& s) { return out_kd_loss(t, Denoiser(cfg, s), tape, ft, sched); },
        [&](Tape& tape, ParamStore& s) { return feat_kd_loss(t, Denoiser(cfg, s), tape, ft, sched); },
        [&](Tape& tape, ParamStore& s) { return ft_loss(t, Denoiser(cfg, s), tape, ft, sched, {}); },
        [&](Tape& tape, ParamStore& s) { return cu_anchor_loss(t, Denoiser(cfg, s), tape, cu, anchor, sched); },
        [&](Tape& tape, ParamStore& s) { return cu_negative_guidance_loss(t, Denoiser(cfg, s), tape, cu, ng, sched); },
    };
    for (std::size_t i = 0; i < losses.size(); ++i)
      worst[i] = std::max(worst[i], finite_diff_check(losses[i], student, {}).max_rel_error);

    // Gradient of G with respect to theta, through the bilevel problem itself.
    DiffusionDataConfig data;
    data.ft_batch = 2;
    data.cu_batch = 2;
    data.ft_concepts = {2, 3, 4};
    DiffusionProblem problem(cfg, teacher, spec, sched, data, {}, ng, Stream(seed).split("problem"));
    const double lambda = 3.0;
    ParamStore vartheta = init_params(cfg, rng);
    student.zero_grad();
    problem.upper_objective(student, vartheta, lambda, 0);
    for (auto& [name, p] : student) {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        auto G = [&](double delta) {
          ParamStore probe = student;
          probe.value(name)[i] += delta;
          probe.zero_grad();
          const auto v = problem.upper_objective(probe, vartheta, lambda, 0);
          return v.l_cu + lambda * (v.l_ft_theta - v.l_ft_vartheta);
        };
        const double h = 1e-5;
        const double fd = (G(h) - G(-h)) / (2 * h);
        worst.back() = std::max(worst.back(), std::abs(p.grad[i] - fd) / std::max(1.0, std::abs(fd)));
      }
    }
  }
  Outcome out{true, "max relative error:"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    out.pass = out.pass && worst[i] < 1e-4;
    out.detail += " " + names[i] + "=" + fmt(worst[i], 2);
  }
  out.detail += " (limit 1e-4, 10 seeds)";
  return out;
}

Outcome forward_statistics() {
  const std::vector<double> mu{1.0, -2.0};
  const double S[2][2] = {{0.5, 0.2}, {0.2, 0.3}};
  MixtureSpec spec;
  spec.concept_count = 2;
  spec.components.push_back({mu, Tensor::matrix(2, 2, {S[0][0], S[0][1], S[1][0], S[1][1]}), 1.0});
  const std::size_t n = 100000;
  int checks = 0, failures = 0;
  double worst = 0.0;
  for (const NoiseSchedule& sched : {NoiseSchedule::variance_preserving_linear(100, 1e-3, 0.2), NoiseSchedule::edm(100)}) {
    for (int t : {1, 50, 100}) {
      Stream rng = Stream(2024).split(static_cast<std::uint64_t>(t)).split(to_string(sched.kind));
      DiffusionBatch b;
      b.x0 = sample_component(spec, 1, n, rng);
      b.t.assign(n, t);
      b.c.assign(n, 1);
      b.eps = Tensor(Shape{n, 2});
      for (double& v : b.eps.data()) v = rng.normal();
      const Tensor x = forward_noise(b, sched);
      const double a = sched.alpha[t], s = sched.sigma[t];
      double m[2] = {0, 0};
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < 2; ++j) m[j] += x.at(i, j);
      for (double& v : m) v /= static_cast<double>(n);
      double c[2][2] = {{0, 0}, {0, 0}};
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < 2; ++j)
          for (int k = 0; k < 2; ++k) c[j][k] += (x.at(i, j) - m[j]) * (x.at(i, k) - m[k]);
      double cov[2][2];
      for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 2; ++k) {
          c[j][k] /= static_cast<double>(n - 1);
          cov[j][k] = a * a * S[j][k] + (j == k ? s * s : 0.0);
        }
      auto check = [&](double got, double want, double se) {
        ++checks;
        const double z = std::abs(got - want) / se;
        worst = std::max(worst, z);
        failures += z > 3.0;
      };
      for (int j = 0; j < 2; ++j) check(m[j], a * mu[j], std::sqrt(cov[j][j] / n));
      for (int j = 0; j < 2; ++j)
        for (int k = j; k < 2; ++k)
          check(c[j][k], cov[j][k], std::sqrt((cov[j][j] * cov[k][k] + cov[j][k] * cov[j][k]) / n));
    }
  }
  return {failures == 0, std::to_string(checks - failures) + "/" + std::to_string(checks) +
                             " moments within 3 standard errors (largest " + fmt(worst, 3) + " SE)"};
}

Outcome penalty_equivalence() {
  const std::vector<double> a{3.0, 4.0};
  const Tensor Q = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 0.0});
  const std::vector<double> grid{0.0, 1.0, 10.0, 100.0, 1000.0};
  const QuadReference ref = quad_bilevel_reference(a, Q, {0.0, 0.0}, grid);
  double worst = 0.0;
  for (const auto& row : ref.rows) worst = std::max(worst, std::abs(row.distance - 3.0 / (1.0 + row.lambda)));

  QuadraticProblem q(a, Q, {0.0, 0.0});
  BilevelConfig cfg;
  cfg.E = 200;
  cfg.K = 10;
  cfg.lambda = 100.0;
  cfg.eta = 0.1;
  cfg.zeta = 0.01;
  cfg.optimizer = OptimizerKind::Sgd;
  const BilevelResult res = run_bilevel(q.make_store(a), q, cfg);
  const auto target = penalized_minimizer(a, Q, {0.0, 0.0}, 100.0);
  const Tensor& th = res.state.theta.value("theta");
  const double dist = std::hypot(th[0] - target[0], th[1] - target[1]);
  return {worst < 1e-9 && dist < 1e-3, "closed-form distance error " + fmt(worst, 2) +
                                           " (limit 1e-9); run_bilevel distance to the lambda=100 minimizer " +
                                           fmt(dist, 3) + " (limit 1e-3)"};
}

// A randomly initialized default-size model, pruned, stands in for the pretrained one.
struct RawModels {
  ExperimentConfig cfg;
  ParamStore teacher, pruned;
  explicit RawModels(const ExperimentConfig& base) : cfg(base) {
    Stream rng = Stream(cfg.seed).split("acceptance-raw");
    teacher = init_params(cfg.model, rng);
    pruned = prune_model(cfg, teacher).params;
  }
};

Outcome lambda_zero(const ExperimentConfig& base) {
  RawModels m(base);
  ExperimentConfig cfg = m.cfg;
  cfg.bilevel.lambda = 0.0;
  cfg.bilevel.E = 50;
  cfg.bilevel.K = 1;
  cfg.two_stage.N = 0;
  cfg.two_stage.M = 50;
  cfg.two_stage.lr = cfg.bilevel.zeta;
  const UnlearnResult bl = unlearn_bilevel(cfg, m.teacher, m.pruned);
  const UnlearnResult ts = unlearn_two_stage(cfg, m.teacher, m.pruned);
  std::vector<double> a, b;
  for (const auto& r : bl.history)
    if (r.kind == StepRecord::Kind::Upper) a.push_back(r.l_cu);
  for (const auto& r : ts.history) b.push_back(r.l_cu);
  const bool same = bl.theta.identical_values(ts.theta) && a == b && a.size() == 50;
  return {same, std::string(same ? "bitwise identical" : "differs") + " after 50 upper steps (" +
                    to_string(cfg.bilevel.optimizer) + ", default model)"};
}

Outcome cost_parity(const ExperimentConfig& base) {
  RawModels m(base);
  ExperimentConfig cfg = m.cfg;
  cfg.bilevel.E = 3;
  const std::int64_t K = cfg.bilevel.K, steps = cfg.bilevel.E * (K + 1);
  cfg.two_stage.N = steps;
  cfg.two_stage.M = 0;
  const UnlearnResult bl = unlearn_bilevel(cfg, m.teacher, m.pruned);
  const UnlearnResult ts = unlearn_two_stage(cfg, m.teacher, m.pruned);
  const std::int64_t per_cycle = bl.fwd.calls() / cfg.bilevel.E;
  const std::int64_t distill = ts.fwd.calls() / cfg.bilevel.E;
  const bool exact = bl.fwd.calls() % cfg.bilevel.E == 0 && ts.fwd.calls() % cfg.bilevel.E == 0;
  return {exact && per_cycle <= distill && bl.fwd.calls() <= ts.fwd.calls(),
          "forward passes per cycle: bilevel " + std::to_string(per_cycle) + " (teacher " +
              std::to_string(bl.fwd.teacher.calls / cfg.bilevel.E) + ", theta " +
              std::to_string(bl.fwd.theta.calls / cfg.bilevel.E) + ", vartheta " +
              std::to_string(bl.fwd.vartheta.calls / cfg.bilevel.E) + ") vs " + std::to_string(K + 1) +
              " distillation steps " + std::to_string(distill)};
}

// ---- criteria 6-11: experiments on the synthetic benchmark ------------------

struct Teacher {
  ExperimentConfig cfg;
  ParamStore teacher, pruned;
  Files files;
};

Files teacher_files(const TrainResult& r) {
  Files f;
  f["curve_train.csv"] = curve_csv("train", r.curve);
  return f;
}

struct FtArms {
  TrainResult on, off, random;
  Files files;
};

Files finetune_pair(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& pruned, FtArms& arms) {
  arms.on = finetune(cfg, teacher, pruned, true);
  arms.off = finetune(cfg, teacher, pruned, false);
  Files f;
  f["curve_finetune_pruned-distill.csv"] = curve_csv("pruned-distill", arms.on.curve);
  f["curve_finetune_pruned-plain.csv"] = curve_csv("pruned-plain", arms.off.curve);
  return f;
}

Files finetune_random(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& pruned, FtArms& arms) {
  ExperimentConfig random = cfg;
  random.ft.init = InitMode::Random;
  arms.random = finetune(random, teacher, init_finetune(random, pruned), true);
  Files f;
  f["curve_finetune_random-distill.csv"] = curve_csv("random-distill", arms.random.curve);
  return f;
}

struct UnlearnRuns {
  UnlearnResult bilevel, two_stage;
  EvalReport bl, ts, distilled;
};

Files unlearn_pair(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& pruned, UnlearnRuns& u) {
  check_budget(cfg);
  u.bilevel = unlearn_bilevel(cfg, teacher, pruned);
  u.two_stage = unlearn_two_stage(cfg, teacher, pruned);
  u.distilled = evaluate_params(cfg, u.two_stage.distilled, teacher, "distilled");
  u.bl = evaluate_params(cfg, u.bilevel.theta, teacher, "bilevel");
  u.ts = evaluate_params(cfg, u.two_stage.theta, teacher, "two-stage");
  u.bl.fwd_teacher = u.bilevel.fwd.teacher.calls;
  u.bl.fwd_theta = u.bilevel.fwd.theta.calls;
  u.bl.fwd_vartheta = u.bilevel.fwd.vartheta.calls;
  u.ts.fwd_teacher = u.two_stage.fwd.teacher.calls;
  u.ts.fwd_theta = u.two_stage.fwd.theta.calls;
  Files f;
  std::ostringstream rep, con, rank, hb, ht;
  write_report_csv(rep, {u.distilled, u.bl, u.ts});
  write_concept_csv(con, {u.distilled, u.bl, u.ts});
  write_ranking_csv(rank, compare_runs({u.distilled, u.bl, u.ts}));
  write_history_csv(hb, u.bilevel.history);
  write_history_csv(ht, u.two_stage.history);
  f["report.csv"] = rep.str();
  f["concepts.csv"] = con.str();
  f["ranking.csv"] = rank.str();
  f["history_bilevel.csv"] = hb.str();
  f["history_two-stage.csv"] = ht.str();
  return f;
}

class Experiments {
 public:
  Experiments(ExperimentConfig base, fs::path out, std::vector<std::uint64_t> seeds)
      : base_(std::move(base)), out_(std::move(out)), seeds_(std::move(seeds)) {}

  const std::vector<std::uint64_t>& seeds() const { return seeds_; }
  const fs::path& out() const { return out_; }

  const Teacher& teacher() {
    if (!teacher_) {
      const auto t0 = Clock::now();
      Teacher t;
      t.cfg = base_;
      t.cfg.out = (out_ / "teacher").string();
      echo_config(t.cfg, t.cfg.out);
      TrainResult r = train_base(t.cfg);
      if (!r.error.empty()) throw NumericError(r.error);
      t.files = teacher_files(r);
      t.teacher = std::move(r.params);
      t.pruned = prune_model(t.cfg, t.teacher).params;
      write_files(t.cfg.out, t.files);
      Checkpoint tc{t.cfg.model, t.teacher, config_digest(t.cfg), r.steps, {}};
      save_checkpoint(tc, fs::path(t.cfg.out) / "teacher.ckpt");
      Checkpoint pc{t.cfg.model, t.pruned, config_digest(t.cfg), 0, {}};
      save_checkpoint(pc, fs::path(t.cfg.out) / "pruned.ckpt");
      teacher_setup_s_ = seconds_since(t0);
      log("teacher trained in " + fmt(teacher_setup_s_, 3) + " s, held-out loss " +
          fmt(r.curve.back().heldout_diff_loss) + " (untrained " + fmt(r.curve.front().heldout_diff_loss) +
          "), nnz after pruning " + std::to_string(t.pruned.nnz()) + " of " +
          std::to_string(t.pruned.parameter_count()));
      teacher_ = std::move(t);
    }
    return *teacher_;
  }
  double teacher_setup_seconds() const { return teacher_setup_s_; }

  ExperimentConfig seed_config(const std::string& group, std::uint64_t seed) const {
    ExperimentConfig cfg = base_;
    cfg.seed = seed;
    cfg.out = (out_ / group / ("seed-" + std::to_string(seed))).string();
    return cfg;
  }

  FtArms& ft(std::uint64_t seed) {
    auto& arms = ft_[seed];
    if (arms.on.curve.empty()) {
      const Teacher& t = teacher();
      const ExperimentConfig cfg = seed_config("finetune", seed);
      echo_config(cfg, cfg.out);
      arms.files = finetune_pair(cfg, t.teacher, t.pruned, arms);
      write_files(cfg.out, arms.files);
      log("seed " + std::to_string(seed) + ": distill on/off final held-out " +
          fmt(arms.on.curve.back().heldout_diff_loss) + " / " + fmt(arms.off.curve.back().heldout_diff_loss));
    }
    return arms;
  }

  FtArms& ft_random(std::uint64_t seed) {
    FtArms& arms = ft(seed);
    if (arms.random.curve.empty()) {
      const Teacher& t = teacher();
      const ExperimentConfig cfg = seed_config("finetune", seed);
      const Files f = finetune_random(cfg, t.teacher, t.pruned, arms);
      write_files(cfg.out, f);
      arms.files.insert(f.begin(), f.end());
      log("seed " + std::to_string(seed) + ": random-init final held-out " +
          fmt(arms.random.curve.back().heldout_diff_loss));
    }
    return arms;
  }

  UnlearnRuns& unlearn(std::uint64_t seed) {
    auto it = unlearn_.find(seed);
    if (it == unlearn_.end()) {
      const Teacher& t = teacher();
      const ExperimentConfig cfg = seed_config("unlearn", seed);
      echo_config(cfg, cfg.out);
      UnlearnRuns u;
      const Files f = unlearn_pair(cfg, t.teacher, t.pruned, u);
      write_files(cfg.out, f);
      unlearn_files_[seed] = f;
      log("seed " + std::to_string(seed) + ": removal bilevel/two-stage " + fmt(u.bl.removal_energy) + " / " +
          fmt(u.ts.removal_energy) + ", mean retention bilevel/two-stage/distilled " + fmt(u.bl.mean_retention()) +
          " / " + fmt(u.ts.mean_retention()) + " / " + fmt(u.distilled.mean_retention()));
      it = unlearn_.emplace(seed, std::move(u)).first;
    }
    return it->second;
  }
  const Files& unlearn_files(std::uint64_t seed) {
    unlearn(seed);
    return unlearn_files_.at(seed);
  }

 private:
  ExperimentConfig base_;
  fs::path out_;
  std::vector<std::uint64_t> seeds_;
  std::optional<Teacher> teacher_;
  double teacher_setup_s_ = 0.0;
  std::map<std::uint64_t, FtArms> ft_;
  std::map<std::uint64_t, UnlearnRuns> unlearn_;
  std::map<std::uint64_t, Files> unlearn_files_;
};

Outcome distillation_direction(Experiments& x) {
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t s : x.seeds()) {
    const FtArms& a = x.ft(s);
    bool all = a.on.curve.size() == a.off.curve.size() && a.on.curve.size() > 1;
    int checkpoints = 0, better = 0;
    for (std::size_t i = 0; all && i < a.on.curve.size(); ++i) {
      if (a.on.curve[i].iter == 0) continue;  // identical starting point
      ++checkpoints;
      better += a.on.curve[i].heldout_diff_loss < a.off.curve[i].heldout_diff_loss;
    }
    all = all && better == checkpoints;
    wins += all;
    per_seed += " " + std::to_string(s) + ":" + std::to_string(better) + "/" + std::to_string(checkpoints);
  }
  const int need = static_cast<int>(x.seeds().size()) - 1;
  return {wins >= need, std::to_string(wins) + "/" + std::to_string(x.seeds().size()) +
                            " seed pairs win at every checkpoint (need " + std::to_string(need) +
                            "); checkpoints won per seed:" + per_seed};
}

Outcome init_direction(Experiments& x) {
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t s : x.seeds()) {
    const FtArms& a = x.ft_random(s);
    const double p = a.on.curve.back().heldout_diff_loss, r = a.random.curve.back().heldout_diff_loss;
    wins += p < r;
    per_seed += " " + fmt(p) + "<" + fmt(r) + (p < r ? "" : "(no)");
  }
  const int need = static_cast<int>(x.seeds().size()) - 1;
  return {wins >= need, std::to_string(wins) + "/" + std::to_string(x.seeds().size()) +
                            " seeds where pruned-init beats random-init at the final checkpoint (need " +
                            std::to_string(need) + "):" + per_seed};
}

Outcome bilevel_vs_two_stage(Experiments& x) {
  std::vector<double> rem_bl, rem_ts, deg_bl, deg_ts, d_rem, d_deg;
  for (std::uint64_t s : x.seeds()) {
    const UnlearnRuns& u = x.unlearn(s);
    rem_bl.push_back(u.bl.removal_energy);
    rem_ts.push_back(u.ts.removal_energy);
    deg_bl.push_back(u.bl.mean_retention() - u.distilled.mean_retention());
    deg_ts.push_back(u.ts.mean_retention() - u.distilled.mean_retention());
    d_rem.push_back(rem_bl.back() - rem_ts.back());
    d_deg.push_back(deg_ts.back() - deg_bl.back());
  }
  const bool i = mean(rem_bl) >= mean(rem_ts), ii = mean(deg_bl) <= mean(deg_ts);
  const bool strict_i = mean(d_rem) > 2.0 * sem(d_rem), strict_ii = mean(d_deg) > 2.0 * sem(d_deg);
  return {i && ii && (strict_i || strict_ii),
          "removal bilevel " + fmt(mean(rem_bl)) + " vs two-stage " + fmt(mean(rem_ts)) + " (i " +
              (i ? "holds" : "fails") + (strict_i ? ", strict" : "") + "); retention degradation bilevel " +
              fmt(mean(deg_bl)) + " vs two-stage " + fmt(mean(deg_ts)) + " (ii " + (ii ? "holds" : "fails") +
              (strict_ii ? ", strict" : "") + "); paired 2-sigma margins " + fmt(2.0 * sem(d_rem)) + " / " +
              fmt(2.0 * sem(d_deg))};
}

Outcome preservation(Experiments& x) {
  std::map<int, std::vector<double>> bl, ref;
  for (std::uint64_t s : x.seeds()) {
    const UnlearnRuns& u = x.unlearn(s);
    for (const auto& [c, e] : u.bl.retention_energy) bl[c].push_back(e);
    for (const auto& [c, e] : u.distilled.retention_energy) ref[c].push_back(e);
  }
  bool pass = !bl.empty();
  std::string detail = "bilevel / distilled-reference retention:";
  for (const auto& [c, v] : bl) {
    const double ratio = mean(v) / mean(ref.at(c));
    pass = pass && mean(v) <= 2.0 * mean(ref.at(c));
    detail += " c" + std::to_string(c) + "=" + fmt(ratio, 3) + "x";
  }
  return {pass, detail + " (limit 2x)"};
}

Outcome sparsity(Experiments& x) {
  const Teacher& t = x.teacher();
  const std::int64_t nnz = t.pruned.nnz();
  int checked = 0, bad = 0;
  auto check = [&](const ParamStore& p) {
    ++checked;
    bad += p.nnz() != nnz;
  };
  for (std::uint64_t s : x.seeds()) {
    const FtArms& a = x.ft_random(s);
    for (const TrainResult* r : {&a.on, &a.off, &a.random}) check(r->params);
    const UnlearnRuns& u = x.unlearn(s);
    for (const ParamStore* p : {&u.bilevel.theta, &u.two_stage.theta, &u.two_stage.distilled}) {
      check(*p);
      // Round trip through the checkpoint container as well.
      Checkpoint ck{t.cfg.model, *p, "", 0, {}};
      check(deserialize_checkpoint(serialize_checkpoint(ck)).params);
    }
  }
  check(load_checkpoint(x.out() / "teacher" / "pruned.ckpt").params);
  return {bad == 0, std::to_string(checked - bad) + "/" + std::to_string(checked) +
                        " checkpoints have nnz == post-prune nnz " + std::to_string(nnz)};
}

Outcome reproducibility(Experiments& x) {
  const std::uint64_t s = x.seeds().front();
  int compared = 0, different = 0;
  std::string which;
  auto compare = [&](const std::string& group, const Files& first, const Files& second) {
    for (const auto& [name, bytes] : first) {
      if (name.size() < 4 || name.substr(name.size() - 4) != ".csv") continue;
      ++compared;
      if (!second.count(name) || second.at(name) != bytes) {
        ++different;
        which += " " + group + "/" + name;
      }
    }
  };
  const Teacher& t = x.teacher();

  // Each experiment reruns from nothing but its echoed config and input checkpoints.
  {
    const ExperimentConfig cfg = load_config(fs::path(t.cfg.out) / "config.resolved.json");
    TrainResult r = train_base(cfg);
    compare("teacher", t.files, teacher_files(r));
  }
  const ParamStore teacher = load_checkpoint(fs::path(t.cfg.out) / "teacher.ckpt").params;
  const ParamStore pruned = load_checkpoint(fs::path(t.cfg.out) / "pruned.ckpt").params;
  {
    const ExperimentConfig cfg = load_config(x.seed_config("finetune", s).out + "/config.resolved.json");
    FtArms arms;
    Files f = finetune_pair(cfg, teacher, pruned, arms);
    const Files r = finetune_random(cfg, teacher, pruned, arms);
    f.insert(r.begin(), r.end());
    compare("finetune", x.ft_random(s).files, f);
  }
  {
    const ExperimentConfig cfg = load_config(x.seed_config("unlearn", s).out + "/config.resolved.json");
    UnlearnRuns u;
    compare("unlearn", x.unlearn_files(s), unlearn_pair(cfg, teacher, pruned, u));
  }
  return {different == 0 && compared > 0, std::to_string(compared - different) + "/" + std::to_string(compared) +
                                              " CSVs byte-identical on rerun from the echoed configs (seed " +
                                              std::to_string(s) + ")" + (which.empty() ? "" : "; differ:" + which)};
}

struct Criterion {
  int id;
  std::string name;
  double limit_s;  ///< 0 means no runtime bound of its own
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runs the acceptance criteria and prints one PASS/FAIL line per criterion"};
  std::string config, out = "acceptance-out", only;
  int seeds = 5;
  app.add_option("--config", config, "Base experiment config (defaults if omitted)")->check(CLI::ExistingFile);
  app.add_option("--out", out, "Directory for checkpoints, CSVs and echoed configs");
  app.add_option("--seeds", seeds, "Seeds 0..n-1 for the experiments")->check(CLI::Range(2, 100));
  app.add_option("--only", only, "Comma-separated criterion ids to run");
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig base = config.empty() ? parse_config("{}") : load_config(config);
  std::vector<std::uint64_t> seed_list;
  for (int s = 0; s < seeds; ++s) seed_list.push_back(static_cast<std::uint64_t>(s));
  Experiments x(base, out, seed_list);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 60, gradient_correctness},
      {2, "forward-process statistics", 30, forward_statistics},
      {3, "penalty-bilevel equivalence", 10, penalty_equivalence},
      {4, "lambda = 0 degeneracy", 10, [&] { return lambda_zero(base); }},
      {5, "cost parity", 5, [&] { return cost_parity(base); }},
      {6, "distillation accelerates fine-tuning", 20 * 60, [&] { return distillation_direction(x); }},
      {7, "pruned init beats random init", 20 * 60, [&] { return init_direction(x); }},
      {8, "bilevel vs two-stage at equal budget", 45 * 60, [&] { return bilevel_vs_two_stage(x); }},
      {9, "retained concepts preserved", 0, [&] { return preservation(x); }},
      {10, "sparsity conservation", 0, [&] { return sparsity(x); }},
      {11, "reproducibility from echoed configs", 0, [&] { return reproducibility(x); }},
  };
  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    std::string id;
    while (std::getline(ss, id, ',')) selected.insert(std::stoi(id));
  }

  std::vector<std::string> lines;
  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    log("criterion " + std::to_string(c.id) + ": " + c.name);
    const auto t0 = Clock::now();
    const double setup_before = x.teacher_setup_seconds();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    double secs = seconds_since(t0);
    // The shared teacher is setup for criteria 6-11, not part of whichever one first needs it.
    secs -= x.teacher_setup_seconds() - setup_before;
    const bool in_time = c.limit_s == 0 || secs < c.limit_s;
    const bool pass = o.pass && in_time;
    all = all && pass;
    std::ostringstream line;
    line << "criterion " << std::setw(2) << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << ": "
         << o.detail << " [" << fmt(secs, 3) << " s" << (c.limit_s > 0 ? ", limit " + fmt(c.limit_s, 4) + " s" : "")
         << (in_time ? "" : ", over time") << "]";
    lines.push_back(line.str());
    std::cout << lines.back() << std::endl;
  }
  if (x.teacher_setup_seconds() > 0)
    std::cout << "shared teacher training: " << fmt(x.teacher_setup_seconds(), 3) << " s" << std::endl;
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  return all ? 0 : 1;
}
