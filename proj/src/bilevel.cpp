// SPDX-License-Identifier: Apache-2.0

#include "blu/bilevel.hpp"

#include <cmath>
#include <stdexcept>

#include "blu/eval.hpp"

namespace blu {

VarthetaPolicy parse_vartheta_policy(const std::string& s) {
  if (s == "persistent-shadow") return VarthetaPolicy::PersistentShadow;
  if (s == "resync-after-upper") return VarthetaPolicy::ResyncAfterUpper;
  throw std::invalid_argument("unknown vartheta policy '" + s + "' (expected persistent-shadow|resync-after-upper)");
}

std::string to_string(VarthetaPolicy p) {
  return p == VarthetaPolicy::PersistentShadow ? "persistent-shadow" : "resync-after-upper";
}

void BilevelConfig::validate() const {
  if (E < 1 || K < 1) throw std::invalid_argument("bilevel: E and K must be >= 1");
  if (!(eta >= 0.0 && zeta >= 0.0)) throw std::invalid_argument("bilevel: learning rates must be >= 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("bilevel: lambda must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("bilevel: batch_size must be positive");
  ft_weights.validate();
}

OptimizerConfig BilevelConfig::optimizer_config(double lr) const {
  OptimizerConfig oc;
  oc.kind = optimizer;
  oc.lr = lr;
  oc.beta1 = beta1;
  oc.beta2 = beta2;
  return oc;
}

std::string to_string(StepRecord::Kind kind) {
  switch (kind) {
    case StepRecord::Kind::Lower: return "lower";
    case StepRecord::Kind::Upper: return "upper";
    case StepRecord::Kind::Finetune: return "finetune";
    case StepRecord::Kind::Unlearn: return "unlearn";
  }
  return "?";
}

void write_history_csv(std::ostream& os, const std::vector<StepRecord>& history) {
  os << "step_kind,e,k,L_cu,L_ft_theta,L_ft_vartheta,gap,fwd_teacher,fwd_theta,fwd_vartheta\n";
  for (const auto& r : history)
    os << to_string(r.kind) << ',' << r.e << ',' << r.k << ',' << fmt_double(r.l_cu) << ','
       << fmt_double(r.l_ft_theta) << ',' << fmt_double(r.l_ft_vartheta) << ',' << fmt_double(r.gap) << ','
       << r.fwd_teacher << ',' << r.fwd_theta << ',' << r.fwd_vartheta << '\n';
}

namespace {

void stamp(StepRecord& r, const BilevelProblem& problem) {
  if (const FwdCount* c = problem.counts()) {
    r.fwd_teacher = c->teacher.calls;
    r.fwd_theta = c->theta.calls;
    r.fwd_vartheta = c->vartheta.calls;
  }
}

std::string step_id(const char* kind, std::int64_t e, std::int64_t k) {
  return std::string(kind) + " step (e=" + std::to_string(e) + ", k=" + std::to_string(k) + ")";
}

void check_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw NumericError("non-finite loss at " + where);
}

}  // namespace

BilevelState BilevelState::start(const ParamStore& init, const BilevelConfig& cfg) {
  BilevelState s;
  s.theta = init;
  s.vartheta = init;
  s.theta_opt = Optimizer(cfg.optimizer_config(cfg.zeta));
  s.vartheta_opt = Optimizer(cfg.optimizer_config(cfg.eta));
  return s;
}

void lower_step(BilevelState& state, BilevelProblem& problem, const BilevelConfig& cfg) {
  const std::string where = step_id("lower", state.e, state.k);
  StepRecord r;
  r.kind = StepRecord::Kind::Lower;
  r.e = state.e;
  r.k = state.k;
  try {
    state.vartheta.zero_grad();
    r.l_ft_vartheta = problem.lower_objective(state.vartheta, state.e * cfg.K + state.k);
    check_finite(r.l_ft_vartheta, where);
    state.vartheta_opt.step(state.vartheta);
  } catch (const NumericError& err) {
    throw NumericError(where + ": " + err.what());
  }
  stamp(r, problem);
  state.history.push_back(r);
  ++state.k;
}

void upper_step(BilevelState& state, BilevelProblem& problem, const BilevelConfig& cfg) {
  const std::string where = step_id("upper", state.e, state.k);
  StepRecord r;
  r.kind = StepRecord::Kind::Upper;
  r.e = state.e;
  r.k = state.k;
  try {
    state.theta.zero_grad();
    const auto v = problem.upper_objective(state.theta, state.vartheta, cfg.lambda, state.e);
    check_finite(v.l_cu + v.l_ft_theta, where);
    r.l_cu = v.l_cu;
    r.l_ft_theta = v.l_ft_theta;
    r.l_ft_vartheta = v.l_ft_vartheta;
    r.gap = v.l_ft_theta - v.l_ft_vartheta;
    state.theta_opt.step(state.theta);
  } catch (const NumericError& err) {
    throw NumericError(where + ": " + err.what());
  }
  if (cfg.vartheta_policy == VarthetaPolicy::ResyncAfterUpper)
    for (auto& [name, p] : state.theta) state.vartheta.value(name) = p.value;
  stamp(r, problem);
  state.history.push_back(r);
  ++state.e;
  state.k = 0;
}

BilevelResult run_bilevel(const ParamStore& init, BilevelProblem& problem, const BilevelConfig& cfg) {
  cfg.validate();
  BilevelResult out{BilevelState::start(init, cfg), 0};
  BilevelState& s = out.state;
  s.history.reserve(static_cast<std::size_t>(cfg.total_iterations()));
  for (std::int64_t e = 0; e < cfg.E; ++e) {
    for (std::int64_t k = 0; k < cfg.K; ++k) lower_step(s, problem, cfg);
    upper_step(s, problem, cfg);
  }
  out.total_iterations = cfg.total_iterations();
  return out;
}

TwoStageResult run_two_stage(const ParamStore& init, BilevelProblem& problem, std::int64_t N, std::int64_t M,
                             double unlearn_lr, const BilevelConfig& cfg) {
  cfg.validate();
  if (N < 0 || M < 0) throw std::invalid_argument("two-stage: N and M must be >= 0");
  TwoStageResult out;
  out.theta = init;
  Optimizer ft_opt(cfg.optimizer_config(cfg.eta));
  for (std::int64_t n = 0; n < N; ++n) {
    StepRecord r;
    r.kind = StepRecord::Kind::Finetune;
    r.k = n;
    try {
      out.theta.zero_grad();
      r.l_ft_theta = problem.lower_objective(out.theta, n);
      check_finite(r.l_ft_theta, step_id("finetune", 0, n));
      ft_opt.step(out.theta);
    } catch (const NumericError& err) {
      throw NumericError(step_id("finetune", 0, n) + ": " + err.what());
    }
    stamp(r, problem);
    out.history.push_back(r);
  }
  out.distilled = out.theta;
  Optimizer cu_opt(cfg.optimizer_config(unlearn_lr));
  for (std::int64_t m = 0; m < M; ++m) {
    StepRecord r;
    r.kind = StepRecord::Kind::Unlearn;
    r.e = m;
    try {
      out.theta.zero_grad();
      r.l_cu = problem.unlearn_objective(out.theta, m);
      check_finite(r.l_cu, step_id("unlearn", m, 0));
      cu_opt.step(out.theta);
    } catch (const NumericError& err) {
      throw NumericError(step_id("unlearn", m, 0) + ": " + err.what());
    }
    stamp(r, problem);
    out.history.push_back(r);
  }
  out.total_iterations = N + M;
  return out;
}

// ---- quadratic ---------------------------------------------------------------

QuadraticProblem::QuadraticProblem(std::vector<double> a, Tensor Q, std::vector<double> b)
    : a_(std::move(a)), b_(std::move(b)), Q_(std::move(Q)) {
  const std::size_t n = a_.size();
  if (Q_.shape() != Shape{n, n} || b_.size() != n)
    throw ShapeError("quadratic problem: a has " + std::to_string(n) + " entries, Q is " + shape_str(Q_.shape()) +
                     ", b has " + std::to_string(b_.size()));
}

ParamStore QuadraticProblem::make_store(const std::vector<double>& theta) const {
  ParamStore s;
  s.add("theta", Tensor(Shape{1, theta.size()}, theta));
  return s;
}

Var QuadraticProblem::upper_term(Tape& tape, const Var& theta) const {
  const Var a = tape.constant(Tensor(Shape{1, a_.size()}, a_));
  return scale(sq_norm(sub(theta, a)), 0.5);
}

Var QuadraticProblem::lower_term(Tape& tape, const Var& theta) const {
  const Var quad = sum(mul(matmul(theta, tape.constant(Q_)), theta));
  const Var lin = sum(mul(theta, tape.constant(Tensor(Shape{1, b_.size()}, b_))));
  return sub(scale(quad, 0.5), lin);
}

double QuadraticProblem::l_ft(const Tensor& theta) const {
  Tape tape;
  return lower_term(tape, tape.constant(theta)).value().item();
}

double QuadraticProblem::lower_objective(ParamStore& vartheta, std::int64_t) {
  Tape tape;
  const Var loss = lower_term(tape, tape.param(vartheta, "theta"));
  tape.backward(loss);
  return loss.value().item();
}

BilevelProblem::UpperValues QuadraticProblem::upper_objective(ParamStore& theta, const ParamStore& vartheta,
                                                              double lambda, std::int64_t) {
  Tape tape;
  const Var th = tape.param(theta, "theta");
  const Var cu = upper_term(tape, th);
  const Var ft = lower_term(tape, th);
  tape.backward(add(cu, scale(ft, lambda)));
  return {cu.value().item(), ft.value().item(), l_ft(vartheta.value("theta"))};
}

double QuadraticProblem::unlearn_objective(ParamStore& theta, std::int64_t) {
  Tape tape;
  const Var loss = upper_term(tape, tape.param(theta, "theta"));
  tape.backward(loss);
  return loss.value().item();
}

namespace {

std::vector<double> solve(Tensor A, std::vector<double> rhs) {
  const std::size_t n = rhs.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(A.at(r, col)) > std::abs(A.at(piv, col))) piv = r;
    if (A.at(piv, col) == 0.0) throw NumericError("penalized system is singular");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(A.at(col, j), A.at(piv, j));
      std::swap(rhs[col], rhs[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = A.at(r, col) / A.at(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) A.at(r, j) -= f * A.at(col, j);
      rhs[r] -= f * rhs[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = rhs[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= A.at(i, j) * x[j];
    x[i] = s / A.at(i, i);
  }
  return x;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix: A = V diag(w) V^T.
void jacobi_eigen(Tensor A, std::vector<double>& w, Tensor& V) {
  const std::size_t n = A.dim(0);
  V = Tensor::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += A.at(p, q) * A.at(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (A.at(p, q) == 0.0) continue;
        const double theta = (A.at(q, q) - A.at(p, p)) / (2.0 * A.at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A.at(k, p), akq = A.at(k, q);
          A.at(k, p) = c * akp - s * akq;
          A.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A.at(p, k), aqk = A.at(q, k);
          A.at(p, k) = c * apk - s * aqk;
          A.at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = V.at(k, p), vkq = V.at(k, q);
          V.at(k, p) = c * vkp - s * vkq;
          V.at(k, q) = s * vkp + c * vkq;
        }
      }
  }
  w.resize(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = A.at(i, i);
}

void check_quadratic(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (Q.shape() != Shape{n, n} || b.size() != n) throw ShapeError("quadratic reference: inconsistent dimensions");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (Q.at(i, j) != Q.at(j, i)) throw std::invalid_argument("quadratic reference: Q must be symmetric");
}

double distance(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s);
}

}  // namespace

std::vector<double> penalized_minimizer(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b,
                                        double lambda) {
  check_quadratic(a, Q, b);
  const std::size_t n = a.size();
  Tensor M(Shape{n, n});
  std::vector<double> rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) M.at(i, j) = lambda * Q.at(i, j) + (i == j ? 1.0 : 0.0);
    rhs[i] = a[i] + lambda * b[i];
  }
  return solve(std::move(M), std::move(rhs));
}

std::vector<double> bilevel_solution(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b) {
  check_quadratic(a, Q, b);
  const std::size_t n = a.size();
  std::vector<double> w;
  Tensor V;
  jacobi_eigen(Q, w, V);
  double scale = 0.0;
  for (double v : w) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * std::max(1.0, scale);
  for (double v : w)
    if (v < -tol) throw std::invalid_argument("quadratic reference: Q is not positive semi-definite");
  // Particular solution Q^+ b, then move a's null-space component onto it.
  std::vector<double> x(n, 0.0), out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double vb = 0.0, va = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      vb += V.at(i, k) * b[i];
      va += V.at(i, k) * a[i];
    }
    const double coef = w[k] > tol ? vb / w[k] : va;
    if (w[k] <= tol && std::abs(vb) > 1e-9 * std::max(1.0, scale))
      throw std::invalid_argument("quadratic reference: b is not in the range of Q (lower level is unbounded)");
    for (std::size_t i = 0; i < n; ++i) out[i] += coef * V.at(i, k);
  }
  return out;
}

QuadReference quad_bilevel_reference(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b,
                                     const std::vector<double>& lambdas) {
  QuadReference ref;
  ref.bilevel = bilevel_solution(a, Q, b);
  for (double lambda : lambdas) {
    QuadReferenceRow row;
    row.lambda = lambda;
    row.penalized = penalized_minimizer(a, Q, b, lambda);
    row.distance = distance(row.penalized, ref.bilevel);
    ref.rows.push_back(std::move(row));
  }
  return ref;
}

// ---- diffusion -----------------------------------------------------------------

DiffusionProblem::DiffusionProblem(const DenoiserConfig& cfg, const ParamStore& teacher, const MixtureSpec& spec,
                                   const NoiseSchedule& sched, DiffusionDataConfig data, FtWeights ft_weights,
                                   UnlearnSpec unlearn, Stream root, const ParamStore* cu_reference)
    : cfg_(cfg),
      teacher_(teacher),
      cu_reference_(cu_reference),
      spec_(spec),
      sched_(sched),
      data_(std::move(data)),
      w_(ft_weights),
      unlearn_(unlearn),
      ft_stream_(root.split("finetune")),
      upper_ft_stream_(root.split("upper-finetune")),
      cu_stream_(root.split("unlearn")) {
  if (data_.ft_concepts.empty()) data_.ft_concepts = spec_.real_concepts();
  unlearn_.validate(cfg_.concept_count);
  w_.validate();
}

DiffusionBatch DiffusionProblem::ft_batch(std::int64_t index) const {
  Stream rng = ft_stream_.split(static_cast<std::uint64_t>(index));
  return sample_ft_batch(spec_, data_.ft_concepts, data_.uncond_drop, data_.ft_batch, sched_, rng);
}

DiffusionBatch DiffusionProblem::upper_ft_batch(std::int64_t index) const {
  Stream rng = upper_ft_stream_.split(static_cast<std::uint64_t>(index));
  return sample_ft_batch(spec_, data_.ft_concepts, data_.uncond_drop, data_.ft_batch, sched_, rng);
}

DiffusionBatch DiffusionProblem::cu_batch(std::int64_t index) const {
  Stream rng = cu_stream_.split(static_cast<std::uint64_t>(index));
  return sample_concept_batch(spec_, unlearn_.target, data_.cu_batch, sched_, rng);
}

double DiffusionProblem::lower_objective(ParamStore& vartheta, std::int64_t index) {
  const DiffusionBatch b = ft_batch(index);
  Tape tape;
  const Var loss = ft_loss(Denoiser(cfg_, teacher_, &counts_.teacher), Denoiser(cfg_, vartheta, &counts_.vartheta),
                           tape, b, sched_, w_);
  tape.backward(loss);
  return loss.value().item();
}

BilevelProblem::UpperValues DiffusionProblem::upper_objective(ParamStore& theta, const ParamStore& vartheta,
                                                              double lambda, std::int64_t index) {
  const DiffusionBatch cu = cu_batch(index);
  const DiffusionBatch ft = upper_ft_batch(index);
  const Tensor x_cu = forward_noise(cu, sched_);
  const Tensor x_ft = forward_noise(ft, sched_);

  // Frozen rows: unlearning targets (when the teacher supplies them) and the
  // fine-tune distillation targets share one teacher invocation.
  RowStack frozen_rows;
  std::optional<std::size_t> cu_seg, ft_seg;
  if (!cu_reference_) cu_seg = push_unlearn_rows(frozen_rows, x_cu, cu.t, unlearn_);
  if (w_.distills()) ft_seg = frozen_rows.add(x_ft, ft.t, ft.c);
  FrozenPrediction frozen;
  if (frozen_rows.rows())
    frozen = Denoiser(cfg_, teacher_, &counts_.teacher).evaluate(frozen_rows.x(), frozen_rows.t(), frozen_rows.c());
  Tensor cu_target;
  if (cu_reference_) {
    RowStack ref_rows;
    const std::size_t first = push_unlearn_rows(ref_rows, x_cu, cu.t, unlearn_);
    const Tensor ref = Denoiser(cfg_, *cu_reference_, &counts_.teacher).evaluate(ref_rows.x(), ref_rows.t(), ref_rows.c()).eps;
    cu_target = unlearn_target_from(ref_rows, ref, first, unlearn_);
  } else {
    cu_target = unlearn_target_from(frozen_rows, frozen.eps, *cu_seg, unlearn_);
  }
  FrozenPrediction teacher_ft;
  if (ft_seg) teacher_ft = {frozen_rows.slice(frozen.eps, *ft_seg), frozen_rows.slice(frozen.trace, *ft_seg)};

  // theta sees [unlearning rows; fine-tune rows] in one invocation.
  RowStack rows;
  const std::size_t s_cu = rows.add(x_cu, cu.t, cu.c);
  const std::size_t s_ft = rows.add(x_ft, ft.t, ft.c);
  Tape tape;
  const Prediction p = Denoiser(cfg_, theta, &counts_.theta).predict(tape, rows.x(), rows.t(), rows.c());
  const Var l_cu = row_sq_error(rows.slice(p.eps, s_cu), tape.constant(cu_target));
  const Prediction p_ft{rows.slice(p.eps, s_ft), rows.slice(p.trace, s_ft)};
  const Var l_ft = ft_loss_from(p_ft, ft_seg ? &teacher_ft : nullptr, ft, sched_, w_);
  tape.backward(add(l_cu, scale(l_ft, lambda)));

  // Gap diagnostic: L_ft(vartheta) on the same fine-tune batch.
  const FrozenPrediction v = Denoiser(cfg_, vartheta, &counts_.diagnostic).evaluate(x_ft, ft.t, ft.c);
  Tape scratch;
  Prediction pv{scratch.constant(v.eps), {}};
  for (const auto& [idx, h] : v.trace) pv.trace.emplace_back(idx, scratch.constant(h));
  const double l_ft_v = ft_loss_from(pv, ft_seg ? &teacher_ft : nullptr, ft, sched_, w_).value().item();
  return {l_cu.value().item(), l_ft.value().item(), l_ft_v};
}

double DiffusionProblem::unlearn_objective(ParamStore& theta, std::int64_t index) {
  const DiffusionBatch cu = cu_batch(index);
  const Tensor x_cu = forward_noise(cu, sched_);
  RowStack ref_rows;
  const std::size_t first = push_unlearn_rows(ref_rows, x_cu, cu.t, unlearn_);
  const ParamStore& ref_store = cu_reference_ ? *cu_reference_ : teacher_;
  const Tensor ref = Denoiser(cfg_, ref_store, &counts_.teacher).evaluate(ref_rows.x(), ref_rows.t(), ref_rows.c()).eps;
  const Tensor target = unlearn_target_from(ref_rows, ref, first, unlearn_);
  Tape tape;
  const Var eps = Denoiser(cfg_, theta, &counts_.theta).predict(tape, x_cu, cu.t, cu.c).eps;
  const Var loss = row_sq_error(eps, tape.constant(target));
  tape.backward(loss);
  return loss.value().item();
}

}  // namespace blu
