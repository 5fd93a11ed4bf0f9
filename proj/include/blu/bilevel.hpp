// SPDX-License-Identifier: Apache-2.0
//
// Penalized bilevel fine-tuning with concept removal:
//
//   min_theta max_vartheta  G(theta, vartheta) =
//       L_cu(theta) + lambda (L_ft(theta) - L_ft(vartheta))
//
// solved by a double loop: K descent steps on L_ft(vartheta), then one step on
// theta along grad L_cu(theta) + lambda grad L_ft(theta). The two-stage
// baseline (fine-tune, then unlearn) runs on the same problem interface.

#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "blu/denoiser.hpp"
#include "blu/diffusion.hpp"
#include "blu/mixture.hpp"
#include "blu/objectives.hpp"
#include "blu/param_store.hpp"

namespace blu {

enum class VarthetaPolicy { PersistentShadow, ResyncAfterUpper };
VarthetaPolicy parse_vartheta_policy(const std::string& s);
std::string to_string(VarthetaPolicy p);

struct BilevelConfig {
  std::int64_t E = 250;
  std::int64_t K = 20;
  double lambda = 100.0;
  double eta = 1e-3;   ///< lower learning rate
  double zeta = 2e-4;  ///< upper learning rate
  VarthetaPolicy vartheta_policy = VarthetaPolicy::PersistentShadow;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch_size = 64;
  UnlearnSpec unlearn;
  FtWeights ft_weights;

  void validate() const;
  /// Lower plus upper steps: E K + E.
  std::int64_t total_iterations() const { return E * K + E; }
  OptimizerConfig optimizer_config(double lr) const;
};

/// Model invocations by role. `diagnostic` holds the passes spent only on the
/// logged gap; it is reported but is not part of the optimization cost.
struct FwdCount {
  ForwardCounter teacher, theta, vartheta, diagnostic;

  /// Invocations needed by the optimization itself.
  std::int64_t calls() const { return teacher.calls + theta.calls + vartheta.calls; }
  std::int64_t rows() const { return teacher.rows + theta.rows + vartheta.rows; }
};

struct StepRecord {
  enum class Kind { Lower, Upper, Finetune, Unlearn };
  Kind kind = Kind::Lower;
  std::int64_t e = 0;
  std::int64_t k = 0;
  double l_cu = std::numeric_limits<double>::quiet_NaN();
  double l_ft_theta = std::numeric_limits<double>::quiet_NaN();
  double l_ft_vartheta = std::numeric_limits<double>::quiet_NaN();
  double gap = std::numeric_limits<double>::quiet_NaN();
  std::int64_t fwd_teacher = 0;
  std::int64_t fwd_theta = 0;
  std::int64_t fwd_vartheta = 0;
};

std::string to_string(StepRecord::Kind kind);

/// Columns: step_kind,e,k,L_cu,L_ft_theta,L_ft_vartheta,gap,fwd_teacher,fwd_theta,fwd_vartheta
void write_history_csv(std::ostream& os, const std::vector<StepRecord>& history);

/// Supplies objectives and their gradients for a bilevel problem. Every
/// method zero-fills nothing: callers zero gradients before calling.
class BilevelProblem {
 public:
  struct UpperValues {
    double l_cu = 0.0;
    double l_ft_theta = 0.0;
    double l_ft_vartheta = 0.0;  ///< on the same fine-tune batch as l_ft_theta
  };

  virtual ~BilevelProblem() = default;
  /// L_ft on lower batch `index`; accumulates gradients into `vartheta`.
  virtual double lower_objective(ParamStore& vartheta, std::int64_t index) = 0;
  /// L_cu(theta) + lambda L_ft(theta) on upper batch `index`; accumulates
  /// gradients into `theta` only. Also evaluates L_ft(vartheta).
  virtual UpperValues upper_objective(ParamStore& theta, const ParamStore& vartheta, double lambda,
                                      std::int64_t index) = 0;
  /// L_cu(theta) on upper batch `index` with gradients into `theta`.
  virtual double unlearn_objective(ParamStore& theta, std::int64_t index) = 0;
  /// Forward-pass counters, if the problem has any.
  virtual const FwdCount* counts() const { return nullptr; }
};

struct BilevelState {
  ParamStore theta;
  ParamStore vartheta;
  std::int64_t e = 0;
  std::int64_t k = 0;
  Optimizer theta_opt{OptimizerConfig{}};
  Optimizer vartheta_opt{OptimizerConfig{}};
  std::vector<StepRecord> history;

  /// theta = init; vartheta = copy of init (same masks).
  static BilevelState start(const ParamStore& init, const BilevelConfig& cfg);
};

/// vartheta <- vartheta - eta mask * grad L_ft(vartheta). theta untouched.
void lower_step(BilevelState& state, BilevelProblem& problem, const BilevelConfig& cfg);
/// theta <- theta - zeta mask * (grad L_cu(theta) + lambda grad L_ft(theta)),
/// then applies the vartheta policy and logs the gap.
void upper_step(BilevelState& state, BilevelProblem& problem, const BilevelConfig& cfg);

struct BilevelResult {
  BilevelState state;
  std::int64_t total_iterations = 0;
};

/// E outer iterations of (K lower steps, 1 upper step).
BilevelResult run_bilevel(const ParamStore& init, BilevelProblem& problem, const BilevelConfig& cfg);

struct TwoStageResult {
  ParamStore distilled;  ///< after stage 1
  ParamStore theta;      ///< after stage 2
  std::vector<StepRecord> history;
  std::int64_t total_iterations = 0;
};

/// Stage 1: N descent steps on L_ft with learning rate cfg.eta (lower batches
/// 0..N-1). Stage 2: M descent steps on L_cu with learning rate `unlearn_lr`
/// (upper batches 0..M-1).
TwoStageResult run_two_stage(const ParamStore& init, BilevelProblem& problem, std::int64_t N, std::int64_t M,
                             double unlearn_lr, const BilevelConfig& cfg);

// ---- quadratic test problem -------------------------------------------------

/// L_cu = 1/2 |theta - a|^2, L_ft = 1/2 theta^T Q theta - b^T theta, with Q
/// symmetric PSD. Parameters live under the single name "theta".
class QuadraticProblem final : public BilevelProblem {
 public:
  QuadraticProblem(std::vector<double> a, Tensor Q, std::vector<double> b);
  double lower_objective(ParamStore& vartheta, std::int64_t index) override;
  UpperValues upper_objective(ParamStore& theta, const ParamStore& vartheta, double lambda,
                              std::int64_t index) override;
  double unlearn_objective(ParamStore& theta, std::int64_t index) override;

  ParamStore make_store(const std::vector<double>& theta) const;
  double l_ft(const Tensor& theta) const;

 private:
  Var upper_term(Tape& tape, const Var& theta) const;
  Var lower_term(Tape& tape, const Var& theta) const;
  std::vector<double> a_, b_;
  Tensor Q_;
};

struct QuadReferenceRow {
  double lambda = 0.0;
  std::vector<double> penalized;  ///< argmin L_cu + lambda L_ft
  double distance = 0.0;          ///< to the bilevel solution
};

struct QuadReference {
  std::vector<double> bilevel;  ///< projection of a onto {Q theta = b}
  std::vector<QuadReferenceRow> rows;
};

/// Minimizer of 1/2 |theta - a|^2 + lambda (1/2 theta^T Q theta - b^T theta),
/// i.e. the solution of (I + lambda Q) theta = a + lambda b.
std::vector<double> penalized_minimizer(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b,
                                        double lambda);
/// Euclidean projection of a onto the lower-level solution set {Q theta = b}.
/// Rejects b outside the range of Q.
std::vector<double> bilevel_solution(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b);
QuadReference quad_bilevel_reference(const std::vector<double>& a, const Tensor& Q, const std::vector<double>& b,
                                     const std::vector<double>& lambdas);

// ---- diffusion problem -------------------------------------------------------

struct DiffusionDataConfig {
  std::vector<int> ft_concepts;  ///< fine-tuning data concepts; empty means all real concepts
  double uncond_drop = 0.1;
  std::size_t ft_batch = 64;
  std::size_t cu_batch = 64;
};

/// Lower batches come from stream "finetune" (split by index), upper
/// unlearning batches from "unlearn" and upper fine-tune batches from
/// "upper-finetune". The frozen model supplying unlearning targets is the
/// teacher unless a separate reference store is given.
class DiffusionProblem final : public BilevelProblem {
 public:
  DiffusionProblem(const DenoiserConfig& cfg, const ParamStore& teacher, const MixtureSpec& spec,
                   const NoiseSchedule& sched, DiffusionDataConfig data, FtWeights ft_weights, UnlearnSpec unlearn,
                   Stream root, const ParamStore* cu_reference = nullptr);

  double lower_objective(ParamStore& vartheta, std::int64_t index) override;
  UpperValues upper_objective(ParamStore& theta, const ParamStore& vartheta, double lambda,
                              std::int64_t index) override;
  double unlearn_objective(ParamStore& theta, std::int64_t index) override;
  const FwdCount* counts() const override { return &counts_; }

  DiffusionBatch ft_batch(std::int64_t index) const;
  DiffusionBatch upper_ft_batch(std::int64_t index) const;
  DiffusionBatch cu_batch(std::int64_t index) const;

 private:
  const DenoiserConfig& cfg_;
  const ParamStore& teacher_;
  const ParamStore* cu_reference_;
  const MixtureSpec& spec_;
  const NoiseSchedule& sched_;
  DiffusionDataConfig data_;
  FtWeights w_;
  UnlearnSpec unlearn_;
  Stream ft_stream_, upper_ft_stream_, cu_stream_;
  FwdCount counts_;
};

}  // namespace blu
