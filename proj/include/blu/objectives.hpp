// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: output and feature distillation, the combined
// fine-tune loss, and the two concept-unlearning losses. Teachers are always
// evaluated frozen, so no teacher parameter ever appears on a tape.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "blu/autodiff.hpp"
#include "blu/denoiser.hpp"
#include "blu/diffusion.hpp"

namespace blu {

struct FtWeights {
  double diff = 1.0;
  double outkd = 2.0;
  double featkd = 0.1;

  void validate() const;
  bool distills() const { return outkd != 0.0 || featkd != 0.0; }
  bool operator==(const FtWeights&) const = default;
};

enum class UnlearnMode { AnchorAblation, NegativeGuidance };
UnlearnMode parse_unlearn_mode(const std::string& s);
std::string to_string(UnlearnMode mode);

struct UnlearnSpec {
  UnlearnMode mode = UnlearnMode::NegativeGuidance;
  int target = 1;
  int anchor = kNullConcept;  ///< anchor-ablation only
  double guidance_eta = 1.0;  ///< negative-guidance only

  /// Rejects target == anchor and ids outside 1..concept_count-1 (target) or
  /// 0..concept_count-1 (anchor).
  void validate(std::size_t concept_count) const;
};

/// Rows to push through one batched model invocation, built from segments.
/// Each row's output depends only on that row, so stacking never changes
/// the result for any segment.
class RowStack {
 public:
  /// Appends rows and returns the segment index.
  std::size_t add(const Tensor& x, std::span<const int> t, std::span<const int> c);

  const Tensor& x() const { return x_; }
  const std::vector<int>& t() const { return t_; }
  const std::vector<int>& c() const { return c_; }
  std::size_t rows() const { return t_.size(); }
  std::size_t begin(std::size_t segment) const { return begins_.at(segment); }
  std::size_t count(std::size_t segment) const { return counts_.at(segment); }

  /// Output rows of one segment.
  Var slice(const Var& v, std::size_t segment) const;
  Tensor slice(const Tensor& v, std::size_t segment) const;
  TapeTrace slice(const TapeTrace& trace, std::size_t segment) const;
  FeatureTrace slice(const FeatureTrace& trace, std::size_t segment) const;

 private:
  Tensor x_{Shape{0, 0}};
  std::vector<int> t_, c_;
  std::vector<std::size_t> begins_, counts_;
};

/// mean_i ||student_i - teacher_i||^2
Var out_kd_from(const Var& student_eps, const Tensor& teacher_eps);
/// sum over taps of mean_i ||student_tap_i - teacher_tap_i||^2
Var feat_kd_from(const TapeTrace& student, const FeatureTrace& teacher);
/// w_diff * denoising + w_outkd * out-KD + w_featkd * feat-KD. `teacher` may
/// be null when no distillation weight is set.
Var ft_loss_from(const Prediction& student, const FrozenPrediction* teacher, const DiffusionBatch& batch,
                 const NoiseSchedule& sched, const FtWeights& w);

Var out_kd_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                const NoiseSchedule& sched);
Var feat_kd_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                 const NoiseSchedule& sched);
/// One teacher invocation (skipped without distillation) and one student
/// invocation.
Var ft_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
            const NoiseSchedule& sched, const FtWeights& w);

/// Value of the fine-tune loss with both models frozen. `teacher` may be
/// null when no distillation weight is set.
double ft_loss_value(const Denoiser* teacher, const Denoiser& student, const DiffusionBatch& batch,
                     const NoiseSchedule& sched, const FtWeights& w);

/// Rejects batches containing anything but the target concept.
void check_unlearn_batch(const DiffusionBatch& batch, const UnlearnSpec& spec);

/// Appends the frozen-model rows the unlearning target needs for noisy inputs
/// x_t of the target concept: (x_t, t, c') for anchor ablation, or
/// (x_t, t, c) then (x_t, t, null) for negative guidance. Returns the first
/// segment index.
std::size_t push_unlearn_rows(RowStack& stack, const Tensor& x_t, std::span<const int> t, const UnlearnSpec& spec);
/// Regression target from the frozen outputs of push_unlearn_rows:
/// eps(c') or eps_null - eta (eps_c - eps_null).
Tensor unlearn_target_from(const RowStack& stack, const Tensor& frozen_eps, std::size_t first_segment,
                           const UnlearnSpec& spec);

/// mean_i ||eps_student(x_t, t, c) - teacher(x_t, t, c')||^2
Var cu_anchor_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                   const UnlearnSpec& spec, const NoiseSchedule& sched);
/// mean_i ||eps_student(x_t, t, c) - (e_null - eta (e_c - e_null))||^2 with
/// e_* from the frozen teacher.
Var cu_negative_guidance_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape,
                              const DiffusionBatch& batch, const UnlearnSpec& spec, const NoiseSchedule& sched);
/// Dispatches on spec.mode.
Var cu_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
            const UnlearnSpec& spec, const NoiseSchedule& sched);

}  // namespace blu
