// SPDX-License-Identifier: Apache-2.0

#include "blu/objectives.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace blu {

void FtWeights::validate() const {
  if (!(diff >= 0.0 && outkd >= 0.0 && featkd >= 0.0))
    throw std::invalid_argument("fine-tune weights must be non-negative");
}

UnlearnMode parse_unlearn_mode(const std::string& s) {
  if (s == "anchor-ablation") return UnlearnMode::AnchorAblation;
  if (s == "negative-guidance") return UnlearnMode::NegativeGuidance;
  throw std::invalid_argument("unknown unlearn mode '" + s + "' (expected anchor-ablation|negative-guidance)");
}

std::string to_string(UnlearnMode mode) {
  return mode == UnlearnMode::AnchorAblation ? "anchor-ablation" : "negative-guidance";
}

void UnlearnSpec::validate(std::size_t concept_count) const {
  const int n = static_cast<int>(concept_count);
  if (target <= kNullConcept || target >= n)
    throw std::invalid_argument("unlearn target " + std::to_string(target) + " is not a real concept id");
  if (anchor < 0 || anchor >= n) throw std::invalid_argument("unlearn anchor " + std::to_string(anchor) + " is unknown");
  if (mode == UnlearnMode::AnchorAblation && anchor == target)
    throw std::invalid_argument("unlearn anchor must differ from the target");
  if (!(guidance_eta >= 0.0)) throw std::invalid_argument("negative guidance eta must be >= 0");
}

std::size_t RowStack::add(const Tensor& x, std::span<const int> t, std::span<const int> c) {
  if (x.rank() != 2 || x.dim(0) != t.size() || t.size() != c.size())
    throw ShapeError("row stack: x " + shape_str(x.shape()) + " with " + std::to_string(t.size()) + " timesteps and " +
                     std::to_string(c.size()) + " concept ids");
  if (rows() && x.dim(1) != x_.dim(1))
    throw ShapeError("row stack: width " + std::to_string(x.dim(1)) + " vs " + std::to_string(x_.dim(1)));
  Tensor grown(Shape{rows() + x.dim(0), x.dim(1)});
  std::copy(x_.data().begin(), x_.data().end(), grown.data().begin());
  std::copy(x.data().begin(), x.data().end(), grown.data().begin() + static_cast<std::ptrdiff_t>(x_.size()));
  x_ = std::move(grown);
  begins_.push_back(t_.size());
  counts_.push_back(t.size());
  t_.insert(t_.end(), t.begin(), t.end());
  c_.insert(c_.end(), c.begin(), c.end());
  return begins_.size() - 1;
}

Var RowStack::slice(const Var& v, std::size_t segment) const {
  if (begin(segment) == 0 && count(segment) == v.value().dim(0)) return v;
  return slice_rows(v, begin(segment), begin(segment) + count(segment));
}

Tensor RowStack::slice(const Tensor& v, std::size_t segment) const {
  const std::size_t w = v.dim(1);
  Tensor out(Shape{count(segment), w});
  std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(begin(segment) * w), out.size(), out.data().begin());
  return out;
}

TapeTrace RowStack::slice(const TapeTrace& trace, std::size_t segment) const {
  TapeTrace out;
  for (const auto& [idx, v] : trace) out.emplace_back(idx, slice(v, segment));
  return out;
}

FeatureTrace RowStack::slice(const FeatureTrace& trace, std::size_t segment) const {
  FeatureTrace out;
  for (const auto& [idx, v] : trace) out.emplace_back(idx, slice(v, segment));
  return out;
}

Var out_kd_from(const Var& student_eps, const Tensor& teacher_eps) {
  if (student_eps.value().shape() != teacher_eps.shape())
    throw ShapeError("out-KD: student " + shape_str(student_eps.value().shape()) + " vs teacher " +
                     shape_str(teacher_eps.shape()));
  return row_sq_error(student_eps, student_eps.tape()->constant(teacher_eps));
}

Var feat_kd_from(const TapeTrace& student, const FeatureTrace& teacher) {
  if (student.size() != teacher.size())
    throw ShapeError("feature-KD: student has " + std::to_string(student.size()) + " taps, teacher has " +
                     std::to_string(teacher.size()));
  if (student.empty()) throw ShapeError("feature-KD: no taps configured");
  Var total;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const auto& [si, sv] = student[i];
    const auto& [ti, tv] = teacher[i];
    if (si != ti || sv.value().shape() != tv.shape())
      throw ShapeError("feature-KD: tap " + std::to_string(si) + " " + shape_str(sv.value().shape()) +
                       " vs teacher tap " + std::to_string(ti) + " " + shape_str(tv.shape()));
    const Var term = row_sq_error(sv, sv.tape()->constant(tv));
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

Var ft_loss_from(const Prediction& student, const FrozenPrediction* teacher, const DiffusionBatch& batch,
                 const NoiseSchedule& sched, const FtWeights& w) {
  w.validate();
  Var loss = scale(diffusion_loss_from(student.eps, batch, sched), w.diff);
  if (!w.distills()) return loss;
  if (!teacher) throw std::invalid_argument("fine-tune loss: distillation weights set but no teacher outputs");
  if (w.outkd != 0.0) loss = add(loss, scale(out_kd_from(student.eps, teacher->eps), w.outkd));
  if (w.featkd != 0.0) loss = add(loss, scale(feat_kd_from(student.trace, teacher->trace), w.featkd));
  return loss;
}

Var out_kd_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                const NoiseSchedule& sched) {
  const Tensor x_t = forward_noise(batch, sched);
  const Tensor target = teacher.evaluate(x_t, batch.t, batch.c).eps;
  return out_kd_from(student.predict(tape, x_t, batch.t, batch.c).eps, target);
}

Var feat_kd_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                 const NoiseSchedule& sched) {
  const Tensor x_t = forward_noise(batch, sched);
  const FeatureTrace target = teacher.evaluate(x_t, batch.t, batch.c).trace;
  return feat_kd_from(student.predict(tape, x_t, batch.t, batch.c).trace, target);
}

Var ft_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
            const NoiseSchedule& sched, const FtWeights& w) {
  const Tensor x_t = forward_noise(batch, sched);
  FrozenPrediction frozen;
  if (w.distills()) frozen = teacher.evaluate(x_t, batch.t, batch.c);
  const Prediction p = student.predict(tape, x_t, batch.t, batch.c);
  return ft_loss_from(p, w.distills() ? &frozen : nullptr, batch, sched, w);
}

double ft_loss_value(const Denoiser* teacher, const Denoiser& student, const DiffusionBatch& batch,
                     const NoiseSchedule& sched, const FtWeights& w) {
  const Tensor x_t = forward_noise(batch, sched);
  FrozenPrediction frozen;
  if (w.distills()) {
    if (!teacher) throw std::invalid_argument("fine-tune loss: distillation weights set but no teacher");
    frozen = teacher->evaluate(x_t, batch.t, batch.c);
  }
  const FrozenPrediction s = student.evaluate(x_t, batch.t, batch.c);
  Tape scratch;
  Prediction p{scratch.constant(s.eps), {}};
  for (const auto& [idx, v] : s.trace) p.trace.emplace_back(idx, scratch.constant(v));
  return ft_loss_from(p, w.distills() ? &frozen : nullptr, batch, sched, w).value().item();
}

void check_unlearn_batch(const DiffusionBatch& batch, const UnlearnSpec& spec) {
  for (int c : batch.c)
    if (c != spec.target)
      throw std::invalid_argument("unlearning batch contains concept " + std::to_string(c) + ", expected only " +
                                  std::to_string(spec.target));
}

std::size_t push_unlearn_rows(RowStack& stack, const Tensor& x_t, std::span<const int> t, const UnlearnSpec& spec) {
  const std::size_t n = t.size();
  if (spec.mode == UnlearnMode::AnchorAblation) return stack.add(x_t, t, std::vector<int>(n, spec.anchor));
  const std::size_t first = stack.add(x_t, t, std::vector<int>(n, spec.target));
  stack.add(x_t, t, std::vector<int>(n, kNullConcept));
  return first;
}

Tensor unlearn_target_from(const RowStack& stack, const Tensor& frozen_eps, std::size_t first_segment,
                           const UnlearnSpec& spec) {
  if (spec.mode == UnlearnMode::AnchorAblation) return stack.slice(frozen_eps, first_segment);
  const Tensor e_c = stack.slice(frozen_eps, first_segment);
  Tensor target = stack.slice(frozen_eps, first_segment + 1);
  for (std::size_t i = 0; i < target.size(); ++i) target[i] -= spec.guidance_eta * (e_c[i] - target[i]);
  return target;
}

namespace {

Var cu_loss_impl(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                 const UnlearnSpec& spec, const NoiseSchedule& sched) {
  spec.validate(student.config().concept_count);
  check_unlearn_batch(batch, spec);
  const Tensor x_t = forward_noise(batch, sched);
  RowStack frozen_rows;
  const std::size_t first = push_unlearn_rows(frozen_rows, x_t, batch.t, spec);
  const Tensor frozen = teacher.evaluate(frozen_rows.x(), frozen_rows.t(), frozen_rows.c()).eps;
  const Tensor target = unlearn_target_from(frozen_rows, frozen, first, spec);
  const Var eps = student.predict(tape, x_t, batch.t, batch.c).eps;
  return row_sq_error(eps, tape.constant(target));
}

}  // namespace

Var cu_anchor_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
                   const UnlearnSpec& spec, const NoiseSchedule& sched) {
  if (spec.mode != UnlearnMode::AnchorAblation) throw std::invalid_argument("cu_anchor_loss needs anchor-ablation mode");
  return cu_loss_impl(teacher, student, tape, batch, spec, sched);
}

Var cu_negative_guidance_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape,
                              const DiffusionBatch& batch, const UnlearnSpec& spec, const NoiseSchedule& sched) {
  if (spec.mode != UnlearnMode::NegativeGuidance)
    throw std::invalid_argument("cu_negative_guidance_loss needs negative-guidance mode");
  return cu_loss_impl(teacher, student, tape, batch, spec, sched);
}

Var cu_loss(const Denoiser& teacher, const Denoiser& student, Tape& tape, const DiffusionBatch& batch,
            const UnlearnSpec& spec, const NoiseSchedule& sched) {
  return cu_loss_impl(teacher, student, tape, batch, spec, sched);
}

}  // namespace blu
