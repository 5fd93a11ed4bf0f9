// SPDX-License-Identifier: Apache-2.0

#include "blu/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace blu {

namespace {

double mean_pair_distance(const Tensor& a, const Tensor& b) {
  const std::size_t d = a.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    const double* ai = &a.data()[i * d];
    double row = 0.0;
    for (std::size_t j = 0; j < b.dim(0); ++j) {
      const double* bj = &b.data()[j * d];
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += (ai[k] - bj[k]) * (ai[k] - bj[k]);
      row += std::sqrt(s);
    }
    total += row;
  }
  return total / (static_cast<double>(a.dim(0)) * static_cast<double>(b.dim(0)));
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

double energy_distance(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("energy_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.dim(0) < 2 || b.dim(0) < 2) throw std::invalid_argument("energy_distance: each set needs at least 2 points");
  const double v = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
  return std::max(0.0, v);
}

DiffusionBatch make_heldout(const MixtureSpec& spec, std::span<const int> concepts, std::size_t n,
                            const NoiseSchedule& sched, Stream rng) {
  LabeledDataset ds = sample_labeled(spec, concepts, n, rng);
  return make_batch(std::move(ds.x), std::move(ds.c), sched, rng);
}

double EvalReport::mean_retention() const {
  if (retention_energy.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [c, e] : retention_energy) s += e;
  return s / static_cast<double>(retention_energy.size());
}

std::string spec_digest(const MixtureSpec& spec, int target) {
  std::string text = std::to_string(spec.concept_count) + "|" + fmt_double(spec.data_std) + "|" + std::to_string(target);
  for (const auto& c : spec.components) {
    for (double v : c.mean) text += "|" + fmt_double(v);
    for (double v : c.cov.data()) text += "|" + fmt_double(v);
    text += "|" + fmt_double(c.weight);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

EvalReport evaluate(const Denoiser& model, const Denoiser* teacher, const MixtureSpec& spec, int target,
                    const NoiseSchedule& sched, const EvalOptions& opts, std::uint64_t seed) {
  spec.validate();
  if (opts.samples < 500) throw std::invalid_argument("evaluate: need at least 500 samples per concept");
  const Stream root(seed);
  const Stream samples = root.split("samples"), reference = root.split("reference");
  EvalReport r;
  r.seed = seed;
  r.target = target;
  r.spec_digest = spec_digest(spec, target);
  for (int c : spec.real_concepts()) {
    const Tensor model_x = ancestral_sample(model, c, opts.samples, sched, opts.guidance, samples.split(c));
    Stream ref = reference.split(static_cast<std::uint64_t>(c));
    const Tensor true_x = sample_component(spec, c, opts.samples, ref);
    const double e = energy_distance(model_x, true_x);
    if (c == target)
      r.removal_energy = e;
    else
      r.retention_energy[c] = e;
  }
  std::vector<int> concepts = opts.heldout_concepts.empty() ? spec.real_concepts() : opts.heldout_concepts;
  const DiffusionBatch heldout = make_heldout(spec, concepts, opts.heldout_n, sched, root.split("heldout"));
  r.heldout_diff_loss = diffusion_loss_value(model, heldout, sched);
  const FtWeights w = teacher ? opts.ft_weights : FtWeights{opts.ft_weights.diff, 0.0, 0.0};
  r.heldout_ft_loss = ft_loss_value(teacher, model, heldout, sched, w);
  return r;
}

std::vector<RankingRow> compare_runs(const std::vector<EvalReport>& reports) {
  for (const auto& r : reports)
    if (r.spec_digest != reports.front().spec_digest || r.target != reports.front().target)
      throw std::invalid_argument("compare_runs: report '" + r.label + "' uses a different mixture or target");
  std::vector<RankingRow> rows;
  for (const auto& r : reports) rows.push_back({r.label, r.removal_energy, r.mean_retention(), true, {}});
  for (auto& a : rows)
    for (auto& b : rows) {
      if (&a == &b) continue;
      const bool no_worse = a.removal_energy >= b.removal_energy && a.mean_retention <= b.mean_retention;
      const bool better = a.removal_energy > b.removal_energy || a.mean_retention < b.mean_retention;
      if (no_worse && better) {
        a.dominates.push_back(b.label);
        b.pareto_optimal = false;
      }
    }
  std::stable_sort(rows.begin(), rows.end(), [](const RankingRow& a, const RankingRow& b) {
    if (a.removal_energy != b.removal_energy) return a.removal_energy > b.removal_energy;
    return a.mean_retention < b.mean_retention;
  });
  return rows;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_report_csv(std::ostream& os, const std::vector<EvalReport>& reports) {
  os << "label,seed,config_digest,target,removal_energy,mean_retention_energy,heldout_diff_loss,heldout_ft_loss,"
        "fwd_teacher,fwd_theta,fwd_vartheta\n";
  for (const auto& r : reports)
    os << r.label << ',' << r.seed << ',' << r.config_digest << ',' << r.target << ',' << fmt_double(r.removal_energy)
       << ',' << fmt_double(r.mean_retention()) << ',' << fmt_double(r.heldout_diff_loss) << ','
       << fmt_double(r.heldout_ft_loss) << ',' << r.fwd_teacher << ',' << r.fwd_theta << ',' << r.fwd_vartheta << '\n';
}

void write_concept_csv(std::ostream& os, const std::vector<EvalReport>& reports) {
  os << "label,seed,concept,role,energy\n";
  for (const auto& r : reports) {
    os << r.label << ',' << r.seed << ',' << r.target << ",removal," << fmt_double(r.removal_energy) << '\n';
    for (const auto& [c, e] : r.retention_energy)
      os << r.label << ',' << r.seed << ',' << c << ",retention," << fmt_double(e) << '\n';
  }
}

void write_ranking_csv(std::ostream& os, const std::vector<RankingRow>& rows) {
  os << "rank,label,removal_energy,mean_retention_energy,pareto_optimal,dominates\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string dom;
    for (const auto& d : rows[i].dominates) dom += (dom.empty() ? "" : ";") + d;
    os << i + 1 << ',' << rows[i].label << ',' << fmt_double(rows[i].removal_energy) << ','
       << fmt_double(rows[i].mean_retention) << ',' << (rows[i].pareto_optimal ? 1 : 0) << ',' << dom << '\n';
  }
}

}  // namespace blu
