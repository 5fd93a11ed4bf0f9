// SPDX-License-Identifier: Apache-2.0

#include "blu/mixture.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace blu {

namespace {

// Lower-triangular L with L L^T = cov; zero pivots are allowed (PSD).
Tensor psd_cholesky(const Tensor& cov) {
  const std::size_t d = cov.dim(0);
  Tensor L(Shape{d, d});
  for (std::size_t j = 0; j < d; ++j) {
    double diag = cov.at(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= L.at(j, k) * L.at(j, k);
    if (diag < -1e-12) throw std::invalid_argument("mixture covariance is not positive semi-definite");
    L.at(j, j) = diag > 0.0 ? std::sqrt(diag) : 0.0;
    for (std::size_t i = j + 1; i < d; ++i) {
      double v = cov.at(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= L.at(i, k) * L.at(j, k);
      if (L.at(j, j) > 0.0) {
        L.at(i, j) = v / L.at(j, j);
      } else if (std::abs(v) > 1e-12) {
        throw std::invalid_argument("mixture covariance is not positive semi-definite");
      }
    }
  }
  return L;
}

void fill_rows(const MixtureSpec& spec, int concept_id, Tensor& out, std::size_t row, std::size_t n, Stream& rng) {
  const MixtureComponent& comp = spec.component(concept_id);
  const Tensor L = psd_cholesky(comp.cov);
  const std::size_t d = spec.dim();
  std::vector<double> z(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : z) v = rng.normal();
    for (std::size_t j = 0; j < d; ++j) {
      double v = comp.mean[j];
      for (std::size_t k = 0; k <= j; ++k) v += L.at(j, k) * z[k];
      out.at(row + i, j) = spec.data_std * v;
    }
  }
}

}  // namespace

const MixtureComponent& MixtureSpec::component(int concept_id) const {
  if (concept_id < 1 || static_cast<std::size_t>(concept_id) > components.size())
    throw std::out_of_range("concept " + std::to_string(concept_id) + " has no mixture component");
  return components[static_cast<std::size_t>(concept_id) - 1];
}

std::vector<int> MixtureSpec::real_concepts() const {
  std::vector<int> ids;
  for (std::size_t i = 1; i < concept_count; ++i) ids.push_back(static_cast<int>(i));
  return ids;
}

void MixtureSpec::validate() const {
  if (concept_count < 2 || components.size() != concept_count - 1)
    throw std::invalid_argument("mixture: need one component per real concept (" + std::to_string(concept_count - 1) +
                                "), got " + std::to_string(components.size()));
  if (!(data_std > 0.0)) throw std::invalid_argument("mixture: data_std must be positive");
  const std::size_t d = dim();
  if (d == 0) throw std::invalid_argument("mixture: empty means");
  double total = 0.0;
  for (const auto& c : components) {
    if (c.mean.size() != d || c.cov.shape() != Shape{d, d})
      throw ShapeError("mixture: component of dimension " + std::to_string(c.mean.size()) + " with covariance " +
                       shape_str(c.cov.shape()) + ", expected " + std::to_string(d));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (c.cov.at(i, j) != c.cov.at(j, i)) throw std::invalid_argument("mixture: covariance is not symmetric");
    psd_cholesky(c.cov);
    if (!(c.weight >= 0.0)) throw std::invalid_argument("mixture: negative weight");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("mixture: weights must sum to 1");
}

bool MixtureSpec::operator==(const MixtureSpec& other) const {
  if (concept_count != other.concept_count || data_std != other.data_std ||
      components.size() != other.components.size())
    return false;
  for (std::size_t i = 0; i < components.size(); ++i) {
    const auto &a = components[i], &b = other.components[i];
    if (a.mean != b.mean || a.weight != b.weight || !a.cov.identical(b.cov)) return false;
  }
  return true;
}

MixtureSpec circle_mixture(std::size_t components, double radius, double variance) {
  MixtureSpec spec;
  spec.concept_count = components + 1;
  for (std::size_t k = 0; k < components; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(components);
    MixtureComponent c;
    c.mean = {radius * std::cos(angle), radius * std::sin(angle)};
    c.cov = Tensor::matrix(2, 2, {variance, 0.0, 0.0, variance});
    c.weight = 1.0 / static_cast<double>(components);
    spec.components.push_back(std::move(c));
  }
  return spec;
}

Tensor sample_component(const MixtureSpec& spec, int concept_id, std::size_t n, Stream& rng) {
  Tensor out(Shape{n, spec.dim()});
  fill_rows(spec, concept_id, out, 0, n, rng);
  return out;
}

LabeledDataset gen_dataset(const MixtureSpec& spec, std::size_t n_per_concept, Stream& rng) {
  if (n_per_concept == 0) throw std::invalid_argument("gen_dataset: n must be >= 1");
  spec.validate();
  const auto ids = spec.real_concepts();
  LabeledDataset ds;
  ds.x = Tensor(Shape{ids.size() * n_per_concept, spec.dim()});
  for (std::size_t k = 0; k < ids.size(); ++k) {
    Stream sub = rng.split(static_cast<std::uint64_t>(ids[k]));
    fill_rows(spec, ids[k], ds.x, k * n_per_concept, n_per_concept, sub);
    ds.c.insert(ds.c.end(), n_per_concept, ids[k]);
  }
  return ds;
}

LabeledDataset sample_labeled(const MixtureSpec& spec, std::span<const int> concepts, std::size_t n, Stream& rng) {
  if (concepts.empty()) throw std::invalid_argument("sample_labeled: empty concept list");
  std::vector<double> cdf;
  double total = 0.0;
  for (int c : concepts) cdf.push_back(total += spec.component(c).weight);
  if (!(total > 0.0)) throw std::invalid_argument("sample_labeled: selected concepts have zero weight");
  LabeledDataset ds;
  ds.x = Tensor(Shape{n, spec.dim()});
  ds.c.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * total;
    std::size_t k = 0;
    while (k + 1 < cdf.size() && u >= cdf[k]) ++k;
    ds.c[i] = concepts[k];
    fill_rows(spec, concepts[k], ds.x, i, 1, rng);
  }
  return ds;
}

DiffusionBatch sample_ft_batch(const MixtureSpec& spec, std::span<const int> concepts, double uncond_drop,
                               std::size_t n, const NoiseSchedule& sched, Stream& rng) {
  LabeledDataset ds = sample_labeled(spec, concepts, n, rng);
  for (int& c : ds.c)
    if (rng.bernoulli(uncond_drop)) c = kNullConcept;
  return make_batch(std::move(ds.x), std::move(ds.c), sched, rng);
}

DiffusionBatch sample_concept_batch(const MixtureSpec& spec, int concept_id, std::size_t n,
                                    const NoiseSchedule& sched, Stream& rng) {
  Tensor x = sample_component(spec, concept_id, n, rng);
  return make_batch(std::move(x), std::vector<int>(n, concept_id), sched, rng);
}

}  // namespace blu
