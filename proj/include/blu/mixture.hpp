// SPDX-License-Identifier: Apache-2.0
//
// Synthetic concept data: one Gaussian component per real concept id
// (1..C-1). Concept 0 is the null concept and has no component of its own.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "blu/diffusion.hpp"
#include "blu/rng.hpp"
#include "blu/tensor.hpp"

namespace blu {

struct MixtureComponent {
  std::vector<double> mean;
  Tensor cov;  ///< [d×d], symmetric PSD
  double weight = 0.0;
};

struct MixtureSpec {
  std::size_t concept_count = 9;              ///< includes the null concept
  std::vector<MixtureComponent> components;   ///< index i holds concept i + 1
  double data_std = 1.0;                      ///< global scale applied to every sample

  std::size_t dim() const { return components.empty() ? 0 : components.front().mean.size(); }
  const MixtureComponent& component(int concept_id) const;
  std::vector<int> real_concepts() const;
  void validate() const;
  bool operator==(const MixtureSpec& other) const;
};

/// Null plus `components` isotropic Gaussians equally spaced on a circle.
MixtureSpec circle_mixture(std::size_t components = 8, double radius = 5.0, double variance = 0.15);

struct LabeledDataset {
  Tensor x;            ///< [n×d]
  std::vector<int> c;  ///< concept id per row
};

/// n rows from one component.
Tensor sample_component(const MixtureSpec& spec, int concept_id, std::size_t n, Stream& rng);

/// n rows per real concept, grouped by concept in id order.
LabeledDataset gen_dataset(const MixtureSpec& spec, std::size_t n_per_concept, Stream& rng);

/// n rows with concepts drawn from `concepts` in proportion to their weights.
LabeledDataset sample_labeled(const MixtureSpec& spec, std::span<const int> concepts, std::size_t n, Stream& rng);

/// Fine-tuning minibatch: labeled rows from `concepts`, each label replaced by
/// the null concept with probability uncond_drop, then fresh (t, eps).
DiffusionBatch sample_ft_batch(const MixtureSpec& spec, std::span<const int> concepts, double uncond_drop,
                               std::size_t n, const NoiseSchedule& sched, Stream& rng);

/// Minibatch drawn from a single concept, labeled with that concept.
DiffusionBatch sample_concept_batch(const MixtureSpec& spec, int concept_id, std::size_t n,
                                    const NoiseSchedule& sched, Stream& rng);

}  // namespace blu
