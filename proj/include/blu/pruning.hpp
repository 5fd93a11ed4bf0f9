// SPDX-License-Identifier: Apache-2.0
//
// Sparsity constraint ||theta||_0 <= R realized as a fixed binary mask.
// R is the kept fraction of prunable entries.

#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "blu/param_store.hpp"

namespace blu {

enum class PruneScope { Global, PerTensor };
PruneScope parse_prune_scope(const std::string& s);
std::string to_string(PruneScope scope);

struct PruneOptions {
  double budget = 0.8;  ///< kept fraction R in [0, 1]
  PruneScope scope = PruneScope::Global;
  bool exempt_embeddings = true;
  bool exempt_biases = true;
};

/// One binary tensor per store entry; exempt entries are all ones.
struct PruneMask {
  std::map<std::string, std::shared_ptr<const Tensor>> masks;

  std::int64_t kept() const;
  std::size_t size() const;
};

struct PruneReport {
  std::string strategy;
  double budget = 1.0;
  PruneScope scope = PruneScope::Global;
  double global_kept_fraction = 1.0;  ///< over prunable entries
  std::int64_t prunable_entries = 0;
  std::int64_t kept_entries = 0;
  std::map<std::string, double> per_tensor_kept_fraction;
  std::vector<std::string> exempt;
};

/// Strategy interface: (store, options) -> mask.
class PruneStrategy {
 public:
  virtual ~PruneStrategy() = default;
  virtual std::string name() const = 0;
  virtual PruneMask compute(const ParamStore& store, const PruneOptions& opts) const = 0;
};

/// Keeps the ceil(R n) largest-magnitude entries, globally over all prunable
/// tensors or separately per tensor. Ties go to the earlier (name, index).
class MagnitudePrune final : public PruneStrategy {
 public:
  std::string name() const override { return "magnitude"; }
  PruneMask compute(const ParamStore& store, const PruneOptions& opts) const override;
};

bool is_prunable(const std::string& name, const PruneOptions& opts);

PruneReport make_report(const ParamStore& store, const PruneMask& mask, const PruneOptions& opts,
                        const std::string& strategy);

std::pair<PruneMask, PruneReport> magnitude_prune(const ParamStore& store, const PruneOptions& opts);

/// value <- value * mask, and attaches the mask so every later update is masked.
void apply_mask(ParamStore& store, const PruneMask& mask);

/// Mask currently attached to a store (all-ones for unmasked entries).
PruneMask mask_of(const ParamStore& store);

}  // namespace blu
