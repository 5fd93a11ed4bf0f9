// SPDX-License-Identifier: Apache-2.0

#include "blu/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "blu/denoiser.hpp"

namespace blu {

PruneScope parse_prune_scope(const std::string& s) {
  if (s == "global") return PruneScope::Global;
  if (s == "per-tensor") return PruneScope::PerTensor;
  throw std::invalid_argument("unknown prune scope '" + s + "' (expected global|per-tensor)");
}

std::string to_string(PruneScope scope) { return scope == PruneScope::Global ? "global" : "per-tensor"; }

std::int64_t PruneMask::kept() const {
  std::int64_t n = 0;
  for (const auto& [_, m] : masks)
    for (double v : m->data()) n += v != 0.0;
  return n;
}

std::size_t PruneMask::size() const {
  std::size_t n = 0;
  for (const auto& [_, m] : masks) n += m->size();
  return n;
}

bool is_prunable(const std::string& name, const PruneOptions& opts) {
  if (opts.exempt_embeddings && name == kConceptEmbedName) return false;
  const std::string bias = ".bias";
  if (opts.exempt_biases && name.size() >= bias.size() &&
      name.compare(name.size() - bias.size(), bias.size(), bias) == 0)
    return false;
  return true;
}

namespace {

struct Entry {
  double magnitude;
  std::size_t tensor;
  std::size_t index;
};

std::size_t keep_count(double budget, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::ceil(budget * static_cast<double>(n) - 1e-9)));
}

void keep_largest(std::vector<Entry>& entries, std::size_t keep, std::vector<std::shared_ptr<Tensor>>& out) {
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.magnitude > b.magnitude; });
  for (std::size_t i = 0; i < keep; ++i) (*out[entries[i].tensor])[entries[i].index] = 1.0;
}

}  // namespace

PruneMask MagnitudePrune::compute(const ParamStore& store, const PruneOptions& opts) const {
  if (!(opts.budget >= 0.0 && opts.budget <= 1.0))
    throw std::invalid_argument("prune budget must lie in [0, 1], got " + std::to_string(opts.budget));
  const auto names = store.names();
  std::vector<std::shared_ptr<Tensor>> masks;
  std::vector<Entry> pool;
  std::size_t pool_size = 0;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const Tensor& v = store.value(names[k]);
    const bool prunable = is_prunable(names[k], opts);
    masks.push_back(std::make_shared<Tensor>(v.shape(), prunable ? 0.0 : 1.0));
    if (!prunable) continue;
    std::vector<Entry> local;
    for (std::size_t i = 0; i < v.size(); ++i) local.push_back({std::abs(v[i]), k, i});
    if (opts.scope == PruneScope::PerTensor) {
      keep_largest(local, keep_count(opts.budget, local.size()), masks);
    } else {
      pool_size += local.size();
      pool.insert(pool.end(), local.begin(), local.end());
    }
  }
  if (opts.scope == PruneScope::Global) keep_largest(pool, keep_count(opts.budget, pool_size), masks);

  PruneMask out;
  for (std::size_t k = 0; k < names.size(); ++k) out.masks.emplace(names[k], std::move(masks[k]));
  return out;
}

PruneReport make_report(const ParamStore& store, const PruneMask& mask, const PruneOptions& opts,
                        const std::string& strategy) {
  PruneReport r;
  r.strategy = strategy;
  r.budget = opts.budget;
  r.scope = opts.scope;
  for (const auto& name : store.names()) {
    const auto it = mask.masks.find(name);
    if (it == mask.masks.end()) throw std::invalid_argument("mask has no entry for '" + name + "'");
    std::int64_t kept = 0;
    for (double m : it->second->data()) kept += m != 0.0;
    const auto n = static_cast<std::int64_t>(it->second->size());
    r.per_tensor_kept_fraction[name] = n ? static_cast<double>(kept) / static_cast<double>(n) : 1.0;
    if (!is_prunable(name, opts)) {
      r.exempt.push_back(name);
      continue;
    }
    r.prunable_entries += n;
    r.kept_entries += kept;
  }
  r.global_kept_fraction =
      r.prunable_entries ? static_cast<double>(r.kept_entries) / static_cast<double>(r.prunable_entries) : 1.0;
  return r;
}

std::pair<PruneMask, PruneReport> magnitude_prune(const ParamStore& store, const PruneOptions& opts) {
  MagnitudePrune strategy;
  PruneMask mask = strategy.compute(store, opts);
  PruneReport report = make_report(store, mask, opts, strategy.name());
  return {std::move(mask), std::move(report)};
}

void apply_mask(ParamStore& store, const PruneMask& mask) {
  const auto names = store.names();
  if (names.size() != mask.masks.size())
    throw std::invalid_argument("mask layout has " + std::to_string(mask.masks.size()) + " tensors, store has " +
                                std::to_string(names.size()));
  for (const auto& name : names) {
    const auto it = mask.masks.find(name);
    if (it == mask.masks.end()) throw std::invalid_argument("mask has no entry for '" + name + "'");
    if (it->second->shape() != store.value(name).shape())
      throw ShapeError("mask for '" + name + "' has shape " + shape_str(it->second->shape()) + ", parameter has " +
                       shape_str(store.value(name).shape()));
  }
  for (const auto& name : names) store.attach_mask(name, mask.masks.at(name));
}

PruneMask mask_of(const ParamStore& store) {
  PruneMask out;
  for (const auto& [name, p] : store)
    out.masks.emplace(name, p.mask ? p.mask : std::make_shared<const Tensor>(p.value.shape(), 1.0));
  return out;
}

}  // namespace blu
