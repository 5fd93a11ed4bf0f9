// SPDX-License-Identifier: Apache-2.0

#include "blu/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace blu {

void ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Tensor grad(value.shape());
  params_.emplace(name, Param{std::move(value), std::move(grad), nullptr});
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

std::int64_t ParamStore::nnz() const {
  std::int64_t n = 0;
  for (const auto& [_, p] : params_)
    for (double v : p.value.data()) n += (v != 0.0);
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

void ParamStore::attach_mask(const std::string& name, std::shared_ptr<const Tensor> mask) {
  Param& p = at(name);
  if (!mask || mask->shape() != p.value.shape()) {
    throw ShapeError("mask shape " + (mask ? shape_str(mask->shape()) : std::string("null")) +
                     " does not match parameter '" + name + "' " + shape_str(p.value.shape()));
  }
  for (double m : mask->data())
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("mask for '" + name + "' is not binary");
  p.mask = std::move(mask);
  auto v = p.value.data();
  auto m = p.mask->data();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m[i] == 0.0) v[i] = 0.0;
}

bool ParamStore::identical_values(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto it = other.params_.begin();
  for (const auto& [name, p] : params_) {
    if (name != it->first || !p.value.identical(it->second.value)) return false;
    ++it;
  }
  return true;
}

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd|adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

void Optimizer::step(ParamStore& store) {
  ++t_;
  const double lr = cfg_.lr;
  for (auto& [name, p] : store) {
    auto v = p.value.data();
    auto g = p.grad.data();
    const double* mask = p.mask ? p.mask->data().data() : nullptr;
    for (double gi : g)
      if (!std::isfinite(gi)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    if (cfg_.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = mask ? g[i] * mask[i] : g[i];
        v[i] -= lr * gi;
      }
    } else {
      auto [it, inserted] = moments_.try_emplace(name, Tensor(p.value.shape()), Tensor(p.value.shape()));
      auto m1 = it->second.first.data();
      auto m2 = it->second.second.data();
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = mask ? g[i] * mask[i] : g[i];
        m1[i] = cfg_.beta1 * m1[i] + (1.0 - cfg_.beta1) * gi;
        m2[i] = cfg_.beta2 * m2[i] + (1.0 - cfg_.beta2) * gi * gi;
        v[i] -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg_.eps);
      }
    }
    if (mask)
      for (std::size_t i = 0; i < v.size(); ++i)
        if (mask[i] == 0.0) v[i] = 0.0;
  }
}

}  // namespace blu
