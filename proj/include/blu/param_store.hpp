// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "blu/tensor.hpp"

namespace blu {

/// One named parameter: value, gradient accumulator, optional binary mask.
struct Param {
  Tensor value;
  Tensor grad;
  std::shared_ptr<const Tensor> mask;  ///< entries in {0, 1}; null means dense
};

/// Named parameter tensors. Copying a store copies values and gradients; masks
/// are immutable and shared between copies.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  Tensor& value(const std::string& name) { return at(name).value; }
  const Tensor& value(const std::string& name) const { return at(name).value; }
  Tensor& grad(const std::string& name) { return at(name).grad; }
  const Tensor& grad(const std::string& name) const { return at(name).grad; }

  /// Names in a fixed (lexicographic) order.
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  std::int64_t nnz() const;

  void zero_grad();
  /// Attaches the mask and zeroes masked entries of the value.
  void attach_mask(const std::string& name, std::shared_ptr<const Tensor> mask);
  bool has_mask(const std::string& name) const { return at(name).mask != nullptr; }

  /// True when both stores hold the same names with bitwise-identical values.
  bool identical_values(const ParamStore& other) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Param> params_;
};

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer_kind(const std::string& s);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Applies gradient steps to a store. Every update is multiplied by the
/// parameter's mask and the value is re-masked afterwards, so masked entries
/// stay exactly zero.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}
  void step(ParamStore& store);
  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

}  // namespace blu
