// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation. A Tape records every primitive
// evaluated through it; backward() walks the record once in reverse order.
// Tapes are rebuilt per forward pass and are not reused across steps.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "blu/param_store.hpp"
#include "blu/tensor.hpp"

namespace blu {

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Local gradient rule: given dL/d(node), add dL/d(parent) into each non-null
/// entry of `parent_grads` (same order as the node's parents).
using BackwardFn = std::function<void(const Tensor& upstream, std::span<Tensor* const> parent_grads)>;

/// Result of a backward pass.
class Gradients {
 public:
  /// Gradient of the root with respect to `v`; zero tensor if unreached.
  Tensor of(const Var& v) const;
  std::size_t visited() const { return visited_; }

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
  std::vector<Shape> shapes_;
  std::size_t visited_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Free leaf that requires a gradient (read it back from Gradients).
  Var variable(Tensor value);
  /// Leaf bound to a ParamStore entry; backward() adds into its accumulator.
  Var param(ParamStore& store, const std::string& name);

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, const char* op);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Names of every ParamStore entry bound on this tape, in binding order.
  std::vector<std::string> bound_params() const;

  /// Reverse sweep from a scalar root. Store-bound leaves accumulate into the
  /// store (callers zero explicitly).
  Gradients backward(const Var& root);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn fn;
    const char* op = "";
    bool requires_grad = false;
    ParamStore* store = nullptr;
    std::string param_name;
  };
  std::vector<Node> nodes_;
};

// Primitives. Binary elementwise ops accept equal shapes or a right operand
// whose shape is a trailing suffix of the left operand's (e.g. bias [n] onto
// [B×n]); the result takes the left operand's shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var sum(const Var& a);
Var mean(const Var& a);
Var relu(const Var& a);
Var silu(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
/// Σ aᵢ², a scalar.
Var sq_norm(const Var& a);
/// Concatenate rank-2 operands along axis 0 or 1.
Var concat(std::span<const Var> parts, std::size_t axis);
/// Rows [begin, end) of a rank-2 operand.
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
/// Rows of `table` [V×D] picked by `ids`; result [ids.size()×D].
Var embedding(const Var& table, std::span<const int> ids);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace blu
