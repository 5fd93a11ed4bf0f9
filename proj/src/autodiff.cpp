// SPDX-License-Identifier: Apache-2.0

#include "blu/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace blu {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an unbound Var");
  return tape_->value(id_);
}

Tensor Gradients::of(const Var& v) const {
  if (v.id() < present_.size() && present_[v.id()]) return grads_[v.id()];
  return Tensor(v.shape());
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  Var v = constant(std::move(value));
  nodes_.back().requires_grad = true;
  nodes_.back().op = "variable";
  return v;
}

Var Tape::param(ParamStore& store, const std::string& name) {
  Var v = variable(store.value(name));
  nodes_.back().store = &store;
  nodes_.back().param_name = name;
  nodes_.back().op = "param";
  return v;
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, const char* op) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op + " " + shape_str(value.shape()));
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (auto p : parents) n.requires_grad = n.requires_grad || nodes_.at(p).requires_grad;
  n.parents = std::move(parents);
  n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::vector<std::string> Tape::bound_params() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (n.store) out.push_back(n.param_name);
  return out;
}

Gradients Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::invalid_argument("backward root belongs to another tape");
  if (root.value().size() != 1) {
    throw ShapeError("backward root must be scalar, got " + shape_str(root.value().shape()));
  }
  Gradients g;
  const std::size_t n = nodes_.size();
  g.grads_.resize(n);
  g.present_.assign(n, false);
  g.grads_[root.id()] = Tensor(root.value().shape(), 1.0);
  g.present_[root.id()] = true;

  std::vector<Tensor*> parent_ptrs;
  for (std::size_t i = n; i-- > 0;) {
    ++g.visited_;
    Node& node = nodes_[i];
    if (!g.present_[i] || !node.requires_grad) continue;
    if (node.store) {
      auto acc = node.store->grad(node.param_name).data();
      auto src = g.grads_[i].data();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += src[j];
    }
    if (!node.fn) continue;
    parent_ptrs.assign(node.parents.size(), nullptr);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::size_t p = node.parents[k];
      if (!nodes_[p].requires_grad) continue;
      if (!g.present_[p]) {
        g.grads_[p] = Tensor(nodes_[p].value.shape());
        g.present_[p] = true;
      }
      parent_ptrs[k] = &g.grads_[p];
    }
    node.fn(g.grads_[i], parent_ptrs);
  }
  return g;
}

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
  return *a.tape();
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void check_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not conform");
  }
}

template <class F, class D>
Var unary(const Var& a, const char* op, F f, D dfdx) {
  Tape& tape = *a.tape();
  Tensor out(a.shape());
  auto x = a.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  const std::size_t self = tape.size();
  Tape* tp = &tape;
  return tape.record(std::move(out), {ia},
                     [tp, ia, self, dfdx](const Tensor& g, std::span<Tensor* const> pg) {
                       if (!pg[0]) return;
                       auto x = tp->value(ia).data();
                       auto y = tp->value(self).data();
                       auto gd = g.data();
                       auto d = pg[0]->data();
                       for (std::size_t i = 0; i < x.size(); ++i) d[i] += gd[i] * dfdx(x[i], y[i]);
                     },
                     op);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  check_broadcast("add", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % nb];
  return tape.record(std::move(out), {a.id(), b.id()},
                     [nb](const Tensor& g, std::span<Tensor* const> pg) {
                       auto gd = g.data();
                       if (pg[0]) {
                         auto d = pg[0]->data();
                         for (std::size_t i = 0; i < gd.size(); ++i) d[i] += gd[i];
                       }
                       if (pg[1]) {
                         auto d = pg[1]->data();
                         for (std::size_t i = 0; i < gd.size(); ++i) d[i % nb] += gd[i];
                       }
                     },
                     "add");
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  check_broadcast("sub", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i % nb];
  return tape.record(std::move(out), {a.id(), b.id()},
                     [nb](const Tensor& g, std::span<Tensor* const> pg) {
                       auto gd = g.data();
                       if (pg[0]) {
                         auto d = pg[0]->data();
                         for (std::size_t i = 0; i < gd.size(); ++i) d[i] += gd[i];
                       }
                       if (pg[1]) {
                         auto d = pg[1]->data();
                         for (std::size_t i = 0; i < gd.size(); ++i) d[i % nb] -= gd[i];
                       }
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  check_broadcast("mul", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i % nb];
  Tape* tp = &tape;
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [tp, ia, ib, nb](const Tensor& g, std::span<Tensor* const> pg) {
                       auto gd = g.data();
                       auto av = tp->value(ia).data();
                       auto bv = tp->value(ib).data();
                       if (pg[0]) {
                         auto d = pg[0]->data();
                         for (std::size_t i = 0; i < gd.size(); ++i) d[i] += gd[i] * bv[i % nb];
                       }
                       if (pg[1]) {
                         auto d = pg[1]->data();
                         for (std::size_t i = 0; i < gd.size(); ++i) d[i % nb] += gd[i] * av[i];
                       }
                     },
                     "mul");
}

Var scale(const Var& a, double s) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return tape.record(std::move(out), {a.id()},
                     [s](const Tensor& g, std::span<Tensor* const> pg) {
                       if (!pg[0]) return;
                       auto gd = g.data();
                       auto d = pg[0]->data();
                       for (std::size_t i = 0; i < gd.size(); ++i) d[i] += s * gd[i];
                     },
                     "scale");
}

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                     " do not conform");
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  Tape* tp = &tape;
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [tp, ia, ib, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
                       if (pg[0]) kernels::matmul_a_bt_acc(g.data(), tp->value(ib).data(), pg[0]->data(), m, k, n);
                       if (pg[1]) kernels::matmul_at_b_acc(tp->value(ia).data(), g.data(), pg[1]->data(), m, k, n);
                     },
                     "matmul");
}

Var sum(const Var& a) {
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape.record(Tensor::scalar(s), {a.id()},
                     [](const Tensor& g, std::span<Tensor* const> pg) {
                       if (!pg[0]) return;
                       const double gv = g.item();
                       for (double& d : pg[0]->data()) d += gv;
                     },
                     "sum");
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape.record(Tensor::scalar(s / n), {a.id()},
                     [n](const Tensor& g, std::span<Tensor* const> pg) {
                       if (!pg[0]) return;
                       const double gv = g.item() / n;
                       for (double& d : pg[0]->data()) d += gv;
                     },
                     "mean");
}

Var sq_norm(const Var& a) {
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  Tape* tp = &tape;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(s), {ia},
                     [tp, ia](const Tensor& g, std::span<Tensor* const> pg) {
                       if (!pg[0]) return;
                       const double gv = 2.0 * g.item();
                       auto x = tp->value(ia).data();
                       auto d = pg[0]->data();
                       for (std::size_t i = 0; i < x.size(); ++i) d[i] += gv * x[i];
                     },
                     "sq_norm");
}

Var relu(const Var& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var silu(const Var& a) {
  return unary(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var sin(const Var& a) {
  return unary(
      a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(const Var& a) {
  return unary(
      a, "cos", [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero operands");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape& tape = *parts[0].tape();
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  const Tensor& first = parts[0].value();
  if (first.rank() != 2) throw ShapeError("concat: operands must be rank 2, got " + shape_str(first.shape()));
  std::size_t total = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    const Tensor& pv = p.value();
    const std::size_t other = 1 - axis;
    if (pv.rank() != 2 || pv.dim(other) != first.dim(other)) {
      throw ShapeError("concat: shapes " + shape_str(first.shape()) + " and " + shape_str(pv.shape()) +
                       " do not conform along axis " + std::to_string(axis));
    }
    ids.push_back(p.id());
    widths.push_back(pv.dim(axis));
    total += pv.dim(axis);
  }
  const std::size_t rows = axis == 0 ? total : first.dim(0);
  const std::size_t cols = axis == 1 ? total : first.dim(1);
  Tensor out(Shape{rows, cols});
  auto o = out.data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].value().data();
    if (axis == 0) {
      std::copy(src.begin(), src.end(), o.begin() + offset * cols);
    } else {
      const std::size_t w = widths[k];
      for (std::size_t r = 0; r < rows; ++r)
        std::copy(src.begin() + r * w, src.begin() + (r + 1) * w, o.begin() + r * cols + offset);
    }
    offset += widths[k];
  }
  return tape.record(std::move(out), ids,
                     [widths, axis, rows, cols](const Tensor& g, std::span<Tensor* const> pg) {
                       auto gd = g.data();
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         const std::size_t w = widths[k];
                         if (pg[k]) {
                           auto d = pg[k]->data();
                           if (axis == 0) {
                             for (std::size_t i = 0; i < w * cols; ++i) d[i] += gd[offset * cols + i];
                           } else {
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < w; ++c) d[r * w + c] += gd[r * cols + offset + c];
                           }
                         }
                         offset += w;
                       }
                     },
                     "concat");
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin > end || end > av.dim(0)) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                     shape_str(av.shape()));
  }
  const std::size_t cols = av.dim(1);
  Tensor out(Shape{end - begin, cols});
  auto src = av.data();
  std::copy(src.begin() + begin * cols, src.begin() + end * cols, out.data().begin());
  return a.tape()->record(std::move(out), {a.id()},
                          [begin, cols](const Tensor& g, std::span<Tensor* const> pg) {
                            if (!pg[0]) return;
                            auto gd = g.data();
                            auto d = pg[0]->data();
                            for (std::size_t i = 0; i < gd.size(); ++i) d[begin * cols + i] += gd[i];
                          },
                          "slice_rows");
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_str(tv.shape()));
  const std::size_t vocab = tv.dim(0), width = tv.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding id " + std::to_string(id) + " outside table of " + std::to_string(vocab) +
                              " rows");
    }
  }
  Tensor out(Shape{ids.size(), width});
  auto src = tv.data();
  auto o = out.data();
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy(src.begin() + ids[r] * width, src.begin() + (ids[r] + 1) * width, o.begin() + r * width);
  std::vector<int> rows(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table.id()},
                              [rows = std::move(rows), width](const Tensor& g, std::span<Tensor* const> pg) {
                                if (!pg[0]) return;
                                auto gd = g.data();
                                auto d = pg[0]->data();
                                for (std::size_t r = 0; r < rows.size(); ++r)
                                  for (std::size_t c = 0; c < width; ++c) d[rows[r] * width + c] += gd[r * width + c];
                              },
                              "embedding");
}

}  // namespace blu
