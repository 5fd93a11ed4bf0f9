// SPDX-License-Identifier: Apache-2.0

#include "blu/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "blu/rng.hpp"

namespace blu {

GradCheckResult finite_diff_check(const LossBuilder& f, ParamStore& store, const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  store.zero_grad();
  {
    Tape tape;
    Var loss = f(tape, store);
    tape.backward(loss);
  }
  ParamStore analytic = store;

  auto eval = [&]() {
    Tape tape;
    return f(tape, store).value().item();
  };

  GradCheckResult res;
  Stream pick(opts.seed);
  for (const auto& name : store.names()) {
    Tensor& value = store.value(name);
    std::vector<std::size_t> idx(value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_entries_per_param && idx.size() > opts.max_entries_per_param) {
      for (std::size_t i = 0; i < opts.max_entries_per_param; ++i)
        std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
      idx.resize(opts.max_entries_per_param);
    }
    for (std::size_t i : idx) {
      const double saved = value[i];
      value[i] = saved + opts.h;
      const double up = eval();
      value[i] = saved - opts.h;
      const double down = eval();
      value[i] = saved;
      const double fd = (up - down) / (2.0 * opts.h);
      const double ad = analytic.grad(name)[i];
      res.max_rel_error = std::max(res.max_rel_error, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
      ++res.entries_checked;
    }
  }
  store.zero_grad();
  return res;
}

}  // namespace blu
