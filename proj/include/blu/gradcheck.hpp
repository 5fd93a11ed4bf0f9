// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient oracle. Independent of the tape: it only ever
// reads the scalar value of the loss, never a recorded gradient rule.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

#include "blu/autodiff.hpp"
#include "blu/param_store.hpp"

namespace blu {

/// Builds a scalar loss from the parameters bound on the given tape. Must be
/// deterministic given the store (fix every random draw outside the builder).
using LossBuilder = std::function<Var(Tape&, ParamStore&)>;

struct GradCheckOptions {
  double h = 1e-5;
  /// Check at most this many entries per tensor (0 = all). Entries are picked
  /// with a fixed-seed stream so runs are reproducible.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
};

/// max over checked entries of |g_auto - g_fd| / max(1, |g_fd|).
///
/// Points where the loss is non-smooth (a relu kink exactly at an evaluation
/// point) are outside the contract; perturb the point before checking.
GradCheckResult finite_diff_check(const LossBuilder& f, ParamStore& store, const GradCheckOptions& opts = {});

}  // namespace blu
