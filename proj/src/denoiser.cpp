// SPDX-License-Identifier: Apache-2.0

#include "blu/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace blu {

void DenoiserConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("denoiser: input_dim must be positive");
  if (hidden.empty()) throw std::invalid_argument("denoiser: at least one hidden block is required");
  for (auto h : hidden)
    if (h == 0) throw std::invalid_argument("denoiser: hidden widths must be positive");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0)
    throw std::invalid_argument("denoiser: time_embed_dim must be even and positive");
  if (concept_count < 2) throw std::invalid_argument("denoiser: concept_count must be >= 2 (null + one concept)");
  if (concept_embed_dim == 0) throw std::invalid_argument("denoiser: concept_embed_dim must be positive");
  for (std::size_t i = 0; i < feature_taps.size(); ++i) {
    if (feature_taps[i] >= hidden.size())
      throw std::invalid_argument("denoiser: feature tap " + std::to_string(feature_taps[i]) + " is not a hidden block");
    if (i && feature_taps[i] <= feature_taps[i - 1])
      throw std::invalid_argument("denoiser: feature taps must be strictly increasing");
  }
}

std::string block_weight_name(std::size_t i) { return "block" + std::to_string(i) + ".weight"; }
std::string block_bias_name(std::size_t i) { return "block" + std::to_string(i) + ".bias"; }

Tensor embed_time(std::span<const int> t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("embed_time: dim must be even, got " + std::to_string(dim));
  const std::size_t half = dim / 2;
  Tensor out(Shape{t.size(), dim});
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(t[r]) * freq;
      out.at(r, 2 * k) = std::sin(arg);
      out.at(r, 2 * k + 1) = std::cos(arg);
    }
  }
  return out;
}

ParamStore init_params(const DenoiserConfig& cfg, Stream& rng) {
  cfg.validate();
  ParamStore store;
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = bound * (2.0 * rng.uniform() - 1.0);
    return t;
  };
  Tensor embed(Shape{cfg.concept_count, cfg.concept_embed_dim});
  for (double& v : embed.data()) v = rng.normal();
  store.add(kConceptEmbedName, std::move(embed));

  const std::size_t cond = cfg.time_embed_dim + cfg.concept_embed_dim;
  std::size_t width = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    const std::size_t fan_in = width + cond;
    store.add(block_weight_name(i), uniform(Shape{fan_in, cfg.hidden[i]}, fan_in));
    store.add(block_bias_name(i), uniform(Shape{cfg.hidden[i]}, fan_in));
    width = cfg.hidden[i];
  }
  store.add(kOutWeightName, uniform(Shape{width, cfg.input_dim}, width));
  store.add(kOutBiasName, uniform(Shape{cfg.input_dim}, width));
  return store;
}

InitMode parse_init_mode(const std::string& s) {
  if (s == "pruned-from-teacher") return InitMode::PrunedFromTeacher;
  if (s == "random") return InitMode::Random;
  throw std::invalid_argument("unknown init mode '" + s + "' (expected pruned-from-teacher|random)");
}

std::string to_string(InitMode mode) { return mode == InitMode::Random ? "random" : "pruned-from-teacher"; }

ParamStore init_student(const DenoiserConfig& cfg, const ParamStore& teacher, InitMode mode, Stream& rng) {
  if (mode == InitMode::Random) return init_params(cfg, rng);
  ParamStore student;
  for (const auto& [name, p] : teacher) student.add(name, p.value);
  return student;
}

Prediction Denoiser::forward(Tape& tape, bool trainable, const Tensor& x_t, std::span<const int> t,
                             std::span<const int> c) const {
  const DenoiserConfig& cfg = *cfg_;
  if (x_t.rank() != 2 || x_t.dim(1) != cfg.input_dim) {
    throw ShapeError("denoiser input " + shape_str(x_t.shape()) + " does not match input_dim " +
                     std::to_string(cfg.input_dim));
  }
  const std::size_t batch = x_t.dim(0);
  if (t.size() != batch || c.size() != batch) {
    throw ShapeError("denoiser: batch of " + std::to_string(batch) + " rows got " + std::to_string(t.size()) +
                     " timesteps and " + std::to_string(c.size()) + " concept ids");
  }
  for (int id : c) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.concept_count)
      throw std::out_of_range("unknown concept id " + std::to_string(id));
  }
  if (trainable && !store_) throw std::logic_error("denoiser: cannot train through a frozen parameter view");
  auto bind = [&](const std::string& name) {
    return trainable ? tape.param(*store_, name) : tape.constant(cstore_->value(name));
  };

  Prediction out;
  const Var temb = tape.constant(embed_time(t, cfg.time_embed_dim));
  const Var cemb = embedding(bind(kConceptEmbedName), c);
  Var h = tape.constant(x_t);
  std::size_t tap = 0;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    const Var parts[] = {h, temb, cemb};
    h = silu(add(matmul(concat(parts, 1), bind(block_weight_name(i))), bind(block_bias_name(i))));
    if (tap < cfg.feature_taps.size() && cfg.feature_taps[tap] == i) {
      out.trace.emplace_back(i, h);
      ++tap;
    }
  }
  out.eps = add(matmul(h, bind(kOutWeightName)), bind(kOutBiasName));
  if (counter_) {
    ++counter_->calls;
    counter_->rows += static_cast<std::int64_t>(batch);
  }
  return out;
}

Prediction Denoiser::predict(Tape& tape, const Tensor& x_t, std::span<const int> t, std::span<const int> c) const {
  return forward(tape, true, x_t, t, c);
}

FrozenPrediction Denoiser::evaluate(const Tensor& x_t, std::span<const int> t, std::span<const int> c) const {
  Tape scratch;
  Prediction p = forward(scratch, false, x_t, t, c);
  FrozenPrediction out;
  out.eps = p.eps.value();
  for (auto& [idx, v] : p.trace) out.trace.emplace_back(idx, v.value());
  return out;
}

}  // namespace blu
