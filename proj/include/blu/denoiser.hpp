// SPDX-License-Identifier: Apache-2.0
//
// Conditional noise predictor eps(x_t, t, c): an MLP whose hidden blocks each
// see [h, time embedding, concept embedding]. Concept id 0 is the reserved
// null (unconditional) concept.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "blu/autodiff.hpp"
#include "blu/param_store.hpp"
#include "blu/rng.hpp"
#include "blu/tensor.hpp"

namespace blu {

inline constexpr int kNullConcept = 0;

struct DenoiserConfig {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden{128, 128, 128};
  std::size_t time_embed_dim = 16;
  std::size_t concept_count = 9;  ///< includes the null concept
  std::size_t concept_embed_dim = 16;
  std::vector<std::size_t> feature_taps{1, 2};  ///< hidden-block indices

  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Parameter names used by the network.
std::string block_weight_name(std::size_t i);
std::string block_bias_name(std::size_t i);
inline const std::string kConceptEmbedName = "concept_embed";
inline const std::string kOutWeightName = "out.weight";
inline const std::string kOutBiasName = "out.bias";

/// Sinusoidal embedding, rows [sin(t f0), cos(t f0), sin(t f1), cos(t f1), ...]
/// with geometric frequencies f_k = 10000^(-k / (dim/2)).
Tensor embed_time(std::span<const int> t, std::size_t dim);

/// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights
/// and biases; standard normal concept embeddings.
ParamStore init_params(const DenoiserConfig& cfg, Stream& rng);

enum class InitMode { PrunedFromTeacher, Random };
InitMode parse_init_mode(const std::string& s);
std::string to_string(InitMode mode);

/// Student parameters: a copy of the teacher (masking happens later, in the
/// pruning module) or a fresh draw.
ParamStore init_student(const DenoiserConfig& cfg, const ParamStore& teacher, InitMode mode, Stream& rng);

/// Taps recorded on a tape, in layer order.
using TapeTrace = std::vector<std::pair<std::size_t, Var>>;
/// Tap activations as plain values, in layer order.
using FeatureTrace = std::vector<std::pair<std::size_t, Tensor>>;

struct Prediction {
  Var eps;
  TapeTrace trace;
};

struct FrozenPrediction {
  Tensor eps;
  FeatureTrace trace;
};

/// Forward-pass accounting: batched invocations and the rows they carried.
struct ForwardCounter {
  std::int64_t calls = 0;
  std::int64_t rows = 0;
};

/// Non-owning view of (config, parameters). A view built over a const store
/// is frozen: it can evaluate but never binds parameters to a tape.
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, ParamStore& store, ForwardCounter* counter = nullptr)
      : cfg_(&cfg), store_(&store), cstore_(&store), counter_(counter) {}
  Denoiser(const DenoiserConfig& cfg, const ParamStore& store, ForwardCounter* counter = nullptr)
      : cfg_(&cfg), store_(nullptr), cstore_(&store), counter_(counter) {}

  /// Trainable forward: parameters are bound as tape leaves.
  Prediction predict(Tape& tape, const Tensor& x_t, std::span<const int> t, std::span<const int> c) const;

  /// Frozen forward on a private tape; nothing is recorded on any caller tape.
  FrozenPrediction evaluate(const Tensor& x_t, std::span<const int> t, std::span<const int> c) const;

  const DenoiserConfig& config() const { return *cfg_; }
  const ParamStore& params() const { return *cstore_; }
  bool frozen() const { return store_ == nullptr; }

 private:
  Prediction forward(Tape& tape, bool trainable, const Tensor& x_t, std::span<const int> t,
                     std::span<const int> c) const;

  const DenoiserConfig* cfg_;
  ParamStore* store_;
  const ParamStore* cstore_;
  ForwardCounter* counter_;
};

}  // namespace blu
