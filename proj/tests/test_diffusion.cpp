// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <string>
#include <vector>

#include "blu/diffusion.hpp"
#include "blu/gradcheck.hpp"
#include "doctest.h"

using namespace blu;

namespace {

NoiseSchedule vp() { return NoiseSchedule::variance_preserving_linear(100, 1e-3, 0.2); }

DiffusionBatch gaussian_batch(Stream& rng, std::size_t n, const double mu[2], const double chol[3],
                              const NoiseSchedule& sched, int concept_id = 1) {
  Tensor x0(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double z0 = rng.normal(), z1 = rng.normal();
    x0.at(i, 0) = mu[0] + chol[0] * z0;
    x0.at(i, 1) = mu[1] + chol[1] * z0 + chol[2] * z1;
  }
  return make_batch(std::move(x0), std::vector<int>(n, concept_id), sched, rng);
}

}  // namespace

TEST_CASE("schedule tables") {
  const NoiseSchedule s = vp();
  s.validate();
  CHECK(s.alpha.size() == 101);
  CHECK(s.sigma[0] == 0.0);
  for (int t = 0; t <= 100; ++t) CHECK(std::abs(s.alpha[t] * s.alpha[t] + s.sigma[t] * s.sigma[t] - 1.0) < 1e-12);
  CHECK(s.alpha[100] * s.alpha[100] < 1e-3);

  const NoiseSchedule e = NoiseSchedule::edm(10);
  e.validate();
  for (int t = 0; t <= 10; ++t) {
    CHECK(e.alpha[t] == 1.0);
    CHECK(e.sigma[t] == static_cast<double>(t));
  }
  CHECK(parse_schedule_kind("edm") == ScheduleKind::Edm);
  CHECK(parse_schedule_kind("variance-preserving") == ScheduleKind::VariancePreserving);
  CHECK_THROWS_AS(parse_schedule_kind("cosine"), std::invalid_argument);

  NoiseSchedule bad = s;
  bad.sigma[5] = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.alpha[3] += 1e-6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("zero noise gives alpha_t x0; EDM gives x0 + t eps") {
  Stream rng(1);
  const NoiseSchedule s = vp();
  Tensor x0 = Tensor::matrix(2, 2, {1.0, -2.0, 0.5, 3.0});
  DiffusionBatch b = make_batch(x0, {1, 2}, s, rng);
  b.eps.fill(0.0);
  const Tensor xt = forward_noise(b, s);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(xt.at(i, j) == s.alpha[b.t[i]] * x0.at(i, j));

  const NoiseSchedule e = NoiseSchedule::edm(100);
  DiffusionBatch be = make_batch(x0, {1, 2}, e, rng);
  const Tensor xe = forward_noise(be, e);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(xe.at(i, j) == x0.at(i, j) + be.t[i] * be.eps.at(i, j));

  be.t[0] = 101;
  CHECK_THROWS_AS(forward_noise(be, e), std::out_of_range);
  be.t[0] = 0;
  CHECK_THROWS_AS(forward_noise(be, e), std::out_of_range);
}

TEST_CASE("timesteps are uniform on 1..T") {
  Stream rng(2);
  const NoiseSchedule s = NoiseSchedule::variance_preserving_linear(5, 1e-3, 0.2);
  const DiffusionBatch b = make_batch(Tensor(Shape{50000, 2}), std::vector<int>(50000, 1), s, rng);
  std::vector<int> counts(6, 0);
  for (int t : b.t) ++counts.at(t);
  CHECK(counts[0] == 0);
  for (int t = 1; t <= 5; ++t) CHECK(std::abs(counts[t] - 10000) < 4 * std::sqrt(10000 * 0.8));
}

TEST_CASE("forward-process marginal statistics match the closed form") {
  const double mu[2] = {1.5, -0.5};
  // S = L L^T with L = [[0.8, 0], [0.3, 0.5]].
  const double chol[3] = {0.8, 0.3, 0.5};
  const double S[2][2] = {{0.64, 0.24}, {0.24, 0.34}};
  const std::size_t n = 100000;
  for (const NoiseSchedule& sched : {vp(), NoiseSchedule::edm(100)}) {
    for (int t : {1, 30, 100}) {
      Stream rng(1000 + t);
      DiffusionBatch b = gaussian_batch(rng, n, mu, chol, sched);
      std::fill(b.t.begin(), b.t.end(), t);
      const Tensor xt = forward_noise(b, sched);
      const double a = sched.alpha[t], s = sched.sigma[t];
      double m[2] = {0, 0};
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < 2; ++j) m[j] += xt.at(i, j) / n;
      double c[2][2] = {{0, 0}, {0, 0}};
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < 2; ++j)
          for (int k = 0; k < 2; ++k) c[j][k] += (xt.at(i, j) - m[j]) * (xt.at(i, k) - m[k]) / (n - 1);
      double sigma[2][2];
      for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 2; ++k) sigma[j][k] = a * a * S[j][k] + (j == k ? s * s : 0.0);
      CAPTURE(to_string(sched.kind));
      CAPTURE(t);
      for (int j = 0; j < 2; ++j) CHECK(std::abs(m[j] - a * mu[j]) < 3.0 * std::sqrt(sigma[j][j] / n));
      for (int j = 0; j < 2; ++j)
        for (int k = j; k < 2; ++k) {
          const double se = std::sqrt((sigma[j][j] * sigma[k][k] + sigma[j][k] * sigma[j][k]) / n);
          CHECK(std::abs(c[j][k] - sigma[j][k]) < 3.0 * se);
        }
    }
  }
}

TEST_CASE("denoising loss of a perfect predictor is zero; hand-computed single sample") {
  Stream rng(3);
  const NoiseSchedule s = vp();
  DiffusionBatch b = make_batch(Tensor(Shape{4, 2}, 1.0), {1, 1, 2, 2}, s, rng);
  Tape tape;
  CHECK(diffusion_loss_from(tape.constant(b.eps), b, s).value().item() == 0.0);

  DiffusionBatch one = make_batch(Tensor(Shape{1, 2}), {1}, s, rng);
  one.eps = Tensor::matrix(1, 2, {0.5, -1.0});
  const Var pred = tape.constant(Tensor::matrix(1, 2, {2.0, 1.0}));
  CHECK(diffusion_loss_from(pred, one, s).value().item() == doctest::Approx(1.5 * 1.5 + 2.0 * 2.0).epsilon(1e-15));

  NoiseSchedule weighted = s;
  weighted.weight.assign(101, 0.5);
  CHECK(diffusion_loss_from(pred, one, weighted).value().item() == doctest::Approx(0.5 * 6.25).epsilon(1e-15));
}

TEST_CASE("denoising loss gradient matches finite differences") {
  DenoiserConfig cfg;
  cfg.hidden = {5, 4, 4};
  cfg.time_embed_dim = 4;
  cfg.concept_count = 3;
  cfg.concept_embed_dim = 2;
  const NoiseSchedule s = vp();
  const double mu[2] = {0.0, 1.0}, chol[3] = {1.0, 0.0, 1.0};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Stream rng(50 + seed);
    ParamStore store = init_params(cfg, rng);
    const DiffusionBatch b = gaussian_batch(rng, 2, mu, chol, s);
    const LossBuilder f = [&](Tape& tape, ParamStore& st) { return diffusion_loss(Denoiser(cfg, st), tape, b, s); };
    CHECK(finite_diff_check(f, store, {}).max_rel_error < 1e-4);
  }
}

TEST_CASE("trained linear predictor approaches the Gaussian posterior mean of eps") {
  // For x0 ~ N(mu, S): E[eps | x_t] = sigma_t (alpha_t^2 S + sigma_t^2 I)^{-1} (x_t - alpha_t mu).
  const NoiseSchedule s = vp();
  const double mu[2] = {2.0, -1.0}, chol[3] = {0.7, 0.2, 0.4};
  const double S[2][2] = {{0.49, 0.14}, {0.14, 0.2}};
  for (int t : {5, 25, 60}) {
    ParamStore store;
    store.add("A", Tensor(Shape{2, 2}));
    store.add("b", Tensor(Shape{2}));
    OptimizerConfig oc;
    oc.kind = OptimizerKind::Adam;
    oc.lr = 1e-2;
    Optimizer opt(oc);
    Stream rng(500 + t);
    for (int step = 0; step < 3000; ++step) {
      if (step == 2000) opt = Optimizer([&] { auto c = oc; c.lr = 1e-3; return c; }());
      DiffusionBatch b = gaussian_batch(rng, 512, mu, chol, s);
      std::fill(b.t.begin(), b.t.end(), t);
      Tape tape;
      store.zero_grad();
      const Var pred = add(matmul(tape.constant(forward_noise(b, s)), tape.param(store, "A")), tape.param(store, "b"));
      tape.backward(diffusion_loss_from(pred, b, s));
      opt.step(store);
    }
    const double a = s.alpha[t], sg = s.sigma[t];
    double M[2][2] = {{a * a * S[0][0] + sg * sg, a * a * S[0][1]}, {a * a * S[1][0], a * a * S[1][1] + sg * sg}};
    const double det = M[0][0] * M[1][1] - M[0][1] * M[1][0];
    const double inv[2][2] = {{M[1][1] / det, -M[0][1] / det}, {-M[1][0] / det, M[0][0] / det}};
    Stream test(9);
    double dev = 0.0;
    const int n = 2000;
    const Tensor& A = store.value("A");
    const Tensor& bb = store.value("b");
    for (int i = 0; i < n; ++i) {
      DiffusionBatch b = gaussian_batch(test, 1, mu, chol, s);
      b.t[0] = t;
      const Tensor x = forward_noise(b, s);
      const double r0 = x[0] - a * mu[0], r1 = x[1] - a * mu[1];
      for (int j = 0; j < 2; ++j) {
        const double oracle = sg * (inv[j][0] * r0 + inv[j][1] * r1);
        const double model = x[0] * A.at(0, j) + x[1] * A.at(1, j) + bb[j];
        dev += (model - oracle) * (model - oracle);
      }
    }
    CAPTURE(t);
    CHECK(dev / n < 5e-3);
  }
}

namespace {

struct TrainedToy {
  DenoiserConfig cfg;
  ParamStore store;
};

TrainedToy train_single_component(const double mu[2], double std) {
  TrainedToy toy;
  toy.cfg.hidden = {64, 64, 64};
  toy.cfg.concept_count = 2;
  toy.cfg.concept_embed_dim = 8;
  Stream rng(77);
  toy.store = init_params(toy.cfg, rng);
  const NoiseSchedule s = vp();
  OptimizerConfig oc;
  oc.kind = OptimizerKind::Adam;
  oc.lr = 2e-3;
  Optimizer opt(oc);
  const double chol[3] = {std, 0.0, std};
  Denoiser model(toy.cfg, toy.store);
  for (int step = 0; step < 3000; ++step) {
    DiffusionBatch b = gaussian_batch(rng, 128, mu, chol, s);
    for (auto& c : b.c) c = rng.bernoulli(0.1) ? kNullConcept : 1;
    Tape tape;
    toy.store.zero_grad();
    tape.backward(diffusion_loss(model, tape, b, s));
    opt.step(toy.store);
  }
  return toy;
}

}  // namespace

TEST_CASE("sampler on a single trained component lands within 3 sigma") {
  const double mu[2] = {2.0, -1.0};
  const double std = 0.3;
  TrainedToy toy = train_single_component(mu, std);
  Denoiser model(toy.cfg, toy.store);
  const NoiseSchedule s = vp();
  const Tensor x = ancestral_sample(model, 1, 2000, s, 0.0, Stream(5));
  int inside = 0;
  for (std::size_t i = 0; i < 2000; ++i)
    inside += std::hypot(x.at(i, 0) - mu[0], x.at(i, 1) - mu[1]) <= 3.0 * std;
  MESSAGE("fraction within 3 sigma: " << inside / 2000.0);
  CHECK(inside >= 0.95 * 2000);

  SUBCASE("same stream gives identical output") {
    const Tensor y = ancestral_sample(model, 1, 2000, s, 0.0, Stream(5));
    CHECK(x.identical(y));
    const Tensor z = ancestral_sample(model, 1, 2000, s, 0.0, Stream(6));
    CHECK_FALSE(x.identical(z));
  }
}

TEST_CASE("guidance degenerates when conditional equals unconditional") {
  DenoiserConfig cfg;
  cfg.hidden = {8, 8};
  cfg.feature_taps = {1};
  cfg.concept_count = 3;
  Stream rng(11);
  ParamStore store = init_params(cfg, rng);
  Tensor& emb = store.value(kConceptEmbedName);
  for (std::size_t j = 0; j < cfg.concept_embed_dim; ++j) emb.at(2, j) = emb.at(0, j);
  Denoiser model(cfg, store);
  const NoiseSchedule s = vp();
  const Tensor plain = ancestral_sample(model, 2, 64, s, 0.0, Stream(3));
  const Tensor guided = ancestral_sample(model, 2, 64, s, 4.0, Stream(3));
  CHECK(plain.identical(guided));
  CHECK_FALSE(plain.identical(ancestral_sample(model, 1, 64, s, 4.0, Stream(3))));
  CHECK_THROWS_AS(ancestral_sample(model, 1, 4, s, -1.0, Stream(3)), std::invalid_argument);
}

TEST_CASE("non-finite sampler state reports the timestep") {
  DenoiserConfig cfg;
  cfg.hidden = {4};
  cfg.feature_taps = {};
  Stream rng(12);
  ParamStore store = init_params(cfg, rng);
  store.value(kOutBiasName).fill(1e308);
  Denoiser model(cfg, store);
  try {
    ancestral_sample(model, 1, 3, vp(), 0.0, Stream(1));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("timestep") != std::string::npos);
  }
}
