#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modicf/imputation.hpp"
#include "modicf/mddc.hpp"
#include "modicf/numerics/optim.hpp"

using namespace modicf;

namespace {

constexpr double kTol = sizeof(Scalar) == 4 ? 1e-3 : 1e-7;

MddcConfig toy_config() {
  MddcConfig c;
  c.latent_dim = 8;
  c.encoder_hidden = 8;
  c.condition_dim = 8;
  c.time_embed_dim = 8;
  c.T = 50;
  c.T_s = 5;
  return c;
}

DatasetBundle toy_bundle(std::size_t n_modalities = 2, double mr = 0.3) {
  SyntheticConfig s;
  s.n_users = 30;
  s.n_items = 24;
  s.dims = std::vector<std::size_t>(n_modalities, 5);
  s.n_latent_groups = 3;
  s.density = 0.15;
  s.seed = 3;
  return apply_missing_mask(generate_synthetic(s), mr, 4).bundle;
}

std::vector<std::vector<std::size_t>> observed_batches(const DatasetBundle& b, std::size_t limit) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t m = 0; m < b.n_modalities(); ++m) {
    auto rows = b.indicator.observed_set(m);
    rows.resize(std::min(rows.size(), limit));
    out.push_back(rows);
  }
  return out;
}

}  // namespace

TEST(Schedule, Invariants) {
  NoiseSchedule s = build_noise_schedule(1000, 1e-4, 0.02, 10);
  EXPECT_DOUBLE_EQ(s.beta[1], 1e-4);
  EXPECT_DOUBLE_EQ(s.beta[1000], 0.02);
  for (std::size_t t = 2; t <= 1000; ++t) {
    EXPECT_GE(s.beta[t], s.beta[t - 1]);
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_DOUBLE_EQ(s.sigma[t] * s.sigma[t], s.beta[t]);
  }
  EXPECT_LT(s.alpha_bar[1000], 1e-2);
  ASSERT_EQ(s.sample_steps.size(), 10u);
  EXPECT_EQ(s.sample_steps.front(), 1u);
  EXPECT_EQ(s.sample_steps.back(), 1000u);
  EXPECT_TRUE(std::is_sorted(s.sample_steps.begin(), s.sample_steps.end()));
  EXPECT_EQ(std::adjacent_find(s.sample_steps.begin(), s.sample_steps.end()), s.sample_steps.end());
}

TEST(Schedule, SingleStep) {
  NoiseSchedule s = build_noise_schedule(1, 0.5, 0.5, 1);
  EXPECT_DOUBLE_EQ(s.alpha_bar[1], 0.5);
  EXPECT_EQ(s.sample_steps, std::vector<std::size_t>{1});
}

TEST(Schedule, RejectsBadRanges) {
  EXPECT_THROW(build_noise_schedule(10, 1e-4, 0.02, 11), std::invalid_argument);
  EXPECT_THROW(build_noise_schedule(10, 0.0, 0.02, 2), std::invalid_argument);
  EXPECT_THROW(build_noise_schedule(10, 0.03, 0.02, 2), std::invalid_argument);
  EXPECT_THROW(build_noise_schedule(10, 1e-4, 1.0, 2), std::invalid_argument);
}

TEST(ForwardDiffuse, ZeroInputAndRange) {
  NoiseSchedule s = build_noise_schedule(100, 1e-4, 0.02, 10);
  Tensor noise = Tensor::row({1, -2, 0.5f});
  Tensor v = forward_diffuse(Tensor(1, 3), 40, noise, s);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(v[j], std::sqrt(1 - s.alpha_bar[40]) * noise[j], 1e-6);
  EXPECT_THROW(forward_diffuse(Tensor(1, 3), 0, noise, s), std::out_of_range);
  EXPECT_THROW(forward_diffuse(Tensor(1, 3), 101, noise, s), std::out_of_range);
}

TEST(ForwardDiffuse, IdentityWhenAlphaBarIsOne) {
  NoiseSchedule s = build_noise_schedule(3, 0.1, 0.1, 1);
  s.alpha_bar[2] = 1.0;
  Tensor v0 = Tensor::row({0.3f, -0.7f});
  EXPECT_EQ(forward_diffuse(v0, 2, Tensor::row({5, 5}), s), v0);
}

TEST(ReverseStep, HandEvaluation) {
  NoiseSchedule s = build_noise_schedule(2, 0.01, 0.01, 1);
  s.alpha[2] = 0.99;
  s.beta[2] = 0.01;
  s.alpha_bar[2] = 0.5;
  s.sigma[2] = 0.1;
  Tensor v = Tensor::row({1.0f, -0.5f});
  Tensor eps = Tensor::row({0.2f, 0.4f});
  Tensor z = Tensor::row({1.0f, -1.0f});
  Tensor out = reverse_step(v, eps, 2, s, z);
  for (std::size_t j = 0; j < 2; ++j) {
    const double expect = (v[j] - 0.01 / std::sqrt(0.5) * eps[j]) / std::sqrt(0.99) + 0.1 * z[j];
    EXPECT_NEAR(out[j], expect, 1e-6);
  }
}

TEST(ReverseStep, NoNoiseAtFirstStepAndNoBetaIsIdentity) {
  NoiseSchedule s = build_noise_schedule(5, 0.01, 0.02, 1);
  Tensor v = Tensor::row({1.0f, 2.0f});
  Tensor z = Tensor::row({100.0f, 100.0f});
  Tensor eps = Tensor::row({0.1f, 0.1f});
  Tensor a = reverse_step(v, eps, 1, s, z);
  Tensor b = reverse_step(v, eps, 1, s, Tensor(1, 2));
  EXPECT_EQ(a, b);
  s.beta[3] = 0;
  s.alpha[3] = 1;
  EXPECT_EQ(reverse_step(v, eps, 3, s, Tensor(1, 2)), v);
}

TEST(Sampler, OraclePredictorRecoversPlantedLatent) {
  for (std::size_t Ts : {std::size_t(10), std::size_t(1000)}) {
    NoiseSchedule s = build_noise_schedule(1000, 1e-4, 0.02, Ts);
    Rng rng(17);
    Tensor v0 = rng.normal_tensor(3, 6);
    Tensor eps = rng.normal_tensor(3, 6);
    LatentBatch vT = forward_diffuse_exact(v0, 1000, eps, s);
    LatentBatch rec = sample_deterministic(vT, [&](const Tensor&, std::size_t) { return eps; }, s);
    for (std::size_t i = 0; i < v0.size(); ++i) EXPECT_NEAR(rec.data[i], v0[i], 1e-5);
  }
}

TEST(Sampler, StochasticIsReproducibleForFixedSeed) {
  NoiseSchedule s = build_noise_schedule(20, 1e-3, 0.05, 20);
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    LatentBatch v = LatentBatch::from_tensor(Tensor(2, 3, 0.5f));
    return sample_stochastic(v, [](const Tensor& x, std::size_t) { return Tensor(x.shape()); }, s, rng);
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_NE(run(1), run(2));
}

TEST(Fusion, SingleSourceAndPermutationInvariance) {
  DatasetBundle b = toy_bundle(3, 0.2);
  Rng rng(1);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  Tape tape(false);
  Tensor l0 = rng.normal_tensor(1, 8), l1 = rng.normal_tensor(1, 8), l2 = rng.normal_tensor(1, 8);
  // Target 0 with only modality 2 usable: condition = out(proj_2(v2)).
  Var c = model.fuse_conditions(tape, 0, {tape.constant(l0), tape.constant(l1), tape.constant(l2)},
                                Tensor::from_rows({{0, 0, 1}}));
  Var expect = model.fusion.output(tape, model.params,
                                   leaky_relu(model.fusion.project[2](tape, model.params, tape.constant(l2))));
  EXPECT_EQ(c.value(), expect.value());
  // Identical sources through the same projection: mean equals either one.
  Var same = model.fuse_conditions(tape, 0, {tape.constant(l0), tape.constant(l2), tape.constant(l2)},
                                   Tensor::from_rows({{0, 0, 1}}));
  EXPECT_EQ(same.value(), c.value());
}

TEST(Fusion, TargetRowNeverLeaksIntoItsOwnGeneration) {
  DatasetBundle b = toy_bundle();
  Rng rng(2);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  const auto missing = b.indicator.missing_set(0);
  ASSERT_FALSE(missing.empty());
  Tensor a = generate_missing(model, b, 0, missing, 99, true);
  DatasetBundle poked = b;
  for (auto i : missing) poked.modalities[0].data.row_span(i)[0] = 123.0f;
  EXPECT_EQ(generate_missing(model, poked, 0, missing, 99, true), a);
}

TEST(Denoiser, ShapeDeterminismAndAttentionRows) {
  DatasetBundle b = toy_bundle();
  Rng rng(3);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  Tensor v = rng.normal_tensor(4, 8), c = rng.normal_tensor(4, 8);
  std::vector<std::size_t> steps{1, 7, 20, 50};
  Tape t1(false), t2(false);
  Tensor e1 = model.predict_noise(t1, 1, t1.constant(v), t1.constant(c), steps).value();
  Tensor e2 = model.predict_noise(t2, 1, t2.constant(v), t2.constant(c), steps).value();
  EXPECT_EQ(e1.shape(), v.shape());
  EXPECT_EQ(e1, e2);
  const auto& blk = model.denoisers[1].attention[0];
  Tensor q = matmul(v, model.params[blk.w_q].value);
  Tensor k = matmul(c, model.params[blk.w_k].value);
  for (std::size_t r = 0; r < 4; ++r) {
    Tensor w = feature_attention_weights(q, k, r, 0.35f);
    for (std::size_t j = 0; j < w.rows(); ++j) {
      double acc = 0;
      for (auto x : w.row_span(j)) acc += x;
      EXPECT_NEAR(acc, 1.0, 1e-6);
    }
  }
}

TEST(Losses, GradientChecks) {
  DatasetBundle b = toy_bundle();
  Rng rng(4);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  const auto batches = observed_batches(b, 4);
  auto loss = [&](int which) {
    return [&, which](Tape& t) {
      Rng noise(5);
      MddcLosses l = mddc_losses(t, model, b, batches, noise);
      return which == 0 ? l.dm : which == 1 ? l.rec : l.diff;
    };
  };
  // Latents enter L_dm as constants, so autoencoder parameters are checked through L_rec only.
  auto not_autoencoder = [](const Parameter& p) { return p.name.find(".ae") == std::string::npos; };
  for (int which : {0, 1, 2}) {
    auto r = grad_check(loss(which), {&model.params}, sizeof(Scalar) == 4 ? 1e-3 : 1e-6,
                        which == 1 ? ParameterFilter{} : ParameterFilter{not_autoencoder});
    EXPECT_LT(r.relative_error, kTol) << "loss " << which << " worst " << r.worst_parameter;
  }
}

TEST(Losses, DiffCombinesWithAlpha) {
  DatasetBundle b = toy_bundle();
  Rng rng(6);
  MddcConfig c = toy_config();
  c.alpha1 = 0.25;
  MddcModel model = MddcModel::create(b, c, rng);
  Tape t(false);
  Rng noise(1);
  MddcLosses l = mddc_losses(t, model, b, observed_batches(b, 6), noise);
  EXPECT_NEAR(l.diff.value().item(), l.dm.value().item() + 0.25 * l.rec.value().item(), 1e-5);
  std::vector<std::vector<std::size_t>> empty(2);
  EXPECT_THROW(mddc_losses(t, model, b, empty, noise), std::invalid_argument);
}

TEST(Losses, EncoderOnlyTrainedByReconstruction) {
  DatasetBundle b = toy_bundle();
  Rng rng(7);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  model.params.zero_grad();
  Tape t;
  Rng noise(2);
  t.backward(mddc_losses(t, model, b, observed_batches(b, 5), noise).dm);
  for (const auto& p : model.params.all()) {
    if (p.name.find(".ae") != std::string::npos) {
      for (auto g : p.grad.data()) EXPECT_EQ(g, 0) << p.name;
    }
  }
}

TEST(Generate, DeterministicShapeAndBatchIndependence) {
  DatasetBundle b = toy_bundle();
  Rng rng(8);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  const auto missing = b.indicator.missing_set(1);
  ASSERT_GE(missing.size(), 2u);
  Tensor all = generate_missing(model, b, 1, missing, 5, true);
  EXPECT_EQ(all.cols(), b.modalities[1].dim());
  EXPECT_EQ(all, generate_missing(model, b, 1, missing, 5, true));
  Tensor one = generate_missing(model, b, 1, std::span(missing).subspan(1, 1), 5, true);
  for (std::size_t j = 0; j < one.cols(); ++j) EXPECT_EQ(one(0, j), all(1, j));
  Tensor st = generate_missing(model, b, 1, missing, 5, false);
  EXPECT_TRUE(st.all_finite());
  EXPECT_EQ(st, generate_missing(model, b, 1, missing, 5, false));
}

TEST(Refine, NoMissingIsNoOp) {
  SyntheticConfig s;
  s.n_users = 20;
  s.n_items = 12;
  s.dims = {4, 4};
  s.density = 0.25;
  DatasetBundle b = generate_synthetic(s);
  Rng rng(9);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  DatasetBundle copy = b;
  iterative_refine(model, copy, 1);
  EXPECT_EQ(copy, b);
}

TEST(Refine, FrozenModelReachesFixedPoint) {
  DatasetBundle b = toy_bundle();
  Rng rng(10);
  MddcModel model = MddcModel::create(b, toy_config(), rng);
  DatasetBundle once = b;
  iterative_refine(model, once, 3);
  DatasetBundle twice = once;
  iterative_refine(model, twice, 3);
  EXPECT_EQ(once, twice);
  for (std::size_t m = 0; m < 2; ++m) {
    EXPECT_TRUE(once.modalities[m].data.all_finite());
    for (auto i : once.indicator.missing_set(m)) EXPECT_TRUE(once.is_generated(i, m));
  }
}

TEST(Baselines, MeanZeroRandom) {
  DatasetBundle b = toy_bundle();
  DatasetBundle mean = b, zero = b, rnd = b;
  impute_mean(mean);
  impute_zero(zero);
  Rng rng(1);
  impute_random(rnd, rng);
  const auto obs = b.indicator.observed_set(0);
  const auto miss = b.indicator.missing_set(0);
  double m0 = 0;
  for (auto i : obs) m0 += b.modalities[0].data(i, 0);
  m0 /= static_cast<double>(obs.size());
  for (auto i : miss) {
    EXPECT_NEAR(mean.modalities[0].data(i, 0), m0, 1e-5);
    EXPECT_EQ(zero.modalities[0].data(i, 0), 0);
    EXPECT_TRUE(zero.is_generated(i, 0));
  }
  EXPECT_TRUE(rnd.modalities[0].data.all_finite());
}

TEST(Baselines, NearestMatchesBruteForce) {
  SyntheticConfig s;
  s.n_users = 12;
  s.n_items = 10;
  s.dims = {3, 4};
  s.n_latent_groups = 2;
  s.density = 0.3;
  s.seed = 21;
  DatasetBundle b = apply_missing_mask(generate_synthetic(s), 0.3, 2).bundle;
  DatasetBundle filled = b;
  impute_nearest(filled);
  for (std::size_t m = 0; m < 2; ++m) {
    const std::size_t other = 1 - m;
    for (auto i : b.indicator.missing_set(m)) {
      // With two modalities the only evidence is the other modality.
      std::size_t best = 0;
      double best_sim = -2;
      for (std::size_t j = 0; j < b.n_items; ++j) {
        if (!b.indicator.observed(j, m)) continue;
        const double sim = cosine(b.modalities[other].data.row_span(i), b.modalities[other].data.row_span(j));
        if (sim > best_sim + 1e-12) {
          best_sim = sim;
          best = j;
        }
      }
      for (std::size_t k = 0; k < b.modalities[m].dim(); ++k) {
        EXPECT_EQ(filled.modalities[m].data(i, k), b.modalities[m].data(best, k));
      }
    }
  }
}

TEST(ImputationMse, ZeroBaselineEqualsMeanSquare) {
  DatasetBundle b = toy_bundle();
  DatasetBundle zero = b;
  impute_zero(zero);
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < 2; ++m)
    for (auto i : b.indicator.missing_set(m))
      for (auto v : b.heldout[m].data.row_span(i)) {
        acc += static_cast<double>(v) * v;
        ++n;
      }
  EXPECT_NEAR(imputation_mse(zero), acc / static_cast<double>(n), 1e-9);
}
