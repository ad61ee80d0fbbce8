#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modicf/cfmr.hpp"
#include "modicf/numerics/optim.hpp"

using namespace modicf;

namespace {

constexpr double kTol = sizeof(Scalar) == 4 ? 1e-3 : 1e-7;

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor(r, c);
}

double cos_d(std::span<const Scalar> a, std::span<const Scalar> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return aa == 0 || bb == 0 ? 0.0 : ab / std::sqrt(aa * bb);
}

// Full stable sort of every column index by descending cosine.
std::vector<std::uint32_t> sorted_neighbours(const Tensor& a, std::size_t r, const Tensor& b, std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> all;
  for (std::uint32_t c = 0; c < b.rows(); ++c) {
    Scalar s = cosine(a.row_span(r), b.row_span(c));
    all.emplace_back(-static_cast<double>(s), c);
  }
  std::sort(all.begin(), all.end());
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) out.push_back(all[i].second);
  return out;
}

DatasetBundle toy_bundle() {
  SyntheticConfig s;
  s.n_users = 12;
  s.n_items = 10;
  s.dims = {4, 3};
  s.n_latent_groups = 2;
  s.density = 0.3;
  s.seed = 11;
  return generate_synthetic(s);
}

CfmrConfig toy_config() {
  CfmrConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.top_k = 3;
  return c;
}

}  // namespace

TEST(Features, SingleNeighbourAndIdenticalNeighbours) {
  DatasetBundle b;
  b.n_users = 2;
  b.n_items = 5;
  b.interactions = {{0, 2, Split::kTrain}, {1, 0, Split::kTrain}, {1, 1, Split::kTrain},
                    {1, 3, Split::kTrain}, {1, 4, Split::kTrain}};
  InteractionIndex idx(b);
  BaseGraph g = BaseGraph::from_index(idx);
  Tensor v(5, 2);
  v(2, 0) = 3;
  v(2, 1) = -1;
  for (std::size_t i : {0, 1, 3, 4}) {
    v(i, 0) = 0.5f;
    v(i, 1) = 1;
  }
  Tape t(false);
  FeaturePair f = modality_aware_features(g, t.constant(v));
  EXPECT_FLOAT_EQ(f.users.value()(0, 0), 3);
  EXPECT_FLOAT_EQ(f.users.value()(0, 1), -1);
  // Four identical neighbours: 4v / 2.
  EXPECT_FLOAT_EQ(f.users.value()(1, 0), 1.0f);
  EXPECT_FLOAT_EQ(f.users.value()(1, 1), 2.0f);
  // Item 2 has user 0 as its only neighbour.
  EXPECT_EQ(f.items.value().row_span(2)[0], f.users.value()(0, 0));

  FeaturePair z = modality_aware_features(g, t.constant(Tensor(5, 2)));
  for (auto x : z.users.value().data()) EXPECT_EQ(x, 0);
  for (auto x : z.items.value().data()) EXPECT_EQ(x, 0);
}

TEST(Graph, IdenticalRowRanksFirst) {
  Tensor users = Tensor::from_rows({{1, 2, 3}});
  Tensor items = Tensor::from_rows({{0, 1, 0}, {1, 2, 3}, {-1, 0, 0}});
  ModalityGraph g = build_modality_graph(users, items, 1);
  EXPECT_EQ(g.user_neighbors[0], std::vector<std::uint32_t>{1});
  EXPECT_NEAR(g.user_similarity[0][0], 1.0, 1e-6);
}

TEST(Graph, SaturatedKSortsAllItems) {
  Tensor users = random_tensor(3, 4, 1);
  Tensor items = random_tensor(6, 4, 2);
  ModalityGraph g = build_modality_graph(users, items, 50);
  for (std::size_t u = 0; u < 3; ++u) {
    EXPECT_EQ(g.user_neighbors[u], sorted_neighbours(users, u, items, 6));
    for (std::size_t j = 1; j < 6; ++j) EXPECT_GE(g.user_similarity[u][j - 1], g.user_similarity[u][j]);
  }
}

TEST(Graph, MatchesBruteForceOnSmallInstances) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t nu = 1 + rng.uniform_index(8), ni = 1 + rng.uniform_index(8), d = 1 + rng.uniform_index(3);
    const std::size_t k = 1 + rng.uniform_index(9);
    Tensor users(nu, d), items(ni, d);
    // Small integer entries make exact ties and zero rows common.
    for (auto& x : users.data()) x = static_cast<Scalar>(static_cast<int>(rng.uniform_index(3)) - 1);
    for (auto& x : items.data()) x = static_cast<Scalar>(static_cast<int>(rng.uniform_index(3)) - 1);
    ModalityGraph g = build_modality_graph(users, items, k);
    for (std::size_t u = 0; u < nu; ++u) {
      ASSERT_EQ(g.user_neighbors[u], sorted_neighbours(users, u, items, k)) << "seed " << seed;
      for (auto s : g.user_similarity[u]) {
        EXPECT_GE(s, -1);
        EXPECT_LE(s, 1);
      }
    }
    for (std::size_t i = 0; i < ni; ++i) ASSERT_EQ(g.item_neighbors[i], sorted_neighbours(items, i, users, k));
  }
}

TEST(Graph, ZeroRowsHaveZeroSimilarity) {
  Tensor users = Tensor::from_rows({{0, 0}});
  Tensor items = Tensor::from_rows({{1, 0}, {0, 1}});
  ModalityGraph g = build_modality_graph(users, items, 2);
  EXPECT_EQ(g.user_neighbors[0], (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(g.user_similarity[0], (std::vector<Scalar>{0, 0}));
  EXPECT_THROW(build_modality_graph(users, items, 0), std::invalid_argument);
}

TEST(Aggregate, SingleNeighbourCancellationAndDirectSum) {
  ModalityGraph g;
  g.user_neighbors = {{1}, {0, 2}, {}};
  g.item_neighbors = {{0}, {0, 1, 2}, {2}};
  Tensor eu = random_tensor(3, 4, 7);
  Tensor ei = Tensor::from_rows({{1, -2, 3, 0.5f}, {4, 4, 4, 4}, {-1, 2, -3, -0.5f}});
  Tape t(false);
  FeaturePair a = aggregate_id_embeddings(g, t.constant(eu), t.constant(ei));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_FLOAT_EQ(a.users.value()(0, j), ei(1, j));
    EXPECT_FLOAT_EQ(a.users.value()(1, j), 0);
    EXPECT_EQ(a.users.value()(2, j), 0);
  }

  // Random 4x4 case against direct summation.
  Rng rng(3);
  ModalityGraph r;
  for (std::size_t u = 0; u < 4; ++u) {
    r.user_neighbors.push_back({});
    r.item_neighbors.push_back({});
    for (std::uint32_t i = 0; i < 4; ++i) {
      if (rng.bernoulli(0.5)) r.user_neighbors.back().push_back(i);
      if (rng.bernoulli(0.5)) r.item_neighbors.back().push_back(i);
    }
  }
  Tensor U = random_tensor(4, 3, 8), I = random_tensor(4, 3, 9);
  FeaturePair out = aggregate_id_embeddings(r, t.constant(U), t.constant(I));
  for (std::size_t u = 0; u < 4; ++u) {
    for (std::size_t j = 0; j < 3; ++j) {
      double su = 0, si = 0;
      for (auto a : r.user_neighbors[u]) su += I(a, j);
      for (auto b : r.item_neighbors[u]) si += U(b, j);
      if (!r.user_neighbors[u].empty()) su /= std::sqrt(double(r.user_neighbors[u].size()));
      if (!r.item_neighbors[u].empty()) si /= std::sqrt(double(r.item_neighbors[u].size()));
      EXPECT_NEAR(out.users.value()(u, j), su, 1e-6);
      EXPECT_NEAR(out.items.value()(u, j), si, 1e-6);
    }
  }
}

TEST(Attention, SingleModalityIsValuePath) {
  Tape t(false);
  Tensor e = random_tensor(5, 4, 2);
  auto out = cross_modal_attention({t.constant(e)}, t.constant(random_tensor(4, 4, 3)),
                                   t.constant(random_tensor(4, 4, 4)), 2);
  ASSERT_EQ(out.size(), 1u);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(out[0].value()[i], e[i], 1e-6);
}

TEST(Attention, IdenticalModalitiesGiveIdenticalOutputs) {
  Tape t(false);
  Tensor e = random_tensor(3, 6, 5);
  auto out = cross_modal_attention({t.constant(e), t.constant(e), t.constant(e)}, t.constant(random_tensor(6, 6, 6)),
                                   t.constant(random_tensor(6, 6, 7)), 3);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& o : out) {
    EXPECT_EQ(o.cols(), 6u);
    EXPECT_EQ(o.value(), out[0].value());
  }
}

TEST(Attention, HandCaseTwoModalitiesOneHead) {
  Tape t(false);
  Tensor e1 = Tensor::from_rows({{1, 0}});
  Tensor e2 = Tensor::from_rows({{0, 2}});
  Tensor wq = Tensor::from_rows({{1, 0}, {0, 1}});
  Tensor wk = Tensor::from_rows({{2, 0}, {0, 1}});
  auto out = cross_modal_attention({t.constant(e1), t.constant(e2)}, t.constant(wq), t.constant(wk), 1);
  // m = 1: q = (1, 0); keys (2, 0) and (0, 2); scores 2/sqrt2 and 0.
  const double s = 2 / std::sqrt(2.0);
  const double a11 = std::exp(s) / (std::exp(s) + 1), a12 = 1 - a11;
  EXPECT_NEAR(out[0].value()(0, 0), a11 * 1, 1e-6);
  EXPECT_NEAR(out[0].value()(0, 1), a12 * 2, 1e-6);
  // m = 2: q = (0, 2); scores 0 and 4/sqrt2.
  const double s2 = 4 / std::sqrt(2.0);
  const double a21 = 1 / (1 + std::exp(s2)), a22 = 1 - a21;
  EXPECT_NEAR(out[1].value()(0, 0), a21 * 1, 1e-6);
  EXPECT_NEAR(out[1].value()(0, 1), a22 * 2, 1e-6);
  Var pooled = mean_pool(out);
  EXPECT_NEAR(pooled.value()(0, 0), (a11 + a21) / 2, 1e-6);
}

TEST(Attention, HeadsMustDivideWidth) {
  Tape t(false);
  Tensor e = random_tensor(2, 6, 1);
  EXPECT_THROW(cross_modal_attention({t.constant(e)}, t.constant(Tensor(6, 6)), t.constant(Tensor(6, 6)), 4),
               std::invalid_argument);
  CfmrConfig c;
  c.embed_dim = 6;
  c.heads = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Propagation, EtaZeroAndSingleLayer) {
  Tape t(false);
  Var e = t.constant(random_tensor(3, 2, 1));
  const Tensor init = propagation_init(e, t.constant(random_tensor(3, 2, 2)), 0).value();
  EXPECT_EQ(init, e.value());

  DatasetBundle b;
  b.n_users = 3;
  b.n_items = 3;
  b.interactions = {{0, 0, Split::kTrain}, {0, 1, Split::kTrain}, {1, 1, Split::kTrain},
                    {2, 2, Split::kTrain}, {2, 0, Split::kTrain}};
  InteractionIndex idx(b);
  BaseGraph g = BaseGraph::from_index(idx);
  Tensor U = random_tensor(3, 2, 3), I = random_tensor(3, 2, 4);
  FeaturePair one = high_order_propagation(g, t.constant(U), t.constant(I), 1);
  EXPECT_EQ(one.users.value(), g.propagate_users.multiply(I));
  EXPECT_THROW(high_order_propagation(g, t.constant(U), t.constant(I), 0), std::invalid_argument);
}

TEST(Propagation, TwoLayersMatchDenseOracle) {
  DatasetBundle b;
  b.n_users = 3;
  b.n_items = 3;
  b.interactions = {{0, 0, Split::kTrain}, {0, 1, Split::kTrain}, {1, 1, Split::kTrain},
                    {2, 2, Split::kTrain}, {2, 0, Split::kTrain}};
  InteractionIndex idx(b);
  BaseGraph g = BaseGraph::from_index(idx);
  Tensor U = random_tensor(3, 2, 5), I = random_tensor(3, 2, 6);
  Tape t(false);
  FeaturePair out = high_order_propagation(g, t.constant(U), t.constant(I), 2);

  // Dense symmetric-normalized Y from raw degrees.
  double Y[3][3] = {{1, 1, 0}, {0, 1, 0}, {1, 0, 1}};
  double du[3] = {2, 1, 2}, di[3] = {2, 2, 1};
  double N[3][3];
  for (int u = 0; u < 3; ++u)
    for (int i = 0; i < 3; ++i) N[u][i] = Y[u][i] / std::sqrt(du[u] * di[i]);
  auto mul = [](double A[3][3], bool tr, const std::vector<std::array<double, 2>>& x) {
    std::vector<std::array<double, 2>> r(3, {0, 0});
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c)
        for (int j = 0; j < 2; ++j) r[a][j] += (tr ? A[c][a] : A[a][c]) * x[c][j];
    return r;
  };
  std::vector<std::array<double, 2>> u0(3), i0(3);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 2; ++j) {
      u0[r][j] = U(r, j);
      i0[r][j] = I(r, j);
    }
  auto u1 = mul(N, false, i0), i1 = mul(N, true, u0);
  auto u2 = mul(N, false, i1), i2 = mul(N, true, u1);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(out.users.value()(r, j), (u1[r][j] + u2[r][j]) / 2, 1e-6);
      EXPECT_NEAR(out.items.value()(r, j), (i1[r][j] + i2[r][j]) / 2, 1e-6);
    }
}

TEST(Fuse, DeltaZeroAndUnitNormTerm) {
  Tape t(false);
  Var e = t.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  Var v = t.constant(Tensor::from_rows({{0.6f, 0.8f}, {0, 0}}));
  EXPECT_EQ(fuse_final(e, {v}, 0).value(), e.value());
  Tensor f = fuse_final(e, {v}, 0.5).value();
  EXPECT_NEAR(f(0, 0), 1.3, 1e-6);
  EXPECT_NEAR(f(0, 1), 2.4, 1e-6);
  // Zero-norm modality rows contribute nothing.
  EXPECT_EQ(f(1, 0), 3);
  EXPECT_EQ(f(1, 1), 4);
}

TEST(Matching, HandVectors) {
  Tape t(false);
  Tensor fu = Tensor::from_rows({{1, 2}, {1, 0}, {0.6f, 0.8f}});
  Tensor fi = Tensor::from_rows({{3, -1}, {0, 5}, {0.6f, 0.8f}});
  Tensor y = predict_matching(t.constant(fu), t.constant(fi)).value();
  EXPECT_FLOAT_EQ(y(0, 0), 1);
  EXPECT_FLOAT_EQ(y(1, 0), 0);
  EXPECT_NEAR(y(2, 0), 1, 1e-6);
}

namespace {

// Contrastive loss evaluated term by term in double.
double contrastive_oracle(const Tensor& f, const std::vector<Tensor>& e) {
  double loss = 0;
  for (const auto& em : e) {
    for (std::size_t u = 0; u < f.rows(); ++u) {
      double denom = 0;
      for (std::size_t v = 0; v < f.rows(); ++v) {
        denom += std::exp(cos_d(f.row_span(v), em.row_span(u))) + std::exp(cos_d(em.row_span(v), em.row_span(u)));
      }
      loss -= std::log(std::exp(cos_d(f.row_span(u), em.row_span(u))) / denom);
    }
  }
  return loss;
}

}  // namespace

TEST(Contrastive, TwoIdenticalUsersHandCase) {
  Tape t(false);
  Tensor x = Tensor::from_rows({{1, 1}, {1, 1}});
  const std::size_t M = 3;
  std::vector<Var> e(M, t.constant(x));
  const double got = contrastive_loss(t.constant(x), e).value().item();
  // Every similarity is 1: each term is -log(e / 4e) = log 4.
  EXPECT_NEAR(got, M * 2 * std::log(4.0), 1e-5);
  EXPECT_NEAR(got, contrastive_oracle(x, {x, x, x}), 1e-5);
}

TEST(Contrastive, MatchesOracleAndIsScaleInvariant) {
  Tape t(false);
  Tensor f = random_tensor(5, 3, 1);
  std::vector<Tensor> e = {random_tensor(5, 3, 2), random_tensor(5, 3, 3)};
  const double got = contrastive_loss(t.constant(f), {t.constant(e[0]), t.constant(e[1])}).value().item();
  EXPECT_NEAR(got, contrastive_oracle(f, e), 1e-4);

  Tensor f3 = f, e0 = e[0], e1 = e[1];
  for (auto& x : f3.data()) x *= 3.5f;
  for (auto& x : e0.data()) x *= 3.5f;
  for (auto& x : e1.data()) x *= 3.5f;
  EXPECT_NEAR(contrastive_loss(t.constant(f3), {t.constant(e0), t.constant(e1)}).value().item(), got, 1e-4);
}

TEST(Contrastive, SingleUserBatchRejected) {
  Tape t(false);
  EXPECT_THROW(contrastive_loss(t.constant(Tensor(1, 3, 1)), {t.constant(Tensor(1, 3, 1))}), std::invalid_argument);
}

TEST(Contrastive, GradientCheck) {
  ParameterStore store;
  ParamId f = store.add("f", random_tensor(4, 3, 4));
  ParamId e0 = store.add("e0", random_tensor(4, 3, 5));
  ParamId e1 = store.add("e1", random_tensor(4, 3, 6));
  auto r = grad_check(
      [&](Tape& t) { return contrastive_loss(t.param(store, f), {t.param(store, e0), t.param(store, e1)}); },
      {&store});
  EXPECT_LT(r.relative_error, kTol) << r.worst_parameter;
}

TEST(Bpr, EqualScoresAndLimit) {
  Tape t(false);
  Var s = t.constant(Tensor(3, 1, 0.7f));
  EXPECT_NEAR(bpr_loss(s, s).value().item(), 3 * std::log(2.0), 1e-5);
  Var hi = t.constant(Tensor(1, 1, 60));
  Var lo = t.constant(Tensor(1, 1, -60));
  EXPECT_NEAR(bpr_loss(hi, lo).value().item(), 0, 1e-12);
  EXPECT_THROW(bpr_loss(t.constant(Tensor(0, 1)), t.constant(Tensor(0, 1))), std::invalid_argument);
}

TEST(Bpr, CombinesWithAlpha2) {
  Tape t(false);
  Var a = t.constant(Tensor::from_rows({{1}, {0}}));
  Var b = t.constant(Tensor::from_rows({{0}, {2}}));
  BprLosses l = bpr_losses(a, b, b, a, 0.7);
  EXPECT_NEAR(l.total.value().item(), l.user_item.value().item() + 0.7 * l.item.value().item(), 1e-6);
  const Tensor without = bpr_losses(a, b, b, a, 0).total.value();
  EXPECT_EQ(without, l.user_item.value());
}

TEST(Bpr, GradientCheck) {
  ParameterStore store;
  ParamId p = store.add("pos", random_tensor(6, 1, 1));
  ParamId n = store.add("neg", random_tensor(6, 1, 2));
  auto r = grad_check([&](Tape& t) { return bpr_loss(t.param(store, p), t.param(store, n)); }, {&store});
  EXPECT_LT(r.relative_error, kTol);
}

TEST(ItemPredictor, ZeroInputsAndDeterminism) {
  ParameterStore store;
  Rng rng(1);
  ItemPredictor pred{Linear::create(store, "h", 6, 3, rng), Linear::create(store, "o", 3, 1, rng)};
  store[pred.hidden.bias].value.fill(0);
  store[pred.output.bias].value.fill(0);
  Tape t(false);
  Tensor y = pred(t, store, t.constant(Tensor(4, 6))).value();
  for (auto v : y.data()) EXPECT_EQ(v, 0);
  Tensor x = random_tensor(4, 6, 2);
  EXPECT_EQ(pred(t, store, t.constant(x)).value(), pred(t, store, t.constant(x)).value());
}

TEST(ItemPredictor, BprGradientCheck) {
  ParameterStore store;
  Rng rng(3);
  ItemPredictor pred{Linear::create(store, "h", 6, 4, rng), Linear::create(store, "o", 4, 1, rng)};
  Tensor latents = random_tensor(5, 6, 4);
  const std::vector<std::size_t> pos{0, 1, 2, 0}, neg{3, 4, 4, 1};
  auto r = grad_check(
      [&](Tape& t) {
        Var y = pred(t, store, t.constant(latents));
        return bpr_loss(gather_rows(y, pos), gather_rows(y, neg));
      },
      {&store});
  EXPECT_LT(r.relative_error, kTol);
}

TEST(Counterfactual, HandCases) {
  EXPECT_FLOAT_EQ(counterfactual_adjust(2, 0, 1), 0.5f);
  EXPECT_FLOAT_EQ(counterfactual_adjust(3, 1.2f, 0), 3 * sigmoid(1.2f));
}

TEST(Counterfactual, ArgsortInvariantUnderConstantItemScore) {
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(20);
    const Scalar yi = static_cast<Scalar>(rng.normal() * 3);
    const Scalar gamma = static_cast<Scalar>(rng.uniform(0, 50));
    std::vector<Scalar> raw(n), adj(n);
    for (std::size_t i = 0; i < n; ++i) {
      raw[i] = static_cast<Scalar>(rng.normal() * 5);
      adj[i] = counterfactual_adjust(raw[i], yi, gamma);
    }
    auto order = [](const std::vector<Scalar>& s) {
      std::vector<std::size_t> o(s.size());
      std::iota(o.begin(), o.end(), 0);
      std::stable_sort(o.begin(), o.end(), [&](auto a, auto b) { return s[a] > s[b]; });
      return o;
    };
    ASSERT_EQ(order(raw), order(adj)) << "trial " << trial;
  }
}

TEST(Counterfactual, CorrectionIsUserIndependent) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const Scalar yi = static_cast<Scalar>(rng.normal() * 3);
    const Scalar gamma = static_cast<Scalar>(rng.uniform(0, 50));
    ScoreTable table{Tensor(3, 1), Tensor(1, 1, yi)};
    for (std::size_t u = 0; u < 3; ++u) table.raw(u, 0) = static_cast<Scalar>(rng.normal() * 5);
    Tensor adj = ranking_scores(table, gamma, true);
    const Scalar expected = gamma * sigmoid(yi);
    for (std::size_t u = 0; u < 3; ++u) {
      const Scalar correction = table.raw(u, 0) * sigmoid(yi) - adj(u, 0);
      ASSERT_NEAR(correction, expected, 1e-4 * (1 + std::abs(expected) + std::abs(table.raw(u, 0)))) << trial;
    }
  }
}

TEST(Counterfactual, StrictlyMonotoneInMatchingScore) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const Scalar yi = static_cast<Scalar>(rng.normal() * 3);
    const Scalar gamma = static_cast<Scalar>(rng.uniform(0, 50));
    const Scalar a = static_cast<Scalar>(rng.normal() * 5);
    const Scalar b = a + static_cast<Scalar>(rng.uniform(0.01, 5));
    ASSERT_LT(counterfactual_adjust(a, yi, gamma), counterfactual_adjust(b, yi, gamma)) << trial;
  }
}

TEST(Counterfactual, DisabledReturnsRawScores) {
  ScoreTable table{random_tensor(2, 3, 1), random_tensor(3, 1, 2)};
  EXPECT_EQ(ranking_scores(table, 20, false), table.raw);
}

TEST(Model, ForwardShapesAndScorerDeterminism) {
  DatasetBundle b = toy_bundle();
  Rng rng(1);
  CfmrModel model = CfmrModel::create(b, toy_config(), rng);
  InteractionIndex idx(b);
  CfmrInputs in = model.prepare(b, idx);
  ASSERT_EQ(in.graphs.size(), 2u);
  for (const auto& g : in.graphs) {
    EXPECT_EQ(g.user_neighbors.size(), b.n_users);
    for (const auto& l : g.user_neighbors) EXPECT_EQ(l.size(), 3u);
  }
  Tape t(false);
  CfmrForward f = model.forward(t, in);
  EXPECT_EQ(f.fused.users.shape(), (Shape{12, 8}));
  EXPECT_EQ(f.fused.items.shape(), (Shape{10, 8}));
  EXPECT_EQ(f.item_direct.shape(), (Shape{10, 1}));
  EXPECT_EQ(f.attended.users.cols(), 8u);

  CfmrScorer scorer(model);
  ScoreTable s1 = scorer.score(b), s2 = scorer.score(b);
  EXPECT_EQ(s1, s2);
  EXPECT_NEAR(s1.raw(3, 4), dot(f.fused.users.value().row_span(3), f.fused.items.value().row_span(4)), 1e-5);
}

TEST(Model, LossGradientCheck) {
  DatasetBundle b = toy_bundle();
  Rng rng(2);
  CfmrModel model = CfmrModel::create(b, toy_config(), rng);
  InteractionIndex idx(b);
  CfmrInputs in = model.prepare(b, idx);
  Rng tr(3);
  const auto triples = sample_bpr_triples(idx, 6, tr);
  const std::vector<std::size_t> users{0, 1, 2, 3};
  for (int which : {0, 1, 2}) {
    auto r = grad_check(
        [&](Tape& t) {
          CfmrLosses l = cfmr_losses(model.forward(t, in), triples, users, 0.7);
          return which == 0 ? l.bpr.user_item : which == 1 ? l.bpr.item : l.contrastive;
        },
        {&model.params});
    EXPECT_LT(r.relative_error, kTol) << "loss " << which << " worst " << r.worst_parameter;
  }
}
