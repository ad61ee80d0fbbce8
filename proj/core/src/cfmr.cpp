#include "modicf/cfmr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "modicf/parallel.hpp"

namespace modicf {

void CfmrConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw std::invalid_argument("embedding dimension " + std::to_string(embed_dim) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (layers == 0) throw std::invalid_argument("propagation needs at least one layer");
  if (top_k == 0) throw std::invalid_argument("graph top-k must be at least 1");
  if (gamma < 0) throw std::invalid_argument("gamma must be non-negative");
  if (eta < 0 || delta < 0 || alpha2 < 0 || lambda1 < 0) throw std::invalid_argument("loss weights must be non-negative");
  if (contrastive_batch < 2) throw std::invalid_argument("contrastive batch must hold at least two users");
}

namespace {

std::vector<Scalar> row_norms(const Tensor& x) {
  std::vector<Scalar> n(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) n[r] = l2_norm(x.row_span(r));
  return n;
}

void top_k_rows(const Tensor& a, const Tensor& b, std::size_t k, std::vector<std::vector<std::uint32_t>>& ids,
                std::vector<std::vector<Scalar>>& sims) {
  const auto na = row_norms(a);
  const auto nb = row_norms(b);
  const std::size_t keep = std::min(k, b.rows());
  ids.assign(a.rows(), {});
  sims.assign(a.rows(), {});
  parallel_for(a.rows(), [&](std::size_t begin, std::size_t end) {
    std::vector<Scalar> s(b.rows());
    std::vector<std::uint32_t> order(b.rows());
    for (std::size_t r = begin; r < end; ++r) {
      for (std::size_t c = 0; c < b.rows(); ++c) {
        const Scalar denom = na[r] * nb[c];
        s[c] = denom > 0 ? std::clamp(dot(a.row_span(r), b.row_span(c)) / denom, Scalar(-1), Scalar(1)) : Scalar(0);
      }
      std::iota(order.begin(), order.end(), 0u);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](std::uint32_t x, std::uint32_t y) { return s[x] > s[y] || (s[x] == s[y] && x < y); });
      ids[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
      for (auto c : ids[r]) sims[r].push_back(s[c]);
    }
  });
}

SparseMatrix neighbour_mean(const std::vector<std::vector<std::uint32_t>>& lists, std::size_t cols) {
  std::vector<Triplet> t;
  for (std::size_t r = 0; r < lists.size(); ++r) {
    if (lists[r].empty()) continue;
    const Scalar w = Scalar(1) / std::sqrt(static_cast<Scalar>(lists[r].size()));
    for (auto c : lists[r]) t.push_back({r, c, w});
  }
  return SparseMatrix(lists.size(), cols, std::move(t));
}

}  // namespace

ModalityGraph build_modality_graph(const Tensor& user_features, const Tensor& item_features, std::size_t k) {
  if (k == 0) throw std::invalid_argument("graph top-k must be at least 1");
  if (user_features.cols() != item_features.cols()) throw ShapeError("user and item features differ in width");
  ModalityGraph g;
  g.k = k;
  top_k_rows(user_features, item_features, k, g.user_neighbors, g.user_similarity);
  top_k_rows(item_features, user_features, k, g.item_neighbors, g.item_similarity);
  return g;
}

BaseGraph BaseGraph::from_index(const InteractionIndex& index) {
  std::vector<std::vector<std::uint32_t>> users_items = index.items_of_users(Split::kTrain);
  BaseGraph b;
  b.user_from_items = neighbour_mean(users_items, index.n_items());
  b.item_from_users = neighbour_mean(index.train_users_of_items(), index.n_users());
  b.propagate_users = index.normalized_train_matrix();
  b.propagate_items = b.propagate_users.transposed();
  return b;
}

FeaturePair modality_aware_features(const BaseGraph& base, Var latents) {
  Var users = spmm(base.user_from_items, latents);
  Var items = spmm(base.item_from_users, users);
  return {users, items};
}

FeaturePair aggregate_id_embeddings(const ModalityGraph& graph, Var user_embeddings, Var item_embeddings) {
  const SparseMatrix to_users = neighbour_mean(graph.user_neighbors, item_embeddings.rows());
  const SparseMatrix to_items = neighbour_mean(graph.item_neighbors, user_embeddings.rows());
  return {spmm(to_users, item_embeddings), spmm(to_items, user_embeddings)};
}

std::vector<Var> cross_modal_attention(const std::vector<Var>& embeddings, Var w_q, Var w_k, std::size_t heads) {
  if (embeddings.empty()) throw std::invalid_argument("attention needs at least one modality");
  const std::size_t d = embeddings.front().cols();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("embedding dimension " + std::to_string(d) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const std::size_t M = embeddings.size();

  std::vector<Var> queries, keys;
  for (const auto& e : embeddings) {
    queries.push_back(matmul(e, w_q));
    keys.push_back(matmul(e, w_k));
  }
  std::vector<Var> out;
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<Var> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
      Var q = slice_cols(queries[m], h * dh, (h + 1) * dh);
      std::vector<Var> scores;
      for (std::size_t n = 0; n < M; ++n) {
        scores.push_back(sum(mul(q, slice_cols(keys[n], h * dh, (h + 1) * dh)), 1) * scale);
      }
      Var weights = softmax(concat(scores, 1));
      Var acc;
      for (std::size_t n = 0; n < M; ++n) {
        Var term = scale_rows(slice_cols(embeddings[n], h * dh, (h + 1) * dh), slice_cols(weights, n, n + 1));
        acc = n == 0 ? term : add(acc, term);
      }
      head_out.push_back(acc);
    }
    out.push_back(heads == 1 ? head_out.front() : concat(head_out, 1));
  }
  return out;
}

Var mean_pool(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("mean_pool of nothing");
  Var acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, Scalar(1) / static_cast<Scalar>(parts.size()));
}

Var propagation_init(Var embeddings, Var attended, double eta) {
  if (eta == 0) return embeddings;
  return add(embeddings, scale(normalize_rows(attended), static_cast<Scalar>(eta)));
}

FeaturePair high_order_propagation(const BaseGraph& base, Var users0, Var items0, std::size_t layers) {
  if (layers == 0) throw std::invalid_argument("propagation needs at least one layer");
  Var u = users0, i = items0;
  Var su, si;
  for (std::size_t l = 0; l < layers; ++l) {
    Var nu = spmm(base.propagate_users, i);
    Var ni = spmm(base.propagate_items, u);
    u = nu;
    i = ni;
    su = l == 0 ? u : add(su, u);
    si = l == 0 ? i : add(si, i);
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(layers);
  return {scale(su, inv), scale(si, inv)};
}

Var fuse_final(Var propagated, const std::vector<Var>& modality_features, double delta) {
  if (delta == 0 || modality_features.empty()) return propagated;
  Var acc = normalize_rows(modality_features.front());
  for (std::size_t m = 1; m < modality_features.size(); ++m) acc = add(acc, normalize_rows(modality_features[m]));
  return add(propagated, scale(acc, static_cast<Scalar>(delta)));
}

Var predict_matching(Var f_users, Var f_items) { return sum(mul(f_users, f_items), 1); }

Var contrastive_loss(Var f_users, const std::vector<Var>& modal_embeddings) {
  if (f_users.rows() < 2) throw std::invalid_argument("contrastive loss needs a batch of at least two users");
  if (modal_embeddings.empty()) throw std::invalid_argument("contrastive loss needs at least one modality");
  Var f = normalize_rows(f_users);
  Var ft = transpose(f);
  Var total;
  for (std::size_t m = 0; m < modal_embeddings.size(); ++m) {
    Var e = normalize_rows(modal_embeddings[m]);
    Var positive = sum(mul(e, f), 1);
    Var cross = exp(matmul(e, ft));
    Var self = exp(matmul(e, transpose(e)));
    Var denom = log(add(sum(cross, 1), sum(self, 1)));
    Var term = sum(sub(denom, positive));
    total = m == 0 ? term : add(total, term);
  }
  return total;
}

Var bpr_loss(Var positive, Var negative) {
  if (positive.rows() == 0) throw std::invalid_argument("BPR loss over an empty triple set");
  return neg(sum(log_sigmoid(sub(positive, negative))));
}

BprLosses bpr_losses(Var pos_ui, Var neg_ui, Var pos_i, Var neg_i, double alpha2) {
  BprLosses l;
  l.user_item = bpr_loss(pos_ui, neg_ui);
  l.item = bpr_loss(pos_i, neg_i);
  l.total = alpha2 == 0 ? l.user_item : add(l.user_item, scale(l.item, static_cast<Scalar>(alpha2)));
  return l;
}

Scalar counterfactual_adjust(Scalar y_ui, Scalar y_i, Scalar gamma) {
  const Scalar s = sigmoid(y_i);
  return y_ui * s - gamma * s;
}

Var ItemPredictor::operator()(Tape& tape, ParameterStore& store, Var concatenated_latents) const {
  return output(tape, store, leaky_relu(hidden(tape, store, concatenated_latents)));
}

Tensor ranking_scores(const ScoreTable& table, double gamma, bool counterfactual) {
  if (!counterfactual) return table.raw;
  Tensor out(table.raw.rows(), table.raw.cols());
  const Scalar g = static_cast<Scalar>(gamma);
  parallel_for(out.rows(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t u = begin; u < end; ++u)
      for (std::size_t i = 0; i < out.cols(); ++i)
        out(u, i) = counterfactual_adjust(table.raw(u, i), table.item_direct(i, 0), g);
  });
  return out;
}

CfmrModel CfmrModel::create(const DatasetBundle& bundle, const CfmrConfig& config, Rng& rng) {
  config.validate();
  if (bundle.n_modalities() == 0) throw std::invalid_argument("recommender needs at least one modality");
  CfmrModel model;
  model.config = config;
  const std::size_t d = config.embed_dim;
  const std::size_t M = bundle.n_modalities();
  auto embedding = [&](std::size_t rows) {
    Tensor t(rows, d);
    rng.fill_normal(t, 0.0, 0.1);
    return t;
  };
  model.user_embedding = model.params.add("cfmr.user_emb", embedding(bundle.n_users));
  model.item_embedding = model.params.add("cfmr.item_emb", embedding(bundle.n_items));
  model.w_q = model.params.add("cfmr.attn.w_q", xavier_uniform(d, d, rng));
  model.w_k = model.params.add("cfmr.attn.w_k", xavier_uniform(d, d, rng));
  for (std::size_t m = 0; m < M; ++m) {
    model.encoders.push_back(
        Linear::create(model.params, "cfmr.enc" + std::to_string(m), bundle.modalities[m].dim(), d, rng));
    model.standardizers.push_back(fit_standardizer(bundle, m));
  }
  model.predictor.hidden = Linear::create(model.params, "cfmr.item_pred.hidden", M * d, d, rng);
  model.predictor.output = Linear::create(model.params, "cfmr.item_pred.out", d, 1, rng);
  return model;
}

Var CfmrModel::latent(Tape& tape, std::size_t m, const CfmrInputs& inputs) {
  return encoders.at(m)(tape, params, tape.constant(inputs.features.at(m)));
}

CfmrInputs CfmrModel::prepare(const DatasetBundle& completed, const InteractionIndex& index) {
  if (completed.n_modalities() != n_modalities()) throw std::invalid_argument("modality count changed");
  CfmrInputs in;
  in.base = BaseGraph::from_index(index);
  for (std::size_t m = 0; m < n_modalities(); ++m) {
    const Tensor& x = completed.modalities[m].data;
    const auto& st = standardizers[m];
    Tensor z(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) z(i, j) = (x(i, j) - st.mean(0, j)) / st.std(0, j);
    in.features.push_back(std::move(z));
  }
  Tape tape(false);
  for (std::size_t m = 0; m < n_modalities(); ++m) {
    FeaturePair f = modality_aware_features(in.base, latent(tape, m, in));
    in.graphs.push_back(build_modality_graph(f.users.value(), f.items.value(), config.top_k));
  }
  return in;
}

CfmrForward CfmrModel::forward(Tape& tape, const CfmrInputs& inputs) {
  const std::size_t M = n_modalities();
  if (inputs.graphs.size() != M || inputs.features.size() != M) throw std::invalid_argument("inputs not prepared");
  CfmrForward f;
  Var eu = tape.param(params, user_embedding);
  Var ei = tape.param(params, item_embedding);
  std::vector<Var> user_ids, item_ids, user_feats, item_feats;
  for (std::size_t m = 0; m < M; ++m) {
    f.latents.push_back(latent(tape, m, inputs));
    f.features.push_back(modality_aware_features(inputs.base, f.latents.back()));
    f.modal_ids.push_back(aggregate_id_embeddings(inputs.graphs[m], eu, ei));
    user_ids.push_back(f.modal_ids.back().users);
    item_ids.push_back(f.modal_ids.back().items);
    user_feats.push_back(f.features.back().users);
    item_feats.push_back(f.features.back().items);
  }
  Var wq = tape.param(params, w_q);
  Var wk = tape.param(params, w_k);
  f.attended = {mean_pool(cross_modal_attention(user_ids, wq, wk, config.heads)),
                mean_pool(cross_modal_attention(item_ids, wq, wk, config.heads))};
  f.propagated = high_order_propagation(inputs.base, propagation_init(eu, f.attended.users, config.eta),
                                        propagation_init(ei, f.attended.items, config.eta), config.layers);
  f.fused = {fuse_final(f.propagated.users, user_feats, config.delta),
             fuse_final(f.propagated.items, item_feats, config.delta)};
  f.item_direct = predictor(tape, params, M == 1 ? f.latents.front() : concat(f.latents, 1));
  return f;
}

CfmrLosses cfmr_losses(const CfmrForward& fwd, const std::vector<BprTriple>& triples,
                       const std::vector<std::size_t>& users, double alpha2) {
  if (triples.empty()) throw std::invalid_argument("BPR loss over an empty triple set");
  std::vector<std::size_t> u, p, n;
  for (const auto& t : triples) {
    u.push_back(t.user);
    p.push_back(t.positive);
    n.push_back(t.negative);
  }
  Var fu = gather_rows(fwd.fused.users, u);
  Var pos_ui = predict_matching(fu, gather_rows(fwd.fused.items, p));
  Var neg_ui = predict_matching(fu, gather_rows(fwd.fused.items, n));
  CfmrLosses l;
  l.bpr = bpr_losses(pos_ui, neg_ui, gather_rows(fwd.item_direct, p), gather_rows(fwd.item_direct, n), alpha2);
  std::vector<Var> modal;
  for (const auto& e : fwd.modal_ids) modal.push_back(gather_rows(e.users, users));
  l.contrastive = contrastive_loss(gather_rows(fwd.fused.users, users), modal);
  return l;
}

ScoreTable CfmrScorer::score(const DatasetBundle& completed) {
  InteractionIndex index(completed);
  CfmrInputs inputs = model_.prepare(completed, index);
  Tape tape(false);
  CfmrForward f = model_.forward(tape, inputs);
  const Tensor& fu = f.fused.users.value();
  const Tensor& fi = f.fused.items.value();
  ScoreTable s{Tensor(fu.rows(), fi.rows()), f.item_direct.value()};
  parallel_for(fu.rows(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t u = begin; u < end; ++u)
      for (std::size_t i = 0; i < fi.rows(); ++i) s.raw(u, i) = dot(fu.row_span(u), fi.row_span(i));
  });
  return s;
}

}  // namespace modicf
