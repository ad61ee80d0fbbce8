#pragma once

#include <cstdint>
#include <vector>

#include "modicf/dataset.hpp"
#include "modicf/mddc.hpp"
#include "modicf/numerics/autograd.hpp"
#include "modicf/random.hpp"

namespace modicf {

struct CfmrConfig {
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t top_k = 10;
  double eta = 0.7;
  double delta = 0.4;
  double gamma = 0.01;
  double alpha2 = 0.7;
  double lambda1 = 0.09;
  // Users per contrastive batch; the full user set is used when it is smaller.
  std::size_t contrastive_batch = 2048;

  void validate() const;
  friend bool operator==(const CfmrConfig&, const CfmrConfig&) = default;
};

// Top-k neighbour lists of one modality-aware interaction matrix Y^m.
struct ModalityGraph {
  std::size_t k = 0;
  std::vector<std::vector<std::uint32_t>> user_neighbors;  // items, best first
  std::vector<std::vector<Scalar>> user_similarity;
  std::vector<std::vector<std::uint32_t>> item_neighbors;  // users, best first
  std::vector<std::vector<Scalar>> item_similarity;

  friend bool operator==(const ModalityGraph&, const ModalityGraph&) = default;
};

// Cosine top-k in both directions; ties go to the lower index, zero rows have similarity 0.
ModalityGraph build_modality_graph(const Tensor& user_features, const Tensor& item_features, std::size_t k);

// Fixed operators of the training interaction graph.
struct BaseGraph {
  SparseMatrix user_from_items;  // N_U x N_I, entries 1/sqrt(|N_u|)
  SparseMatrix item_from_users;  // N_I x N_U, entries 1/sqrt(|N_i|)
  SparseMatrix propagate_users;  // D_U^{-1/2} Y D_I^{-1/2}
  SparseMatrix propagate_items;  // its transpose

  static BaseGraph from_index(const InteractionIndex& index);
};

struct FeaturePair {
  Var users;
  Var items;
};

// v~_u = sum over train items of v_a / sqrt|N_u|; v~_i aggregates v~ of the item's users.
FeaturePair modality_aware_features(const BaseGraph& base, Var latents);

// e^m_u = sum over graph neighbours of e_a / sqrt|N^m_u|; empty lists give zero rows.
FeaturePair aggregate_id_embeddings(const ModalityGraph& graph, Var user_embeddings, Var item_embeddings);

// Per-target-modality attention over all modalities with shared per-head query/key
// maps (w_q, w_k are d x d; head h owns columns [h d/H, (h+1) d/H)). Values are the
// head slices of the source embeddings. Returns one d-wide output per modality.
std::vector<Var> cross_modal_attention(const std::vector<Var>& embeddings, Var w_q, Var w_k, std::size_t heads);
Var mean_pool(const std::vector<Var>& parts);

// E + eta * row-normalized E_bar.
Var propagation_init(Var embeddings, Var attended, double eta);
// Alternating normalized propagation; returns the mean of layers 1..L.
FeaturePair high_order_propagation(const BaseGraph& base, Var users0, Var items0, std::size_t layers);

// e_hat + delta * sum_m normalize(v~^m); zero rows contribute nothing.
Var fuse_final(Var propagated, const std::vector<Var>& modality_features, double delta);

// Row-wise inner products (B x 1).
Var predict_matching(Var f_users, Var f_items);

// InfoNCE over a user batch: rows of f and of every e^m belong to the same users.
// The denominator spans all batch users for both terms, positive pair included.
Var contrastive_loss(Var f_users, const std::vector<Var>& modal_embeddings);

// -sum log sigm(pos - neg).
Var bpr_loss(Var positive, Var negative);

struct BprLosses {
  Var user_item;
  Var item;
  Var total;
};
BprLosses bpr_losses(Var pos_ui, Var neg_ui, Var pos_i, Var neg_i, double alpha2);

// y = (y_ui - gamma) * sigm(y_i).
Scalar counterfactual_adjust(Scalar y_ui, Scalar y_i, Scalar gamma);

struct ItemPredictor {
  Linear hidden;  // M d -> d
  Linear output;  // d -> 1

  Var operator()(Tape& tape, ParameterStore& store, Var concatenated_latents) const;
};

// Per-epoch inputs derived from the completed bundle.
struct CfmrInputs {
  BaseGraph base;
  std::vector<Tensor> features;  // standardized completed features per modality
  std::vector<ModalityGraph> graphs;
};

struct CfmrForward {
  std::vector<Var> latents;
  std::vector<FeaturePair> features;  // v~
  std::vector<FeaturePair> modal_ids;  // e^m
  FeaturePair attended;               // e_bar
  FeaturePair propagated;             // e_hat
  FeaturePair fused;                  // f
  Var item_direct;                    // y_i, N_I x 1
};

struct ScoreTable {
  Tensor raw;          // N_U x N_I
  Tensor item_direct;  // N_I x 1
  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

// Final ranking scores: the counterfactual adjustment, or raw scores when disabled.
Tensor ranking_scores(const ScoreTable& table, double gamma, bool counterfactual);

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual ScoreTable score(const DatasetBundle& completed) = 0;
};

class CfmrModel {
 public:
  CfmrConfig config;
  ParameterStore params;
  ParamId user_embedding, item_embedding;
  ParamId w_q, w_k;
  std::vector<Linear> encoders;  // d_m -> d latent encoders
  std::vector<Standardizer> standardizers;
  ItemPredictor predictor;

  static CfmrModel create(const DatasetBundle& bundle, const CfmrConfig& config, Rng& init_rng);

  std::size_t n_modalities() const { return encoders.size(); }

  // Standardizes completed features and rebuilds the modality graphs from the current encoders.
  CfmrInputs prepare(const DatasetBundle& completed, const InteractionIndex& index);
  Var latent(Tape& tape, std::size_t m, const CfmrInputs& inputs);
  CfmrForward forward(Tape& tape, const CfmrInputs& inputs);

  friend bool operator==(const CfmrModel& a, const CfmrModel& b) {
    return a.config == b.config && a.params == b.params && a.standardizers == b.standardizers;
  }
};

struct CfmrLosses {
  BprLosses bpr;
  Var contrastive;
};

// BPR terms over the triples and L_CL over `users` (at least two).
CfmrLosses cfmr_losses(const CfmrForward& fwd, const std::vector<BprTriple>& triples,
                       const std::vector<std::size_t>& users, double alpha2);

class CfmrScorer : public Scorer {
 public:
  explicit CfmrScorer(CfmrModel& model) : model_(model) {}
  ScoreTable score(const DatasetBundle& completed) override;

 private:
  CfmrModel& model_;
};

}  // namespace modicf
