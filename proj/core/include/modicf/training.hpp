#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modicf/cfmr.hpp"
#include "modicf/dataset.hpp"
#include "modicf/mddc.hpp"
#include "modicf/metrics.hpp"
#include "modicf/numerics/optim.hpp"

namespace modicf {

enum class Variant {
  kFull,
  kNoCounterfactual,  // -C
  kNoConditioning,    // -con
  kImputeMean,        // D+M
  kImputeZero,        // D+Z
  kImputeRandom,      // D+R
  kImputeNearest,     // D+N
  kMeanNoCf,          // -D-C+M
};

const char* variant_name(Variant v);
// Accepts the names above and the short ablation labels (-C, -con, D+M, D+Z, D+R, D+N, -D-C+M).
Variant parse_variant(const std::string& s);
std::vector<Variant> all_variants();
bool uses_mddc(Variant v);
bool uses_counterfactual(Variant v);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  MddcConfig mddc;
  CfmrConfig cfmr;
  double lambda2 = 1e-5;

  double pretrain_lr = 1e-4;
  double lr_decay = 0.95;
  std::size_t lr_decay_interval = 100;
  std::size_t pretrain_epochs = 500;
  std::size_t pretrain_patience = 50;
  std::size_t pretrain_batch = 64;
  // Pretraining regenerates missing rows every this many epochs.
  std::size_t refine_interval = 1;

  double joint_lr = 1e-4;
  std::size_t joint_epochs = 250;
  std::size_t joint_patience = 20;
  std::size_t bpr_batch = 2048;
  std::size_t diff_batch = 64;
  std::size_t eval_k = 20;
  std::vector<std::size_t> report_ks{10, 20};

  // After joint training, replace cfmr.gamma with the grid value that maximizes
  // validation F_fuse@eval_k (counterfactual variants only).
  bool select_gamma = false;

  bool deterministic_sampling = true;
  std::uint64_t seed = 7;
  Variant variant = Variant::kFull;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json config_to_json(const TrainConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& j);
// Hex FNV-1a of the canonical JSON.
std::string config_hash(const TrainConfig& c);

// Named hyperparameter sets. "baby", "tiktok", "allrecipes" carry the published table
// values; "desk" is sized for the synthetic bundle on one CPU; "toy" is for tests.
TrainConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// Candidate reference scores for select_gamma.
inline const std::vector<double> kGammaGrid{0.001, 0.01, 0.1, 1, 10, 20, 30, 40, 50};

// Pretraining learning rate after `epoch` completed epochs.
double pretrain_lr_at(const TrainConfig& c, std::size_t epoch);

enum class Stage { kPretrain, kJoint, kDone };

struct TrainingState {
  TrainConfig config;
  Stage stage = Stage::kPretrain;
  std::size_t epoch = 0;  // completed epochs in the current stage
  std::optional<MddcModel> mddc;
  AdamState mddc_adam;
  std::optional<CfmrModel> cfmr;
  AdamState cfmr_adam;
  DatasetBundle completed;  // masked bundle with the current imputations
  Rng rng;

  double best_pretrain_loss = 0;
  std::size_t pretrain_since_best = 0;
  std::vector<double> pretrain_losses;

  double best_val = -1;
  std::size_t best_epoch = 0;
  std::size_t since_best = 0;
  std::vector<double> joint_losses;
  std::vector<double> val_history;
  ParameterStore best_mddc_params;
  ParameterStore best_cfmr_params;
  std::vector<Tensor> best_features;
  std::vector<std::uint8_t> best_generated;

  // Wall-clock seconds per epoch; informational, not part of state equality.
  std::vector<double> epoch_seconds;

  bool same_trajectory(const TrainingState& other) const;
};

// Fresh state: baseline variants are imputed up front and start at the joint stage.
TrainingState init_training(const DatasetBundle& masked, const TrainConfig& config);

using EpochCallback = std::function<void(const TrainingState&)>;
// Runs at most `max_epochs` epochs (all remaining when absent) across stages.
// Returns true once training has finished.
bool advance_training(TrainingState& state, std::optional<std::size_t> max_epochs = std::nullopt,
                      const EpochCallback& on_epoch = {});
// Runs the pretraining stage to completion only.
void finish_pretraining(TrainingState& state, const EpochCallback& on_epoch = {});

struct JointLoss {
  double diff = 0;
  double bpr_user_item = 0;
  double bpr_item = 0;
  double contrastive = 0;
  double l2 = 0;
  double total = 0;
  std::size_t regularized_parameters = 0;
};
// Objective of one joint step: L_diff + L_BPR + lambda1 L_CL + lambda2 ||Theta||^2.
// With a grad-enabled tape, backward has been run and gradients are in the stores.
JointLoss joint_step_loss(Tape& tape, TrainingState& state, const CfmrInputs& inputs,
                          const std::vector<BprTriple>& triples, const std::vector<std::size_t>& users,
                          const std::vector<std::vector<std::size_t>>& diff_batches, Rng& noise_rng);

// lambda * sum of squares over every parameter of the stores; `count` receives the number
// of parameter tensors covered.
Var l2_penalty(Tape& tape, const std::vector<ParameterStore*>& stores, double lambda, std::size_t& count);

// Score table of the current models on the completed bundle.
ScoreTable score_state(TrainingState& state);
// Ranking scores under the variant's inference rule.
Tensor variant_scores(TrainingState& state);
MetricReport evaluate_state(TrainingState& state, Split split);

// Trains the variant end to end and reports test metrics (plus imputation MSE when
// held-out features exist).
MetricReport run_variant(const DatasetBundle& masked, Variant variant, TrainConfig config);

// Single-file checkpoint: "MDCK" | u32 version | u32 scalar bytes | u64 header length |
// JSON header | tensors in header order (u32 rows, u32 cols, little-endian payload).
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);
// `masked` must be the bundle the checkpoint was trained on (checked by content hash).
TrainingState load_checkpoint(const std::filesystem::path& path, const DatasetBundle& masked);

std::string bundle_hash(const DatasetBundle& bundle);

}  // namespace modicf
