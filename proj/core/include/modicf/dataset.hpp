#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "modicf/numerics/sparse.hpp"
#include "modicf/numerics/tensor.hpp"
#include "modicf/random.hpp"

namespace modicf {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  Split split = Split::kTrain;
  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct ModalityFeatures {
  std::string name;
  Tensor data;  // n_items x dim

  std::size_t dim() const { return data.cols(); }
  friend bool operator==(const ModalityFeatures&, const ModalityFeatures&) = default;
};

// E in {0,1}^{N_I x M}; 1 = observed.
class IndicatorMatrix {
 public:
  IndicatorMatrix() = default;
  IndicatorMatrix(std::size_t n_items, std::size_t n_modalities)
      : n_items_(n_items), n_modalities_(n_modalities), entries_(n_items * n_modalities, 1) {}

  std::size_t n_items() const { return n_items_; }
  std::size_t n_modalities() const { return n_modalities_; }
  bool observed(std::size_t item, std::size_t m) const { return entries_[item * n_modalities_ + m] != 0; }
  void set(std::size_t item, std::size_t m, bool observed) { entries_[item * n_modalities_ + m] = observed ? 1 : 0; }

  std::vector<std::size_t> observed_set(std::size_t m) const;
  std::vector<std::size_t> missing_set(std::size_t m) const;
  std::size_t missing_count() const;
  double missing_fraction() const;
  // An item is incomplete iff any modality is missing.
  bool incomplete(std::size_t item) const;
  std::size_t incomplete_count() const;

  friend bool operator==(const IndicatorMatrix&, const IndicatorMatrix&) = default;

 private:
  std::size_t n_items_ = 0;
  std::size_t n_modalities_ = 0;
  std::vector<std::uint8_t> entries_;
};

struct MaskPlan {
  double mr = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> assignment;  // per item: masked modality indices (sorted)
  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

struct DatasetBundle {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::vector<Interaction> interactions;
  std::vector<ModalityFeatures> modalities;
  IndicatorMatrix indicator;
  std::optional<MaskPlan> mask;
  // Pre-mask features; never read by training, only by imputation-quality reporting.
  std::vector<ModalityFeatures> heldout;
  // N_I x M flags for missing cells whose rows hold generated (imputed) content.
  std::vector<std::uint8_t> generated;

  std::size_t n_modalities() const { return modalities.size(); }
  bool is_generated(std::size_t item, std::size_t m) const {
    return !generated.empty() && generated[item * n_modalities() + m] != 0;
  }
  // Throws DataError on the first violated invariant.
  void validate() const;
  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

// Adjacency views derived from a bundle.
class InteractionIndex {
 public:
  explicit InteractionIndex(const DatasetBundle& bundle);

  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  // Sorted item lists per user for one split.
  const std::vector<std::vector<std::uint32_t>>& items_of_users(Split s) const { return by_user_[static_cast<int>(s)]; }
  const std::vector<std::vector<std::uint32_t>>& train_users_of_items() const { return train_by_item_; }
  bool is_train_positive(std::size_t user, std::size_t item) const;
  const std::vector<Interaction>& train() const { return train_; }

  // Y restricted to train, raw 0/1 entries (N_U x N_I).
  SparseMatrix train_matrix() const;
  // Symmetric degree normalization D_U^{-1/2} Y D_I^{-1/2}.
  SparseMatrix normalized_train_matrix() const;

 private:
  std::size_t n_users_ = 0;
  std::size_t n_items_ = 0;
  std::vector<std::vector<std::uint32_t>> by_user_[3];
  std::vector<std::vector<std::uint32_t>> train_by_item_;
  std::vector<Interaction> train_;
};

struct SyntheticConfig {
  std::size_t n_users = 300;
  std::size_t n_items = 200;
  std::vector<std::size_t> dims{16, 16};
  std::size_t n_latent_groups = 5;
  double density = 0.02;
  std::uint64_t seed = 7;
  // Interaction odds of a within-group pair relative to a cross-group pair.
  double affinity_ratio = 12.0;
  double group_mean_std = 1.0;
  double noise_std = 0.5;
  std::vector<std::string> names;  // defaults to modality_<m>
};

DatasetBundle generate_synthetic(const SyntheticConfig& config);

// Masks item-modality cells so the missing fraction equals mr; no item loses all modalities.
struct MaskResult {
  DatasetBundle bundle;
  MaskPlan plan;
};
MaskResult apply_missing_mask(const DatasetBundle& bundle, double mr, std::uint64_t seed);
// Re-applies a stored plan (same cells masked, same zeroing, held-out copy).
DatasetBundle apply_mask_plan(const DatasetBundle& bundle, const MaskPlan& plan);

struct BprTriple {
  std::uint32_t user = 0;
  std::uint32_t positive = 0;
  std::uint32_t negative = 0;
  friend bool operator==(const BprTriple&, const BprTriple&) = default;
};

// batch_size triples: train positive drawn uniformly, negative uniform over the
// user's non-train items. Users who interacted with every item are skipped with a warning.
std::vector<BprTriple> sample_bpr_triples(const InteractionIndex& index, std::size_t batch_size, Rng& rng);
// One triple per train interaction, in shuffled order.
std::vector<BprTriple> epoch_bpr_triples(const InteractionIndex& index, Rng& rng);

}  // namespace modicf
