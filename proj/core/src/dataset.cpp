#include "modicf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

namespace modicf {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split label '" + s + "'");
}

// ---- IndicatorMatrix ------------------------------------------------------

std::vector<std::size_t> IndicatorMatrix::observed_set(std::size_t m) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n_items_; ++i)
    if (observed(i, m)) out.push_back(i);
  return out;
}

std::vector<std::size_t> IndicatorMatrix::missing_set(std::size_t m) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n_items_; ++i)
    if (!observed(i, m)) out.push_back(i);
  return out;
}

std::size_t IndicatorMatrix::missing_count() const {
  return static_cast<std::size_t>(std::count(entries_.begin(), entries_.end(), std::uint8_t{0}));
}

double IndicatorMatrix::missing_fraction() const {
  return entries_.empty() ? 0.0 : static_cast<double>(missing_count()) / static_cast<double>(entries_.size());
}

bool IndicatorMatrix::incomplete(std::size_t item) const {
  for (std::size_t m = 0; m < n_modalities_; ++m)
    if (!observed(item, m)) return true;
  return false;
}

std::size_t IndicatorMatrix::incomplete_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < n_items_; ++i) n += incomplete(i) ? 1 : 0;
  return n;
}

// ---- DatasetBundle --------------------------------------------------------

void DatasetBundle::validate() const {
  if (n_users == 0 || n_items == 0) throw DataError("bundle has no users or no items");
  if (modalities.empty()) throw DataError("bundle has no modalities");
  std::vector<char> user_train(n_users, 0), item_train(n_items, 0);
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  std::size_t train_count = 0;
  for (const auto& it : interactions) {
    if (it.user >= n_users || it.item >= n_items) throw DataError("interaction id out of range");
    if (!seen.emplace(it.user, it.item).second) {
      throw DataError("duplicate interaction (" + std::to_string(it.user) + ", " + std::to_string(it.item) + ")");
    }
    if (it.split == Split::kTrain) {
      ++train_count;
      user_train[it.user] = 1;
      item_train[it.item] = 1;
    }
  }
  if (train_count == 0) throw DataError("empty training split");
  for (std::size_t u = 0; u < n_users; ++u)
    if (!user_train[u]) throw DataError("user " + std::to_string(u) + " has no train interaction");
  for (std::size_t i = 0; i < n_items; ++i)
    if (!item_train[i]) throw DataError("item " + std::to_string(i) + " has no train interaction");
  for (const auto& m : modalities) {
    if (m.dim() == 0) throw DataError("modality '" + m.name + "' has dimension 0");
    if (m.data.rows() != n_items) {
      throw DataError("modality '" + m.name + "' has " + std::to_string(m.data.rows()) + " rows, expected " +
                      std::to_string(n_items));
    }
    if (!m.data.all_finite()) throw DataError("modality '" + m.name + "' contains non-finite values");
  }
  if (indicator.n_items() != n_items || indicator.n_modalities() != modalities.size()) {
    throw DataError("indicator matrix shape does not match the bundle");
  }
  for (std::size_t i = 0; i < n_items; ++i) {
    bool any = false;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      if (indicator.observed(i, m)) {
        any = true;
      } else if (!is_generated(i, m)) {
        for (Scalar v : modalities[m].data.row_span(i))
          if (v != Scalar(0)) throw DataError("masked row of item " + std::to_string(i) + " is not zero");
      }
    }
    if (!any) throw DataError("item " + std::to_string(i) + " has no observed modality");
  }
  if (!heldout.empty() && heldout.size() != modalities.size()) throw DataError("held-out modality count mismatch");
  if (!generated.empty() && generated.size() != n_items * modalities.size()) {
    throw DataError("generated-row flags have the wrong size");
  }
}

// ---- InteractionIndex -----------------------------------------------------

InteractionIndex::InteractionIndex(const DatasetBundle& bundle) : n_users_(bundle.n_users), n_items_(bundle.n_items) {
  for (auto& v : by_user_) v.assign(n_users_, {});
  train_by_item_.assign(n_items_, {});
  for (const auto& it : bundle.interactions) {
    by_user_[static_cast<int>(it.split)][it.user].push_back(it.item);
    if (it.split == Split::kTrain) {
      train_by_item_[it.item].push_back(it.user);
      train_.push_back(it);
    }
  }
  for (auto& v : by_user_)
    for (auto& l : v) std::sort(l.begin(), l.end());
  for (auto& l : train_by_item_) std::sort(l.begin(), l.end());
  std::sort(train_.begin(), train_.end(), [](const Interaction& a, const Interaction& b) {
    return a.user != b.user ? a.user < b.user : a.item < b.item;
  });
}

bool InteractionIndex::is_train_positive(std::size_t user, std::size_t item) const {
  const auto& l = by_user_[0][user];
  return std::binary_search(l.begin(), l.end(), static_cast<std::uint32_t>(item));
}

SparseMatrix InteractionIndex::train_matrix() const {
  std::vector<Triplet> t;
  t.reserve(train_.size());
  for (const auto& it : train_) t.push_back({it.user, it.item, Scalar(1)});
  return SparseMatrix(n_users_, n_items_, std::move(t));
}

SparseMatrix InteractionIndex::normalized_train_matrix() const {
  std::vector<Triplet> t;
  t.reserve(train_.size());
  for (const auto& it : train_) {
    const double du = static_cast<double>(by_user_[0][it.user].size());
    const double di = static_cast<double>(train_by_item_[it.item].size());
    t.push_back({it.user, it.item, static_cast<Scalar>(1.0 / std::sqrt(du * di))});
  }
  return SparseMatrix(n_users_, n_items_, std::move(t));
}

// ---- synthetic generator --------------------------------------------------

namespace {

std::vector<std::size_t> balanced_groups(std::size_t n, std::size_t groups, Rng& rng) {
  std::vector<std::size_t> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = i % groups;
  rng.shuffle(g);
  return g;
}

void assign_splits(std::vector<Interaction>& interactions, std::size_t n_users, std::size_t n_items, Rng& rng) {
  std::vector<std::vector<std::size_t>> per_user(n_users);
  for (std::size_t k = 0; k < interactions.size(); ++k) per_user[interactions[k].user].push_back(k);
  for (auto& ks : per_user) {
    rng.shuffle(ks);
    const double n = static_cast<double>(ks.size());
    // Stochastic rounding keeps the expected ratio at 8:1:1 for short histories.
    std::size_t n_test = static_cast<std::size_t>(std::floor(0.1 * n + rng.uniform()));
    std::size_t n_val = static_cast<std::size_t>(std::floor(0.1 * n + rng.uniform()));
    while (n_test + n_val >= ks.size() && (n_test + n_val) > 0) {
      if (n_val >= n_test && n_val > 0)
        --n_val;
      else
        --n_test;
    }
    for (std::size_t j = 0; j < ks.size(); ++j) {
      Split s = Split::kTrain;
      if (j < n_test)
        s = Split::kTest;
      else if (j < n_test + n_val)
        s = Split::kVal;
      interactions[ks[j]].split = s;
    }
  }
  // Every item needs a train interaction; promote one held-out interaction if not.
  std::vector<char> has_train(n_items, 0);
  for (const auto& it : interactions)
    if (it.split == Split::kTrain) has_train[it.item] = 1;
  for (auto& it : interactions) {
    if (!has_train[it.item]) {
      it.split = Split::kTrain;
      has_train[it.item] = 1;
    }
  }
}

}  // namespace

DatasetBundle generate_synthetic(const SyntheticConfig& c) {
  if (c.n_users == 0 || c.n_items == 0 || c.dims.empty() || c.n_latent_groups == 0) {
    throw std::invalid_argument("synthetic generator needs positive counts");
  }
  if (!(c.density > 0.0 && c.density < 1.0)) throw std::invalid_argument("density must be in (0, 1)");
  for (auto d : c.dims)
    if (d == 0) throw std::invalid_argument("modality dimensions must be positive");
  if (!c.names.empty() && c.names.size() != c.dims.size()) throw std::invalid_argument("one name per modality");

  Rng group_rng = substream(c.seed, "synth-groups");
  Rng edge_rng = substream(c.seed, "synth-edges");
  Rng feat_rng = substream(c.seed, "synth-features");
  Rng split_rng = substream(c.seed, "synth-splits");

  const std::size_t G = c.n_latent_groups;
  const auto user_group = balanced_groups(c.n_users, G, group_rng);
  const auto item_group = balanced_groups(c.n_items, G, group_rng);

  // Pick within/cross probabilities so that E[#interactions] = N_U * N_I * density exactly.
  std::vector<double> users_in(G, 0), items_in(G, 0);
  for (auto g : user_group) users_in[g] += 1;
  for (auto g : item_group) items_in[g] += 1;
  double same_pairs = 0;
  for (std::size_t g = 0; g < G; ++g) same_pairs += users_in[g] * items_in[g];
  const double all_pairs = static_cast<double>(c.n_users) * static_cast<double>(c.n_items);
  const double ratio = G == 1 ? 1.0 : c.affinity_ratio;
  double p_out = c.density * all_pairs / (ratio * same_pairs + (all_pairs - same_pairs));
  double p_in = std::min(1.0, ratio * p_out);
  if (p_in >= 1.0) p_out = (c.density * all_pairs - same_pairs) / (all_pairs - same_pairs);
  if (!(p_out >= 0.0 && p_out <= 1.0)) throw std::invalid_argument("density not reachable with this affinity ratio");

  std::vector<std::vector<char>> y(c.n_users, std::vector<char>(c.n_items, 0));
  auto prob = [&](std::size_t u, std::size_t i) { return user_group[u] == item_group[i] ? p_in : p_out; };
  for (std::size_t u = 0; u < c.n_users; ++u)
    for (std::size_t i = 0; i < c.n_items; ++i) y[u][i] = edge_rng.bernoulli(prob(u, i)) ? 1 : 0;

  constexpr int kMaxRetries = 200;
  for (std::size_t u = 0; u < c.n_users; ++u) {
    int tries = 0;
    while (std::count(y[u].begin(), y[u].end(), 1) == 0) {
      if (++tries > kMaxRetries) throw DataError("user " + std::to_string(u) + " stays interaction-free; raise density");
      for (std::size_t i = 0; i < c.n_items; ++i) y[u][i] = edge_rng.bernoulli(prob(u, i)) ? 1 : 0;
    }
  }
  for (std::size_t i = 0; i < c.n_items; ++i) {
    int tries = 0;
    auto column_empty = [&] {
      for (std::size_t u = 0; u < c.n_users; ++u)
        if (y[u][i]) return false;
      return true;
    };
    while (column_empty()) {
      if (++tries > kMaxRetries) throw DataError("item " + std::to_string(i) + " stays interaction-free; raise density");
      for (std::size_t u = 0; u < c.n_users; ++u) y[u][i] = edge_rng.bernoulli(prob(u, i)) ? 1 : 0;
    }
  }

  DatasetBundle b;
  b.n_users = c.n_users;
  b.n_items = c.n_items;
  for (std::size_t u = 0; u < c.n_users; ++u)
    for (std::size_t i = 0; i < c.n_items; ++i)
      if (y[u][i]) b.interactions.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(i), Split::kTrain});
  assign_splits(b.interactions, c.n_users, c.n_items, split_rng);

  for (std::size_t m = 0; m < c.dims.size(); ++m) {
    const std::size_t d = c.dims[m];
    Tensor means(G, d);
    feat_rng.fill_normal(means, 0.0, c.group_mean_std);
    ModalityFeatures f;
    f.name = c.names.empty() ? "modality_" + std::to_string(m) : c.names[m];
    f.data = Tensor(c.n_items, d);
    for (std::size_t i = 0; i < c.n_items; ++i)
      for (std::size_t k = 0; k < d; ++k)
        f.data(i, k) = static_cast<Scalar>(means(item_group[i], k) + c.noise_std * feat_rng.normal());
    b.modalities.push_back(std::move(f));
  }
  b.indicator = IndicatorMatrix(c.n_items, c.dims.size());
  b.validate();
  return b;
}

// ---- masking --------------------------------------------------------------

MaskResult apply_missing_mask(const DatasetBundle& bundle, double mr, std::uint64_t seed) {
  const std::size_t M = bundle.n_modalities();
  const std::size_t N = bundle.n_items;
  if (M < 2) throw std::invalid_argument("missing-rate masking needs at least two modalities (M = 1 admits no valid MR)");
  const double upper = static_cast<double>(M - 1) / static_cast<double>(M);
  if (!(mr > 0.0) || mr > upper + 1e-12) {
    throw std::invalid_argument("missing rate " + std::to_string(mr) + " outside (0, " + std::to_string(upper) + "]");
  }
  if (bundle.indicator.missing_count() != 0) throw std::invalid_argument("bundle is already masked");

  const auto target = static_cast<std::size_t>(std::llround(mr * static_cast<double>(N * M)));
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  cells.reserve(N * M);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t m = 0; m < M; ++m) cells.emplace_back(i, m);
  Rng rng = substream(seed, "mask");
  rng.shuffle(cells);

  MaskPlan plan;
  plan.mr = mr;
  plan.seed = seed;
  plan.assignment.assign(N, {});
  std::size_t masked = 0;
  for (const auto& [i, m] : cells) {
    if (masked == target) break;
    if (plan.assignment[i].size() + 1 >= M) continue;  // would leave the item with nothing observed
    plan.assignment[i].push_back(m);
    ++masked;
  }
  if (masked != target) throw std::logic_error("could not reach the requested missing rate");
  for (auto& a : plan.assignment) std::sort(a.begin(), a.end());
  return {apply_mask_plan(bundle, plan), plan};
}

DatasetBundle apply_mask_plan(const DatasetBundle& bundle, const MaskPlan& plan) {
  if (plan.assignment.size() != bundle.n_items) throw std::invalid_argument("mask plan item count mismatch");
  DatasetBundle out = bundle;
  out.heldout = bundle.modalities;
  out.generated.clear();
  out.indicator = IndicatorMatrix(bundle.n_items, bundle.n_modalities());
  for (std::size_t i = 0; i < bundle.n_items; ++i) {
    if (plan.assignment[i].size() >= bundle.n_modalities()) {
      throw std::invalid_argument("mask plan removes every modality of item " + std::to_string(i));
    }
    for (auto m : plan.assignment[i]) {
      if (m >= bundle.n_modalities()) throw std::invalid_argument("mask plan modality index out of range");
      out.indicator.set(i, m, false);
      for (auto& v : out.modalities[m].data.row_span(i)) v = 0;
    }
  }
  out.mask = plan;
  return out;
}

// ---- BPR sampling ---------------------------------------------------------

namespace {

bool draw_negative(const InteractionIndex& index, std::uint32_t user, Rng& rng, std::uint32_t& out) {
  const auto& pos = index.items_of_users(Split::kTrain)[user];
  if (pos.size() >= index.n_items()) return false;
  while (true) {
    const auto cand = static_cast<std::uint32_t>(rng.uniform_index(index.n_items()));
    if (!std::binary_search(pos.begin(), pos.end(), cand)) {
      out = cand;
      return true;
    }
  }
}

void warn_saturated(std::uint32_t user) {
  std::cerr << "warning: user " << user << " interacted with every item; no negatives, skipped\n";
}

}  // namespace

std::vector<BprTriple> sample_bpr_triples(const InteractionIndex& index, std::size_t batch_size, Rng& rng) {
  const auto& train = index.train();
  if (train.empty()) throw DataError("empty training split");
  std::vector<BprTriple> out;
  out.reserve(batch_size);
  std::set<std::uint32_t> warned;
  std::size_t attempts = 0;
  while (out.size() < batch_size) {
    const auto& it = train[rng.uniform_index(train.size())];
    std::uint32_t neg = 0;
    if (!draw_negative(index, it.user, rng, neg)) {
      if (warned.insert(it.user).second) warn_saturated(it.user);
      if (++attempts > 64 * (batch_size + train.size())) break;
      continue;
    }
    out.push_back({it.user, it.item, neg});
  }
  return out;
}

std::vector<BprTriple> epoch_bpr_triples(const InteractionIndex& index, Rng& rng) {
  std::vector<Interaction> order = index.train();
  rng.shuffle(order);
  std::vector<BprTriple> out;
  out.reserve(order.size());
  std::set<std::uint32_t> warned;
  for (const auto& it : order) {
    std::uint32_t neg = 0;
    if (!draw_negative(index, it.user, rng, neg)) {
      if (warned.insert(it.user).second) warn_saturated(it.user);
      continue;
    }
    out.push_back({it.user, it.item, neg});
  }
  return out;
}

}  // namespace modicf
