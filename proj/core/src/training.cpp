#include "modicf/training.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "modicf/imputation.hpp"

namespace modicf {

namespace {

struct VariantInfo {
  Variant v;
  const char* name;
  const char* label;
};

constexpr VariantInfo kVariants[] = {
    {Variant::kFull, "full", "MoDiCF"},
    {Variant::kNoCounterfactual, "no-counterfactual", "-C"},
    {Variant::kNoConditioning, "no-conditioning", "-con"},
    {Variant::kImputeMean, "impute-mean", "D+M"},
    {Variant::kImputeZero, "impute-zero", "D+Z"},
    {Variant::kImputeRandom, "impute-random", "D+R"},
    {Variant::kImputeNearest, "impute-nearest", "D+N"},
    {Variant::kMeanNoCf, "mean-and-no-cf", "-D-C+M"},
};

}  // namespace

const char* variant_name(Variant v) {
  for (const auto& i : kVariants)
    if (i.v == v) return i.name;
  throw std::invalid_argument("unknown variant");
}

Variant parse_variant(const std::string& s) {
  for (const auto& i : kVariants)
    if (s == i.name || s == i.label) return i.v;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

std::vector<Variant> all_variants() {
  std::vector<Variant> out;
  for (const auto& i : kVariants) out.push_back(i.v);
  return out;
}

bool uses_mddc(Variant v) {
  return v == Variant::kFull || v == Variant::kNoCounterfactual || v == Variant::kNoConditioning;
}

bool uses_counterfactual(Variant v) { return v != Variant::kNoCounterfactual && v != Variant::kMeanNoCf; }

void TrainConfig::validate() const {
  cfmr.validate();
  auto positive = [](double x, const char* what) {
    if (!(x > 0)) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(pretrain_lr, "pretrain_lr");
  positive(joint_lr, "joint_lr");
  positive(lr_decay, "lr_decay");
  if (lambda2 < 0) throw std::invalid_argument("lambda2 must be non-negative");
  if (lr_decay_interval == 0 || refine_interval == 0 || pretrain_batch == 0 || bpr_batch == 0 || diff_batch == 0 || eval_k == 0) {
    throw std::invalid_argument("batch sizes, eval_k and lr_decay_interval must be positive");
  }
  if (joint_epochs == 0) throw std::invalid_argument("joint_epochs must be positive");
  if (report_ks.empty()) throw std::invalid_argument("report_ks must not be empty");
  if (mddc.T == 0 || mddc.T_s == 0 || mddc.T_s > mddc.T) throw std::invalid_argument("need 1 <= T_s <= T");
  if (mddc.latent_dim == 0 || mddc.encoder_hidden == 0 || mddc.condition_dim == 0 || mddc.time_embed_dim == 0) {
    throw std::invalid_argument("MDDC widths must be positive");
  }
  if (variant == Variant::kNoConditioning && mddc.use_conditions) {
    throw std::invalid_argument("variant no-conditioning conflicts with mddc.use_conditions = true");
  }
}

nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["variant"] = variant_name(c.variant);
  j["seed"] = c.seed;
  j["lambda2"] = c.lambda2;
  j["pretrain_lr"] = c.pretrain_lr;
  j["lr_decay"] = c.lr_decay;
  j["lr_decay_interval"] = c.lr_decay_interval;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_patience"] = c.pretrain_patience;
  j["pretrain_batch"] = c.pretrain_batch;
  j["refine_interval"] = c.refine_interval;
  j["joint_lr"] = c.joint_lr;
  j["joint_epochs"] = c.joint_epochs;
  j["joint_patience"] = c.joint_patience;
  j["bpr_batch"] = c.bpr_batch;
  j["diff_batch"] = c.diff_batch;
  j["eval_k"] = c.eval_k;
  j["report_ks"] = c.report_ks;
  j["deterministic_sampling"] = c.deterministic_sampling;
  j["select_gamma"] = c.select_gamma;
  j["mddc"] = {{"latent_dim", c.mddc.latent_dim}, {"encoder_hidden", c.mddc.encoder_hidden},
               {"condition_dim", c.mddc.condition_dim}, {"time_embed_dim", c.mddc.time_embed_dim},
               {"denoiser_width", c.mddc.denoiser_width},
               {"T", c.mddc.T}, {"beta_start", c.mddc.beta_start}, {"beta_end", c.mddc.beta_end},
               {"T_s", c.mddc.T_s}, {"alpha1", c.mddc.alpha1}, {"use_conditions", c.mddc.use_conditions},
               {"bounded_latents", c.mddc.bounded_latents}};
  j["cfmr"] = {{"embed_dim", c.cfmr.embed_dim}, {"heads", c.cfmr.heads}, {"layers", c.cfmr.layers},
               {"top_k", c.cfmr.top_k}, {"eta", c.cfmr.eta}, {"delta", c.cfmr.delta}, {"gamma", c.cfmr.gamma},
               {"alpha2", c.cfmr.alpha2}, {"lambda1", c.cfmr.lambda1},
               {"contrastive_batch", c.cfmr.contrastive_batch}};
  return j;
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
  if (j.contains(key)) {
    out = j.at(key).get<T>();
    seen.insert(key);
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!seen.count(k)) throw std::invalid_argument("unknown config key '" + where + k + "'");
  }
}

}  // namespace

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  std::set<std::string> seen;
  if (j.contains("preset")) {
    c = preset(j.at("preset").get<std::string>());
    seen.insert("preset");
  }
  if (j.contains("variant")) {
    c.variant = parse_variant(j.at("variant").get<std::string>());
    seen.insert("variant");
  }
  take(j, "seed", c.seed, seen);
  take(j, "lambda2", c.lambda2, seen);
  take(j, "pretrain_lr", c.pretrain_lr, seen);
  take(j, "lr_decay", c.lr_decay, seen);
  take(j, "lr_decay_interval", c.lr_decay_interval, seen);
  take(j, "pretrain_epochs", c.pretrain_epochs, seen);
  take(j, "pretrain_patience", c.pretrain_patience, seen);
  take(j, "pretrain_batch", c.pretrain_batch, seen);
  take(j, "refine_interval", c.refine_interval, seen);
  take(j, "joint_lr", c.joint_lr, seen);
  take(j, "joint_epochs", c.joint_epochs, seen);
  take(j, "joint_patience", c.joint_patience, seen);
  take(j, "bpr_batch", c.bpr_batch, seen);
  take(j, "diff_batch", c.diff_batch, seen);
  take(j, "eval_k", c.eval_k, seen);
  take(j, "report_ks", c.report_ks, seen);
  take(j, "deterministic_sampling", c.deterministic_sampling, seen);
  take(j, "select_gamma", c.select_gamma, seen);
  if (j.contains("mddc")) {
    seen.insert("mddc");
    const auto& m = j.at("mddc");
    std::set<std::string> s;
    take(m, "latent_dim", c.mddc.latent_dim, s);
    take(m, "encoder_hidden", c.mddc.encoder_hidden, s);
    take(m, "condition_dim", c.mddc.condition_dim, s);
    take(m, "time_embed_dim", c.mddc.time_embed_dim, s);
    take(m, "denoiser_width", c.mddc.denoiser_width, s);
    take(m, "T", c.mddc.T, s);
    take(m, "beta_start", c.mddc.beta_start, s);
    take(m, "beta_end", c.mddc.beta_end, s);
    take(m, "T_s", c.mddc.T_s, s);
    take(m, "alpha1", c.mddc.alpha1, s);
    take(m, "use_conditions", c.mddc.use_conditions, s);
    take(m, "bounded_latents", c.mddc.bounded_latents, s);
    reject_unknown(m, s, "mddc.");
  }
  if (j.contains("cfmr")) {
    seen.insert("cfmr");
    const auto& m = j.at("cfmr");
    std::set<std::string> s;
    take(m, "embed_dim", c.cfmr.embed_dim, s);
    take(m, "heads", c.cfmr.heads, s);
    take(m, "layers", c.cfmr.layers, s);
    take(m, "top_k", c.cfmr.top_k, s);
    take(m, "eta", c.cfmr.eta, s);
    take(m, "delta", c.cfmr.delta, s);
    take(m, "gamma", c.cfmr.gamma, s);
    take(m, "alpha2", c.cfmr.alpha2, s);
    take(m, "lambda1", c.cfmr.lambda1, s);
    take(m, "contrastive_batch", c.cfmr.contrastive_batch, s);
    reject_unknown(m, s, "cfmr.");
  }
  reject_unknown(j, seen, "");
  if (c.variant == Variant::kNoConditioning) c.mddc.use_conditions = false;
  return c;
}

namespace {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

std::string config_hash(const TrainConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.mddc.T_s = 10;
  c.cfmr.layers = 2;
  if (name == "baby") {
    c.cfmr.lambda1 = 0.09;
    c.cfmr.gamma = 0.01;
    c.mddc.alpha1 = 1.0;
    c.cfmr.alpha2 = 0.7;
    c.cfmr.eta = 0.7;
    c.cfmr.delta = 0.4;
    c.cfmr.heads = 8;
    c.cfmr.embed_dim = 256;
  } else if (name == "tiktok") {
    c.cfmr.lambda1 = 0.06;
    c.cfmr.gamma = 20;
    c.mddc.alpha1 = 0.7;
    c.cfmr.alpha2 = 0.3;
    c.cfmr.eta = 0.6;
    c.cfmr.delta = 0.3;
    c.cfmr.heads = 4;
    c.cfmr.embed_dim = 256;
  } else if (name == "allrecipes") {
    c.cfmr.lambda1 = 0.15;
    c.cfmr.gamma = 20;
    c.mddc.alpha1 = 0.6;
    c.cfmr.alpha2 = 0.5;
    c.cfmr.eta = 0.3;
    c.cfmr.delta = 0.4;
    c.cfmr.heads = 8;
    c.cfmr.embed_dim = 128;
  } else if (name == "desk" || name == "toy") {
    c = preset("tiktok");
    c.mddc.latent_dim = 8;
    c.mddc.encoder_hidden = 64;
    c.mddc.condition_dim = 32;
    c.mddc.time_embed_dim = 16;
    c.mddc.denoiser_width = 64;
    c.cfmr.embed_dim = 32;
    c.cfmr.heads = 4;
    c.pretrain_lr = 3e-3;
    c.pretrain_batch = 16;
    c.pretrain_epochs = 1000;
    c.pretrain_patience = 200;
    c.refine_interval = 10;
    c.joint_lr = 1e-3;
    c.joint_epochs = 100;
    c.bpr_batch = 256;
    c.diff_batch = 16;
    if (name == "toy") {
      c.mddc.latent_dim = 4;
      c.mddc.encoder_hidden = 8;
      c.mddc.condition_dim = 8;
      c.mddc.time_embed_dim = 8;
      c.mddc.denoiser_width = 8;
      c.mddc.T = 50;
      c.mddc.T_s = 5;
      c.cfmr.embed_dim = 8;
      c.cfmr.heads = 2;
      c.cfmr.top_k = 3;
      c.pretrain_epochs = 3;
      c.refine_interval = 1;
      c.joint_epochs = 3;
      c.bpr_batch = 32;
      c.diff_batch = 8;
      c.pretrain_batch = 8;
      c.eval_k = 3;
      c.report_ks = {2, 3};
    }
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return c;
}

std::vector<std::string> preset_names() { return {"baby", "tiktok", "allrecipes", "desk", "toy"}; }

double pretrain_lr_at(const TrainConfig& c, std::size_t epoch) {
  return c.pretrain_lr * std::pow(c.lr_decay, static_cast<double>(epoch / c.lr_decay_interval));
}

namespace {

void add_linear(std::set<std::size_t>& ids, const Linear& l) {
  ids.insert(l.weight.index);
  ids.insert(l.bias.index);
}

// ParamIds reachable from the model structure; must cover the whole store.
std::size_t structural_count(const MddcModel& m) {
  std::set<std::size_t> ids;
  for (const auto& ae : m.autoencoders)
    for (const auto* l : {&ae.enc1, &ae.enc2, &ae.dec1, &ae.dec2}) add_linear(ids, *l);
  for (const auto& l : m.fusion.project) add_linear(ids, l);
  add_linear(ids, m.fusion.output);
  for (const auto& d : m.denoisers) {
    add_linear(ids, d.input);
    for (const auto& l : d.down) add_linear(ids, l);
    for (const auto& l : d.time_proj) add_linear(ids, l);
    for (const auto& a : d.attention) ids.insert({a.w_q.index, a.w_k.index, a.w_v.index, a.w_d.index});
    add_linear(ids, d.bottleneck);
    for (const auto& l : d.up) add_linear(ids, l);
    add_linear(ids, d.output);
  }
  return ids.size();
}

std::size_t structural_count(const CfmrModel& m) {
  std::set<std::size_t> ids{m.user_embedding.index, m.item_embedding.index, m.w_q.index, m.w_k.index};
  for (const auto& l : m.encoders) add_linear(ids, l);
  add_linear(ids, m.predictor.hidden);
  add_linear(ids, m.predictor.output);
  return ids.size();
}

std::vector<ParameterStore*> trainable_stores(TrainingState& s) {
  std::vector<ParameterStore*> out;
  if (s.mddc) out.push_back(&s.mddc->params);
  out.push_back(&s.cfmr->params);
  return out;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw TrainingError(std::string(what) + " is not finite; aborting (NaN abort)");
}

std::vector<std::vector<std::size_t>> chunks(const std::vector<std::size_t>& v, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < v.size(); b += size)
    out.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(b),
                     v.begin() + static_cast<std::ptrdiff_t>(std::min(v.size(), b + size)));
  return out;
}

// Shuffled observed rows per modality, split into batches.
std::vector<std::vector<std::vector<std::size_t>>> observed_batches(const DatasetBundle& b, std::size_t size, Rng& rng) {
  std::vector<std::vector<std::vector<std::size_t>>> out;
  for (std::size_t m = 0; m < b.n_modalities(); ++m) {
    auto rows = b.indicator.observed_set(m);
    rng.shuffle(rows);
    out.push_back(chunks(rows, size));
  }
  return out;
}

std::vector<std::vector<std::size_t>> step_batches(const std::vector<std::vector<std::vector<std::size_t>>>& per_m,
                                                   std::size_t step, bool cycle) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& c : per_m) {
    if (c.empty() || (!cycle && step >= c.size()))
      out.emplace_back();
    else
      out.push_back(c[step % c.size()]);
  }
  return out;
}

void snapshot_best(TrainingState& s) {
  s.best_mddc_params = s.mddc ? s.mddc->params : ParameterStore{};
  s.best_cfmr_params = s.cfmr->params;
  s.best_features.clear();
  for (const auto& m : s.completed.modalities) s.best_features.push_back(m.data);
  s.best_generated = s.completed.generated;
}

void restore_best(TrainingState& s) {
  if (s.best_features.empty()) return;
  if (s.mddc) s.mddc->params = s.best_mddc_params;
  s.cfmr->params = s.best_cfmr_params;
  for (std::size_t m = 0; m < s.best_features.size(); ++m) s.completed.modalities[m].data = s.best_features[m];
  s.completed.generated = s.best_generated;
}

void refine(TrainingState& s, std::uint64_t seed) {
  try {
    iterative_refine(*s.mddc, s.completed, seed, s.config.deterministic_sampling);
  } catch (const std::domain_error& e) {
    throw TrainingError(std::string("imputation failed: ") + e.what() + " (NaN abort)");
  }
}

void pretrain_epoch(TrainingState& s) {
  const auto& c = s.config;
  if (s.epoch % c.refine_interval == 0) refine(s, substream_seed(c.seed, "sampling", s.epoch));
  const auto per_m = observed_batches(s.completed, c.pretrain_batch, s.rng);
  std::size_t steps = 0;
  for (const auto& b : per_m) steps = std::max(steps, b.size());
  Rng noise = substream(c.seed, "diffusion-noise", s.epoch);
  const double lr = pretrain_lr_at(c, s.epoch);
  double total = 0;
  for (std::size_t j = 0; j < steps; ++j) {
    s.mddc->params.zero_grad();
    Tape tape;
    MddcLosses l = mddc_losses(tape, *s.mddc, s.completed, step_batches(per_m, j, false), noise);
    const double v = l.diff.value().item();
    check_finite(v, "pretraining loss L_diff");
    tape.backward(l.diff);
    adam_step(s.mddc->params, s.mddc_adam, lr);
    total += v;
  }
  const double loss = steps ? total / static_cast<double>(steps) : 0.0;
  s.pretrain_losses.push_back(loss);
  if (s.pretrain_losses.size() == 1 || loss < s.best_pretrain_loss) {
    s.best_pretrain_loss = loss;
    s.pretrain_since_best = 0;
  } else {
    ++s.pretrain_since_best;
  }
  ++s.epoch;
  if (s.epoch >= c.pretrain_epochs || s.pretrain_since_best >= c.pretrain_patience) {
    s.stage = Stage::kJoint;
    s.epoch = 0;
  }
}

double validation_criterion(const Tensor& scores, const TrainingState& s, const InteractionIndex& index) {
  if (users_with_positives(index, Split::kVal).empty()) return 0;
  MetricReport r = evaluate_scores(scores, s.completed, index, Split::kVal, {s.config.eval_k});
  const MetricsAtK& m = r.at_k.at(s.config.eval_k);
  // With no incomplete item F is undefined; fall back to recall.
  return m.f ? m.f_fuse : m.recall;
}

double validation_criterion(TrainingState& s) {
  InteractionIndex index(s.completed);
  return validation_criterion(variant_scores(s), s, index);
}

void choose_gamma(TrainingState& s) {
  InteractionIndex index(s.completed);
  const ScoreTable table = score_state(s);
  double best = -1;
  for (double g : kGammaGrid) {
    const double v = validation_criterion(ranking_scores(table, g, true), s, index);
    if (v > best) {
      best = v;
      s.config.cfmr.gamma = g;
    }
  }
}

void joint_epoch(TrainingState& s) {
  const auto& c = s.config;
  if (s.mddc) refine(s, substream_seed(c.seed, "joint-sampling", s.epoch));
  InteractionIndex index(s.completed);
  CfmrInputs inputs = s.cfmr->prepare(s.completed, index);
  auto triples = epoch_bpr_triples(index, s.rng);
  if (triples.empty()) throw TrainingError("no BPR triples available");
  const auto per_m = s.mddc ? observed_batches(s.completed, c.diff_batch, s.rng)
                            : std::vector<std::vector<std::vector<std::size_t>>>{};
  Rng noise = substream(c.seed, "joint-diffusion-noise", s.epoch);
  std::vector<std::size_t> all_users(s.completed.n_users);
  std::iota(all_users.begin(), all_users.end(), 0);

  double total = 0;
  for (std::size_t b = 0, step = 0; b < triples.size(); b += c.bpr_batch, ++step) {
    std::vector<BprTriple> batch(triples.begin() + static_cast<std::ptrdiff_t>(b),
                                 triples.begin() + static_cast<std::ptrdiff_t>(std::min(triples.size(), b + c.bpr_batch)));
    std::vector<std::size_t> users = all_users;
    if (users.size() > c.cfmr.contrastive_batch) {
      s.rng.shuffle(users);
      users.resize(c.cfmr.contrastive_batch);
      std::sort(users.begin(), users.end());
    }
    Tape tape;
    JointLoss l = joint_step_loss(tape, s, inputs, batch, users, s.mddc ? step_batches(per_m, step, true)
                                                                      : std::vector<std::vector<std::size_t>>{},
                                  noise);
    if (s.mddc) adam_step(s.mddc->params, s.mddc_adam, c.joint_lr);
    adam_step(s.cfmr->params, s.cfmr_adam, c.joint_lr);
    total += l.total;
  }
  s.joint_losses.push_back(total);

  const double val = validation_criterion(s);
  s.val_history.push_back(val);
  if (s.val_history.size() == 1 || val > s.best_val) {
    s.best_val = val;
    s.best_epoch = s.epoch;
    s.since_best = 0;
    snapshot_best(s);
  } else {
    ++s.since_best;
  }
  ++s.epoch;
  if (s.epoch >= c.joint_epochs || s.since_best >= c.joint_patience) {
    restore_best(s);
    if (c.select_gamma && uses_counterfactual(c.variant)) choose_gamma(s);
    s.stage = Stage::kDone;
  }
}

}  // namespace

Var l2_penalty(Tape& tape, const std::vector<ParameterStore*>& stores, double lambda, std::size_t& count) {
  count = 0;
  Var acc;
  for (auto* store : stores) {
    for (std::size_t i = 0; i < store->size(); ++i) {
      Var sq = sum_squares(tape.param(*store, ParamId{i}));
      acc = acc.valid() ? add(acc, sq) : sq;
      ++count;
    }
  }
  if (!acc.valid()) return tape.constant(Tensor::scalar(0));
  return scale(acc, static_cast<Scalar>(lambda));
}

JointLoss joint_step_loss(Tape& tape, TrainingState& s, const CfmrInputs& inputs,
                          const std::vector<BprTriple>& triples, const std::vector<std::size_t>& users,
                          const std::vector<std::vector<std::size_t>>& diff_batches, Rng& noise_rng) {
  const auto& c = s.config;
  auto stores = trainable_stores(s);
  std::size_t expected = structural_count(*s.cfmr);
  if (s.mddc) expected += structural_count(*s.mddc);
  for (auto* st : stores) st->zero_grad();

  CfmrForward fwd = s.cfmr->forward(tape, inputs);
  CfmrLosses cl = cfmr_losses(fwd, triples, users, c.cfmr.alpha2);
  Var total = add(cl.bpr.total, scale(cl.contrastive, static_cast<Scalar>(c.cfmr.lambda1)));
  JointLoss out;
  if (s.mddc) {
    MddcLosses d = mddc_losses(tape, *s.mddc, s.completed, diff_batches, noise_rng);
    total = add(total, d.diff);
    out.diff = d.diff.value().item();
  }
  Var l2 = l2_penalty(tape, stores, c.lambda2, out.regularized_parameters);
  if (out.regularized_parameters != expected) {
    throw TrainingError("parameter bookkeeping mismatch: " + std::to_string(out.regularized_parameters) +
                        " regularized vs " + std::to_string(expected) + " registered in the model structure");
  }
  total = add(total, l2);
  out.bpr_user_item = cl.bpr.user_item.value().item();
  out.bpr_item = cl.bpr.item.value().item();
  out.contrastive = cl.contrastive.value().item();
  out.l2 = l2.value().item();
  out.total = total.value().item();
  check_finite(out.total, "joint loss");
  if (tape.grad_enabled()) tape.backward(total);
  return out;
}

TrainingState init_training(const DatasetBundle& masked, const TrainConfig& config_in) {
  TrainConfig config = config_in;
  if (config.variant == Variant::kNoConditioning) config.mddc.use_conditions = false;
  config.validate();
  masked.validate();
  TrainingState s;
  s.config = config;
  s.completed = masked;
  s.completed.generated.assign(masked.n_items * masked.n_modalities(), 0);
  s.rng = substream(config.seed, "negatives");
  Rng cfmr_init = substream(config.seed, "cfmr-init");
  s.cfmr = CfmrModel::create(masked, config.cfmr, cfmr_init);
  s.cfmr_adam = AdamState::for_store(s.cfmr->params);
  if (uses_mddc(config.variant)) {
    Rng init = substream(config.seed, "init");
    s.mddc = MddcModel::create(masked, config.mddc, init);
    s.mddc_adam = AdamState::for_store(s.mddc->params);
    // Nothing to impute: pretraining would not change the completed bundle.
    const bool pretrain = config.pretrain_epochs > 0 && masked.indicator.missing_count() > 0;
    s.stage = pretrain ? Stage::kPretrain : Stage::kJoint;
  } else {
    switch (config.variant) {
      case Variant::kImputeMean:
      case Variant::kMeanNoCf:
        impute_mean(s.completed);
        break;
      case Variant::kImputeZero:
        impute_zero(s.completed);
        break;
      case Variant::kImputeRandom: {
        Rng r = substream(config.seed, "impute-random");
        impute_random(s.completed, r);
        break;
      }
      case Variant::kImputeNearest:
        impute_nearest(s.completed);
        break;
      default:
        break;
    }
    s.stage = Stage::kJoint;
  }
  return s;
}

bool advance_training(TrainingState& s, std::optional<std::size_t> max_epochs, const EpochCallback& on_epoch) {
  std::size_t done = 0;
  while (s.stage != Stage::kDone && (!max_epochs || done < *max_epochs)) {
    const auto t0 = std::chrono::steady_clock::now();
    if (s.stage == Stage::kPretrain)
      pretrain_epoch(s);
    else
      joint_epoch(s);
    s.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    ++done;
    if (on_epoch) on_epoch(s);
  }
  return s.stage == Stage::kDone;
}

void finish_pretraining(TrainingState& s, const EpochCallback& on_epoch) {
  while (s.stage == Stage::kPretrain) advance_training(s, 1, on_epoch);
}

ScoreTable score_state(TrainingState& s) {
  CfmrScorer scorer(*s.cfmr);
  return scorer.score(s.completed);
}

Tensor variant_scores(TrainingState& s) {
  return ranking_scores(score_state(s), s.config.cfmr.gamma, uses_counterfactual(s.config.variant));
}

MetricReport evaluate_state(TrainingState& s, Split split) {
  InteractionIndex index(s.completed);
  MetricReport r = evaluate_scores(variant_scores(s), s.completed, index, split, s.config.report_ks);
  r.variant = variant_name(s.config.variant);
  r.seed = s.config.seed;
  r.config_hash = config_hash(s.config);
  if (s.completed.heldout.size() == s.completed.n_modalities() && s.completed.indicator.missing_count() > 0) {
    r.imputation_mse = imputation_mse(s.completed);
  }
  r.epoch_seconds = s.epoch_seconds;
  return r;
}

MetricReport run_variant(const DatasetBundle& masked, Variant variant, TrainConfig config) {
  config.variant = variant;
  TrainingState s = init_training(masked, config);
  advance_training(s);
  return evaluate_state(s, Split::kTest);
}

bool TrainingState::same_trajectory(const TrainingState& o) const {
  auto values_equal = [](const ParameterStore& a, const ParameterStore& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.all()[i].name != b.all()[i].name || a.all()[i].value != b.all()[i].value) return false;
    return true;
  };
  if (!(config == o.config && stage == o.stage && epoch == o.epoch && rng == o.rng)) return false;
  if (mddc.has_value() != o.mddc.has_value()) return false;
  if (mddc && !(values_equal(mddc->params, o.mddc->params) && mddc_adam == o.mddc_adam)) return false;
  if (!(values_equal(cfmr->params, o.cfmr->params) && cfmr_adam == o.cfmr_adam)) return false;
  if (!(completed == o.completed)) return false;
  if (pretrain_losses != o.pretrain_losses || joint_losses != o.joint_losses || val_history != o.val_history) return false;
  if (best_val != o.best_val || best_epoch != o.best_epoch || since_best != o.since_best) return false;
  if (best_pretrain_loss != o.best_pretrain_loss || pretrain_since_best != o.pretrain_since_best) return false;
  return values_equal(best_mddc_params, o.best_mddc_params) && values_equal(best_cfmr_params, o.best_cfmr_params) &&
         best_features == o.best_features && best_generated == o.best_generated;
}

std::string bundle_hash(const DatasetBundle& b) {
  std::uint64_t h = fnv1a(std::to_string(b.n_users) + "/" + std::to_string(b.n_items));
  for (const auto& it : b.interactions) {
    const std::string s = std::to_string(it.user) + ":" + std::to_string(it.item) + ":" + split_name(it.split) + ";";
    h = fnv1a(s, h);
  }
  // Observed rows only, so a completed bundle hashes like its masked source.
  for (std::size_t m = 0; m < b.n_modalities(); ++m) {
    h = fnv1a(b.modalities[m].name, h);
    for (std::size_t i = 0; i < b.n_items; ++i) {
      if (!b.indicator.observed(i, m)) continue;
      for (Scalar v : b.modalities[m].data.row_span(i)) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(&bits), 4), h);
      }
    }
  }
  for (std::size_t i = 0; i < b.indicator.n_items(); ++i)
    for (std::size_t m = 0; m < b.indicator.n_modalities(); ++m) h = fnv1a(b.indicator.observed(i, m) ? "1" : "0", h);
  return hex64(h);
}

// ---- checkpoint -----------------------------------------------------------

namespace {

using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

struct Archive {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  void add(std::string name, const Tensor& t) {
    names.push_back(std::move(name));
    tensors.push_back(t);
  }
};

void add_store(Archive& a, const std::string& prefix, const ParameterStore& s) {
  for (const auto& p : s.all()) a.add(prefix + p.name, p.value);
}

void add_adam(Archive& a, const std::string& prefix, const AdamState& s) {
  for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
    a.add(prefix + "m." + std::to_string(i), s.first_moment[i]);
    a.add(prefix + "v." + std::to_string(i), s.second_moment[i]);
  }
}

class Reader {
 public:
  explicit Reader(std::map<std::string, Tensor> t) : tensors_(std::move(t)) {}
  Tensor take(const std::string& name, const Shape& expected) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::runtime_error("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != expected) throw std::runtime_error("checkpoint tensor '" + name + "' has wrong shape");
    return it->second;
  }
  void store(const std::string& prefix, ParameterStore& s) {
    for (auto& p : s.all()) {
      p.value = take(prefix + p.name, p.value.shape());
      p.grad = Tensor(p.value.shape());
    }
  }
  void adam(const std::string& prefix, AdamState& s, std::uint64_t step) {
    s.step = step;
    for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
      s.first_moment[i] = take(prefix + "m." + std::to_string(i), s.first_moment[i].shape());
      s.second_moment[i] = take(prefix + "v." + std::to_string(i), s.second_moment[i].shape());
    }
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

}  // namespace

void save_checkpoint(const TrainingState& s, const std::filesystem::path& path) {
  nlohmann::json h;
  h["config"] = config_to_json(s.config);
  h["config_hash"] = config_hash(s.config);
  h["bundle_hash"] = bundle_hash(s.completed);
  h["stage"] = static_cast<int>(s.stage);
  h["epoch"] = s.epoch;
  h["rng"] = s.rng.serialize();
  h["best_pretrain_loss"] = s.best_pretrain_loss;
  h["pretrain_since_best"] = s.pretrain_since_best;
  h["pretrain_losses"] = s.pretrain_losses;
  h["best_val"] = s.best_val;
  h["best_epoch"] = s.best_epoch;
  h["since_best"] = s.since_best;
  h["joint_losses"] = s.joint_losses;
  h["val_history"] = s.val_history;
  h["epoch_seconds"] = s.epoch_seconds;
  h["generated"] = s.completed.generated;
  h["best_generated"] = s.best_generated;
  h["has_mddc"] = s.mddc.has_value();
  h["has_best"] = !s.best_features.empty();
  h["mddc_adam_step"] = s.mddc_adam.step;
  h["cfmr_adam_step"] = s.cfmr_adam.step;

  Archive a;
  if (s.mddc) {
    add_store(a, "mddc.", s.mddc->params);
    add_adam(a, "mddc.adam.", s.mddc_adam);
    for (std::size_t m = 0; m < s.mddc->autoencoders.size(); ++m) {
      a.add("mddc.standardizer.mean." + std::to_string(m), s.mddc->autoencoders[m].standardizer.mean);
      a.add("mddc.standardizer.std." + std::to_string(m), s.mddc->autoencoders[m].standardizer.std);
    }
    if (!s.best_features.empty()) add_store(a, "best.mddc.", s.best_mddc_params);
  }
  add_store(a, "cfmr.", s.cfmr->params);
  add_adam(a, "cfmr.adam.", s.cfmr_adam);
  for (std::size_t m = 0; m < s.cfmr->standardizers.size(); ++m) {
    a.add("cfmr.standardizer.mean." + std::to_string(m), s.cfmr->standardizers[m].mean);
    a.add("cfmr.standardizer.std." + std::to_string(m), s.cfmr->standardizers[m].std);
  }
  for (std::size_t m = 0; m < s.completed.n_modalities(); ++m) a.add("features." + std::to_string(m), s.completed.modalities[m].data);
  if (!s.best_features.empty()) {
    add_store(a, "best.cfmr.", s.best_cfmr_params);
    for (std::size_t m = 0; m < s.best_features.size(); ++m) a.add("best.features." + std::to_string(m), s.best_features[m]);
  }
  h["tensors"] = a.names;

  const std::string header = h.dump();
  std::string out = "MDCK";
  put_le(out, kCheckpointVersion, 4);
  put_le(out, sizeof(Scalar), 4);
  put_le(out, header.size(), 8);
  out += header;
  for (const auto& t : a.tensors) {
    put_le(out, t.rows(), 4);
    put_le(out, t.cols(), 4);
    for (Scalar v : t.data()) put_le(out, std::bit_cast<Bits>(v), sizeof(Scalar));
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path, const DatasetBundle& masked) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < 20 || in.compare(0, 4, "MDCK") != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  std::size_t pos = 4;
  const auto version = get_le(in, pos, 4);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto width = get_le(in, pos, 4);
  if (width != sizeof(Scalar)) {
    throw std::runtime_error("checkpoint stores " + std::to_string(width * 8) + "-bit scalars; this build uses " +
                             std::to_string(sizeof(Scalar) * 8));
  }
  const auto hlen = get_le(in, pos, 8);
  if (pos + hlen > in.size()) throw std::runtime_error("checkpoint truncated");
  const nlohmann::json h = nlohmann::json::parse(in.substr(pos, hlen));
  pos += hlen;

  std::map<std::string, Tensor> tensors;
  for (const auto& name : h.at("tensors")) {
    const auto rows = get_le(in, pos, 4);
    const auto cols = get_le(in, pos, 4);
    Tensor t(rows, cols);
    for (auto& v : t.data()) v = std::bit_cast<Scalar>(static_cast<Bits>(get_le(in, pos, sizeof(Scalar))));
    tensors.emplace(name.get<std::string>(), std::move(t));
  }
  if (pos != in.size()) throw std::runtime_error("checkpoint has trailing bytes");

  const TrainConfig config = config_from_json(h.at("config"));
  if (h.at("bundle_hash").get<std::string>() != bundle_hash(masked)) {
    throw std::runtime_error("checkpoint was written for a different dataset bundle");
  }
  TrainingState s = init_training(masked, config);
  Reader r(std::move(tensors));
  s.stage = static_cast<Stage>(h.at("stage").get<int>());
  s.epoch = h.at("epoch").get<std::size_t>();
  s.rng.deserialize(h.at("rng").get<std::string>());
  s.best_pretrain_loss = h.at("best_pretrain_loss").get<double>();
  s.pretrain_since_best = h.at("pretrain_since_best").get<std::size_t>();
  s.pretrain_losses = h.at("pretrain_losses").get<std::vector<double>>();
  s.best_val = h.at("best_val").get<double>();
  s.best_epoch = h.at("best_epoch").get<std::size_t>();
  s.since_best = h.at("since_best").get<std::size_t>();
  s.joint_losses = h.at("joint_losses").get<std::vector<double>>();
  s.val_history = h.at("val_history").get<std::vector<double>>();
  s.epoch_seconds = h.at("epoch_seconds").get<std::vector<double>>();
  s.completed.generated = h.at("generated").get<std::vector<std::uint8_t>>();
  const bool has_best = h.at("has_best").get<bool>();
  if (h.at("has_mddc").get<bool>() != s.mddc.has_value()) throw std::runtime_error("checkpoint variant mismatch");

  if (s.mddc) {
    r.store("mddc.", s.mddc->params);
    r.adam("mddc.adam.", s.mddc_adam, h.at("mddc_adam_step").get<std::uint64_t>());
    for (std::size_t m = 0; m < s.mddc->autoencoders.size(); ++m) {
      auto& st = s.mddc->autoencoders[m].standardizer;
      st.mean = r.take("mddc.standardizer.mean." + std::to_string(m), st.mean.shape());
      st.std = r.take("mddc.standardizer.std." + std::to_string(m), st.std.shape());
    }
    if (has_best) {
      s.best_mddc_params = s.mddc->params;
      r.store("best.mddc.", s.best_mddc_params);
    }
  }
  r.store("cfmr.", s.cfmr->params);
  r.adam("cfmr.adam.", s.cfmr_adam, h.at("cfmr_adam_step").get<std::uint64_t>());
  for (std::size_t m = 0; m < s.cfmr->standardizers.size(); ++m) {
    auto& st = s.cfmr->standardizers[m];
    st.mean = r.take("cfmr.standardizer.mean." + std::to_string(m), st.mean.shape());
    st.std = r.take("cfmr.standardizer.std." + std::to_string(m), st.std.shape());
  }
  for (std::size_t m = 0; m < s.completed.n_modalities(); ++m) {
    auto& d = s.completed.modalities[m].data;
    d = r.take("features." + std::to_string(m), d.shape());
  }
  if (has_best) {
    s.best_cfmr_params = s.cfmr->params;
    r.store("best.cfmr.", s.best_cfmr_params);
    s.best_generated = h.at("best_generated").get<std::vector<std::uint8_t>>();
    for (std::size_t m = 0; m < s.completed.n_modalities(); ++m) {
      s.best_features.push_back(r.take("best.features." + std::to_string(m), s.completed.modalities[m].data.shape()));
    }
  }
  return s;
}

}  // namespace modicf
