#pragma once

#include <functional>
#include <span>
#include <vector>

#include "modicf/dataset.hpp"
#include "modicf/numerics/autograd.hpp"
#include "modicf/random.hpp"

namespace modicf {

struct NoiseSchedule {
  std::size_t T = 0;
  // Indexed by t in [0, T]; entry 0 is the clean state (beta 0, alpha_bar 1).
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;
  // tau_1 < ... < tau_{T_s} = T.
  std::vector<std::size_t> sample_steps;

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

// Linear beta schedule with sigma_t^2 = beta_t and T_s evenly spaced sampling steps over [1, T].
NoiseSchedule build_noise_schedule(std::size_t T, double beta_start, double beta_end, std::size_t T_s);

// sqrt(alpha_bar_t) * v0 + sqrt(1 - alpha_bar_t) * noise.
Tensor forward_diffuse(const Tensor& v0, std::size_t t, const Tensor& noise, const NoiseSchedule& s);
// One ancestral step: (v_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z.
Tensor reverse_step(const Tensor& v_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& s, const Tensor& z);

// Row-major double-precision latent batch; the samplers keep their state in this form
// so the reconstruction of v0 is not limited by 32-bit rounding of intermediate states.
struct LatentBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  static LatentBatch from_tensor(const Tensor& t);
  Tensor to_tensor() const;
  friend bool operator==(const LatentBatch&, const LatentBatch&) = default;
};

// forward_diffuse evaluated in double precision.
LatentBatch forward_diffuse_exact(const Tensor& v0, std::size_t t, const Tensor& noise, const NoiseSchedule& s);

// Noise predictor used by the samplers: (v_t, t) -> eps_hat, batched over rows.
using NoisePredictor = std::function<Tensor(const Tensor& v_t, std::size_t t)>;

// Deterministic implicit sampler over sample_steps, starting from v at tau_{T_s} = T.
// Returns the final v0 estimate. A positive `clip` clamps every v0 estimate to [-clip, clip].
LatentBatch sample_deterministic(LatentBatch v_T, const NoisePredictor& predict, const NoiseSchedule& s,
                                 double clip = 0.0);
// Stochastic sampler: ancestral reverse_step chain when T_s == T, otherwise the implicit
// sampler with eta = 1. Noise is drawn row-major from rng.
LatentBatch sample_stochastic(LatentBatch v_T, const NoisePredictor& predict, const NoiseSchedule& s, Rng& rng,
                              double clip = 0.0);

struct MddcConfig {
  std::size_t latent_dim = 128;
  std::size_t encoder_hidden = 256;
  std::size_t condition_dim = 128;
  std::size_t time_embed_dim = 64;
  // Width of the first denoiser level; 0 uses latent_dim.
  std::size_t denoiser_width = 0;
  std::size_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t T_s = 10;
  double alpha1 = 1.0;
  // False gives the unconditioned ablation: the denoiser sees a zero condition vector.
  bool use_conditions = true;
  // Bounds encoder latents with tanh and clamps sampler v0 estimates to [-1, 1].
  bool bounded_latents = true;

  friend bool operator==(const MddcConfig&, const MddcConfig&) = default;
};

// Per-dimension standardization fitted on observed rows; frozen once fitted.
struct Standardizer {
  Tensor mean;  // 1 x d_m
  Tensor std;   // 1 x d_m
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

// Fits mean and standard deviation on the observed rows of modality m (std floor 1).
Standardizer fit_standardizer(const DatasetBundle& bundle, std::size_t m);

struct ModalityAutoencoder {
  std::size_t input_dim = 0;
  std::size_t latent_dim = 0;
  Linear enc1, enc2, dec1, dec2;
  Standardizer standardizer;
};

struct ConditionFusionNet {
  std::vector<Linear> project;  // one per source modality, d -> d_c
  Linear output;                // d_c -> d_c
};

// Scalar-token cross-attention plus a direct condition value path c W_D.
struct AttentionBlock {
  ParamId w_q, w_k, w_v, w_d;
  std::size_t width = 0;
};

// MLP U-Net over a d-dim latent: encoder widths w, w/2, w/4 (w = denoiser_width), mirrored decoder with
// concatenated skips, a projected sinusoidal timestep embedding added at every level
// and one condition cross-attention block per encoder level.
struct DenoiserNetwork {
  std::vector<std::size_t> widths;
  Linear input;
  std::vector<Linear> down;       // widths[l-1] -> widths[l], l >= 1
  std::vector<Linear> time_proj;  // time_embed_dim -> widths[l]
  std::vector<AttentionBlock> attention;
  Linear bottleneck;              // widths.back() -> widths.back()
  std::vector<Linear> up;         // concat(prev, skip_l) -> widths[l], from deep to shallow
  Linear output;                  // widths[0] -> latent_dim
};

class MddcModel {
 public:
  MddcConfig config;
  NoiseSchedule schedule;
  ParameterStore params;
  std::vector<ModalityAutoencoder> autoencoders;
  ConditionFusionNet fusion;
  std::vector<DenoiserNetwork> denoisers;

  // Builds parameters and fits standardizers on the observed rows of `bundle`.
  static MddcModel create(const DatasetBundle& bundle, const MddcConfig& config, Rng& init_rng);

  std::size_t n_modalities() const { return autoencoders.size(); }

  Var encode(Tape& tape, std::size_t m, Var raw);
  Var decode(Tape& tape, std::size_t m, Var latent);
  // Condition for target modality m from per-modality latents (each B x d).
  // weights is B x M: weights(b, n) = 1 / |available others| for usable sources, 0 otherwise.
  Var fuse_conditions(Tape& tape, std::size_t m, const std::vector<Var>& latents, const Tensor& weights);
  Var predict_noise(Tape& tape, std::size_t m, Var v_t, Var condition, std::span<const std::size_t> steps);

  // No-grad helpers.
  Tensor encode_rows(std::size_t m, const Tensor& raw);
  Tensor condition_rows(std::size_t m, const DatasetBundle& bundle, std::span<const std::size_t> items);

  friend bool operator==(const MddcModel& a, const MddcModel& b) {
    return a.config == b.config && a.params == b.params && a.standardizers_equal(b);
  }

 private:
  bool standardizers_equal(const MddcModel& other) const;
};

// Sinusoidal embedding of the diffusion step (rows: one per step).
Tensor timestep_embedding(std::span<const std::size_t> steps, std::size_t dim);

// A source modality n is usable for conditioning item i iff n is observed or already generated.
bool usable_condition(const DatasetBundle& bundle, std::size_t item, std::size_t n);
// B x M averaging weights over usable modalities other than m.
Tensor condition_weights(const DatasetBundle& bundle, std::size_t m, std::span<const std::size_t> items);

struct MddcLosses {
  Var dm;
  Var rec;
  Var diff;
};

// Diffusion and reconstruction losses over one batch of items per modality, each
// batch drawn from that modality's observed set. Encoder latents enter L_dm with a
// stop-gradient: the autoencoder is trained by L_rec alone.
MddcLosses mddc_losses(Tape& tape, MddcModel& model, const DatasetBundle& bundle,
                       const std::vector<std::vector<std::size_t>>& batches, Rng& noise_rng);

// Generates rows for (items, m) from the current bundle state. Item k starts from
// the noise of its own sub-stream of sampling_seed, so results do not depend on batching.
Tensor generate_missing(MddcModel& model, const DatasetBundle& bundle, std::size_t m,
                        std::span<const std::size_t> items, std::uint64_t sampling_seed, bool deterministic);

// Replaces every missing row with a fresh generation and marks it generated. Sources
// are read from the bundle as it was before the pass.
void iterative_refine(MddcModel& model, DatasetBundle& bundle, std::uint64_t sampling_seed, bool deterministic = true);

// Mean squared error of the missing cells against the held-out ground truth (per scalar).
double imputation_mse(const DatasetBundle& completed);

}  // namespace modicf
