#include "modicf/mddc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace modicf {

NoiseSchedule build_noise_schedule(std::size_t T, double beta_start, double beta_end, std::size_t T_s) {
  if (T == 0 || T_s == 0 || T_s > T) throw std::invalid_argument("noise schedule needs T >= T_s >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("noise schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  if (T_s == 1) {
    s.sample_steps = {T};
  } else {
    for (std::size_t k = 0; k < T_s; ++k) {
      const double pos = 1.0 + static_cast<double>(T - 1) * static_cast<double>(k) / static_cast<double>(T_s - 1);
      s.sample_steps.push_back(static_cast<std::size_t>(std::llround(pos)));
    }
  }
  return s;
}

namespace {

void check_step(std::size_t t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, T]");
}

}  // namespace

Tensor forward_diffuse(const Tensor& v0, std::size_t t, const Tensor& noise, const NoiseSchedule& s) {
  return forward_diffuse_exact(v0, t, noise, s).to_tensor();
}

LatentBatch forward_diffuse_exact(const Tensor& v0, std::size_t t, const Tensor& noise, const NoiseSchedule& s) {
  check_step(t, s);
  if (v0.shape() != noise.shape()) throw ShapeError("forward_diffuse: noise shape differs from v0");
  const double a = std::sqrt(s.alpha_bar[t]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t]);
  LatentBatch out{v0.rows(), v0.cols(), std::vector<double>(v0.size())};
  for (std::size_t i = 0; i < v0.size(); ++i) out.data[i] = a * v0[i] + b * noise[i];
  return out;
}

Tensor reverse_step(const Tensor& v_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& s, const Tensor& z) {
  check_step(t, s);
  if (v_t.shape() != eps_hat.shape() || v_t.shape() != z.shape()) throw ShapeError("reverse_step: shape mismatch");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
  const double coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double sigma = t == 1 ? 0.0 : s.sigma[t];
  Tensor out(v_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<Scalar>(inv_sqrt_alpha * (v_t[i] - coef * eps_hat[i]) + sigma * z[i]);
  }
  return out;
}

LatentBatch LatentBatch::from_tensor(const Tensor& t) {
  LatentBatch b{t.rows(), t.cols(), std::vector<double>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) b.data[i] = t[i];
  return b;
}

Tensor LatentBatch::to_tensor() const {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < data.size(); ++i) t[i] = static_cast<Scalar>(data[i]);
  return t;
}

namespace {

Tensor predict_checked(const NoisePredictor& predict, const LatentBatch& v, std::size_t t) {
  Tensor eps = predict(v.to_tensor(), t);
  if (eps.rows() != v.rows || eps.cols() != v.cols) throw ShapeError("noise predictor returned the wrong shape");
  return eps;
}

// One implicit step from t to t_prev with stochasticity eta.
void implicit_step(LatentBatch& v, const Tensor& eps, std::size_t t, std::size_t t_prev, double eta,
                   const NoiseSchedule& s, Rng* rng, double clip) {
  const double ab = s.alpha_bar[t];
  const double ab_prev = s.alpha_bar[t_prev];
  double sigma = 0.0;
  if (eta > 0.0 && t_prev > 0) {
    sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  }
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    double v0_hat = (v.data[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
    double e = eps[i];
    if (clip > 0.0 && std::abs(v0_hat) > clip) {
      v0_hat = std::clamp(v0_hat, -clip, clip);
      e = (v.data[i] - std::sqrt(ab) * v0_hat) / std::sqrt(1.0 - ab);
    }
    double next = std::sqrt(ab_prev) * v0_hat + dir * e;
    if (sigma > 0.0) next += sigma * rng->normal();
    v.data[i] = next;
  }
}

}  // namespace

LatentBatch sample_deterministic(LatentBatch v, const NoisePredictor& predict, const NoiseSchedule& s, double clip) {
  const auto& steps = s.sample_steps;
  for (std::size_t k = steps.size(); k-- > 0;) {
    const std::size_t t = steps[k];
    const std::size_t t_prev = k > 0 ? steps[k - 1] : 0;
    implicit_step(v, predict_checked(predict, v, t), t, t_prev, 0.0, s, nullptr, clip);
  }
  return v;
}

LatentBatch sample_stochastic(LatentBatch v, const NoisePredictor& predict, const NoiseSchedule& s, Rng& rng,
                              double clip) {
  const auto& steps = s.sample_steps;
  if (steps.size() == s.T) {
    for (std::size_t t = s.T; t >= 1; --t) {
      const Tensor eps = predict_checked(predict, v, t);
      const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
      const double coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
      const double ab = s.alpha_bar[t];
      const double ab_prev = s.alpha_bar[t - 1];
      for (std::size_t i = 0; i < v.data.size(); ++i) {
        double next = inv_sqrt_alpha * (v.data[i] - coef * eps[i]);
        const double v0_hat = (v.data[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
        if (clip > 0.0 && std::abs(v0_hat) > clip) {
          // Posterior mean written in terms of the clamped v0 estimate.
          const double c0 = std::sqrt(ab_prev) * s.beta[t] / (1.0 - ab);
          const double ct = std::sqrt(s.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
          next = c0 * std::clamp(v0_hat, -clip, clip) + ct * v.data[i];
        }
        if (t > 1) next += s.sigma[t] * rng.normal();
        v.data[i] = next;
      }
    }
    return v;
  }
  for (std::size_t k = steps.size(); k-- > 0;) {
    const std::size_t t = steps[k];
    const std::size_t t_prev = k > 0 ? steps[k - 1] : 0;
    implicit_step(v, predict_checked(predict, v, t), t, t_prev, 1.0, s, &rng, clip);
  }
  return v;
}

Tensor timestep_embedding(std::span<const std::size_t> steps, std::size_t dim) {
  Tensor e(steps.size(), dim);
  const std::size_t half = dim / 2;
  for (std::size_t r = 0; r < steps.size(); ++r) {
    const double t = static_cast<double>(steps[r]);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      e(r, 2 * i) = static_cast<Scalar>(std::sin(t * freq));
      e(r, 2 * i + 1) = static_cast<Scalar>(std::cos(t * freq));
    }
  }
  return e;
}

bool usable_condition(const DatasetBundle& bundle, std::size_t item, std::size_t n) {
  return bundle.indicator.observed(item, n) || bundle.is_generated(item, n);
}

Tensor condition_weights(const DatasetBundle& bundle, std::size_t m, std::span<const std::size_t> items) {
  const std::size_t M = bundle.n_modalities();
  Tensor w(items.size(), M);
  for (std::size_t b = 0; b < items.size(); ++b) {
    std::size_t count = 0;
    for (std::size_t n = 0; n < M; ++n) count += (n != m && usable_condition(bundle, items[b], n)) ? 1 : 0;
    if (count == 0) continue;
    for (std::size_t n = 0; n < M; ++n) {
      if (n != m && usable_condition(bundle, items[b], n)) w(b, n) = static_cast<Scalar>(1.0 / static_cast<double>(count));
    }
  }
  return w;
}

Standardizer fit_standardizer(const DatasetBundle& bundle, std::size_t m) {
  const Tensor& x = bundle.modalities[m].data;
  const auto rows = bundle.indicator.observed_set(m);
  Standardizer st{Tensor(1, x.cols()), Tensor(1, x.cols(), 1)};
  if (rows.empty()) return st;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double s = 0, s2 = 0;
    for (auto i : rows) {
      s += x(i, j);
      s2 += static_cast<double>(x(i, j)) * x(i, j);
    }
    const double n = static_cast<double>(rows.size());
    const double mean = s / n;
    const double var = std::max(0.0, s2 / n - mean * mean);
    const double sd = std::sqrt(var);
    st.mean(0, j) = static_cast<Scalar>(mean);
    st.std(0, j) = static_cast<Scalar>(sd > 1e-6 ? sd : 1.0);
  }
  return st;
}

namespace {

AttentionBlock make_attention(ParameterStore& store, const std::string& name, std::size_t width, std::size_t cond_dim,
                              Rng& rng) {
  AttentionBlock a;
  a.width = width;
  a.w_q = store.add(name + ".w_q", xavier_uniform(width, width, rng));
  a.w_k = store.add(name + ".w_k", xavier_uniform(cond_dim, width, rng));
  a.w_v = store.add(name + ".w_v", xavier_uniform(cond_dim, width, rng));
  a.w_d = store.add(name + ".w_d", xavier_uniform(cond_dim, width, rng));
  return a;
}

Var attend(Tape& tape, ParameterStore& store, const AttentionBlock& a, Var h, Var cond) {
  Var q = matmul(h, tape.param(store, a.w_q));
  Var k = matmul(cond, tape.param(store, a.w_k));
  Var v = matmul(cond, tape.param(store, a.w_v));
  Var attended = feature_cross_attention(q, k, v, static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(a.width))));
  return add(attended, matmul(cond, tape.param(store, a.w_d)));
}

}  // namespace

MddcModel MddcModel::create(const DatasetBundle& bundle, const MddcConfig& config, Rng& rng) {
  if (config.latent_dim < 4) throw std::invalid_argument("latent dimension must be at least 4");
  if (config.time_embed_dim % 2 != 0) throw std::invalid_argument("timestep embedding dimension must be even");
  MddcModel model;
  model.config = config;
  model.schedule = build_noise_schedule(config.T, config.beta_start, config.beta_end, config.T_s);
  const std::size_t M = bundle.n_modalities();
  const std::size_t d = config.latent_dim;
  const std::size_t dc = config.condition_dim;
  auto& P = model.params;

  for (std::size_t m = 0; m < M; ++m) {
    const std::string pre = "mddc.ae" + std::to_string(m);
    ModalityAutoencoder ae;
    ae.input_dim = bundle.modalities[m].dim();
    ae.latent_dim = d;
    ae.enc1 = Linear::create(P, pre + ".enc1", ae.input_dim, config.encoder_hidden, rng);
    ae.enc2 = Linear::create(P, pre + ".enc2", config.encoder_hidden, d, rng);
    ae.dec1 = Linear::create(P, pre + ".dec1", d, config.encoder_hidden, rng);
    ae.dec2 = Linear::create(P, pre + ".dec2", config.encoder_hidden, ae.input_dim, rng);
    ae.standardizer = fit_standardizer(bundle, m);
    model.autoencoders.push_back(std::move(ae));
  }
  for (std::size_t n = 0; n < M; ++n) {
    model.fusion.project.push_back(Linear::create(P, "mddc.fusion.proj" + std::to_string(n), d, dc, rng));
  }
  model.fusion.output = Linear::create(P, "mddc.fusion.out", dc, dc, rng);

  const std::size_t w = config.denoiser_width ? config.denoiser_width : d;
  const std::vector<std::size_t> widths{w, std::max<std::size_t>(1, w / 2), std::max<std::size_t>(1, w / 4)};
  for (std::size_t m = 0; m < M; ++m) {
    const std::string pre = "mddc.den" + std::to_string(m);
    DenoiserNetwork net;
    net.widths = widths;
    net.input = Linear::create(P, pre + ".in", d, widths[0], rng);
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const std::string lvl = std::to_string(l);
      if (l > 0) net.down.push_back(Linear::create(P, pre + ".down" + lvl, widths[l - 1], widths[l], rng));
      net.time_proj.push_back(Linear::create(P, pre + ".time" + lvl, config.time_embed_dim, widths[l], rng));
      net.attention.push_back(make_attention(P, pre + ".attn" + lvl, widths[l], dc, rng));
    }
    net.bottleneck = Linear::create(P, pre + ".mid", widths.back(), widths.back(), rng);
    for (std::size_t l = widths.size(); l-- > 0;) {
      const std::size_t prev = l + 1 == widths.size() ? widths.back() : widths[l + 1];
      net.up.push_back(Linear::create(P, pre + ".up" + std::to_string(l), prev + widths[l], widths[l], rng));
    }
    net.output = Linear::create(P, pre + ".out", widths[0], d, rng);
    model.denoisers.push_back(std::move(net));
  }
  return model;
}

bool MddcModel::standardizers_equal(const MddcModel& other) const {
  if (autoencoders.size() != other.autoencoders.size()) return false;
  for (std::size_t m = 0; m < autoencoders.size(); ++m) {
    if (!(autoencoders[m].standardizer == other.autoencoders[m].standardizer)) return false;
  }
  return true;
}

Var MddcModel::encode(Tape& tape, std::size_t m, Var raw) {
  const auto& ae = autoencoders.at(m);
  Tensor inv(1, ae.input_dim);
  for (std::size_t j = 0; j < ae.input_dim; ++j) inv(0, j) = Scalar(1) / ae.standardizer.std(0, j);
  Var x = mul(sub(raw, tape.constant(ae.standardizer.mean)), tape.constant(inv));
  Var h = leaky_relu(ae.enc1(tape, params, x));
  Var z = ae.enc2(tape, params, h);
  return config.bounded_latents ? tanh(z) : z;
}

Var MddcModel::decode(Tape& tape, std::size_t m, Var latent) {
  const auto& ae = autoencoders.at(m);
  Var h = leaky_relu(ae.dec1(tape, params, latent));
  Var x = ae.dec2(tape, params, h);
  return add(mul(x, tape.constant(ae.standardizer.std)), tape.constant(ae.standardizer.mean));
}

Var MddcModel::fuse_conditions(Tape& tape, std::size_t m, const std::vector<Var>& latents, const Tensor& weights) {
  const std::size_t M = n_modalities();
  if (latents.size() != M || weights.cols() != M) throw ShapeError("fuse_conditions: one latent per modality expected");
  const std::size_t B = weights.rows();
  Var acc;
  for (std::size_t n = 0; n < M; ++n) {
    if (n == m) continue;
    Tensor col(B, 1);
    for (std::size_t b = 0; b < B; ++b) col(b, 0) = weights(b, n);
    Var p = scale_rows(leaky_relu(fusion.project[n](tape, params, latents[n])), tape.constant(col));
    acc = acc.valid() ? add(acc, p) : p;
  }
  if (!acc.valid()) acc = tape.constant(Tensor(B, config.condition_dim));
  return fusion.output(tape, params, acc);
}

Var MddcModel::predict_noise(Tape& tape, std::size_t m, Var v_t, Var condition, std::span<const std::size_t> steps) {
  const auto& net = denoisers.at(m);
  if (steps.size() != v_t.rows() || condition.rows() != v_t.rows()) throw ShapeError("predict_noise: batch mismatch");
  Var temb = tape.constant(timestep_embedding(steps, config.time_embed_dim));
  std::vector<Var> skips;
  Var h = v_t;
  for (std::size_t l = 0; l < net.widths.size(); ++l) {
    const Linear& proj = l == 0 ? net.input : net.down[l - 1];
    h = add(leaky_relu(proj(tape, params, h)), net.time_proj[l](tape, params, temb));
    h = add(h, attend(tape, params, net.attention[l], h, condition));
    skips.push_back(h);
  }
  h = leaky_relu(net.bottleneck(tape, params, h));
  for (std::size_t k = 0; k < net.up.size(); ++k) {
    const std::size_t l = net.widths.size() - 1 - k;
    h = leaky_relu(net.up[k](tape, params, concat({h, skips[l]}, 1)));
  }
  return net.output(tape, params, h);
}

Tensor MddcModel::encode_rows(std::size_t m, const Tensor& raw) {
  Tape tape(false);
  return encode(tape, m, tape.constant(raw)).value();
}

namespace {

Tensor gather(const Tensor& x, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), x.cols());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    auto src = x.row_span(rows[b]);
    std::copy(src.begin(), src.end(), out.row_span(b).begin());
  }
  return out;
}

}  // namespace

Tensor MddcModel::condition_rows(std::size_t m, const DatasetBundle& bundle, std::span<const std::size_t> items) {
  if (!config.use_conditions) return Tensor(items.size(), config.condition_dim);
  Tape tape(false);
  std::vector<Var> latents;
  for (std::size_t n = 0; n < n_modalities(); ++n) {
    latents.push_back(encode(tape, n, tape.constant(gather(bundle.modalities[n].data, items))));
  }
  return fuse_conditions(tape, m, latents, condition_weights(bundle, m, items)).value();
}

MddcLosses mddc_losses(Tape& tape, MddcModel& model, const DatasetBundle& bundle,
                       const std::vector<std::vector<std::size_t>>& batches, Rng& noise_rng) {
  const std::size_t M = model.n_modalities();
  if (batches.size() != M) throw std::invalid_argument("mddc_losses: one batch per modality expected");
  const auto& s = model.schedule;
  Var dm, rec;
  for (std::size_t m = 0; m < M; ++m) {
    const auto& items = batches[m];
    if (items.empty()) continue;
    for (auto i : items) {
      if (!bundle.indicator.observed(i, m)) throw std::invalid_argument("mddc_losses: batch contains a missing row");
    }
    const std::size_t B = items.size();
    const Scalar inv_b = static_cast<Scalar>(1.0 / static_cast<double>(B));
    Var x = tape.constant(gather(bundle.modalities[m].data, items));
    Var z = model.encode(tape, m, x);
    Var rec_m = scale(sum_squares(sub(model.decode(tape, m, z), x)), inv_b);

    std::vector<std::size_t> steps(B);
    for (auto& t : steps) t = 1 + static_cast<std::size_t>(noise_rng.uniform_index(s.T));
    Tensor eps(B, model.config.latent_dim);
    noise_rng.fill_normal(eps);
    Tensor v_t(B, model.config.latent_dim);
    const Tensor& v0 = z.value();
    for (std::size_t b = 0; b < B; ++b) {
      const double a = std::sqrt(s.alpha_bar[steps[b]]);
      const double c = std::sqrt(1.0 - s.alpha_bar[steps[b]]);
      for (std::size_t j = 0; j < v_t.cols(); ++j) v_t(b, j) = static_cast<Scalar>(a * v0(b, j) + c * eps(b, j));
    }
    Var cond;
    if (model.config.use_conditions) {
      std::vector<Var> latents;
      for (std::size_t n = 0; n < M; ++n) {
        latents.push_back(tape.constant(model.encode_rows(n, gather(bundle.modalities[n].data, items))));
      }
      cond = model.fuse_conditions(tape, m, latents, condition_weights(bundle, m, items));
    } else {
      cond = tape.constant(Tensor(B, model.config.condition_dim));
    }
    Var eps_hat = model.predict_noise(tape, m, tape.constant(v_t), cond, steps);
    Var dm_m = scale(sum_squares(sub(eps_hat, tape.constant(eps))), inv_b);
    dm = dm.valid() ? add(dm, dm_m) : dm_m;
    rec = rec.valid() ? add(rec, rec_m) : rec_m;
  }
  if (!dm.valid()) throw std::invalid_argument("mddc_losses: empty batch");
  Var diff = add(dm, scale(rec, static_cast<Scalar>(model.config.alpha1)));
  return {dm, rec, diff};
}

Tensor generate_missing(MddcModel& model, const DatasetBundle& bundle, std::size_t m,
                        std::span<const std::size_t> items, std::uint64_t sampling_seed, bool deterministic) {
  const std::size_t M = model.n_modalities();
  const std::size_t d = model.config.latent_dim;
  if (items.empty()) return Tensor(0, bundle.modalities[m].dim());
  for (auto i : items) {
    bool any = false;
    for (std::size_t n = 0; n < M; ++n) any = any || (n != m && usable_condition(bundle, i, n));
    if (!any) throw std::invalid_argument("item " + std::to_string(i) + " has no available modality to condition on");
  }
  const Tensor cond = model.condition_rows(m, bundle, items);

  auto run = [&](std::span<const std::size_t> rows, const Tensor& c, Rng* rng) {
    NoisePredictor predict = [&](const Tensor& v, std::size_t t) {
      Tape tape(false);
      std::vector<std::size_t> steps(v.rows(), t);
      return model.predict_noise(tape, m, tape.constant(v), tape.constant(c), steps).value();
    };
    LatentBatch v{rows.size(), d, std::vector<double>(rows.size() * d)};
    for (std::size_t b = 0; b < rows.size(); ++b) {
      Rng item_rng = substream(sampling_seed, "item", rows[b] * M + m);
      for (std::size_t j = 0; j < d; ++j) v.data[b * d + j] = item_rng.normal();
    }
    const double clip = model.config.bounded_latents ? 1.0 : 0.0;
    LatentBatch v0 = deterministic ? sample_deterministic(std::move(v), predict, model.schedule, clip)
                                   : sample_stochastic(std::move(v), predict, model.schedule, *rng, clip);
    Tape tape(false);
    return model.decode(tape, m, tape.constant(v0.to_tensor())).value();
  };

  if (deterministic) return run(items, cond, nullptr);
  // Stochastic sampling draws per-step noise from each item's own stream, one item at a time.
  Tensor out(items.size(), bundle.modalities[m].dim());
  for (std::size_t b = 0; b < items.size(); ++b) {
    Rng rng = substream(sampling_seed, "item-steps", items[b] * M + m);
    Tensor c(1, cond.cols());
    std::copy(cond.row_span(b).begin(), cond.row_span(b).end(), c.row_span(0).begin());
    Tensor row = run(items.subspan(b, 1), c, &rng);
    std::copy(row.row_span(0).begin(), row.row_span(0).end(), out.row_span(b).begin());
  }
  return out;
}

void iterative_refine(MddcModel& model, DatasetBundle& bundle, std::uint64_t sampling_seed, bool deterministic) {
  const std::size_t M = bundle.n_modalities();
  if (bundle.indicator.missing_count() == 0) return;
  const DatasetBundle before = bundle;
  if (bundle.generated.empty()) bundle.generated.assign(bundle.n_items * M, 0);
  for (std::size_t m = 0; m < M; ++m) {
    const auto items = before.indicator.missing_set(m);
    if (items.empty()) continue;
    const Tensor rows = generate_missing(model, before, m, items, sampling_seed, deterministic);
    if (!rows.all_finite()) throw std::domain_error("generated features contain non-finite values");
    for (std::size_t b = 0; b < items.size(); ++b) {
      auto src = rows.row_span(b);
      std::copy(src.begin(), src.end(), bundle.modalities[m].data.row_span(items[b]).begin());
      bundle.generated[items[b] * M + m] = 1;
    }
  }
}

double imputation_mse(const DatasetBundle& completed) {
  if (completed.heldout.size() != completed.n_modalities()) {
    throw std::invalid_argument("imputation MSE needs held-out ground truth");
  }
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t m = 0; m < completed.n_modalities(); ++m) {
    for (auto i : completed.indicator.missing_set(m)) {
      auto a = completed.modalities[m].data.row_span(i);
      auto b = completed.heldout[m].data.row_span(i);
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double diff = static_cast<double>(a[j]) - b[j];
        acc += diff * diff;
        ++count;
      }
    }
  }
  if (count == 0) throw std::invalid_argument("imputation MSE needs at least one missing cell");
  return acc / static_cast<double>(count);
}

}  // namespace modicf
