#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pilnm/gfm.hpp"
#include "pilnm/nn.hpp"
#include "pilnm/ode.hpp"
#include "pilnm/rng.hpp"
#include "pilnm/simulate.hpp"
#include "pilnm/tape.hpp"

namespace pilnm {

/// Architecture sizes. The latent state is [theta, omega, v_err, v_int]
/// (physics, identity-decoded) followed by n_neural free latents.
struct PiLnmDims {
  int n_obs = 6;
  int n_phys = 4;
  int n_neural = 20;
  int enc_hidden = 32;
  int f_hidden = 64;
  int cpl_hidden = 32;
  int dec_hidden = 32;
  int latent() const { return n_phys + n_neural; }
};

enum PilnmWeight : int {
  kEncWxr, kEncWhr, kEncBr,
  kEncWxu, kEncWhu, kEncBu,
  kEncWxc, kEncWhc, kEncBc,
  kEncOdeW1, kEncOdeB1, kEncOdeW2, kEncOdeB2,
  kHeadW, kHeadB,
  kFW1, kFB1, kFW2, kFB2, kFW3, kFB3,
  kCplW1, kCplB1, kCplW2, kCplB2,
  kPqW1, kPqB1, kPqW2, kPqB2,
  kPilnmWeightCount
};

inline const char* pilnm_weight_name(int i) {
  static const char* names[kPilnmWeightCount] = {
      "enc_wxr", "enc_whr", "enc_br", "enc_wxu", "enc_whu", "enc_bu",
      "enc_wxc", "enc_whc", "enc_bc", "enc_ode_w1", "enc_ode_b1",
      "enc_ode_w2", "enc_ode_b2", "head_w", "head_b", "f_w1", "f_b1",
      "f_w2", "f_b2", "f_w3", "f_b3", "cpl_w1", "cpl_b1", "cpl_w2",
      "cpl_b2", "pq_w1", "pq_b1", "pq_w2", "pq_b2"};
  return names[i];
}

inline std::pair<int, int> pilnm_weight_shape(const PiLnmDims& d, int i) {
  const int L = d.latent();
  switch (i) {
    case kEncWxr: case kEncWxu: case kEncWxc: return {d.n_obs, d.enc_hidden};
    case kEncWhr: case kEncWhu: case kEncWhc: return {d.enc_hidden, d.enc_hidden};
    case kEncBr: case kEncBu: case kEncBc: return {1, d.enc_hidden};
    case kEncOdeW1: case kEncOdeW2: return {d.enc_hidden, d.enc_hidden};
    case kEncOdeB1: case kEncOdeB2: return {1, d.enc_hidden};
    case kHeadW: return {d.enc_hidden, 2 * L};
    case kHeadB: return {1, 2 * L};
    case kFW1: return {L, d.f_hidden};
    case kFB1: case kFB2: return {1, d.f_hidden};
    case kFW2: return {d.f_hidden, d.f_hidden};
    case kFW3: return {d.f_hidden, d.n_neural};
    case kFB3: return {1, d.n_neural};
    case kCplW1: return {d.n_neural, d.cpl_hidden};
    case kCplB1: return {1, d.cpl_hidden};
    case kCplW2: return {d.cpl_hidden, 3};
    case kCplB2: return {1, 3};
    case kPqW1: return {L, d.dec_hidden};
    case kPqB1: return {1, d.dec_hidden};
    case kPqW2: return {d.dec_hidden, 2};
    case kPqB2: return {1, 2};
  }
  throw std::invalid_argument("pilnm_weight_shape: bad index");
}

/// All trainable weights plus the frozen approximate physics parameters and
/// the per-channel normalization statistics of the training data.
struct PiLnmModel {
  PiLnmDims dims;
  GfmParams approx;  // never updated by training
  double sigma_obs = 0.01;
  Eigen::RowVectorXd norm_mean;  // 1 x n_obs
  Eigen::RowVectorXd norm_std;
  std::vector<nn::Mat> weights;  // indexed by PilnmWeight
};

/// Fan-in-uniform initialization; the output layers of the latent field and
/// the coupling head start at zero so the initial latent dynamics reduce to
/// the physics prior driven by the coupling bias (the POI setpoints).
inline PiLnmModel init_pilnm_model(const PiLnmDims& dims, const GfmParams& approx,
                                   const Eigen::RowVectorXd& mean,
                                   const Eigen::RowVectorXd& stddev, std::uint64_t seed,
                                   double sigma_obs = 0.01) {
  if (mean.cols() != dims.n_obs || stddev.cols() != dims.n_obs)
    throw std::invalid_argument("init_pilnm_model: bad normalization shape");
  PiLnmModel m;
  m.dims = dims;
  m.approx = approx;
  m.sigma_obs = sigma_obs;
  m.norm_mean = mean;
  m.norm_std = stddev.cwiseMax(1e-9);
  Rng rng(seed);
  m.weights.resize(kPilnmWeightCount);
  for (int i = 0; i < kPilnmWeightCount; ++i) {
    const auto [r, c] = pilnm_weight_shape(dims, i);
    nn::Mat w = nn::Mat::Zero(r, c);
    const bool is_bias = (r == 1);
    const bool zero_init = (i == kFW3 || i == kFB3 || i == kCplW2 || i == kCplB2 ||
                            i == kEncOdeW2 || i == kEncOdeB2 || is_bias);
    if (!zero_init) {
      const double s = 1.0 / std::sqrt(static_cast<double>(r));
      for (int a = 0; a < r; ++a)
        for (int b = 0; b < c; ++b) w(a, b) = rng.uniform(-s, s);
    }
    m.weights[i] = std::move(w);
  }
  // coupling bias: neutral POI operating point
  m.weights[kCplB2] << approx.V_set, approx.P_set, approx.Q_set;
  // posterior scale head starts near sigma = softplus(-2.25) ~ 0.1
  m.weights[kHeadB].rightCols(dims.latent()).setConstant(-2.25);
  return m;
}

/// Weights (and broadcast constants) bound to one evaluation context:
/// V = ad::Var for a training tape, V = nn::Mat for plain inference.
template <class V>
struct PilnmRef {
  const PiLnmModel* model = nullptr;
  int batch = 0;
  std::vector<V> w;
  V h0;                  // batch x enc_hidden zeros
  V obs_istd;            // batch x n_obs, 1/std
  V pq_mean, pq_std;     // batch x 2, p_net/q_net stats
};

inline PilnmRef<ad::Var> bind_model(ad::Tape& tape, const PiLnmModel& m, int batch) {
  PilnmRef<ad::Var> r;
  r.model = &m;
  r.batch = batch;
  r.w.reserve(kPilnmWeightCount);
  for (const auto& w : m.weights) r.w.push_back(tape.param(w));
  r.h0 = tape.constant(nn::Mat::Zero(batch, m.dims.enc_hidden));
  r.obs_istd = tape.constant(m.norm_std.cwiseInverse().replicate(batch, 1));
  r.pq_mean = tape.constant(m.norm_mean.rightCols(2).replicate(batch, 1));
  r.pq_std = tape.constant(m.norm_std.rightCols(2).replicate(batch, 1));
  return r;
}

inline PilnmRef<nn::Mat> bind_model(const PiLnmModel& m, int batch) {
  PilnmRef<nn::Mat> r;
  r.model = &m;
  r.batch = batch;
  r.w = m.weights;
  r.h0 = nn::Mat::Zero(batch, m.dims.enc_hidden);
  r.obs_istd = m.norm_std.cwiseInverse().replicate(batch, 1);
  r.pq_mean = m.norm_mean.rightCols(2).replicate(batch, 1);
  r.pq_std = m.norm_std.rightCols(2).replicate(batch, 1);
  return r;
}

// ---- forward pieces (shared between tape and plain modes) ----

template <class V>
V ftheta_forward(const PilnmRef<V>& r, const V& state) {
  using namespace nn;
  V h1 = affine_tanh(state, r.w[kFW1], r.w[kFB1]);
  V h2 = affine_tanh(h1, r.w[kFW2], r.w[kFB2]);
  return affine(h2, r.w[kFW3], r.w[kFB3]);
}

template <class V>
V coupling_forward(const PilnmRef<V>& r, const V& z_neural) {
  using namespace nn;
  V h = affine_tanh(z_neural, r.w[kCplW1], r.w[kCplB1]);
  return affine(h, r.w[kCplW2], r.w[kCplB2]);
}

/// p_net/q_net head; emits physical units via the stored channel statistics.
template <class V>
V pq_forward(const PilnmRef<V>& r, const V& state) {
  using namespace nn;
  V h = affine_tanh(state, r.w[kPqW1], r.w[kPqB1]);
  V y = affine(h, r.w[kPqW2], r.w[kPqB2]);
  return add(mul(y, r.pq_std), r.pq_mean);
}

/// Observation estimate: channels 0..3 are the physics latents read out as
/// identity; p_net/q_net come from the decoder head.
template <class V>
V decode_state(const PilnmRef<V>& r, const V& state) {
  using namespace nn;
  return concat_cols(slice_cols(state, 0, r.model->dims.n_phys), pq_forward(r, state));
}

template <class V>
V encoder_ode_field(const PilnmRef<V>& r, const V& h) {
  using namespace nn;
  return affine(affine_tanh(h, r.w[kEncOdeW1], r.w[kEncOdeB1]), r.w[kEncOdeW2],
                r.w[kEncOdeB2]);
}

template <class V>
nn::GruWeights<V> encoder_gru(const PilnmRef<V>& r) {
  return nn::GruWeights<V>{r.w[kEncWxr], r.w[kEncWhr], r.w[kEncBr],
                           r.w[kEncWxu], r.w[kEncWhu], r.w[kEncBu],
                           r.w[kEncWxc], r.w[kEncWhc], r.w[kEncBc]};
}

/// ODE-RNN encoder over one observation window, processed in reverse time:
/// a recurrent update at each observation, hidden-state ODE evolution
/// between observations, posterior head at the window start.
/// obs_norm[i] is the normalized batch row-block for window step i.
template <class V>
std::pair<V, V> encoder_posterior(const PilnmRef<V>& r, const std::vector<V>& obs_norm,
                                  double dt, int substeps = 1) {
  using namespace nn;
  if (obs_norm.size() < 2)
    throw std::invalid_argument("encoder_posterior: need at least two observations");
  const GruWeights<V> gru = encoder_gru(r);
  auto field = [&](const V& h, double) { return encoder_ode_field(r, h); };
  V h = gru_cell(gru, r.h0, obs_norm.back());
  const double hstep = dt / substeps;
  for (int i = static_cast<int>(obs_norm.size()) - 2; i >= 0; --i) {
    for (int s = 0; s < substeps; ++s) h = rk4_step(field, h, 0.0, hstep);
    h = gru_cell(gru, h, obs_norm[static_cast<std::size_t>(i)]);
  }
  V g = affine(h, r.w[kHeadW], r.w[kHeadB]);
  const int L = r.model->dims.latent();
  V mu = slice_cols(g, 0, L);
  V sigma = softplus(slice_cols(g, L, L));
  return {mu, sigma};
}

/// Hybrid latent dynamics: the physics latents follow the approximate droop
/// equations driven by the coupling head's POI estimate; the neural latents
/// follow the trainable field.
inline ad::Var hybrid_field(const PilnmRef<ad::Var>& r, const ad::Var& state) {
  using namespace nn;
  const PiLnmDims& d = r.model->dims;
  ad::Var zn = slice_cols(state, d.n_phys, d.n_neural);
  ad::Var poi = coupling_forward(r, zn);
  GfmStateT<ad::Var> s{slice_cols(state, 0, 1), slice_cols(state, 1, 1),
                       slice_cols(state, 2, 1), slice_cols(state, 3, 1)};
  PoiT<ad::Var> p{slice_cols(poi, 0, 1), slice_cols(poi, 1, 1), slice_cols(poi, 2, 1)};
  const GfmStateT<ad::Var> dphys = gfm_derivatives(s, p, r.model->approx);
  ad::Var phys = concat_cols(concat_cols(dphys.theta, dphys.omega),
                             concat_cols(dphys.v_err, dphys.v_int));
  return concat_cols(phys, ftheta_forward(r, state));
}

inline nn::Mat hybrid_field(const PilnmRef<nn::Mat>& r, const nn::Mat& state) {
  const PiLnmDims& d = r.model->dims;
  const nn::Mat zn = state.middleCols(d.n_phys, d.n_neural);
  const nn::Mat poi = coupling_forward(r, zn);
  nn::Mat out(state.rows(), state.cols());
  for (Eigen::Index b = 0; b < state.rows(); ++b) {
    const GfmState s{state(b, 0), state(b, 1), state(b, 2), state(b, 3)};
    const GfmState dd =
        gfm_derivatives(s, Poi{poi(b, 0), poi(b, 1), poi(b, 2)}, r.model->approx);
    out(b, 0) = dd.theta;
    out(b, 1) = dd.omega;
    out(b, 2) = dd.v_err;
    out(b, 3) = dd.v_int;
  }
  out.rightCols(d.n_neural) = ftheta_forward(r, state);
  return out;
}

/// Latent rollout on the uniform grid; returns n_steps + 1 states starting
/// at z0. A single point (n_steps == 0) returns just the initial state.
template <class V>
std::vector<V> rollout_states(const PilnmRef<V>& r, const V& z0, int n_steps, double dt,
                              int substeps = 1) {
  auto field = [&](const V& z, double) { return hybrid_field(r, z); };
  std::vector<V> out;
  out.reserve(static_cast<std::size_t>(n_steps) + 1);
  out.push_back(z0);
  const double h = dt / substeps;
  for (int i = 0; i < n_steps; ++i) {
    V z = out.back();
    for (int s = 0; s < substeps; ++s) z = rk4_step(field, z, i * dt + s * h, h);
    out.push_back(std::move(z));
  }
  return out;
}

// ---- posterior / sampling ----

struct Posterior {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;
};

/// Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)).
inline double kl_standard_normal(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i)
    s += sigma[i] * sigma[i] + mu[i] * mu[i] - 1.0 - 2.0 * std::log(sigma[i]);
  return 0.5 * s;
}

/// Reparameterized draw: z0 = mu + sigma .* noise.
inline Eigen::VectorXd sample_z0(const Posterior& post, const Eigen::VectorXd& noise) {
  if (noise.size() != post.mu.size())
    throw std::invalid_argument("sample_z0: noise dimension mismatch");
  return post.mu + post.sigma.cwiseProduct(noise);
}

inline Eigen::RowVectorXd normalize_row(const PiLnmModel& m, const Eigen::RowVectorXd& x) {
  return (x - m.norm_mean).cwiseQuotient(m.norm_std);
}

/// Plain-mode encoder over a raw (W+1) x 6 observation window.
inline Posterior encode_window(const PiLnmModel& m, const nn::Mat& obs_raw, double dt,
                               int substeps = 1) {
  if (obs_raw.rows() < 2)
    throw std::invalid_argument("encode_window: need at least two observations");
  PilnmRef<nn::Mat> r = bind_model(m, 1);
  std::vector<nn::Mat> obs;
  obs.reserve(static_cast<std::size_t>(obs_raw.rows()));
  for (Eigen::Index i = 0; i < obs_raw.rows(); ++i)
    obs.push_back(normalize_row(m, obs_raw.row(i)));
  auto [mu, sigma] = encoder_posterior(r, obs, dt, substeps);
  if (!mu.allFinite() || !sigma.allFinite())
    throw ad::NumericalError("encode_window: non-finite posterior");
  return Posterior{mu.row(0).transpose(), sigma.row(0).transpose()};
}

// ---- ELBO graph ----

struct ElboWindows {
  std::vector<int> traj;    // trajectory index per batch row
  std::vector<int> offset;  // window start index per batch row
  int window = 200;         // steps; the window spans window+1 grid points
};

struct ElboParts {
  ad::Var loss;          // shard contribution to the batch-mean negative ELBO
  double recon_sq = 0;   // summed squared normalized residuals
  double kl = 0;         // summed KL over the shard
  long n_points = 0;     // residual count = batch * (window+1) * channels
  int batch = 0;
};

/// Builds the negative-ELBO graph for a shard of trajectories:
/// encode -> reparameterized z0 -> hybrid rollout -> decode, with a Gaussian
/// likelihood of fixed per-channel scale sigma_obs on normalized channels
/// and a closed-form diagonal KL against the standard-normal prior.
/// `inv_total` is 1/total-batch so shard losses sum to the batch mean.
inline ElboParts build_elbo_graph(ad::Tape& tape, const PiLnmModel& m, const Dataset& ds,
                                  const ElboWindows& wins, const nn::Mat& noise,
                                  int substeps, double inv_total,
                                  PilnmRef<ad::Var>* ref_out = nullptr) {
  using namespace nn;
  const int B = static_cast<int>(wins.traj.size());
  if (B < 1) throw std::invalid_argument("build_elbo_graph: empty batch");
  if (wins.window < 1) throw std::invalid_argument("build_elbo_graph: window must be >= 1");
  if (noise.rows() != B || noise.cols() != m.dims.latent())
    throw std::invalid_argument("build_elbo_graph: noise shape mismatch");
  const int W = wins.window;
  const int L = m.dims.latent();

  PilnmRef<ad::Var> r = bind_model(tape, m, B);

  // gather raw and normalized observation blocks per window step
  std::vector<ad::Var> obs_raw(W + 1), obs_norm(W + 1);
  for (int i = 0; i <= W; ++i) {
    Mat raw(B, m.dims.n_obs);
    for (int b = 0; b < B; ++b) {
      const Trajectory& t = ds.trajectories[static_cast<std::size_t>(wins.traj[b])];
      const int row = wins.offset[b] + i;
      if (row < 0 || row >= t.observations.rows())
        throw std::invalid_argument("build_elbo_graph: window exceeds trajectory");
      raw.row(b) = t.observations.row(row);
    }
    Mat norm = (raw.rowwise() - m.norm_mean).array().rowwise() / m.norm_std.array();
    obs_raw[i] = tape.constant(std::move(raw));
    obs_norm[i] = tape.constant(std::move(norm));
  }

  auto [mu, sigma] = encoder_posterior(r, obs_norm, ds.dt, substeps);
  ad::Var z0 = add(mu, mul(sigma, tape.constant(noise)));
  const std::vector<ad::Var> states = rollout_states(r, z0, W, ds.dt, substeps);

  ad::Var acc;
  for (int i = 0; i <= W; ++i) {
    ad::Var xhat = decode_state(r, states[static_cast<std::size_t>(i)]);
    ad::Var rn = mul(sub(xhat, obs_raw[static_cast<std::size_t>(i)]), r.obs_istd);
    ad::Var sq = mul(rn, rn);
    acc = (i == 0) ? sq : add(acc, sq);
  }
  ad::Var recon_sq = sum(acc);
  ad::Var recon_half = scale(recon_sq, 0.5 / (m.sigma_obs * m.sigma_obs));

  ad::Var s2 = sum(mul(sigma, sigma));
  ad::Var m2 = sum(mul(mu, mu));
  ad::Var lsg = sum(tape.log(sigma));
  ad::Var kl = scale(tape.add_scalar(sub(add(s2, m2), scale(lsg, 2.0)),
                                     -static_cast<double>(L) * B),
                     0.5);

  ElboParts parts;
  parts.loss = scale(add(recon_half, kl), inv_total);
  parts.recon_sq = recon_sq.value()(0, 0);
  parts.kl = kl.value()(0, 0);
  parts.n_points = static_cast<long>(B) * (W + 1) * m.dims.n_obs;
  parts.batch = B;
  if (!ad::all_finite(parts.loss))
    throw ad::NumericalError("build_elbo_graph: non-finite loss");
  if (ref_out) *ref_out = r;
  return parts;
}

struct ElboMetrics {
  double neg_elbo = 0;   // batch-mean negative ELBO (with likelihood constant)
  double recon_mse = 0;  // mean squared normalized residual per point-channel
  double kl = 0;         // batch-mean KL
};

/// Gaussian log-normalization constant per trajectory window.
inline double likelihood_constant(const PiLnmModel& m, int window) {
  return (window + 1) * m.dims.n_obs * std::log(m.sigma_obs * std::sqrt(2.0 * M_PI));
}

inline ElboMetrics combine_elbo_parts(const PiLnmModel& m, const std::vector<ElboParts>& parts,
                                      int window) {
  double recon_sq = 0, kl = 0;
  long n_points = 0;
  int batch = 0;
  for (const auto& p : parts) {
    recon_sq += p.recon_sq;
    kl += p.kl;
    n_points += p.n_points;
    batch += p.batch;
  }
  ElboMetrics out;
  out.recon_mse = recon_sq / static_cast<double>(n_points);
  out.kl = kl / batch;
  out.neg_elbo = (0.5 * recon_sq / (m.sigma_obs * m.sigma_obs) + kl) / batch +
                 likelihood_constant(m, window);
  return out;
}

/// One-call ELBO evaluation (single shard); used by tests and diagnostics.
inline ElboMetrics elbo(const PiLnmModel& m, const Dataset& ds, const ElboWindows& wins,
                        const nn::Mat& noise, int substeps = 1) {
  ad::Tape tape;
  const ElboParts parts =
      build_elbo_graph(tape, m, ds, wins, noise, substeps, 1.0 / wins.traj.size());
  return combine_elbo_parts(m, {parts}, wins.window);
}

}  // namespace pilnm
