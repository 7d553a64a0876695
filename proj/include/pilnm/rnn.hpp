#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pilnm/nn.hpp"
#include "pilnm/rng.hpp"
#include "pilnm/simulate.hpp"
#include "pilnm/tape.hpp"

namespace pilnm {

struct RnnDims {
  int n_obs = 6;
  int embed = 32;
  int hidden = 64;
};

enum RnnWeight : int {
  kRnnEmbW, kRnnEmbB,
  kRnnWxr, kRnnWhr, kRnnBr,
  kRnnWxu, kRnnWhu, kRnnBu,
  kRnnWxc, kRnnWhc, kRnnBc,
  kRnnOutW, kRnnOutB,
  kRnnWeightCount
};

inline const char* rnn_weight_name(int i) {
  static const char* names[kRnnWeightCount] = {
      "emb_w", "emb_b", "wxr", "whr", "br", "wxu", "whu", "bu",
      "wxc", "whc", "bc", "out_w", "out_b"};
  return names[i];
}

inline std::pair<int, int> rnn_weight_shape(const RnnDims& d, int i) {
  switch (i) {
    case kRnnEmbW: return {d.n_obs, d.embed};
    case kRnnEmbB: return {1, d.embed};
    case kRnnWxr: case kRnnWxu: case kRnnWxc: return {d.embed, d.hidden};
    case kRnnWhr: case kRnnWhu: case kRnnWhc: return {d.hidden, d.hidden};
    case kRnnBr: case kRnnBu: case kRnnBc: return {1, d.hidden};
    case kRnnOutW: return {d.hidden, d.n_obs};
    case kRnnOutB: return {1, d.n_obs};
  }
  throw std::invalid_argument("rnn_weight_shape: bad index");
}

/// Physics-free autoregressive baseline: tanh input embedding, one GRU
/// layer, linear readout of the next observation. Operates entirely on
/// normalized observations.
struct RnnModel {
  RnnDims dims;
  Eigen::RowVectorXd norm_mean;
  Eigen::RowVectorXd norm_std;
  std::vector<nn::Mat> weights;
};

inline RnnModel init_rnn_model(const RnnDims& dims, const Eigen::RowVectorXd& mean,
                               const Eigen::RowVectorXd& stddev, std::uint64_t seed) {
  if (mean.cols() != dims.n_obs || stddev.cols() != dims.n_obs)
    throw std::invalid_argument("init_rnn_model: bad normalization shape");
  RnnModel m;
  m.dims = dims;
  m.norm_mean = mean;
  m.norm_std = stddev.cwiseMax(1e-9);
  Rng rng(seed);
  m.weights.resize(kRnnWeightCount);
  for (int i = 0; i < kRnnWeightCount; ++i) {
    const auto [r, c] = rnn_weight_shape(dims, i);
    nn::Mat w = nn::Mat::Zero(r, c);
    if (r != 1) {  // biases stay at zero
      const double s = 1.0 / std::sqrt(static_cast<double>(r));
      for (int a = 0; a < r; ++a)
        for (int b = 0; b < c; ++b) w(a, b) = rng.uniform(-s, s);
    }
    m.weights[i] = std::move(w);
  }
  return m;
}

template <class V>
struct RnnRef {
  const RnnModel* model = nullptr;
  std::vector<V> w;
};

inline RnnRef<ad::Var> bind_model(ad::Tape& tape, const RnnModel& m) {
  RnnRef<ad::Var> r;
  r.model = &m;
  for (const auto& w : m.weights) r.w.push_back(tape.param(w));
  return r;
}

inline RnnRef<nn::Mat> bind_model(const RnnModel& m) {
  return RnnRef<nn::Mat>{&m, m.weights};
}

template <class V>
nn::GruWeights<V> rnn_gru(const RnnRef<V>& r) {
  return nn::GruWeights<V>{r.w[kRnnWxr], r.w[kRnnWhr], r.w[kRnnBr],
                           r.w[kRnnWxu], r.w[kRnnWhu], r.w[kRnnBu],
                           r.w[kRnnWxc], r.w[kRnnWhc], r.w[kRnnBc]};
}

/// One recurrent update plus next-observation readout (normalized space).
template <class V>
std::pair<V, V> rnn_step(const RnnRef<V>& r, const V& h, const V& x_norm) {
  using namespace nn;
  V e = vtanh(affine(x_norm, r.w[kRnnEmbW], r.w[kRnnEmbB]));
  V h2 = gru_cell(rnn_gru(r), h, e);
  V xhat = affine(h2, r.w[kRnnOutW], r.w[kRnnOutB]);
  return {h2, xhat};
}

struct RnnLossParts {
  ad::Var loss;        // shard contribution to the batch-mean one-step MSE
  double sq_sum = 0;   // summed squared one-step errors
  long n_points = 0;
};

/// Teacher-forced one-step-ahead MSE over window steps for a shard of
/// trajectories; `inv_total_points` converts the summed squared error into
/// the batch-mean contribution (1 / (total_batch * window * channels)).
inline RnnLossParts build_rnn_loss_graph(ad::Tape& tape, const RnnModel& m, const Dataset& ds,
                                         const std::vector<int>& traj,
                                         const std::vector<int>& offset, int window,
                                         double inv_total_points,
                                         RnnRef<ad::Var>* ref_out = nullptr) {
  using namespace nn;
  const int B = static_cast<int>(traj.size());
  if (B < 1) throw std::invalid_argument("build_rnn_loss_graph: empty batch");
  if (window < 1) throw std::invalid_argument("build_rnn_loss_graph: window must be >= 1");

  RnnRef<ad::Var> r = bind_model(tape, m);
  std::vector<ad::Var> obs(window + 1);
  for (int i = 0; i <= window; ++i) {
    Mat raw(B, m.dims.n_obs);
    for (int b = 0; b < B; ++b) {
      const Trajectory& t = ds.trajectories[static_cast<std::size_t>(traj[b])];
      const int row = offset[b] + i;
      if (row < 0 || row >= t.observations.rows())
        throw std::invalid_argument("build_rnn_loss_graph: window exceeds trajectory");
      raw.row(b) = t.observations.row(row);
    }
    obs[i] = tape.constant(
        ((raw.rowwise() - m.norm_mean).array().rowwise() / m.norm_std.array()).matrix());
  }

  ad::Var h = tape.constant(Mat::Zero(B, m.dims.hidden));
  ad::Var acc;
  for (int i = 0; i < window; ++i) {
    auto [h2, xhat] = rnn_step(r, h, obs[static_cast<std::size_t>(i)]);
    h = h2;
    ad::Var e = sub(xhat, obs[static_cast<std::size_t>(i + 1)]);
    ad::Var sq = mul(e, e);
    acc = (i == 0) ? sq : add(acc, sq);
  }
  RnnLossParts parts;
  ad::Var total = sum(acc);
  parts.loss = scale(total, inv_total_points);
  parts.sq_sum = total.value()(0, 0);
  parts.n_points = static_cast<long>(B) * window * m.dims.n_obs;
  if (!ad::all_finite(parts.loss))
    throw ad::NumericalError("build_rnn_loss_graph: non-finite loss");
  if (ref_out) *ref_out = r;
  return parts;
}

/// ctor-style convenience for tests: batch-mean one-step MSE.
inline double rnn_loss(const RnnModel& m, const Dataset& ds, const std::vector<int>& traj,
                       const std::vector<int>& offset, int window) {
  ad::Tape tape;
  const double inv = 1.0 / (static_cast<double>(traj.size()) * window * m.dims.n_obs);
  return build_rnn_loss_graph(tape, m, ds, traj, offset, window, inv).loss.value()(0, 0);
}

/// Teacher-forces the warm-up observations, then runs closed loop feeding
/// each prediction back as the next input. Returns `horizon` physical-unit
/// predictions (the observations following the warm-up block).
inline Eigen::MatrixXd rnn_predict(const RnnModel& m, const Eigen::MatrixXd& warmup_raw,
                                   int horizon) {
  using namespace nn;
  if (warmup_raw.rows() < 1)
    throw std::invalid_argument("rnn_predict: need at least one warm-up observation");
  if (horizon < 0) throw std::invalid_argument("rnn_predict: negative horizon");
  RnnRef<Mat> r = bind_model(m);
  Mat h = Mat::Zero(1, m.dims.hidden);
  Mat xhat;
  for (Eigen::Index i = 0; i < warmup_raw.rows(); ++i) {
    const Mat xn =
        ((warmup_raw.row(i) - m.norm_mean).array() / m.norm_std.array()).matrix();
    auto [h2, y] = rnn_step(r, h, xn);
    h = h2;
    xhat = y;
  }
  Eigen::MatrixXd out(horizon, m.dims.n_obs);
  for (int i = 0; i < horizon; ++i) {
    if (!xhat.allFinite())
      throw ad::NumericalError("rnn_predict: diverged at step " + std::to_string(i));
    out.row(i) =
        (xhat.array() * m.norm_std.array() + m.norm_mean.array()).matrix().row(0);
    auto [h2, y] = rnn_step(r, h, xhat);
    h = h2;
    xhat = y;
  }
  return out;
}

}  // namespace pilnm
