#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pilnm/gfm.hpp"
#include "pilnm/network.hpp"
#include "pilnm/ode.hpp"
#include "pilnm/rng.hpp"

namespace pilnm {

constexpr int kNumChannels = 6;
inline const char* const kChannelNames[kNumChannels] = {"theta", "omega", "v_err",
                                                        "v_int", "p_net", "q_net"};

/// One load-step event: uniform time grid and the 6-channel observations
/// [theta, omega, v_err, v_int, p_net, q_net].
struct Trajectory {
  std::vector<double> times;
  Eigen::MatrixXd observations;  // (T+1) x 6
  double load_level = 0.0;
  int event_index = 0;
};

struct Dataset {
  int format_version = 1;
  double dt = 0.01;
  double horizon = 10.0;
  std::pair<double, double> load_range{0.5, 5.0};
  std::uint64_t seed = 0;
  double t_m = 0.01;  // hidden measurement-filter time constant of the truth
  double pre_load = 1.0;
  GfmParams params_true;
  NetworkConfig net;
  std::vector<Trajectory> trajectories;
};

/// Full pre-event operating point: droop + network steady state, solved by
/// Newton on (theta, V, Re V_poi, Im V_poi) with a finite-difference
/// Jacobian. At steady state omega = omega_set, the GFM delivers P_set, and
/// the Q-V droop pins the POI voltage.
struct Equilibrium {
  TruthState state;
  PoiSolution poi;
};

inline Equilibrium find_equilibrium(const GfmParams& g, const NetworkConfig& net) {
  g.validate();
  net.validate();
  using Vec4 = Eigen::Vector4d;
  using C = std::complex<double>;
  const C j(0.0, 1.0);

  auto residual = [&](const Vec4& u) -> Vec4 {
    const double theta = u[0], v_int = u[1];
    const C vt(u[2], u[3]);
    const C e_ph = v_int * std::exp(j * theta);
    const C s_g = vt * std::conj((e_ph - vt) / (j * g.X_f));
    const C s_l = vt * std::conj((vt - C(net.V_inf, 0.0)) / (j * net.X_line));
    const C bal = s_g - C(net.P_load, net.Q_load) - s_l;
    Vec4 r;
    r[0] = bal.real();
    r[1] = bal.imag();
    r[2] = s_g.real() - g.P_set;
    r[3] = std::abs(vt) - (g.V_set + g.m_q * (g.Q_set - s_g.imag()));
    return r;
  };

  Vec4 u(0.05, 1.0, net.V_inf, 0.0);
  for (int it = 0; it < 80; ++it) {
    const Vec4 r = residual(u);
    if (r.cwiseAbs().maxCoeff() < 1e-12) break;
    Eigen::Matrix4d jac;
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-7 * std::max(1.0, std::abs(u[k]));
      Vec4 up = u;
      up[k] += h;
      jac.col(k) = (residual(up) - r) / h;
    }
    const Vec4 du = jac.partialPivLu().solve(r);
    u -= du;
    if (it == 79)
      throw NetworkSolveError("find_equilibrium: no convergence, residual " +
                                  std::to_string(r.cwiseAbs().maxCoeff()),
                              r.cwiseAbs().maxCoeff());
  }

  Equilibrium eq;
  eq.poi = solve_network(u[1], u[0], net, g.X_f, std::make_pair(u[2], u[3]));
  eq.state.gfm = GfmState{u[0], g.omega_set, u[1] / g.k_iv, u[1]};
  eq.state.p_filt = eq.poi.p;
  eq.state.q_filt = eq.poi.q;
  return eq;
}

namespace detail {

inline Eigen::VectorXd pack_truth(const TruthState& s, bool with_filters) {
  Eigen::VectorXd x(with_filters ? 6 : 4);
  x[0] = s.gfm.theta;
  x[1] = s.gfm.omega;
  x[2] = s.gfm.v_err;
  x[3] = s.gfm.v_int;
  if (with_filters) {
    x[4] = s.p_filt;
    x[5] = s.q_filt;
  }
  return x;
}

inline TruthState unpack_truth(const Eigen::VectorXd& x, bool with_filters) {
  TruthState s;
  s.gfm = GfmState{x[0], x[1], x[2], x[3]};
  if (with_filters) {
    s.p_filt = x[4];
    s.q_filt = x[5];
  }
  return s;
}

}  // namespace detail

/// Simulates one load-step event with the ground-truth dynamics. The network
/// is re-solved at every RK4 stage evaluation, and the recorded p_net/q_net
/// are the network-solved delivered powers on the observation grid.
inline Trajectory simulate_event(const GfmParams& params_true, double t_m,
                                 const NetworkConfig& net_base, double pre_load,
                                 double load_step, double horizon, double dt,
                                 int substeps = 1) {
  if (!(dt > 0.0) || !(horizon > 0.0))
    throw std::invalid_argument("simulate_event: dt and horizon must be > 0");
  const double steps_f = horizon / dt;
  const int steps = static_cast<int>(std::llround(steps_f));
  if (std::abs(steps_f - steps) > 1e-9)
    throw std::invalid_argument("simulate_event: horizon must be an integer multiple of dt");

  NetworkConfig net_pre = net_base;
  net_pre.P_load = pre_load;
  NetworkConfig net_post = net_base;
  net_post.P_load = load_step;

  Equilibrium eq;
  try {
    eq = find_equilibrium(params_true, net_pre);
  } catch (const NetworkSolveError& e) {
    throw NetworkSolveError("simulate_event: pre-event equilibrium failed for load " +
                                std::to_string(load_step) + ": " + e.what(),
                            e.residual);
  }

  const bool filtered = t_m > 0.0;
  Eigen::VectorXd x = detail::pack_truth(eq.state, filtered);

  // Warm start chain: each network solve continues from the previous one.
  std::optional<std::pair<double, double>> warm{{eq.poi.vre, eq.poi.vim}};
  auto dynamics = [&](const Eigen::VectorXd& s, double /*t*/) -> Eigen::VectorXd {
    const PoiSolution poi = solve_network(s[3], s[0], net_post, params_true.X_f, warm);
    warm = {poi.vre, poi.vim};
    const TruthDeriv d = truth_derivatives(detail::unpack_truth(s, filtered),
                                           Poi{poi.v_t, poi.p, poi.q}, params_true, t_m);
    Eigen::VectorXd out(s.size());
    out[0] = d.gfm.theta;
    out[1] = d.gfm.omega;
    out[2] = d.gfm.v_err;
    out[3] = d.gfm.v_int;
    if (filtered) {
      out[4] = d.p_filt;
      out[5] = d.q_filt;
    }
    return out;
  };

  Trajectory traj;
  traj.load_level = load_step;
  traj.times.resize(steps + 1);
  traj.observations.resize(steps + 1, kNumChannels);

  auto record = [&](int i) {
    const PoiSolution poi = solve_network(x[3], x[0], net_post, params_true.X_f, warm);
    warm = {poi.vre, poi.vim};
    traj.times[i] = i * dt;
    traj.observations(i, 0) = x[0];
    traj.observations(i, 1) = x[1];
    traj.observations(i, 2) = x[2];
    traj.observations(i, 3) = x[3];
    traj.observations(i, 4) = poi.p;
    traj.observations(i, 5) = poi.q;
  };

  try {
    record(0);  // the step is applied at t = 0: p_net/q_net jump immediately
    const double h = dt / substeps;
    for (int i = 1; i <= steps; ++i) {
      for (int s = 0; s < substeps; ++s)
        x = rk4_step(dynamics, x, (i - 1) * dt + s * h, h);
      record(i);
    }
  } catch (const std::exception& e) {
    throw NetworkSolveError("simulate_event: load " + std::to_string(load_step) +
                                " failed: " + e.what(),
                            0.0);
  }
  return traj;
}

/// Returns a copy with each of {m_p, m_q, k_pv, k_iv} scaled by an
/// independent factor drawn uniformly from [1 - fraction, 1 + fraction].
inline GfmParams perturb_params(const GfmParams& params, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw std::invalid_argument("perturb_params: fraction must be in [0, 1)");
  GfmParams out = params;
  Rng rng(seed);
  out.m_p *= rng.uniform(1.0 - fraction, 1.0 + fraction);
  out.m_q *= rng.uniform(1.0 - fraction, 1.0 + fraction);
  out.k_pv *= rng.uniform(1.0 - fraction, 1.0 + fraction);
  out.k_iv *= rng.uniform(1.0 - fraction, 1.0 + fraction);
  return out;
}

struct GenerateConfig {
  double dt = 0.01;
  double horizon = 10.0;
  double t_m = 0.01;
  double pre_load = 1.0;
  GfmParams params_true;
  NetworkConfig net;
  int threads = 2;
};

/// K seeded load-step events with loads drawn uniformly from load_range.
/// Events are simulated in parallel but stored by index, so the result is
/// independent of the thread count.
inline Dataset generate_dataset(int k, std::pair<double, double> load_range,
                                const GenerateConfig& cfg, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("generate_dataset: K must be >= 1");
  if (!(load_range.first < load_range.second))
    throw std::invalid_argument("generate_dataset: load range must be ordered");

  Dataset ds;
  ds.dt = cfg.dt;
  ds.horizon = cfg.horizon;
  ds.load_range = load_range;
  ds.seed = seed;
  ds.t_m = cfg.t_m;
  ds.pre_load = cfg.pre_load;
  ds.params_true = cfg.params_true;
  ds.net = cfg.net;

  Rng rng(seed);
  std::vector<double> loads(k);
  for (int i = 0; i < k; ++i)
    loads[i] = rng.uniform(load_range.first, load_range.second);

  ds.trajectories.resize(k);
  std::vector<std::string> failures;
  std::mutex fail_mu;
  const int n_threads = std::max(1, cfg.threads);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= k) return;
      try {
        ds.trajectories[i] = simulate_event(cfg.params_true, cfg.t_m, cfg.net, cfg.pre_load,
                                            loads[i], cfg.horizon, cfg.dt);
        ds.trajectories[i].event_index = i;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(fail_mu);
        failures.push_back("event " + std::to_string(i) + ": " + e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (!failures.empty())
    throw std::runtime_error("generate_dataset: " + failures.front());
  return ds;
}

}  // namespace pilnm
