#pragma once

#include <cmath>
#include <stdexcept>

namespace pilnm {

/// Droop and control constants of the representative grid-forming block.
/// All quantities per-unit except time constants (s) and omega_b (rad/s).
struct GfmParams {
  double m_p = 0.05;   // P-omega droop gain
  double m_q = 0.05;   // Q-V droop gain
  double k_pv = 1.0;   // voltage PI proportional gain
  double k_iv = 10.0;  // voltage PI integral gain (1/s)
  double T_p = 0.05;   // active power / frequency filter (s)
  double T_e = 0.02;   // internal voltage actuation (s)
  double omega_b = 2.0 * M_PI * 60.0;
  double P_set = 1.0;
  double Q_set = 0.0;
  double omega_set = 1.0;
  double V_set = 1.0;
  double X_f = 0.1;  // coupling reactance to the POI

  void validate() const {
    auto pos = [](double v, const char* name) {
      if (!(v > 0.0)) throw std::invalid_argument(std::string("GfmParams: ") + name + " must be > 0");
    };
    pos(m_p, "m_p");
    pos(m_q, "m_q");
    pos(k_pv, "k_pv");
    pos(k_iv, "k_iv");
    pos(T_p, "T_p");
    pos(T_e, "T_e");
    pos(omega_b, "omega_b");
    pos(X_f, "X_f");
    if (std::abs(omega_set - 1.0) > 0.1)
      throw std::invalid_argument("GfmParams: omega_set must be near 1 p.u.");
    if (V_set < 0.9 || V_set > 1.1)
      throw std::invalid_argument("GfmParams: V_set must be in [0.9, 1.1]");
  }
};

/// GFM internal states. The template lets the same equations run on plain
/// doubles (simulation) and on tape variables (latent physics block).
template <class T>
struct GfmStateT {
  T theta;  // internal EMF angle (rad)
  T omega;  // p.u. frequency
  T v_err;  // integrated voltage error
  T v_int;  // internal voltage magnitude (p.u.)
};
using GfmState = GfmStateT<double>;

/// Point-of-interconnection quantities seen by the control laws.
template <class T>
struct PoiT {
  T v_t;  // POI voltage magnitude (p.u.)
  T p;    // active power delivered (p.u.)
  T q;    // reactive power delivered (p.u.)
};
using Poi = PoiT<double>;

/// Representative droop dynamics:
///   dtheta/dt = omega_b (omega - omega_set)
///   T_p domega/dt = omega_set + m_p (P_set - P) - omega
///   dv_err/dt = e_v,  e_v = V_set + m_q (Q_set - Q) - V_t
///   T_e dV/dt = k_pv e_v + k_iv v_err - V
template <class T>
GfmStateT<T> gfm_derivatives(const GfmStateT<T>& s, const PoiT<T>& poi, const GfmParams& g) {
  GfmStateT<T> d{
      (s.omega - g.omega_set) * g.omega_b,
      (g.omega_set + g.m_p * (g.P_set - poi.p) - s.omega) * (1.0 / g.T_p),
      g.V_set + g.m_q * (g.Q_set - poi.q) - poi.v_t,
      (g.k_pv * (g.V_set + g.m_q * (g.Q_set - poi.q) - poi.v_t) + g.k_iv * s.v_err - s.v_int) *
          (1.0 / g.T_e)};
  return d;
}

/// Ground-truth emulator state: the four droop states plus first-order
/// measurement filters on P and Q (the structure the representative model
/// does not know about). With t_m == 0 the filters are pass-through and the
/// hidden states are unused.
struct TruthState {
  GfmState gfm{};
  double p_filt = 0.0;
  double q_filt = 0.0;
};

struct TruthDeriv {
  GfmState gfm{};
  double p_filt = 0.0;
  double q_filt = 0.0;
};

inline TruthDeriv truth_derivatives(const TruthState& s, const Poi& poi, const GfmParams& g,
                                    double t_m) {
  TruthDeriv d;
  if (t_m <= 0.0) {
    d.gfm = gfm_derivatives(s.gfm, poi, g);
    return d;
  }
  Poi filtered{poi.v_t, s.p_filt, s.q_filt};
  d.gfm = gfm_derivatives(s.gfm, filtered, g);
  d.p_filt = (poi.p - s.p_filt) / t_m;
  d.q_filt = (poi.q - s.q_filt) / t_m;
  return d;
}

/// Analytic droop fixed point for a given internal voltage level: with
/// P = P_set, Q = Q_set, V_t = V_set the error channel e_v vanishes and
/// v_err = V / k_iv holds the voltage state.
inline GfmState gfm_equilibrium(const GfmParams& g, double v_int) {
  return GfmState{0.0, g.omega_set, v_int / g.k_iv, v_int};
}

}  // namespace pilnm
