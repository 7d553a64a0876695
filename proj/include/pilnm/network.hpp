#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <stdexcept>
#include <string>

#include "pilnm/gfm.hpp"

namespace pilnm {

/// GFM -- load -- infinite-bus circuit seen from the POI node.
struct NetworkConfig {
  double X_line = 0.1;  // POI to infinite bus (p.u.)
  double V_inf = 1.0;   // infinite bus voltage magnitude, angle 0
  double P_load = 1.0;  // constant-power load at the POI (p.u.)
  double Q_load = 0.0;

  void validate() const {
    if (!(X_line > 0.0)) throw std::invalid_argument("NetworkConfig: X_line must be > 0");
    if (!(V_inf > 0.0)) throw std::invalid_argument("NetworkConfig: V_inf must be > 0");
    if (P_load < 0.0) throw std::invalid_argument("NetworkConfig: P_load must be >= 0");
  }
};

struct PoiSolution {
  double v_t = 0.0;  // |V_poi|
  double p = 0.0;    // active power delivered by the GFM into the POI
  double q = 0.0;
  double vre = 0.0, vim = 0.0;  // rectangular POI voltage (warm-start handle)
  int iterations = 0;
  double residual = 0.0;
};

struct NetworkSolveError : std::runtime_error {
  double residual;
  NetworkSolveError(const std::string& msg, double res)
      : std::runtime_error(msg), residual(res) {}
};

/// Complex power balance at the POI node, solved for the rectangular POI
/// voltage by Newton-Raphson with an analytic Jacobian. The GFM injects from
/// EMF E/_theta behind X_f; the constant-power load and the line to the
/// infinite bus draw from the node.
inline PoiSolution solve_network(double E, double theta, const NetworkConfig& net, double x_f,
                                 std::optional<std::pair<double, double>> warm = std::nullopt) {
  if (!(E > 0.0)) throw std::invalid_argument("solve_network: E must be > 0");
  if (!(x_f > 0.0)) throw std::invalid_argument("solve_network: X_f must be > 0");
  net.validate();

  using C = std::complex<double>;
  const C j(0.0, 1.0);
  const C e_ph = E * std::exp(j * theta);
  const C v_inf(net.V_inf, 0.0);
  const C cyf = std::conj(1.0 / (j * x_f));    // conj of branch admittances
  const C cyl = std::conj(1.0 / (j * net.X_line));
  const C s_load(net.P_load, net.Q_load);

  C vt = warm ? C(warm->first, warm->second) : v_inf;  // flat start otherwise

  auto balance = [&](const C& v) {
    const C s_g = v * std::conj(e_ph - v) * cyf;   // injected by the GFM
    const C s_l = v * std::conj(v - v_inf) * cyl;  // leaving towards the bus
    return s_g - s_load - s_l;
  };

  const int max_iter = 60;
  double res_norm = 0.0;
  for (int it = 1; it <= max_iter; ++it) {
    const C r = balance(vt);
    res_norm = std::max(std::abs(r.real()), std::abs(r.imag()));
    if (res_norm < 1e-12) {
      const C s_g = vt * std::conj(e_ph - vt) * cyf;
      return PoiSolution{std::abs(vt), s_g.real(), s_g.imag(),
                         vt.real(), vt.imag(), it, res_norm};
    }
    // dS/de and dS/df with v = e + jf (conj(v) has derivatives 1 and -j)
    const C dg_de = (std::conj(e_ph - vt) - vt) * cyf;
    const C dg_df = (j * std::conj(e_ph - vt) + j * vt) * cyf;
    const C dl_de = (std::conj(vt - v_inf) + vt) * cyl;
    const C dl_df = (j * std::conj(vt - v_inf) - j * vt) * cyl;
    const C dr_de = dg_de - dl_de;
    const C dr_df = dg_df - dl_df;
    const double a = dr_de.real(), b = dr_df.real();
    const double c = dr_de.imag(), d = dr_df.imag();
    const double det = a * d - b * c;
    if (std::abs(det) < 1e-14)
      throw NetworkSolveError("solve_network: singular Jacobian, residual " +
                                  std::to_string(res_norm), res_norm);
    const double de = (-r.real() * d + r.imag() * b) / det;
    const double df = (r.real() * c - r.imag() * a) / det;
    vt += C(de, df);
  }
  throw NetworkSolveError("solve_network: no convergence after " + std::to_string(max_iter) +
                              " iterations, residual " + std::to_string(res_norm),
                          res_norm);
}

/// Re-evaluates the nodal power mismatch at a candidate POI voltage;
/// used as the independent consistency check on solver output.
inline double network_mismatch(double E, double theta, const NetworkConfig& net, double x_f,
                               double vre, double vim) {
  using C = std::complex<double>;
  const C j(0.0, 1.0);
  const C e_ph = E * std::exp(j * theta);
  const C v(vre, vim);
  const C s_g = v * std::conj((e_ph - v) / (j * x_f));
  const C s_l = v * std::conj((v - C(net.V_inf, 0.0)) / (j * net.X_line));
  const C r = s_g - C(net.P_load, net.Q_load) - s_l;
  return std::max(std::abs(r.real()), std::abs(r.imag()));
}

}  // namespace pilnm
