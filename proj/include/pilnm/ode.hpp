#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "pilnm/tape.hpp"

namespace pilnm {

/// Classical 4-stage Runge-Kutta update. Works for any state type with
/// `+` and `* double` (Eigen vectors/matrices, ad::Var), so the same stepper
/// is used by the plain simulator and inside differentiable rollouts.
template <class State, class F>
State rk4_step(F&& f, const State& x, double t, double h) {
  State k1 = f(x, t);
  if (!ad::all_finite(k1))
    throw ad::NumericalError("rk4_step: non-finite derivative at t=" + std::to_string(t));
  State k2 = f(x + k1 * (h / 2.0), t + h / 2.0);
  State k3 = f(x + k2 * (h / 2.0), t + h / 2.0);
  State k4 = f(x + k3 * h, t + h);
  if (!ad::all_finite(k2) || !ad::all_finite(k3) || !ad::all_finite(k4))
    throw ad::NumericalError("rk4_step: non-finite derivative at t=" + std::to_string(t));
  return x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
}

/// Fixed-grid initial value problem: states are reported at `times`, with an
/// optional number of equal RK4 substeps per reporting interval.
template <class State, class F>
struct OdeProblem {
  F dynamics;
  State initial_state;
  std::vector<double> times;
  int substeps = 1;
};

inline void check_times(const std::vector<double>& times) {
  if (times.size() < 2)
    throw std::invalid_argument("ode_solve: need at least two time points");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw std::invalid_argument("ode_solve: times must be strictly increasing");
}

template <class State, class F>
std::vector<State> ode_solve(F&& dynamics, const State& x0,
                             const std::vector<double>& times, int substeps = 1) {
  check_times(times);
  if (substeps < 1) throw std::invalid_argument("ode_solve: substeps must be >= 1");
  std::vector<State> out;
  out.reserve(times.size());
  out.push_back(x0);
  for (std::size_t i = 1; i < times.size(); ++i) {
    State x = out.back();
    const double h = (times[i] - times[i - 1]) / substeps;
    try {
      for (int s = 0; s < substeps; ++s)
        x = rk4_step(dynamics, x, times[i - 1] + s * h, h);
    } catch (const ad::NumericalError& e) {
      throw ad::NumericalError("ode_solve: step " + std::to_string(i) + ": " + e.what());
    }
    out.push_back(std::move(x));
  }
  return out;
}

template <class State, class F>
std::vector<State> ode_solve(const OdeProblem<State, F>& p) {
  return ode_solve(p.dynamics, p.initial_state, p.times, p.substeps);
}

}  // namespace pilnm
