#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pilnm/checkpoint.hpp"
#include "pilnm/dataset_io.hpp"
#include "pilnm/model.hpp"
#include "pilnm/rnn.hpp"
#include "pilnm/simulate.hpp"
#include "pilnm/train.hpp"

namespace pilnm {

constexpr double kHzPerPu = 60.0;  // frequency channel is reported in Hz

struct IntegrateOptions {
  double warmup_s = 0.2;  // encoder conditioning window
  int substeps = 1;
};

/// Reconnects the trained latent model to the grid simulation: conditions
/// the encoder on a short observed warm-up from the reference simulation,
/// then rolls the hybrid dynamics closed loop, feeding the physics block
/// network-consistent POI values from a Newton solve at the decoded
/// internal voltage and angle instead of the coupling-head estimates.
inline Trajectory integrate_learned(const Checkpoint& ck, double load_step, double horizon,
                                    const Trajectory* reference = nullptr,
                                    const IntegrateOptions& opt = {}) {
  if (!ck.pilnm) throw std::invalid_argument("integrate_learned: checkpoint is not a pilnm model");
  const PiLnmModel& m = *ck.pilnm;
  const double dt = ck.dt;
  const int steps = static_cast<int>(std::llround(horizon / dt));
  if (std::abs(horizon / dt - steps) > 1e-9)
    throw std::invalid_argument("integrate_learned: horizon must be an integer multiple of dt");
  const int warm = static_cast<int>(std::llround(opt.warmup_s / dt));

  Trajectory truth;
  if (reference) {
    truth = *reference;
  } else {
    truth = simulate_event(ck.params_true, ck.t_m, ck.net, ck.pre_load, load_step, horizon, dt);
  }
  if (truth.observations.rows() < warm + 1)
    throw std::invalid_argument("integrate_learned: reference shorter than the warm-up window");

  // posterior over z(0) conditioned on the observed warm-up window
  const Posterior post = encode_window(m, truth.observations.topRows(warm + 1), dt);
  nn::Mat z = nn::Mat::Zero(1, m.dims.latent());
  z.row(0) = post.mu.transpose();

  NetworkConfig net_post = ck.net;
  net_post.P_load = load_step;

  // initial power flow at the decoded operating point; seeds the warm-start
  // chain for the per-stage Newton solves
  PoiSolution poi0 = solve_network(z(0, 3), z(0, 0), net_post, m.approx.X_f);
  std::optional<std::pair<double, double>> warm_v{{poi0.vre, poi0.vim}};

  PilnmRef<nn::Mat> ref = bind_model(m, 1);
  auto field = [&](const nn::Mat& s, double) -> nn::Mat {
    const PoiSolution poi = solve_network(s(0, 3), s(0, 0), net_post, m.approx.X_f, warm_v);
    warm_v = {poi.vre, poi.vim};
    const GfmState d = gfm_derivatives(GfmState{s(0, 0), s(0, 1), s(0, 2), s(0, 3)},
                                       Poi{poi.v_t, poi.p, poi.q}, m.approx);
    nn::Mat out(1, s.cols());
    out(0, 0) = d.theta;
    out(0, 1) = d.omega;
    out(0, 2) = d.v_err;
    out(0, 3) = d.v_int;
    out.rightCols(m.dims.n_neural) = ftheta_forward(ref, s);
    return out;
  };

  Trajectory pred;
  pred.load_level = load_step;
  pred.event_index = truth.event_index;
  pred.times.resize(static_cast<std::size_t>(steps) + 1);
  pred.observations.resize(steps + 1, kNumChannels);
  const double h = dt / opt.substeps;
  for (int i = 0; i <= steps; ++i) {
    pred.times[static_cast<std::size_t>(i)] = i * dt;
    pred.observations.row(i) = decode_state(ref, z).row(0);
    if (i == steps) break;
    try {
      for (int s = 0; s < opt.substeps; ++s) z = rk4_step(field, z, i * dt + s * h, h);
    } catch (const std::exception& e) {
      throw ad::NumericalError("integrate_learned: step " + std::to_string(i + 1) + ": " +
                               e.what());
    }
  }
  return pred;
}

/// Per-channel root-mean-square error over [start_idx, end]; the frequency
/// channel is converted to Hz before the error is taken.
inline double rmse(const Trajectory& pred, const Trajectory& truth, int channel,
                   int start_idx = 0) {
  if (channel < 0 || channel >= kNumChannels)
    throw std::invalid_argument("rmse: channel out of range");
  if (pred.times.size() != truth.times.size())
    throw std::invalid_argument("rmse: trajectory grids differ in length");
  for (std::size_t i = 0; i < pred.times.size(); ++i)
    if (std::abs(pred.times[i] - truth.times[i]) > 1e-12)
      throw std::invalid_argument("rmse: trajectory grids are not aligned");
  if (start_idx < 0 || start_idx >= static_cast<int>(pred.times.size()))
    throw std::invalid_argument("rmse: start index out of range");
  const double unit = channel == 1 ? kHzPerPu : 1.0;
  double sq = 0;
  long n = 0;
  for (Eigen::Index i = start_idx; i < pred.observations.rows(); ++i) {
    const double d = unit * (pred.observations(i, channel) - truth.observations(i, channel));
    sq += d * d;
    ++n;
  }
  return std::sqrt(sq / static_cast<double>(n));
}

struct CompareConfig {
  int n_events = 20;
  double horizon = 5.0;
  std::uint64_t seed = 7;
  double warmup_s = 0.2;  // PI-LNM encoder conditioning window
  int rnn_warmup = 10;    // teacher-forced steps for the baseline
  int substeps = 1;
  int threads = 2;
};

struct EventEval {
  double load = 0;
  std::array<double, kNumChannels> rmse_pilnm{};
  std::array<double, kNumChannels> rmse_rnn{};
  Trajectory truth, pilnm, rnn;
};

struct EvalReport {
  int n_events = 0;
  double horizon_s = 5.0;
  double eval_start_s = 0.21;
  std::uint64_t seed = 7;
  std::string dataset_digest;
  std::uint64_t pilnm_train_seed = 0, rnn_train_seed = 0;
  // pooled over events; frequency channel in Hz
  std::array<double, kNumChannels> rmse_pilnm{};
  std::array<double, kNumChannels> rmse_rnn{};
  std::array<double, kNumChannels> improvement_pct{};
  std::vector<EventEval> events;

  double voltage_rmse_pilnm() const { return rmse_pilnm[3]; }
  double voltage_rmse_rnn() const { return rmse_rnn[3]; }
  double frequency_rmse_pilnm() const { return rmse_pilnm[1]; }
  double frequency_rmse_rnn() const { return rmse_rnn[1]; }
  double voltage_improvement() const { return improvement_pct[3]; }
  double frequency_improvement() const { return improvement_pct[1]; }
};

/// Held-out comparison on freshly simulated load-step events. Both models
/// see the same events; the error window starts after the longer of the two
/// warm-ups so every scored point is closed-loop for both.
inline EvalReport compare(const Checkpoint& pilnm_ck, const Checkpoint& rnn_ck,
                          const CompareConfig& cfg,
                          const std::vector<double>* training_loads = nullptr) {
  if (!pilnm_ck.pilnm) throw std::invalid_argument("compare: first checkpoint must be pilnm");
  if (!rnn_ck.rnn) throw std::invalid_argument("compare: second checkpoint must be rnn");
  if (pilnm_ck.info.dataset_digest != rnn_ck.info.dataset_digest)
    throw std::invalid_argument("compare: checkpoints were trained on different datasets");
  if (cfg.n_events < 1) throw std::invalid_argument("compare: need at least one event");

  const double dt = pilnm_ck.dt;
  const int steps = static_cast<int>(std::llround(cfg.horizon / dt));
  const int warm_steps = static_cast<int>(std::llround(cfg.warmup_s / dt));
  const int start_idx = std::max(warm_steps, cfg.rnn_warmup) + 1;

  EvalReport report;
  report.n_events = cfg.n_events;
  report.horizon_s = cfg.horizon;
  report.eval_start_s = start_idx * dt;
  report.seed = cfg.seed;
  report.dataset_digest = pilnm_ck.info.dataset_digest;
  report.pilnm_train_seed = pilnm_ck.info.seed;
  report.rnn_train_seed = rnn_ck.info.seed;

  // held-out events: separate seed stream; loads re-drawn on the measure-zero
  // chance of colliding with a training load
  Rng rng(Rng::derive(cfg.seed, "eval-events"));
  std::vector<double> loads(static_cast<std::size_t>(cfg.n_events));
  for (auto& load : loads) {
    do {
      load = rng.uniform(pilnm_ck.load_range.first, pilnm_ck.load_range.second);
    } while (training_loads &&
             std::find(training_loads->begin(), training_loads->end(), load) !=
                 training_loads->end());
  }

  report.events.resize(static_cast<std::size_t>(cfg.n_events));
  detail::run_sharded(cfg.n_events, cfg.threads, [&](int e) {
    EventEval& ev = report.events[static_cast<std::size_t>(e)];
    ev.load = loads[static_cast<std::size_t>(e)];
    ev.truth = simulate_event(pilnm_ck.params_true, pilnm_ck.t_m, pilnm_ck.net,
                              pilnm_ck.pre_load, ev.load, cfg.horizon, dt);
    ev.truth.event_index = e;

    IntegrateOptions opt;
    opt.warmup_s = cfg.warmup_s;
    opt.substeps = cfg.substeps;
    ev.pilnm = integrate_learned(pilnm_ck, ev.load, cfg.horizon, &ev.truth, opt);

    // baseline: teacher-forced warm-up, then closed loop to the horizon end;
    // the unpredicted warm-up rows carry the observed values
    ev.rnn = ev.truth;
    const Eigen::MatrixXd closed =
        rnn_predict(*rnn_ck.rnn, ev.truth.observations.topRows(cfg.rnn_warmup),
                    steps + 1 - cfg.rnn_warmup);
    ev.rnn.observations.bottomRows(steps + 1 - cfg.rnn_warmup) = closed;

    for (int c = 0; c < kNumChannels; ++c) {
      ev.rmse_pilnm[static_cast<std::size_t>(c)] = rmse(ev.pilnm, ev.truth, c, start_idx);
      ev.rmse_rnn[static_cast<std::size_t>(c)] = rmse(ev.rnn, ev.truth, c, start_idx);
    }
  });

  // pool squared errors across events (order-fixed reduction)
  for (int c = 0; c < kNumChannels; ++c) {
    double sp = 0, sr = 0;
    for (const auto& ev : report.events) {
      sp += ev.rmse_pilnm[static_cast<std::size_t>(c)] * ev.rmse_pilnm[static_cast<std::size_t>(c)];
      sr += ev.rmse_rnn[static_cast<std::size_t>(c)] * ev.rmse_rnn[static_cast<std::size_t>(c)];
    }
    report.rmse_pilnm[static_cast<std::size_t>(c)] = std::sqrt(sp / cfg.n_events);
    report.rmse_rnn[static_cast<std::size_t>(c)] = std::sqrt(sr / cfg.n_events);
    report.improvement_pct[static_cast<std::size_t>(c)] =
        100.0 *
        (report.rmse_rnn[static_cast<std::size_t>(c)] - report.rmse_pilnm[static_cast<std::size_t>(c)]) /
        report.rmse_rnn[static_cast<std::size_t>(c)];
  }
  return report;
}

// ---- report serialization ----

inline nlohmann::json report_to_json(const EvalReport& r) {
  auto arr = [](const std::array<double, kNumChannels>& a) {
    nlohmann::json j = nlohmann::json::object();
    for (int c = 0; c < kNumChannels; ++c) j[kChannelNames[c]] = a[static_cast<std::size_t>(c)];
    return j;
  };
  nlohmann::json events = nlohmann::json::array();
  for (const auto& ev : r.events)
    events.push_back({{"load", ev.load},
                      {"rmse_pilnm", arr(ev.rmse_pilnm)},
                      {"rmse_rnn", arr(ev.rmse_rnn)}});
  return nlohmann::json{
      {"format_version", 1},
      {"n_events", r.n_events},
      {"horizon_s", r.horizon_s},
      {"eval_start_s", r.eval_start_s},
      {"eval_seed", r.seed},
      {"dataset_digest", r.dataset_digest},
      {"pilnm_train_seed", r.pilnm_train_seed},
      {"rnn_train_seed", r.rnn_train_seed},
      {"frequency_unit", "Hz"},
      {"rmse_pilnm", arr(r.rmse_pilnm)},
      {"rmse_rnn", arr(r.rmse_rnn)},
      {"improvement_pct", arr(r.improvement_pct)},
      {"events", std::move(events)}};
}

/// Human-readable table in the layout of the paper-style RMSE comparison.
inline std::string report_table(const EvalReport& r) {
  char buf[256];
  std::string out;
  out += "Metric (RMSE)        RNN          PI-LNM       Improvement (%)\n";
  std::snprintf(buf, sizeof(buf), "%-20s %-12.4g %-12.4g %.1f\n", "Voltage (pu)",
                r.voltage_rmse_rnn(), r.voltage_rmse_pilnm(), r.voltage_improvement());
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-20s %-12.4g %-12.4g %.1f\n", "Frequency (Hz)",
                r.frequency_rmse_rnn(), r.frequency_rmse_pilnm(), r.frequency_improvement());
  out += buf;
  out += "\nAll channels:\n";
  for (int c = 0; c < kNumChannels; ++c) {
    std::snprintf(buf, sizeof(buf), "%-20s %-12.4g %-12.4g %.1f\n", kChannelNames[c],
                  r.rmse_rnn[static_cast<std::size_t>(c)],
                  r.rmse_pilnm[static_cast<std::size_t>(c)],
                  r.improvement_pct[static_cast<std::size_t>(c)]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "\n%d held-out events, horizon %.2f s, scored for t >= %.2f s\n", r.n_events,
                r.horizon_s, r.eval_start_s);
  out += buf;
  return out;
}

/// Per-event overlay table: time, then truth/pilnm/rnn blocks per channel.
inline std::string event_csv(const EventEval& ev) {
  std::string out = "t";
  for (const char* model : {"truth", "pilnm", "rnn"})
    for (const char* ch : kChannelNames) {
      out += ',';
      out += model;
      out += '_';
      out += ch;
    }
  out += '\n';
  for (std::size_t i = 0; i < ev.truth.times.size(); ++i) {
    out += io::fmt_double(ev.truth.times[i]);
    for (const Trajectory* t : {&ev.truth, &ev.pilnm, &ev.rnn})
      for (int c = 0; c < kNumChannels; ++c) {
        out += ',';
        out += io::fmt_double(t->observations(static_cast<Eigen::Index>(i), c));
      }
    out += '\n';
  }
  return out;
}

inline void write_report(const EvalReport& r, const std::filesystem::path& dir,
                         bool with_event_csvs = true) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "report.json", report_to_json(r).dump(2) + "\n");
  io::write_file(dir / "report.txt", report_table(r));
  if (with_event_csvs) {
    for (std::size_t e = 0; e < r.events.size(); ++e) {
      char name[32];
      std::snprintf(name, sizeof(name), "event_%03zu.csv", e);
      io::write_file(dir / name, event_csv(r.events[e]));
    }
  }
}

}  // namespace pilnm
