#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pilnm/simulate.hpp"

namespace pilnm {

namespace io {

/// 17 significant digits: lossless text round-trip for IEEE doubles.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const char*& p) {
  char* end = nullptr;
  const double v = std::strtod(p, &end);
  if (end == p) throw std::runtime_error("dataset: malformed numeric field");
  p = end;
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

inline std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace io

inline nlohmann::json params_to_json(const GfmParams& g) {
  return nlohmann::json{{"m_p", g.m_p},       {"m_q", g.m_q},
                        {"k_pv", g.k_pv},     {"k_iv", g.k_iv},
                        {"T_p", g.T_p},       {"T_e", g.T_e},
                        {"omega_b", g.omega_b}, {"P_set", g.P_set},
                        {"Q_set", g.Q_set},   {"omega_set", g.omega_set},
                        {"V_set", g.V_set},   {"X_f", g.X_f}};
}

inline GfmParams params_from_json(const nlohmann::json& j) {
  GfmParams g;
  g.m_p = j.at("m_p");
  g.m_q = j.at("m_q");
  g.k_pv = j.at("k_pv");
  g.k_iv = j.at("k_iv");
  g.T_p = j.at("T_p");
  g.T_e = j.at("T_e");
  g.omega_b = j.at("omega_b");
  g.P_set = j.at("P_set");
  g.Q_set = j.at("Q_set");
  g.omega_set = j.at("omega_set");
  g.V_set = j.at("V_set");
  g.X_f = j.at("X_f");
  return g;
}

inline nlohmann::json net_to_json(const NetworkConfig& n) {
  return nlohmann::json{
      {"X_line", n.X_line}, {"V_inf", n.V_inf}, {"P_load", n.P_load}, {"Q_load", n.Q_load}};
}

inline NetworkConfig net_from_json(const nlohmann::json& j) {
  NetworkConfig n;
  n.X_line = j.at("X_line");
  n.V_inf = j.at("V_inf");
  n.P_load = j.at("P_load");
  n.Q_load = j.at("Q_load");
  return n;
}

inline std::string trajectory_csv_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "traj_%05d.csv", index);
  return buf;
}

inline std::string trajectory_to_csv(const Trajectory& t) {
  std::string out;
  out.reserve(t.times.size() * 170);
  out += "t";
  for (const char* name : kChannelNames) {
    out += ',';
    out += name;
  }
  out += '\n';
  for (std::size_t i = 0; i < t.times.size(); ++i) {
    out += io::fmt_double(t.times[i]);
    for (int c = 0; c < kNumChannels; ++c) {
      out += ',';
      out += io::fmt_double(t.observations(static_cast<Eigen::Index>(i), c));
    }
    out += '\n';
  }
  return out;
}

inline Trajectory trajectory_from_csv(const std::string& csv) {
  Trajectory t;
  std::vector<double> values;
  const char* p = csv.c_str();
  // skip header row
  while (*p && *p != '\n') ++p;
  if (*p == '\n') ++p;
  while (*p) {
    for (int c = 0; c <= kNumChannels; ++c) {
      values.push_back(io::parse_double(p));
      if (c < kNumChannels) {
        if (*p != ',') throw std::runtime_error("dataset: expected comma in CSV row");
        ++p;
      }
    }
    if (*p == '\n') ++p;
    else if (*p != '\0') throw std::runtime_error("dataset: trailing bytes in CSV row");
  }
  const std::size_t rows = values.size() / (kNumChannels + 1);
  t.times.resize(rows);
  t.observations.resize(static_cast<Eigen::Index>(rows), kNumChannels);
  for (std::size_t i = 0; i < rows; ++i) {
    t.times[i] = values[i * 7];
    for (int c = 0; c < kNumChannels; ++c)
      t.observations(static_cast<Eigen::Index>(i), c) = values[i * 7 + 1 + c];
  }
  return t;
}

/// Writes the dataset directory: metadata.json plus one CSV per trajectory.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format_version"] = ds.format_version;
  meta["dt"] = ds.dt;
  meta["horizon"] = ds.horizon;
  meta["channels"] = nlohmann::json::array();
  for (const char* name : kChannelNames) meta["channels"].push_back(name);
  meta["k"] = static_cast<int>(ds.trajectories.size());
  meta["load_range"] = {ds.load_range.first, ds.load_range.second};
  meta["seed"] = ds.seed;
  meta["t_m"] = ds.t_m;
  meta["pre_load"] = ds.pre_load;
  meta["gfm_params"] = params_to_json(ds.params_true);
  meta["network"] = net_to_json(ds.net);
  nlohmann::json events = nlohmann::json::array();
  for (const Trajectory& t : ds.trajectories)
    events.push_back({{"index", t.event_index},
                      {"load", t.load_level},
                      {"file", trajectory_csv_name(t.event_index)}});
  meta["events"] = events;
  io::write_file(dir / "metadata.json", meta.dump(2) + "\n");
  for (const Trajectory& t : ds.trajectories)
    io::write_file(dir / trajectory_csv_name(t.event_index), trajectory_to_csv(t));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json meta = nlohmann::json::parse(io::read_file(dir / "metadata.json"));
  Dataset ds;
  ds.format_version = meta.at("format_version");
  if (ds.format_version != 1)
    throw std::runtime_error("dataset: unsupported format version");
  ds.dt = meta.at("dt");
  ds.horizon = meta.at("horizon");
  ds.load_range = {meta.at("load_range")[0], meta.at("load_range")[1]};
  ds.seed = meta.at("seed");
  ds.t_m = meta.at("t_m");
  ds.pre_load = meta.at("pre_load");
  ds.params_true = params_from_json(meta.at("gfm_params"));
  ds.net = net_from_json(meta.at("network"));
  const int k = meta.at("k");
  ds.trajectories.resize(k);
  for (const auto& ev : meta.at("events")) {
    const int idx = ev.at("index");
    Trajectory t = trajectory_from_csv(io::read_file(dir / ev.at("file").get<std::string>()));
    t.load_level = ev.at("load");
    t.event_index = idx;
    ds.trajectories[idx] = std::move(t);
  }
  return ds;
}

/// Order-fixed digest over the metadata and all trajectory files.
inline std::string dataset_digest(const std::filesystem::path& dir) {
  const nlohmann::json meta = nlohmann::json::parse(io::read_file(dir / "metadata.json"));
  std::uint64_t h = io::fnv1a(io::read_file(dir / "metadata.json"));
  for (const auto& ev : meta.at("events"))
    h = io::fnv1a(io::read_file(dir / ev.at("file").get<std::string>()), h);
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return buf;
}

}  // namespace pilnm
