#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "pilnm/dataset_io.hpp"
#include "pilnm/model.hpp"
#include "pilnm/rnn.hpp"

namespace pilnm {

struct TrainInfo {
  std::string model_kind;  // "pilnm" | "rnn"
  std::uint64_t seed = 0;
  int iterations = 0;
  int batch = 0;
  double lr = 0.0;
  int window = 0;
  double perturb = 0.0;
  int substeps = 1;
  std::string dataset_digest;
};

/// Self-contained training artifact: the model plus everything needed to
/// re-create evaluation events (ground-truth generation context).
struct Checkpoint {
  int format_version = 1;
  TrainInfo info;
  double dt = 0.01;
  double horizon = 10.0;
  double t_m = 0.01;
  double pre_load = 1.0;
  std::pair<double, double> load_range{0.5, 5.0};
  GfmParams params_true;
  NetworkConfig net;
  std::optional<PiLnmModel> pilnm;
  std::optional<RnnModel> rnn;
};

namespace detail {

inline nlohmann::json mat_to_json(const nn::Mat& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline nn::Mat mat_from_json(const nlohmann::json& j) {
  const Eigen::Index rows = j.at("rows"), cols = j.at("cols");
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw std::runtime_error("checkpoint: weight size mismatch");
  nn::Mat m(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(k++)];
  return m;
}

inline nlohmann::json row_to_json(const Eigen::RowVectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Eigen::RowVectorXd row_from_json(const nlohmann::json& j) {
  Eigen::RowVectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i];
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = ck.format_version;
  j["kind"] = ck.info.model_kind;
  j["train"] = {{"seed", ck.info.seed},       {"iterations", ck.info.iterations},
                {"batch", ck.info.batch},     {"lr", ck.info.lr},
                {"window", ck.info.window},   {"perturb", ck.info.perturb},
                {"substeps", ck.info.substeps},
                {"dataset_digest", ck.info.dataset_digest}};
  j["generation"] = {{"dt", ck.dt},
                     {"horizon", ck.horizon},
                     {"t_m", ck.t_m},
                     {"pre_load", ck.pre_load},
                     {"load_range", {ck.load_range.first, ck.load_range.second}},
                     {"gfm_params", params_to_json(ck.params_true)},
                     {"network", net_to_json(ck.net)}};
  if (ck.pilnm) {
    const PiLnmModel& m = *ck.pilnm;
    j["dims"] = {{"n_obs", m.dims.n_obs},           {"n_phys", m.dims.n_phys},
                 {"n_neural", m.dims.n_neural},     {"enc_hidden", m.dims.enc_hidden},
                 {"f_hidden", m.dims.f_hidden},     {"cpl_hidden", m.dims.cpl_hidden},
                 {"dec_hidden", m.dims.dec_hidden}};
    j["sigma_obs"] = m.sigma_obs;
    j["approx_params"] = params_to_json(m.approx);
    j["norm_mean"] = detail::row_to_json(m.norm_mean);
    j["norm_std"] = detail::row_to_json(m.norm_std);
    nlohmann::json w;
    for (int i = 0; i < kPilnmWeightCount; ++i)
      w[pilnm_weight_name(i)] = detail::mat_to_json(m.weights[static_cast<std::size_t>(i)]);
    j["weights"] = std::move(w);
  } else if (ck.rnn) {
    const RnnModel& m = *ck.rnn;
    j["dims"] = {{"n_obs", m.dims.n_obs}, {"embed", m.dims.embed}, {"hidden", m.dims.hidden}};
    j["norm_mean"] = detail::row_to_json(m.norm_mean);
    j["norm_std"] = detail::row_to_json(m.norm_std);
    nlohmann::json w;
    for (int i = 0; i < kRnnWeightCount; ++i)
      w[rnn_weight_name(i)] = detail::mat_to_json(m.weights[static_cast<std::size_t>(i)]);
    j["weights"] = std::move(w);
  } else {
    throw std::invalid_argument("save_checkpoint: empty checkpoint");
  }
  io::write_file(path, j.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const nlohmann::json j = nlohmann::json::parse(io::read_file(path));
  Checkpoint ck;
  ck.format_version = j.at("format_version");
  if (ck.format_version != 1)
    throw std::runtime_error("checkpoint: unsupported format version");
  ck.info.model_kind = j.at("kind");
  const auto& tr = j.at("train");
  ck.info.seed = tr.at("seed");
  ck.info.iterations = tr.at("iterations");
  ck.info.batch = tr.at("batch");
  ck.info.lr = tr.at("lr");
  ck.info.window = tr.at("window");
  ck.info.perturb = tr.at("perturb");
  ck.info.substeps = tr.at("substeps");
  ck.info.dataset_digest = tr.at("dataset_digest");
  const auto& gen = j.at("generation");
  ck.dt = gen.at("dt");
  ck.horizon = gen.at("horizon");
  ck.t_m = gen.at("t_m");
  ck.pre_load = gen.at("pre_load");
  ck.load_range = {gen.at("load_range")[0], gen.at("load_range")[1]};
  ck.params_true = params_from_json(gen.at("gfm_params"));
  ck.net = net_from_json(gen.at("network"));

  if (ck.info.model_kind == "pilnm") {
    PiLnmModel m;
    const auto& d = j.at("dims");
    m.dims.n_obs = d.at("n_obs");
    m.dims.n_phys = d.at("n_phys");
    m.dims.n_neural = d.at("n_neural");
    m.dims.enc_hidden = d.at("enc_hidden");
    m.dims.f_hidden = d.at("f_hidden");
    m.dims.cpl_hidden = d.at("cpl_hidden");
    m.dims.dec_hidden = d.at("dec_hidden");
    m.sigma_obs = j.at("sigma_obs");
    m.approx = params_from_json(j.at("approx_params"));
    m.norm_mean = detail::row_from_json(j.at("norm_mean"));
    m.norm_std = detail::row_from_json(j.at("norm_std"));
    m.weights.resize(kPilnmWeightCount);
    for (int i = 0; i < kPilnmWeightCount; ++i) {
      m.weights[static_cast<std::size_t>(i)] =
          detail::mat_from_json(j.at("weights").at(pilnm_weight_name(i)));
      const auto [r, c] = pilnm_weight_shape(m.dims, i);
      if (m.weights[static_cast<std::size_t>(i)].rows() != r ||
          m.weights[static_cast<std::size_t>(i)].cols() != c)
        throw std::runtime_error("checkpoint: weight shape mismatch for " +
                                 std::string(pilnm_weight_name(i)));
    }
    ck.pilnm = std::move(m);
  } else if (ck.info.model_kind == "rnn") {
    RnnModel m;
    const auto& d = j.at("dims");
    m.dims.n_obs = d.at("n_obs");
    m.dims.embed = d.at("embed");
    m.dims.hidden = d.at("hidden");
    m.norm_mean = detail::row_from_json(j.at("norm_mean"));
    m.norm_std = detail::row_from_json(j.at("norm_std"));
    m.weights.resize(kRnnWeightCount);
    for (int i = 0; i < kRnnWeightCount; ++i)
      m.weights[static_cast<std::size_t>(i)] =
          detail::mat_from_json(j.at("weights").at(rnn_weight_name(i)));
    ck.rnn = std::move(m);
  } else {
    throw std::runtime_error("checkpoint: unknown model kind " + ck.info.model_kind);
  }
  return ck;
}

}  // namespace pilnm
