#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "pilnm/adam.hpp"
#include "pilnm/checkpoint.hpp"
#include "pilnm/dataset_io.hpp"
#include "pilnm/model.hpp"
#include "pilnm/rnn.hpp"

namespace pilnm {

struct TrainConfig {
  std::string model_kind = "pilnm";  // "pilnm" | "rnn"
  int batch = 200;
  double lr = 0.02;
  int iterations = 2000;
  int window = 200;        // steps per training sub-window
  std::uint64_t seed = 1;
  double perturb = 0.2;    // fraction applied to the frozen physics prior
  int ckpt_every = 500;
  int threads = 2;
  int shard = 100;         // fixed decomposition unit; results do not depend
                           // on the thread count, only shard order matters
  int substeps = 1;
  double sigma_obs = 0.01;
  double lr_decay = 0.5;   // applied every lr_decay_every iterations
  int lr_decay_every = 500;
  PiLnmDims dims;
  RnnDims rnn_dims;

  void validate(const Dataset& ds) const {
    if (model_kind != "pilnm" && model_kind != "rnn")
      throw std::invalid_argument("train: model kind must be pilnm or rnn");
    if (iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
    if (batch < 1 || batch > static_cast<int>(ds.trajectories.size()))
      throw std::invalid_argument("train: batch must be in [1, dataset size]");
    if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
    if (window < 1) throw std::invalid_argument("train: window must be >= 1");
    if (perturb < 0.0 || perturb >= 1.0)
      throw std::invalid_argument("train: perturb must be in [0, 1)");
  }
};

struct TrainError : std::runtime_error {
  int iteration;
  std::string last_checkpoint;
  TrainError(const std::string& msg, int it, std::string ckpt)
      : std::runtime_error(msg), iteration(it), last_checkpoint(std::move(ckpt)) {}
};

struct HistoryRow {
  int iteration;
  double loss;
  double reconstruction;
  double kl;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<HistoryRow> history;
};

/// Per-channel affine normalization statistics over the training split.
inline std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> normalization_stats(
    const Dataset& ds) {
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(kNumChannels);
  Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(kNumChannels);
  long n = 0;
  for (const auto& t : ds.trajectories) {
    mean += t.observations.colwise().sum();
    sq += t.observations.array().square().matrix().colwise().sum();
    n += t.observations.rows();
  }
  mean /= static_cast<double>(n);
  Eigen::RowVectorXd var = sq / static_cast<double>(n) - mean.cwiseProduct(mean);
  return {mean, var.cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-9)};
}

namespace detail {

inline std::vector<int> sample_without_replacement(Rng& rng, int n, int k) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + rng.uniform_int(n - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "iteration,loss,reconstruction,kl\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iteration);
    out += ',';
    out += io::fmt_double(r.loss);
    out += ',';
    out += io::fmt_double(r.reconstruction);
    out += ',';
    out += io::fmt_double(r.kl);
    out += '\n';
  }
  return out;
}

/// Runs fn(shard_index) on a small pool; shard outputs are produced into
/// index slots, so the reduction order below is independent of scheduling.
template <class Fn>
void run_sharded(int n_shards, int threads, Fn&& fn) {
  const int n_threads = std::max(1, std::min(threads, n_shards));
  if (n_threads == 1) {
    for (int s = 0; s < n_shards; ++s) fn(s);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_shards));
  for (int t = 0; t < n_threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const int s = next.fetch_add(1);
        if (s >= n_shards) return;
        try {
          fn(s);
        } catch (...) {
          errors[static_cast<std::size_t>(s)] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Seeded training loop shared by both model kinds: batch sampling without
/// replacement, per-trajectory random sub-windows, sharded graph evaluation
/// with order-fixed gradient reduction, Adam with a halving schedule, loss
/// CSV and checkpoint cadence under out_dir.
inline TrainResult train(const Dataset& ds, const std::string& dataset_digest,
                         const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         const std::function<void(const HistoryRow&)>& progress = {}) {
  cfg.validate(ds);
  std::filesystem::create_directories(out_dir);
  const auto [mean, stddev] = normalization_stats(ds);
  const bool is_pilnm = cfg.model_kind == "pilnm";

  Checkpoint ck;
  ck.info.model_kind = cfg.model_kind;
  ck.info.seed = cfg.seed;
  ck.info.batch = cfg.batch;
  ck.info.lr = cfg.lr;
  ck.info.window = cfg.window;
  ck.info.perturb = cfg.perturb;
  ck.info.substeps = cfg.substeps;
  ck.info.dataset_digest = dataset_digest;
  ck.dt = ds.dt;
  ck.horizon = ds.horizon;
  ck.t_m = ds.t_m;
  ck.pre_load = ds.pre_load;
  ck.load_range = ds.load_range;
  ck.params_true = ds.params_true;
  ck.net = ds.net;
  if (is_pilnm) {
    const GfmParams approx =
        perturb_params(ds.params_true, cfg.perturb, Rng::derive(cfg.seed, "perturb"));
    ck.pilnm = init_pilnm_model(cfg.dims, approx, mean, stddev,
                                Rng::derive(cfg.seed, "init"), cfg.sigma_obs);
  } else {
    ck.rnn = init_rnn_model(cfg.rnn_dims, mean, stddev, Rng::derive(cfg.seed, "init"));
  }

  std::vector<nn::Mat>& weights = is_pilnm ? ck.pilnm->weights : ck.rnn->weights;
  const int n_weights = static_cast<int>(weights.size());
  const int latent = is_pilnm ? cfg.dims.latent() : 0;

  const int rows = static_cast<int>(ds.trajectories.front().observations.rows());
  const int window = std::min(cfg.window, rows - 1);
  const int max_offset = rows - 1 - window;

  AdamState opt;
  opt.lr = cfg.lr;

  Rng rng(Rng::derive(cfg.seed, "batches"));
  std::vector<HistoryRow> history;
  history.reserve(static_cast<std::size_t>(cfg.iterations));
  std::string last_ckpt_path;

  auto save = [&](const std::string& name, int iters_done) {
    ck.info.iterations = iters_done;
    const auto path = out_dir / name;
    save_checkpoint(ck, path);
    last_ckpt_path = path.string();
  };

  const int shard_size = std::max(1, std::min(cfg.shard, cfg.batch));
  const int n_shards = (cfg.batch + shard_size - 1) / shard_size;

  for (int it = 1; it <= cfg.iterations; ++it) {
    opt.lr = cfg.lr * std::pow(cfg.lr_decay, (it - 1) / cfg.lr_decay_every);

    // fixed draw order: indices, then offsets, then (pilnm) noise
    const std::vector<int> batch_idx =
        detail::sample_without_replacement(rng, static_cast<int>(ds.trajectories.size()),
                                           cfg.batch);
    std::vector<int> offsets(static_cast<std::size_t>(cfg.batch), 0);
    for (int b = 0; b < cfg.batch; ++b)
      offsets[static_cast<std::size_t>(b)] = max_offset > 0 ? rng.uniform_int(max_offset + 1) : 0;
    nn::Mat noise;
    if (is_pilnm) {
      noise.resize(cfg.batch, latent);
      for (int b = 0; b < cfg.batch; ++b)
        for (int k = 0; k < latent; ++k) noise(b, k) = rng.normal();
    }

    std::vector<std::vector<nn::Mat>> shard_grads(static_cast<std::size_t>(n_shards));
    std::vector<ElboParts> shard_elbo(static_cast<std::size_t>(n_shards));
    std::vector<RnnLossParts> shard_rnn(static_cast<std::size_t>(n_shards));

    try {
      detail::run_sharded(n_shards, cfg.threads, [&](int s) {
        const int lo = s * shard_size;
        const int hi = std::min(cfg.batch, lo + shard_size);
        const std::vector<int> traj(batch_idx.begin() + lo, batch_idx.begin() + hi);
        const std::vector<int> offs(offsets.begin() + lo, offsets.begin() + hi);
        ad::Tape tape;
        std::vector<nn::Mat> grads(static_cast<std::size_t>(n_weights));
        if (is_pilnm) {
          ElboWindows wins{traj, offs, window};
          const nn::Mat shard_noise = noise.middleRows(lo, hi - lo);
          PilnmRef<ad::Var> ref;
          ElboParts parts = build_elbo_graph(tape, *ck.pilnm, ds, wins, shard_noise,
                                             cfg.substeps, 1.0 / cfg.batch, &ref);
          tape.backward(parts.loss);
          for (int w = 0; w < n_weights; ++w)
            grads[static_cast<std::size_t>(w)] = ref.w[static_cast<std::size_t>(w)].grad();
          shard_elbo[static_cast<std::size_t>(s)] = std::move(parts);
        } else {
          RnnRef<ad::Var> ref;
          const double inv = 1.0 / (static_cast<double>(cfg.batch) * window * kNumChannels);
          RnnLossParts parts =
              build_rnn_loss_graph(tape, *ck.rnn, ds, traj, offs, window, inv, &ref);
          tape.backward(parts.loss);
          for (int w = 0; w < n_weights; ++w)
            grads[static_cast<std::size_t>(w)] = ref.w[static_cast<std::size_t>(w)].grad();
          shard_rnn[static_cast<std::size_t>(s)] = std::move(parts);
        }
        shard_grads[static_cast<std::size_t>(s)] = std::move(grads);
      });

      // order-fixed reduction across shards
      std::vector<nn::Mat> grads = std::move(shard_grads[0]);
      for (int s = 1; s < n_shards; ++s)
        for (int w = 0; w < n_weights; ++w)
          grads[static_cast<std::size_t>(w)] += shard_grads[static_cast<std::size_t>(s)]
                                                           [static_cast<std::size_t>(w)];

      HistoryRow row;
      row.iteration = it;
      if (is_pilnm) {
        const ElboMetrics metrics = combine_elbo_parts(*ck.pilnm, shard_elbo, window);
        row.loss = metrics.neg_elbo;
        row.reconstruction = metrics.recon_mse;
        row.kl = metrics.kl;
      } else {
        double sq = 0;
        long n = 0;
        for (const auto& p : shard_rnn) {
          sq += p.sq_sum;
          n += p.n_points;
        }
        row.loss = sq / static_cast<double>(n);
        row.reconstruction = row.loss;
        row.kl = 0.0;
      }
      if (!std::isfinite(row.loss))
        throw ad::NumericalError("train: non-finite loss");

      adam_update(weights, grads, opt);
      history.push_back(row);
      if (progress) progress(row);
    } catch (const std::exception& e) {
      io::write_file(out_dir / "loss_history.csv", detail::history_csv(history));
      throw TrainError("train: aborted at iteration " + std::to_string(it) + ": " + e.what() +
                           (last_ckpt_path.empty() ? std::string(" (no checkpoint saved)")
                                                   : " (last checkpoint: " + last_ckpt_path + ")"),
                       it, last_ckpt_path);
    }

    if (cfg.ckpt_every > 0 && it % cfg.ckpt_every == 0 && it < cfg.iterations) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.json", it);
      save(name, it);
    }
  }

  save("checkpoint.json", cfg.iterations);
  io::write_file(out_dir / "loss_history.csv", detail::history_csv(history));
  return TrainResult{std::move(ck), std::move(history)};
}

}  // namespace pilnm
