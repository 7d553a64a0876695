#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pilnm/model.hpp"
#include "test_util.hpp"

using namespace pilnm;
using nn::Mat;

namespace {

Eigen::RowVectorXd unit_mean() { return Eigen::RowVectorXd::Zero(6); }
Eigen::RowVectorXd unit_std() { return Eigen::RowVectorXd::Ones(6); }

PiLnmDims mini_dims() {
  PiLnmDims d;
  d.n_neural = 2;
  d.enc_hidden = 8;
  d.f_hidden = 8;
  d.cpl_hidden = 4;
  d.dec_hidden = 4;
  return d;
}

PiLnmModel zero_model(const PiLnmDims& d) {
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 1);
  for (auto& w : m.weights) w.setZero();
  return m;
}

Dataset tiny_dataset(double horizon = 0.05, int k = 1) {
  GenerateConfig cfg;
  cfg.horizon = horizon;
  cfg.threads = 1;
  return generate_dataset(k, {2.0, 3.0}, cfg, 17);
}

Eigen::RowVectorXd dataset_mean(const Dataset& ds) {
  Eigen::RowVectorXd m = Eigen::RowVectorXd::Zero(6);
  long n = 0;
  for (const auto& t : ds.trajectories) {
    m += t.observations.colwise().sum();
    n += t.observations.rows();
  }
  return m / double(n);
}

std::vector<double> flatten_weights(const PiLnmModel& m) {
  std::vector<double> flat;
  for (const auto& w : m.weights)
    flat.insert(flat.end(), w.data(), w.data() + w.size());
  return flat;
}

void unflatten_weights(PiLnmModel& m, const std::vector<double>& flat) {
  std::size_t k = 0;
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = flat[k++];
}

}  // namespace

TEST_CASE("zero-weight encoder yields bias-driven posterior", "[model]") {
  PiLnmModel m = zero_model(PiLnmDims{});
  Mat obs = Mat::Zero(5, 6);
  const Posterior p = encode_window(m, obs, 0.01);
  CHECK(p.mu.isZero(0));
  const double sp0 = std::log1p(std::exp(0.0));
  for (Eigen::Index i = 0; i < p.sigma.size(); ++i) {
    CHECK(p.sigma[i] > 0.0);
    CHECK(std::abs(p.sigma[i] - sp0) < 1e-15);
  }
}

TEST_CASE("encoder is deterministic and order sensitive", "[model]") {
  PiLnmModel m = init_pilnm_model(PiLnmDims{}, GfmParams{}, unit_mean(), unit_std(), 3);
  Rng rng(4);
  Mat obs(6, 6);
  for (int i = 0; i < obs.size(); ++i) obs.data()[i] = rng.uniform(-1, 1);
  const Posterior a = encode_window(m, obs, 0.01);
  const Posterior b = encode_window(m, obs, 0.01);
  CHECK(a.mu == b.mu);
  CHECK(a.sigma == b.sigma);
  Mat perm = obs;
  perm.row(2).swap(perm.row(3));
  const Posterior c = encode_window(m, perm, 0.01);
  CHECK((a.mu - c.mu).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("reparameterized sampling", "[model]") {
  Posterior p;
  p.mu = Eigen::VectorXd::LinSpaced(24, -1.0, 1.0);
  p.sigma = Eigen::VectorXd::Constant(24, 0.5);
  CHECK(sample_z0(p, Eigen::VectorXd::Zero(24)) == p.mu);
  CHECK_THROWS_AS(sample_z0(p, Eigen::VectorXd::Zero(7)), std::invalid_argument);

  // Monte-Carlo oracle: the sample mean approaches mu
  Rng rng(9);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(24);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd noise(24);
    for (int k = 0; k < 24; ++k) noise[k] = rng.normal();
    acc += sample_z0(p, noise);
  }
  acc /= n;
  for (int k = 0; k < 24; ++k)
    CHECK(std::abs(acc[k] - p.mu[k]) < 3.0 * 0.5 / std::sqrt(double(n)));
}

TEST_CASE("reparameterization gradients are identity and noise", "[model]") {
  ad::Tape tape;
  const int L = 5;
  Eigen::RowVectorXd noise(L);
  noise << 0.3, -1.2, 0.0, 2.0, -0.4;
  ad::Var mu = tape.param(Mat::Zero(1, L));
  ad::Var sigma = tape.param(Mat::Ones(1, L));
  ad::Var z0 = tape.add(mu, tape.mul(sigma, tape.constant(noise)));
  for (int k = 0; k < L; ++k) {
    tape.zero_grad();
    tape.backward(tape.sum(tape.slice_cols(z0, k, 1)));
    for (int i = 0; i < L; ++i) {
      CHECK(mu.grad()(0, i) == (i == k ? 1.0 : 0.0));
      CHECK(sigma.grad()(0, i) == (i == k ? noise[i] : 0.0));
    }
  }
}

TEST_CASE("zero-weight hybrid dynamics reduce to the physics prior", "[model]") {
  PiLnmDims d;
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 1);
  const GfmState eq = gfm_equilibrium(m.approx, 1.0);
  Mat state = Mat::Zero(1, d.latent());
  state(0, 0) = eq.theta;
  state(0, 1) = eq.omega;
  state(0, 2) = eq.v_err;
  state(0, 3) = eq.v_int;
  state.rightCols(d.n_neural).setConstant(0.3);

  PilnmRef<Mat> r = bind_model(m, 1);
  const Mat dz = hybrid_field(r, state);
  // physics latents sit at the coupling-bias-driven fixed point
  for (int c = 0; c < 4; ++c) CHECK(std::abs(dz(0, c)) < 1e-12);
  // neural latents are static (zero-initialized field output)
  CHECK(dz.rightCols(d.n_neural).isZero(0));
}

TEST_CASE("hybrid dynamics match between tape and plain modes", "[model]") {
  PiLnmDims d = mini_dims();
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 5);
  Rng rng(6);
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-0.4, 0.4);
  Mat state(3, d.latent());
  for (Eigen::Index i = 0; i < state.size(); ++i) state.data()[i] = rng.uniform(-0.5, 1.0);

  PilnmRef<Mat> rp = bind_model(m, 3);
  const Mat plain = hybrid_field(rp, state);

  ad::Tape tape;
  PilnmRef<ad::Var> rt = bind_model(tape, m, 3);
  const Mat taped = hybrid_field(rt, tape.constant(state)).value();
  CHECK((plain - taped).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("hybrid dynamics gradient matches finite differences", "[model]") {
  PiLnmDims d = mini_dims();
  // O(1) physics constants: keeps the squared-norm objective small enough
  // that the finite-difference oracle is accurate to the checked tolerance
  GfmParams tame;
  tame.omega_b = 1.5;
  tame.T_p = 0.8;
  tame.T_e = 0.9;
  tame.k_iv = 1.3;
  PiLnmModel m = init_pilnm_model(d, tame, unit_mean(), unit_std(), 7);
  Rng rng(8);
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-0.3, 0.3);
  Mat state(1, d.latent());
  for (Eigen::Index i = 0; i < state.size(); ++i) state.data()[i] = rng.uniform(-0.5, 1.0);

  auto value = [&](const std::vector<double>& flat) {
    PiLnmModel mm = m;
    unflatten_weights(mm, flat);
    PilnmRef<Mat> r = bind_model(mm, 1);
    const Mat h = hybrid_field(r, state);
    return h.cwiseProduct(h).sum();
  };

  ad::Tape tape;
  PilnmRef<ad::Var> r = bind_model(tape, m, 1);
  ad::Var h = hybrid_field(r, tape.constant(state));
  tape.backward(tape.sum(tape.mul(h, h)));

  std::vector<double> flat = flatten_weights(m);
  std::size_t k = 0;
  const double fd_h = 1e-5;
  for (int wi = 0; wi < kPilnmWeightCount; ++wi) {
    const Mat g = r.w[wi].grad();
    for (Eigen::Index i = 0; i < g.size(); ++i, ++k) {
      std::vector<double> fp = flat, fm = flat;
      fp[k] += fd_h;
      fm[k] -= fd_h;
      const double fd = (value(fp) - value(fm)) / (2 * fd_h);
      INFO(pilnm_weight_name(wi) << " entry " << i);
      CHECK(testutil::rel_err(g.data()[i], fd) < 1e-4);
    }
  }
}

TEST_CASE("decode reads physics latents as identity", "[model]") {
  PiLnmDims d;
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 11);
  Mat state = Mat::Zero(1, d.latent());
  state(0, 0) = 0.1;
  state(0, 1) = 1.0;
  state(0, 2) = 0.2;
  state(0, 3) = 1.01;
  PilnmRef<Mat> r = bind_model(m, 1);
  const Mat x = decode_state(r, state);
  CHECK(x(0, 0) == 0.1);
  CHECK(x(0, 1) == 1.0);
  CHECK(x(0, 2) == 0.2);
  CHECK(x(0, 3) == 1.01);
}

TEST_CASE("zero-weight decoder head emits its bias", "[model]") {
  PiLnmDims d;
  PiLnmModel m = zero_model(d);
  m.weights[kPqB2] << 0.25, -0.5;
  PilnmRef<Mat> r = bind_model(m, 1);
  const Mat zero_state = Mat::Zero(1, d.latent());
  const Mat x = decode_state(r, zero_state);
  // unit normalization: physical = bias
  CHECK(x(0, 4) == 0.25);
  CHECK(x(0, 5) == -0.5);
}

TEST_CASE("rollout edge cases", "[model]") {
  PiLnmDims d;
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 2);
  PilnmRef<Mat> r = bind_model(m, 1);
  Mat z0 = Mat::Zero(1, d.latent());
  const GfmState eq = gfm_equilibrium(m.approx, 1.0);
  z0(0, 0) = eq.theta;
  z0(0, 1) = eq.omega;
  z0(0, 2) = eq.v_err;
  z0(0, 3) = eq.v_int;

  const auto single = rollout_states(r, z0, 0, 0.01);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == z0);

  // zero dynamics: physics equilibrium plus zero-init field stays constant
  const auto states = rollout_states(r, z0, 50, 0.01);
  CHECK((states.back() - z0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rollout is insensitive to substep refinement", "[model]") {
  PiLnmDims d = mini_dims();
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 13);
  Rng rng(14);
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-0.2, 0.2);
  m.weights[kCplB2] << 1.0, 1.0, 0.0;
  PilnmRef<Mat> r = bind_model(m, 1);
  Mat z0 = Mat::Zero(1, d.latent());
  z0(0, 1) = 1.0;
  z0(0, 3) = 1.0;
  const auto s1 = rollout_states(r, z0, 100, 0.01, 1);
  const auto s2 = rollout_states(r, z0, 100, 0.01, 2);
  CHECK((s1.back() - s2.back()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("rollout matches between tape and plain modes", "[model]") {
  PiLnmDims d = mini_dims();
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 15);
  Rng rng(16);
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-0.2, 0.2);
  m.weights[kCplB2] << 1.0, 1.0, 0.0;
  Mat z0 = Mat::Zero(1, d.latent());
  z0(0, 1) = 1.0;
  z0(0, 3) = 1.0;

  PilnmRef<Mat> rp = bind_model(m, 1);
  const auto plain = rollout_states(rp, z0, 50, 0.01);

  ad::Tape tape;
  PilnmRef<ad::Var> rt = bind_model(tape, m, 1);
  const auto taped = rollout_states(rt, tape.constant(z0), 50, 0.01);
  CHECK((plain.back() - taped.back().value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("encoder matches between tape and plain modes", "[model]") {
  PiLnmDims d = mini_dims();
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 21);
  Rng rng(22);
  Mat obs(7, 6);
  for (Eigen::Index i = 0; i < obs.size(); ++i) obs.data()[i] = rng.uniform(-1, 1);
  const Posterior plain = encode_window(m, obs, 0.01);

  ad::Tape tape;
  PilnmRef<ad::Var> rt = bind_model(tape, m, 1);
  std::vector<ad::Var> seq;
  for (Eigen::Index i = 0; i < obs.rows(); ++i)
    seq.push_back(tape.constant(normalize_row(m, obs.row(i))));
  auto [mu, sigma] = encoder_posterior(rt, seq, 0.01);
  CHECK((plain.mu.transpose() - mu.value().row(0)).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((plain.sigma.transpose() - sigma.value().row(0)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("KL closed form matches numeric quadrature", "[model]") {
  auto kl_quad = [](double mu, double sigma) {
    const int n = 40000;
    const double lo = mu - 14 * sigma - 6, hi = mu + 14 * sigma + 6;
    const double h = (hi - lo) / n;
    double s = 0;
    for (int i = 0; i <= n; ++i) {
      const double x = lo + i * h;
      const double q = std::exp(-0.5 * (x - mu) * (x - mu) / (sigma * sigma)) /
                       (sigma * std::sqrt(2 * M_PI));
      if (q < 1e-300) continue;
      const double logq = -0.5 * (x - mu) * (x - mu) / (sigma * sigma) -
                          std::log(sigma * std::sqrt(2 * M_PI));
      const double logp = -0.5 * x * x - 0.5 * std::log(2 * M_PI);
      const double w = (i == 0 || i == n) ? 0.5 : 1.0;
      s += w * q * (logq - logp) * h;
    }
    return s;
  };
  Eigen::VectorXd mu1(1), s1(1);
  mu1 << 1.0;
  s1 << 1.0;
  CHECK(std::abs(kl_standard_normal(mu1, s1) - 0.5) < 1e-15);
  mu1 << 0.0;
  CHECK(kl_standard_normal(mu1, s1) == 0.0);

  Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    const double mu = rng.uniform(-2, 2), sigma = rng.uniform(0.2, 2.5);
    Eigen::VectorXd m(1), s(1);
    m << mu;
    s << sigma;
    CHECK(std::abs(kl_standard_normal(m, s) - kl_quad(mu, sigma)) < 1e-6);
  }
}

TEST_CASE("KL is non-negative for random posteriors", "[model]") {
  Rng rng(33);
  for (int i = 0; i < 200; ++i) {
    Eigen::VectorXd mu(6), sigma(6);
    for (int k = 0; k < 6; ++k) {
      mu[k] = rng.uniform(-3, 3);
      sigma[k] = std::exp(rng.uniform(-3, 1.5));
    }
    CHECK(kl_standard_normal(mu, sigma) >= -1e-12);
  }
}

TEST_CASE("elbo graph KL term equals the closed form", "[model]") {
  PiLnmDims d = mini_dims();
  const Dataset ds = tiny_dataset();
  Eigen::RowVectorXd mean = dataset_mean(ds);
  Eigen::RowVectorXd stddev = Eigen::RowVectorXd::Ones(6);
  PiLnmModel m = init_pilnm_model(d, ds.params_true, mean, stddev, 41);
  ElboWindows wins;
  wins.traj = {0};
  wins.offset = {0};
  wins.window = 4;
  const Mat noise = Mat::Zero(1, d.latent());

  ad::Tape tape;
  PilnmRef<ad::Var> ref;
  const ElboParts parts = build_elbo_graph(tape, m, ds, wins, noise, 1, 1.0, &ref);

  const Trajectory& t = ds.trajectories[0];
  const Posterior p = encode_window(m, t.observations.topRows(5), ds.dt);
  CHECK(std::abs(parts.kl - kl_standard_normal(p.mu, p.sigma)) < 1e-9);
  CHECK(parts.kl >= -1e-12);
}

TEST_CASE("elbo with a unit posterior has zero KL", "[model]") {
  PiLnmDims d = mini_dims();
  const Dataset ds = tiny_dataset();
  PiLnmModel m = zero_model(d);
  // head bias -> mu = 0, sigma = softplus^{-1} inverse at 1
  m.weights[kHeadB].rightCols(d.latent())
      .setConstant(std::log(std::expm1(1.0)));
  ElboWindows wins;
  wins.traj = {0};
  wins.offset = {0};
  wins.window = 4;
  const ElboMetrics got = elbo(m, ds, wins, Mat::Zero(1, d.latent()));
  CHECK(std::abs(got.kl) < 1e-9);
}

TEST_CASE("perfect reconstruction leaves only the likelihood constant", "[model]") {
  PiLnmDims d;
  PiLnmModel m = init_pilnm_model(d, GfmParams{}, unit_mean(), unit_std(), 1);
  ElboParts parts;
  parts.recon_sq = 0.0;
  parts.kl = 0.0;
  parts.n_points = 5 * 6;
  parts.batch = 1;
  const ElboMetrics metrics = combine_elbo_parts(m, {parts}, 4);
  CHECK(metrics.neg_elbo == likelihood_constant(m, 4));
  CHECK(likelihood_constant(m, 4) == 5 * 6 * std::log(m.sigma_obs * std::sqrt(2 * M_PI)));
}

TEST_CASE("miniature elbo gradient matches finite differences", "[model]") {
  PiLnmDims d = mini_dims();
  const Dataset ds = tiny_dataset();
  Eigen::RowVectorXd mean = dataset_mean(ds);
  Eigen::RowVectorXd stddev = Eigen::RowVectorXd::Ones(6);
  // sigma_obs = 1: with the production 0.01 the loss magnitude (~1e5) pushes
  // central differences to their rounding floor; the gradient structure is
  // identical and the likelihood scale stays a plain multiplier
  PiLnmModel m =
      init_pilnm_model(d, perturb_params(ds.params_true, 0.2, 5), mean, stddev, 43, 1.0);
  // make every path active, including the zero-initialized output layers
  Rng rng(44);
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] += rng.uniform(-0.05, 0.05);

  ElboWindows wins;
  wins.traj = {0};
  wins.offset = {0};
  wins.window = 4;  // five observation points
  Mat noise(1, d.latent());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal();

  auto value = [&](const std::vector<double>& flat) {
    PiLnmModel mm = m;
    unflatten_weights(mm, flat);
    ad::Tape tape;
    return build_elbo_graph(tape, mm, ds, wins, noise, 1, 1.0).loss.value()(0, 0);
  };

  ad::Tape tape;
  PilnmRef<ad::Var> ref;
  const ElboParts parts = build_elbo_graph(tape, m, ds, wins, noise, 1, 1.0, &ref);
  tape.backward(parts.loss);

  std::vector<double> flat = flatten_weights(m);
  double g_scale = 0.0;
  for (int wi = 0; wi < kPilnmWeightCount; ++wi)
    g_scale = std::max(g_scale, ref.w[wi].grad().cwiseAbs().maxCoeff());
  std::size_t k = 0;
  int checked = 0;
  for (int wi = 0; wi < kPilnmWeightCount; ++wi) {
    const Mat g = ref.w[wi].grad();
    for (Eigen::Index i = 0; i < g.size(); ++i, ++k) {
      std::vector<double> fp = flat, fm = flat;
      fp[k] += 1e-5;
      fm[k] -= 1e-5;
      const double fd = (value(fp) - value(fm)) / 2e-5;
      ++checked;
      INFO(pilnm_weight_name(wi) << " entry " << i << " ad " << g.data()[i] << " fd " << fd);
      CHECK(testutil::grad_close(g.data()[i], fd, g_scale, 1e-3));
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("elbo metrics are finite and decomposable", "[model]") {
  PiLnmDims d = mini_dims();
  const Dataset ds = tiny_dataset(0.1, 3);
  Eigen::RowVectorXd mean = dataset_mean(ds);
  Eigen::RowVectorXd stddev = Eigen::RowVectorXd::Ones(6);
  const PiLnmModel m = init_pilnm_model(d, ds.params_true, mean, stddev, 51);
  ElboWindows wins;
  wins.traj = {0, 1, 2};
  wins.offset = {0, 2, 4};
  wins.window = 5;
  Rng rng(52);
  Mat noise(3, d.latent());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal();
  const ElboMetrics metrics = elbo(m, ds, wins, noise);
  CHECK(std::isfinite(metrics.neg_elbo));
  CHECK(metrics.recon_mse >= 0.0);
  CHECK(metrics.kl >= -1e-12);
}
