#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace pilnm {

/// Bias-corrected Adam. Moment buffers are sized on the first update.
struct AdamState {
  double lr = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
};

inline void adam_update(std::vector<Eigen::MatrixXd>& params,
                        const std::vector<Eigen::MatrixXd>& grads, AdamState& opt) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_update: parameter/gradient count mismatch");
  if (!(opt.lr > 0.0)) throw std::invalid_argument("adam_update: lr must be positive");
  if (opt.m.empty()) {
    opt.m.resize(params.size());
    opt.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.m[i] = Eigen::MatrixXd::Zero(params[i].rows(), params[i].cols());
      opt.v[i] = opt.m[i];
    }
  }
  opt.step += 1;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols())
      throw std::invalid_argument("adam_update: gradient shape mismatch at index " +
                                  std::to_string(i));
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
    opt.v[i] = opt.beta2 * opt.v[i].array().matrix() +
               (1.0 - opt.beta2) * grads[i].cwiseProduct(grads[i]);
    params[i].array() -= opt.lr * (opt.m[i].array() / c1) /
                         ((opt.v[i].array() / c2).sqrt() + opt.eps);
  }
}

}  // namespace pilnm
