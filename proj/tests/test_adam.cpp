#include <catch2/catch_amalgamated.hpp>

#include "pilnm/adam.hpp"

using namespace pilnm;
using Eigen::MatrixXd;

TEST_CASE("zero gradients leave parameters unchanged", "[adam]") {
  std::vector<MatrixXd> params{MatrixXd::Constant(2, 2, 1.5)};
  std::vector<MatrixXd> grads{MatrixXd::Zero(2, 2)};
  AdamState opt;
  adam_update(params, grads, opt);
  adam_update(params, grads, opt);
  CHECK(params[0] == MatrixXd::Constant(2, 2, 1.5));
}

TEST_CASE("first step magnitude equals lr*g/(sqrt(g^2)+eps)", "[adam]") {
  std::vector<MatrixXd> params{MatrixXd::Zero(1, 1)};
  std::vector<MatrixXd> grads{MatrixXd::Ones(1, 1)};
  AdamState opt;
  opt.lr = 0.02;
  adam_update(params, grads, opt);
  const double expected = -0.02 * 1.0 / (1.0 + opt.eps);
  CHECK(std::abs(params[0](0, 0) - expected) < 1e-15);
}

TEST_CASE("adam is deterministic", "[adam]") {
  auto run = []() {
    std::vector<MatrixXd> params{MatrixXd::Constant(3, 2, 0.7)};
    AdamState opt;
    for (int i = 0; i < 25; ++i) {
      std::vector<MatrixXd> grads{
          MatrixXd::Constant(3, 2, std::sin(i * 0.3))};
      adam_update(params, grads, opt);
    }
    return params[0];
  };
  const MatrixXd a = run(), b = run();
  CHECK(a == b);
}

TEST_CASE("shape mismatch is a contract violation", "[adam]") {
  std::vector<MatrixXd> params{MatrixXd::Zero(2, 2)};
  std::vector<MatrixXd> grads{MatrixXd::Zero(2, 3)};
  AdamState opt;
  CHECK_THROWS_AS(adam_update(params, grads, opt), std::invalid_argument);
  std::vector<MatrixXd> none;
  CHECK_THROWS_AS(adam_update(params, none, opt), std::invalid_argument);
}

TEST_CASE("constant gradient walks at a steady rate", "[adam]") {
  std::vector<MatrixXd> params{MatrixXd::Zero(1, 1)};
  std::vector<MatrixXd> grads{MatrixXd::Ones(1, 1)};
  AdamState opt;
  opt.lr = 0.01;
  for (int i = 0; i < 100; ++i) adam_update(params, grads, opt);
  // with a constant gradient the bias-corrected step is ~lr every iteration
  CHECK(params[0](0, 0) < -0.9);
  CHECK(params[0](0, 0) > -1.1);
}
