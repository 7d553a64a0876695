#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace testutil {

/// Relative error with a floor so that near-zero pairs compare cleanly.
inline double rel_err(double got, double want) {
  const double denom = std::max({1e-6, std::abs(got), std::abs(want)});
  return std::abs(got - want) / denom;
}

/// Gradient-check comparison with both a relative tolerance and an absolute
/// floor tied to the largest gradient in the problem: entries far below the
/// dominant scale sit at the finite-difference rounding floor and are
/// certified absolutely instead.
inline bool grad_close(double got, double want, double grad_scale, double rtol) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-3 * grad_scale, 1e-12});
  return std::abs(got - want) <= rtol * denom;
}

/// Central finite difference of a scalar function of a flat parameter vector.
inline Eigen::VectorXd central_diff(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Byte-compares two directory trees (same file names, same contents).
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  std::vector<std::string> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a).string());
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b).string());
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& rel : fa)
    if (slurp(a / rel) != slurp(b / rel)) return false;
  return true;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pilnm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
