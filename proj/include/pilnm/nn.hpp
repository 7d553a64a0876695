#pragma once

#include <Eigen/Dense>

#include "pilnm/tape.hpp"

// Small layer vocabulary written once for two value types: ad::Var (tape
// nodes, used in training graphs) and Eigen::MatrixXd (plain forward, used
// at inference). The Mat overloads replay the exact arithmetic of the tape
// kernels so both modes produce identical doubles.
namespace pilnm::nn {

using Mat = Eigen::MatrixXd;
using ad::Var;

// ---- tape mode ----
inline Var affine(Var x, Var w, Var b) { return x.tape()->affine(x, w, b); }
inline Var affine_tanh(Var x, Var w, Var b) { return x.tape()->affine_tanh(x, w, b); }
inline Var matmul(Var a, Var b) { return a.tape()->matmul(a, b); }
inline Var add(Var a, Var b) { return a.tape()->add(a, b); }
inline Var sub(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var mul(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var scale(Var a, double s) { return a.tape()->scale(a, s); }
inline Var vtanh(Var x) { return x.tape()->tanh(x); }
inline Var softplus(Var x) { return x.tape()->softplus(x); }
inline Var slice_cols(Var x, int c0, int n) { return x.tape()->slice_cols(x, c0, n); }
inline Var concat_cols(Var a, Var b) { return a.tape()->concat_cols(a, b); }
inline Var sum(Var x) { return x.tape()->sum(x); }

/// sigmoid(x) = 0.5 + 0.5 tanh(x/2), composed from the fixed primitive set.
inline Var vsigmoid(Var x) {
  ad::Tape& t = *x.tape();
  return t.add_scalar(t.scale(t.tanh(t.scale(x, 0.5)), 0.5), 0.5);
}

inline Var one_minus(Var x) {
  ad::Tape& t = *x.tape();
  return t.add_scalar(t.scale(x, -1.0), 1.0);
}

// ---- plain mode ----
inline Mat affine(const Mat& x, const Mat& w, const Mat& b) {
  Mat r = x * w;
  r.rowwise() += b.row(0);
  return r;
}
inline Mat affine_tanh(const Mat& x, const Mat& w, const Mat& b) {
  return ad::tanh_kernel(affine(x, w, b));
}
inline Mat matmul(const Mat& a, const Mat& b) { return a * b; }
inline Mat add(const Mat& a, const Mat& b) { return a + b; }
inline Mat sub(const Mat& a, const Mat& b) { return a - b; }
inline Mat mul(const Mat& a, const Mat& b) { return a.cwiseProduct(b); }
inline Mat scale(const Mat& a, double s) { return s * a; }
inline Mat vtanh(const Mat& x) { return ad::tanh_kernel(x); }
inline Mat softplus(const Mat& x) { return ad::softplus_kernel(x); }
inline Mat slice_cols(const Mat& x, int c0, int n) { return x.middleCols(c0, n); }
inline Mat concat_cols(const Mat& a, const Mat& b) {
  Mat r(a.rows(), a.cols() + b.cols());
  r << a, b;
  return r;
}
inline Mat sum(const Mat& x) { return Mat::Constant(1, 1, x.sum()); }
inline Mat vsigmoid(const Mat& x) {
  return ((0.5 * ad::tanh_kernel(0.5 * x)).array() + 0.5).matrix();
}
inline Mat one_minus(const Mat& x) { return ((-1.0 * x).array() + 1.0).matrix(); }

// ---- gated recurrent cell ----
template <class V>
struct GruWeights {
  V wxr, whr, br, wxu, whu, bu, wxc, whc, bc;
};

template <class V>
V gru_cell(const GruWeights<V>& g, const V& h, const V& x) {
  V r = vsigmoid(add(affine(x, g.wxr, g.br), matmul(h, g.whr)));
  V u = vsigmoid(add(affine(x, g.wxu, g.bu), matmul(h, g.whu)));
  V c = vtanh(add(affine(x, g.wxc, g.bc), matmul(mul(r, h), g.whc)));
  return add(mul(u, h), mul(one_minus(u), c));
}

}  // namespace pilnm::nn
