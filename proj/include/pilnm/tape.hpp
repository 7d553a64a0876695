#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pilnm::ad {

using Mat = Eigen::MatrixXd;

/// Raised when a computation produces non-finite values.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Elementwise kernels shared by the tape and by the plain-matrix forward
// paths, so that both evaluation modes produce identical doubles.
inline Mat tanh_kernel(const Mat& x) {
  // tanh via the vectorized exp; libm tanh on doubles is scalar and ~10x
  // slower. exp overflow saturates cleanly to +-1.
  return (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix();
}

inline Mat sigmoid_kernel(const Mat& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

inline Mat softplus_kernel(const Mat& x) {
  Mat y(x.rows(), x.cols());
  const double* in = x.data();
  double* out = y.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double v = in[i];
    out[i] = v > 30.0 ? v : std::log1p(std::exp(v));
  }
  return y;
}

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,      // elementwise
  kMatMul,
  kAffine,      // x*W + row-broadcast bias
  kAffineTanh,  // tanh(x*W + b), fused
  kTanh,
  kExp,
  kLog,
  kSoftplus,
  kScale,      // a * s
  kAddScalar,  // a + s
  kSum,        // total sum -> 1x1
  kSliceCols,
  kConcatCols,
};

struct Node {
  Op op = Op::kLeaf;
  int a = -1, b = -1, c = -1;
  int i0 = 0, i1 = 0;  // column slice offset / count
  double s = 0.0;
  bool requires_grad = false;
  bool has_grad = false;
  Mat value;
  Mat grad;
};

class Tape;

/// Handle to a tape node: a value plus its gradient after backward().
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  /// Gradient of the last backward() output w.r.t. this node. Zero matrix
  /// if the node was not reached.
  Mat grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Computation graph arena for reverse-mode differentiation. Nodes are
/// appended in evaluation order, which is already a topological order, so
/// backward() is a single reverse sweep. Single-threaded per instance.
class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  std::size_t size() const { return nodes_.size(); }

  void reset() { nodes_.clear(); }

  Var leaf(Mat v, bool requires_grad) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = requires_grad;
    n.value = std::move(v);
    return wrap(push(std::move(n)));
  }

  Var constant(Mat v) { return leaf(std::move(v), false); }
  Var param(Mat v) { return leaf(std::move(v), true); }
  Var constant(double v) { return constant(Mat::Constant(1, 1, v)); }

  Var add(Var x, Var y) {
    check_same_shape("add", x, y);
    return binary(Op::kAdd, x, y, val(x) + val(y));
  }

  Var sub(Var x, Var y) {
    check_same_shape("sub", x, y);
    return binary(Op::kSub, x, y, val(x) - val(y));
  }

  Var mul(Var x, Var y) {
    check_same_shape("mul", x, y);
    return binary(Op::kMul, x, y, val(x).cwiseProduct(val(y)));
  }

  Var matmul(Var x, Var y) {
    if (val(x).cols() != val(y).rows())
      throw std::invalid_argument("matmul: inner dimensions disagree");
    return binary(Op::kMatMul, x, y, val(x) * val(y));
  }

  /// x*W + bias with bias a 1xN row broadcast over rows of x*W.
  Var affine(Var x, Var w, Var bias) {
    check_affine(x, w, bias);
    Mat v = val(x) * val(w);
    v.rowwise() += val(bias).row(0);
    Node n;
    n.op = Op::kAffine;
    n.a = x.id();
    n.b = w.id();
    n.c = bias.id();
    n.requires_grad = req(x) || req(w) || req(bias);
    n.value = std::move(v);
    return wrap(push(std::move(n)));
  }

  Var affine_tanh(Var x, Var w, Var bias) {
    check_affine(x, w, bias);
    Mat v = val(x) * val(w);
    v.rowwise() += val(bias).row(0);
    Node n;
    n.op = Op::kAffineTanh;
    n.a = x.id();
    n.b = w.id();
    n.c = bias.id();
    n.requires_grad = req(x) || req(w) || req(bias);
    n.value = tanh_kernel(v);
    return wrap(push(std::move(n)));
  }

  Var tanh(Var x) { return unary(Op::kTanh, x, tanh_kernel(val(x))); }
  Var exp(Var x) { return unary(Op::kExp, x, val(x).array().exp().matrix()); }
  Var log(Var x) { return unary(Op::kLog, x, val(x).array().log().matrix()); }
  Var softplus(Var x) { return unary(Op::kSoftplus, x, softplus_kernel(val(x))); }

  Var scale(Var x, double s) {
    Node n;
    n.op = Op::kScale;
    n.a = x.id();
    n.s = s;
    n.requires_grad = req(x);
    n.value = s * val(x);
    return wrap(push(std::move(n)));
  }

  Var add_scalar(Var x, double s) {
    Node n;
    n.op = Op::kAddScalar;
    n.a = x.id();
    n.s = s;
    n.requires_grad = req(x);
    n.value = (val(x).array() + s).matrix();
    return wrap(push(std::move(n)));
  }

  Var sum(Var x) { return unary(Op::kSum, x, Mat::Constant(1, 1, val(x).sum())); }

  Var slice_cols(Var x, int c0, int ncols) {
    if (c0 < 0 || ncols < 1 || c0 + ncols > val(x).cols())
      throw std::invalid_argument("slice_cols: range out of bounds");
    Node n;
    n.op = Op::kSliceCols;
    n.a = x.id();
    n.i0 = c0;
    n.i1 = ncols;
    n.requires_grad = req(x);
    n.value = val(x).middleCols(c0, ncols);
    return wrap(push(std::move(n)));
  }

  Var concat_cols(Var x, Var y) {
    if (val(x).rows() != val(y).rows())
      throw std::invalid_argument("concat_cols: row counts disagree");
    Mat v(val(x).rows(), val(x).cols() + val(y).cols());
    v << val(x), val(y);
    return binary(Op::kConcatCols, x, y, std::move(v));
  }

  /// Reverse sweep from a scalar output. Leaf gradients accumulate across
  /// calls; intermediate gradients are reset per call so repeated sweeps of
  /// the same output are well defined.
  void backward(Var out) {
    if (out.tape() != this) throw std::invalid_argument("backward: foreign Var");
    const Node& o = node(out.id());
    if (o.value.rows() != 1 || o.value.cols() != 1)
      throw std::invalid_argument("backward: output must be a 1x1 scalar");
    if (!o.requires_grad) return;  // nothing trainable upstream
    for (int id = 0; id <= out.id(); ++id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.op != Op::kLeaf) n.has_grad = false;
    }
    grad_ref(out.id())(0, 0) += 1.0;
    for (int id = out.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.has_grad) continue;
      pull(n);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
  }

  const Mat& value(int id) const { return node(id).value; }

  Mat grad_of(int id) const {
    const Node& n = node(id);
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

 private:
  friend class Var;

  std::vector<Node> nodes_;

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Var wrap(int id) { return Var(this, id); }

  const Node& node(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("tape: node id out of range");
    return nodes_[static_cast<std::size_t>(id)];
  }

  const Mat& val(Var v) const {
    if (v.tape() != this) throw std::invalid_argument("tape: foreign Var");
    return node(v.id()).value;
  }

  bool req(Var v) const { return node(v.id()).requires_grad; }

  Var unary(Op op, Var x, Mat v) {
    Node n;
    n.op = op;
    n.a = x.id();
    n.requires_grad = req(x);
    n.value = std::move(v);
    return wrap(push(std::move(n)));
  }

  Var binary(Op op, Var x, Var y, Mat v) {
    if (y.tape() != this || x.tape() != this)
      throw std::invalid_argument("tape: foreign Var");
    Node n;
    n.op = op;
    n.a = x.id();
    n.b = y.id();
    n.requires_grad = req(x) || req(y);
    n.value = std::move(v);
    return wrap(push(std::move(n)));
  }

  void check_same_shape(const char* what, Var x, Var y) const {
    if (val(x).rows() != val(y).rows() || val(x).cols() != val(y).cols())
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  void check_affine(Var x, Var w, Var bias) const {
    if (val(x).cols() != val(w).rows())
      throw std::invalid_argument("affine: inner dimensions disagree");
    if (val(bias).rows() != 1 || val(bias).cols() != val(w).cols())
      throw std::invalid_argument("affine: bias must be 1 x out_dim");
  }

  Mat& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void add_grad(int id, const Mat& g) {
    if (id < 0) return;
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    grad_ref(id) += g;
  }

  void pull(Node& n) {
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        add_grad(n.a, g);
        add_grad(n.b, g);
        break;
      case Op::kSub:
        add_grad(n.a, g);
        add_grad(n.b, -g);
        break;
      case Op::kMul:
        add_grad(n.a, g.cwiseProduct(nodes_[n.b].value));
        add_grad(n.b, g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::kMatMul:
        add_grad(n.a, g * nodes_[n.b].value.transpose());
        add_grad(n.b, nodes_[n.a].value.transpose() * g);
        break;
      case Op::kAffine: {
        add_grad(n.a, g * nodes_[n.b].value.transpose());
        add_grad(n.b, nodes_[n.a].value.transpose() * g);
        if (nodes_[n.c].requires_grad) grad_ref(n.c) += g.colwise().sum();
        break;
      }
      case Op::kAffineTanh: {
        Mat t = g.cwiseProduct((1.0 - n.value.array().square()).matrix());
        add_grad(n.a, t * nodes_[n.b].value.transpose());
        add_grad(n.b, nodes_[n.a].value.transpose() * t);
        if (nodes_[n.c].requires_grad) grad_ref(n.c) += t.colwise().sum();
        break;
      }
      case Op::kTanh:
        add_grad(n.a, g.cwiseProduct((1.0 - n.value.array().square()).matrix()));
        break;
      case Op::kExp:
        add_grad(n.a, g.cwiseProduct(n.value));
        break;
      case Op::kLog:
        add_grad(n.a, g.cwiseQuotient(nodes_[n.a].value));
        break;
      case Op::kSoftplus:
        add_grad(n.a, g.cwiseProduct(sigmoid_kernel(nodes_[n.a].value)));
        break;
      case Op::kScale:
        add_grad(n.a, n.s * g);
        break;
      case Op::kAddScalar:
        add_grad(n.a, g);
        break;
      case Op::kSum:
        if (nodes_[n.a].requires_grad)
          grad_ref(n.a).array() += g(0, 0);
        break;
      case Op::kSliceCols:
        if (nodes_[n.a].requires_grad)
          grad_ref(n.a).middleCols(n.i0, n.i1) += g;
        break;
      case Op::kConcatCols: {
        const Eigen::Index ca = nodes_[n.a].value.cols();
        const Eigen::Index cb = nodes_[n.b].value.cols();
        add_grad(n.a, g.leftCols(ca));
        add_grad(n.b, g.rightCols(cb));
        break;
      }
    }
  }
};

inline const Mat& Var::value() const { return tape_->value(id_); }
inline Mat Var::grad() const { return tape_->grad_of(id_); }

// Arithmetic sugar so that generic numeric code (e.g. the RK4 stepper and
// the droop equations) can be written once for doubles, matrices and Vars.
inline Var operator+(Var x, Var y) { return x.tape()->add(x, y); }
inline Var operator-(Var x, Var y) { return x.tape()->sub(x, y); }
inline Var operator*(Var x, double s) { return x.tape()->scale(x, s); }
inline Var operator*(double s, Var x) { return x.tape()->scale(x, s); }
inline Var operator+(Var x, double s) { return x.tape()->add_scalar(x, s); }
inline Var operator+(double s, Var x) { return x.tape()->add_scalar(x, s); }
inline Var operator-(Var x, double s) { return x.tape()->add_scalar(x, -s); }
inline Var operator-(double s, Var x) {
  return x.tape()->add_scalar(x.tape()->scale(x, -1.0), s);
}
inline Var operator-(Var x) { return x.tape()->scale(x, -1.0); }

inline bool all_finite(double v) { return std::isfinite(v); }
inline bool all_finite(const Mat& m) { return m.allFinite(); }
inline bool all_finite(const Var& v) { return v.value().allFinite(); }

}  // namespace pilnm::ad
