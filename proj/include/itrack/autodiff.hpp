#pragma once

// Small reverse-mode gradient tape over row-major matrices. Rows are batch
// entries throughout. Only the operations the tracking networks need are
// provided.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace itrack::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, int rows, int cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

using ParamList = std::vector<Parameter*>;

void zero_grads(const ParamList& params);
bool all_finite(const ParamList& params);

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the gradient of the node's output and the node's own id.
  using BackwardFn =
      std::function<void(Tape&, const Matrix& grad_out, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Leaf bound to a parameter; backward() accumulates into Parameter::grad.
  Var param(Parameter& p);

  Var push(Matrix value, const std::vector<Var>& inputs, BackwardFn fn);

  // `loss` must be 1x1. Throws GradientError on a non-finite loss or
  // gradient.
  void backward(const Var& loss);

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  // Adds into the input's gradient buffer if it participates in backward.
  void accumulate(const Var& v, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Var& v, const Expr& g) {
    if (!requires_grad(v.id())) return;
    Node& n = nodes_[v.id()];
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  // Adds g into the sub-block of v's gradient starting at (row, col).
  template <typename Expr>
  void accumulate_block(const Var& v, Eigen::Index row, Eigen::Index col, const Expr& g) {
    if (!requires_grad(v.id())) return;
    Node& n = nodes_[v.id()];
    ensure_grad(n);
    n.grad.block(row, col, g.rows(), g.cols()) += g;
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  void ensure_grad(Node& n);

  std::vector<Node> nodes_;
};

// ---- operations ----

Var matmul(const Var& a, const Var& b);
Var add_bias(const Var& x, const Var& bias);  // bias is 1 x cols
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var mul_const(const Var& a, const Matrix& c);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var minimum(const Var& a, const Var& b);

Var sum(const Var& a);              // 1x1
Var mean(const Var& a);             // 1x1
Var row_sum(const Var& a);          // rows x 1
Var weighted_sum(const Var& a, const Matrix& w);  // 1x1, sum(a .* w)
Var logsumexp_rows(const Var& a);   // rows x 1

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n);
// Stacks `times` copies of `a` vertically.
Var tile_rows(const Var& a, int times);
// (times*B) x 1 stacked blocks -> B x times, column k = block k.
Var blocks_to_cols(const Var& a, int times);

Var detach(const Var& a);

// relu(tile_rows(base, tiles) + x * w + bias) in one pass. base: N x C,
// x: (tiles*N) x D, w: D x C, bias: 1 x C.
Var tiled_affine_relu(const Var& base, const Var& x, const Var& w, const Var& bias, int tiles);

struct ConvShape {
  int in_h = 0, in_w = 0, in_c = 0;
  int kernel = 0, stride = 1, out_c = 0;
  int out_h() const { return (in_h - kernel) / stride + 1; }
  int out_w() const { return (in_w - kernel) / stride + 1; }
  int in_size() const { return in_h * in_w * in_c; }
  int out_size() const { return out_h() * out_w() * out_c; }
  int patch() const { return kernel * kernel * in_c; }
};

// Valid convolution over HWC-flattened rows. weight: patch x out_c,
// bias: 1 x out_c. Output rows are HWC-flattened too.
Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvShape& shape);

// ---- optimization ----

struct AdamConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg);
  void step();
  void zero_grad() { zero_grads(params_); }
  const ParamList& params() const { return params_; }
  long steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace itrack::ad
