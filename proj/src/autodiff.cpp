#include "itrack/autodiff.hpp"

#include <cmath>

namespace itrack::ad {

void zero_grads(const ParamList& params) {
  for (Parameter* p : params) p->zero_grad();
}

bool all_finite(const ParamList& params) {
  for (const Parameter* p : params) {
    if (!p->value.allFinite() || !p->grad.allFinite()) return false;
  }
  return true;
}

const Matrix& Var::value() const {
  if (!tape_) throw GradientError("use of an unbound variable");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("Var::scalar on a non-scalar");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Matrix value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape() != this) throw GradientError("variables from different tapes");
    if (nodes_[in.id()].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::ensure_grad(Node& n) {
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
}

void Tape::accumulate(const Var& v, const Matrix& g) { accumulate_expr(v, g); }

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw GradientError("loss belongs to another tape");
  Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) throw GradientError("backward needs a scalar loss");
  if (!std::isfinite(root.value(0, 0))) {
    throw GradientError("non-finite loss in backward");
  }
  if (!root.requires_grad) return;
  ensure_grad(root);
  root.grad(0, 0) += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad) continue;
    Matrix g = std::move(n.grad);
    n.has_grad = false;
    if (n.param) {
      if (!g.allFinite()) {
        throw GradientError("non-finite gradient for parameter " + n.param->name);
      }
      n.param->grad += g;
    } else if (n.backward) {
      n.backward(*this, g, id);
    }
  }
}

// ---- operations ----

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw GradientError("unbound variable");
  return *a.tape();
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

// Elementwise op whose derivative is expressed through input x and output y.
template <typename F, typename D>
Var unary(const Var& a, F f, D deriv) {
  Tape& t = tape_of(a);
  Matrix y = a.value().unaryExpr(f);
  return t.push(std::move(y), {a}, [a, deriv](Tape& tp, const Matrix& g, int self) {
    const Matrix& x = a.value();
    const Matrix& yv = tp.value(self);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      d.data()[i] = g.data()[i] * deriv(x.data()[i], yv.data()[i]);
    }
    tp.accumulate(a, d);
  });
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dims differ");
  Matrix y = a.value() * b.value();
  return t.push(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g, int) {
    if (tp.requires_grad(a.id())) tp.accumulate_expr(a, g * b.value().transpose());
    if (tp.requires_grad(b.id())) tp.accumulate_expr(b, a.value().transpose() * g);
  });
}

Var add_bias(const Var& x, const Var& bias) {
  Tape& t = tape_of(x);
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw std::invalid_argument("add_bias: bias must be 1 x cols");
  }
  Matrix y = x.value().rowwise() + bias.value().row(0);
  return t.push(std::move(y), {x, bias}, [x, bias](Tape& tp, const Matrix& g, int) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias.id())) tp.accumulate_expr(bias, g.colwise().sum());
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Matrix y = a.value() + b.value();
  return tape_of(a).push(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g, int) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Matrix y = a.value() - b.value();
  return tape_of(a).push(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g, int) {
    tp.accumulate(a, g);
    tp.accumulate_expr(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Matrix y = a.value().cwiseProduct(b.value());
  return tape_of(a).push(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g, int) {
    if (tp.requires_grad(a.id())) tp.accumulate_expr(a, g.cwiseProduct(b.value()));
    if (tp.requires_grad(b.id())) tp.accumulate_expr(b, g.cwiseProduct(a.value()));
  });
}

Var mul_const(const Var& a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw std::invalid_argument("mul_const: shape mismatch");
  }
  Matrix y = a.value().cwiseProduct(c);
  return tape_of(a).push(std::move(y), {a}, [a, c](Tape& tp, const Matrix& g, int) {
    tp.accumulate_expr(a, g.cwiseProduct(c));
  });
}

Var scale(const Var& a, double s) {
  Matrix y = a.value() * s;
  return tape_of(a).push(std::move(y), {a}, [a, s](Tape& tp, const Matrix& g, int) {
    tp.accumulate_expr(a, g * s);
  });
}

Var add_scalar(const Var& a, double s) {
  Matrix y = a.value().array() + s;
  return tape_of(a).push(std::move(y), {a}, [a](Tape& tp, const Matrix& g, int) {
    tp.accumulate(a, g);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, logistic, [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
  return unary(a, stable_softplus, [](double x, double) { return logistic(x); });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var minimum(const Var& a, const Var& b) {
  check_same_shape(a, b, "minimum");
  Matrix y = a.value().cwiseMin(b.value());
  return tape_of(a).push(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g, int) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    Matrix ga = Matrix::Zero(g.rows(), g.cols());
    Matrix gb = Matrix::Zero(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if (av.data()[i] <= bv.data()[i]) {
        ga.data()[i] = g.data()[i];
      } else {
        gb.data()[i] = g.data()[i];
      }
    }
    tp.accumulate(a, ga);
    tp.accumulate(b, gb);
  });
}

Var sum(const Var& a) {
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  return tape_of(a).push(std::move(y), {a}, [a](Tape& tp, const Matrix& g, int) {
    tp.accumulate_expr(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Matrix y = a.value().rowwise().sum();
  return tape_of(a).push(std::move(y), {a}, [a](Tape& tp, const Matrix& g, int) {
    tp.accumulate_expr(a, g.col(0).replicate(1, a.cols()));
  });
}

Var weighted_sum(const Var& a, const Matrix& w) {
  if (a.rows() != w.rows() || a.cols() != w.cols()) {
    throw std::invalid_argument("weighted_sum: shape mismatch");
  }
  Matrix y(1, 1);
  y(0, 0) = a.value().cwiseProduct(w).sum();
  return tape_of(a).push(std::move(y), {a}, [a, w](Tape& tp, const Matrix& g, int) {
    tp.accumulate_expr(a, w * g(0, 0));
  });
}

Var logsumexp_rows(const Var& a) {
  const Matrix& x = a.value();
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Matrix y(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    y(r, 0) = mx(r) + std::log((x.row(r).array() - mx(r)).exp().sum());
  }
  return tape_of(a).push(std::move(y), {a}, [a](Tape& tp, const Matrix& g, int self) {
    const Matrix& xv = a.value();
    const Matrix& yv = tp.value(self);
    Matrix d(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      d.row(r) = (xv.row(r).array() - yv(r, 0)).exp() * g(r, 0);
    }
    tp.accumulate(a, d);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return tape_of(parts[0]).push(std::move(y), parts,
                                [parts](Tape& tp, const Matrix& g, int) {
                                  Eigen::Index o = 0;
                                  for (const Var& p : parts) {
                                    if (tp.requires_grad(p.id())) {
                                      tp.accumulate_expr(p, g.middleCols(o, p.cols()));
                                    }
                                    o += p.cols();
                                  }
                                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    y.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return tape_of(parts[0]).push(std::move(y), parts,
                                [parts](Tape& tp, const Matrix& g, int) {
                                  Eigen::Index o = 0;
                                  for (const Var& p : parts) {
                                    if (tp.requires_grad(p.id())) {
                                      tp.accumulate_expr(p, g.middleRows(o, p.rows()));
                                    }
                                    o += p.rows();
                                  }
                                });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) {
    throw std::invalid_argument("slice_cols: out of range");
  }
  Matrix y = a.value().middleCols(start, n);
  return tape_of(a).push(std::move(y), {a}, [a, start](Tape& tp, const Matrix& g, int) {
    tp.accumulate_block(a, 0, start, g);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) {
    throw std::invalid_argument("slice_rows: out of range");
  }
  Matrix y = a.value().middleRows(start, n);
  return tape_of(a).push(std::move(y), {a}, [a, start](Tape& tp, const Matrix& g, int) {
    tp.accumulate_block(a, start, 0, g);
  });
}

Var tile_rows(const Var& a, int times) {
  if (times < 1) throw std::invalid_argument("tile_rows: times must be >= 1");
  Matrix y = a.value().replicate(times, 1);
  return tape_of(a).push(std::move(y), {a}, [a, times](Tape& tp, const Matrix& g, int) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (int k = 0; k < times; ++k) d += g.middleRows(k * a.rows(), a.rows());
    tp.accumulate(a, d);
  });
}

Var blocks_to_cols(const Var& a, int times) {
  if (a.cols() != 1 || times < 1 || a.rows() % times != 0) {
    throw std::invalid_argument("blocks_to_cols: expects (times*B) x 1");
  }
  const Eigen::Index b = a.rows() / times;
  Matrix y(b, times);
  for (int k = 0; k < times; ++k) y.col(k) = a.value().middleRows(k * b, b).col(0);
  return tape_of(a).push(std::move(y), {a}, [a, times, b](Tape& tp, const Matrix& g, int) {
    Matrix d(a.rows(), 1);
    for (int k = 0; k < times; ++k) d.middleRows(k * b, b) = g.col(k);
    tp.accumulate(a, d);
  });
}

Var detach(const Var& a) { return tape_of(a).constant(a.value()); }

Var tiled_affine_relu(const Var& base, const Var& x, const Var& w, const Var& bias, int tiles) {
  const Eigen::Index N = base.rows(), C = base.cols(), D = x.cols();
  if (tiles < 1 || x.rows() != N * tiles || w.rows() != D || w.cols() != C ||
      bias.rows() != 1 || bias.cols() != C) {
    throw std::invalid_argument("tiled_affine_relu: shape mismatch");
  }
  Matrix y = x.value() * w.value();
  const Matrix& bv = base.value();
  const double* bb = bias.value().data();
  for (int k = 0; k < tiles; ++k) {
    for (Eigen::Index r = 0; r < N; ++r) {
      double* yr = y.row(k * N + r).data();
      const double* br = bv.row(r).data();
      for (Eigen::Index c = 0; c < C; ++c) {
        const double v = yr[c] + br[c] + bb[c];
        yr[c] = v > 0.0 ? v : 0.0;
      }
    }
  }
  return tape_of(base).push(
      std::move(y), {base, x, w, bias},
      [base, x, w, bias, tiles](Tape& tp, const Matrix& g, int self) {
        const Matrix& yv = tp.value(self);
        Matrix gm = g;
        for (Eigen::Index i = 0; i < gm.size(); ++i) {
          if (!(yv.data()[i] > 0.0)) gm.data()[i] = 0.0;
        }
        const Eigen::Index N = base.rows();
        if (tp.requires_grad(base.id())) {
          Matrix gb = gm.topRows(N);
          for (int k = 1; k < tiles; ++k) gb += gm.middleRows(k * N, N);
          tp.accumulate(base, gb);
        }
        if (tp.requires_grad(x.id())) tp.accumulate_expr(x, gm * w.value().transpose());
        if (tp.requires_grad(w.id())) tp.accumulate_expr(w, x.value().transpose() * gm);
        if (tp.requires_grad(bias.id())) tp.accumulate_expr(bias, gm.colwise().sum());
      });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvShape& s) {
  Tape& t = tape_of(x);
  if (x.cols() != s.in_size() || weight.rows() != s.patch() ||
      weight.cols() != s.out_c || bias.rows() != 1 || bias.cols() != s.out_c) {
    throw std::invalid_argument("conv2d: shape mismatch");
  }
  const Eigen::Index batch = x.rows();
  const int oh = s.out_h(), ow = s.out_w(), patch = s.patch();
  const int positions = oh * ow;

  // im2col: one row per (sample, output position), HWC patch order.
  Matrix cols(batch * positions, patch);
  const Matrix& xv = x.value();
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double* dst = cols.row(b * positions + oy * ow + ox).data();
        int k = 0;
        for (int ky = 0; ky < s.kernel; ++ky) {
          const int iy = oy * s.stride + ky;
          const double* src = xv.row(b).data() + (iy * s.in_w + ox * s.stride) * s.in_c;
          for (int j = 0; j < s.kernel * s.in_c; ++j) dst[k++] = src[j];
        }
      }
    }
  }
  Matrix out = cols * weight.value();
  out.rowwise() += bias.value().row(0);
  // (batch*positions) x out_c row-major is exactly batch x (positions*out_c).
  Matrix y = Eigen::Map<Matrix>(out.data(), batch, static_cast<Eigen::Index>(positions) * s.out_c);

  return t.push(std::move(y), {x, weight, bias},
                [x, weight, bias, s, cols = std::move(cols)](Tape& tp, const Matrix& g, int) {
                  const Eigen::Index bsz = x.rows();
                  const int positions = s.out_h() * s.out_w();
                  Eigen::Map<const Matrix> gm(g.data(), bsz * positions, s.out_c);
                  if (tp.requires_grad(weight.id())) {
                    tp.accumulate_expr(weight, cols.transpose() * gm);
                  }
                  if (tp.requires_grad(bias.id())) {
                    tp.accumulate_expr(bias, gm.colwise().sum());
                  }
                  if (tp.requires_grad(x.id())) {
                    Matrix dcols = gm * weight.value().transpose();
                    Matrix dx = Matrix::Zero(bsz, s.in_size());
                    const int ow = s.out_w();
                    for (Eigen::Index b = 0; b < bsz; ++b) {
                      for (int p = 0; p < positions; ++p) {
                        const int oy = p / ow, ox = p % ow;
                        const double* src = dcols.row(b * positions + p).data();
                        int k = 0;
                        for (int ky = 0; ky < s.kernel; ++ky) {
                          const int iy = oy * s.stride + ky;
                          double* dst =
                              dx.row(b).data() + (iy * s.in_w + ox * s.stride) * s.in_c;
                          for (int j = 0; j < s.kernel * s.in_c; ++j) dst[j] += src[k++];
                        }
                      }
                    }
                    tp.accumulate(x, dx);
                  }
                });
}

// ---- optimization ----

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    if (cfg_.lr == 0.0) continue;
    p.value.array() -= cfg_.lr * (m_[i].array() / bc1) /
                       ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace itrack::ad
