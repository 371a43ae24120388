#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation of one forward pass. Parameters enter as
// leaves that reference the owning Parameter's value without copying it, so
// many tapes may read the same parameters concurrently. Gradients live on
// the tape; callers fold them back into their Parameter objects in a fixed
// order, which keeps batched training bit-reproducible for any worker count.

#include "disenq/core.hpp"

#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace disenq {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  // Set when any gradient path reached this parameter during the last step.
  bool touched = false;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    grad.setZero(value.rows(), value.cols());
    touched = false;
  }
};

using ParameterRefs = std::vector<Parameter*>;

namespace ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  // Receives the tape, the node being differentiated and its gradient.
  using Backward = std::function<void(Tape&, Var self, const Matrix& grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value) { return push(std::move(value), false); }

  // Differentiable input owned by the tape (e.g. features under a gradient check).
  Var input(Matrix value) { return push(std::move(value), grad_enabled_); }

  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
    Node node;
    node.external = &p.value;
    node.needs_grad = grad_enabled_;
    nodes_.push_back(std::move(node));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    param_order_.push_back(&p);
    return Var{id};
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  // Gradient of the seeded outputs w.r.t. v; zero matrix when no path exists.
  Matrix grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return Matrix::Zero(value(v).rows(), value(v).cols());
    return n.grad;
  }

  // Records a node computed from parents; `backward` reads this node's grad
  // and calls accumulate() on the parents.
  Var record(Matrix value, std::initializer_list<Var> parents,
             Backward backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || needs_grad(p);
    Var out = push(std::move(value), needs);
    if (needs) nodes_.back().backward = std::move(backward);
    return out;
  }

  Var record(Matrix value, std::span<const Var> parents,
             Backward backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || needs_grad(p);
    Var out = push(std::move(value), needs);
    if (needs) nodes_.back().backward = std::move(backward);
    return out;
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(output)/d(v) = seed for each pair, then sweeps the tape once.
  void backward(std::span<const std::pair<Var, Matrix>> seeds) {
    if (!grad_enabled_) throw std::logic_error("backward on a tape with gradients disabled");
    int last = -1;
    for (const auto& [v, g] : seeds) {
      if (g.rows() != value(v).rows() || g.cols() != value(v).cols()) {
        fail_shape("backward seed shape ", g.rows(), "x", g.cols(), " does not match node ",
                   value(v).rows(), "x", value(v).cols());
      }
      accumulate(v, g);
      last = std::max(last, v.id);
    }
    for (int i = last; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, Var{i}, n.grad);
    }
  }

  void backward(Var scalar) {
    if (value(scalar).size() != 1) fail_shape("backward(Var) requires a scalar output");
    std::pair<Var, Matrix> seed{scalar, Matrix::Constant(1, 1, 1.0)};
    backward(std::span<const std::pair<Var, Matrix>>(&seed, 1));
  }

  // Adds the gradient of every parameter leaf into Parameter::grad, in the
  // order the parameters were first used on this tape.
  void accumulate_param_grads(const std::unordered_map<const Parameter*, Parameter*>& owners) const {
    for (const Parameter* p : param_order_) {
      const Node& n = nodes_[static_cast<std::size_t>(param_nodes_.at(p))];
      if (n.grad.size() == 0) continue;
      Parameter* target = owners.at(p);
      if (target->grad.size() == 0) target->grad.setZero(p->value.rows(), p->value.cols());
      target->grad += n.grad;
      target->touched = true;
    }
  }

  Matrix param_grad(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return Matrix::Zero(p.value.rows(), p.value.cols());
    return grad(Var{it->second});
  }

  bool reached(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    return it != param_nodes_.end() && nodes_[static_cast<std::size_t>(it->second)].grad.size() != 0;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    const Matrix* external = nullptr;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool needs) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs;
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::vector<const Parameter*> param_order_;
};

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.cols() != B.rows()) fail_shape("matmul ", A.rows(), "x", A.cols(), " * ", B.rows(), "x", B.cols());
  return t.record(A * B, {a, b}, [a, b](Tape& tp, Var, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.cols() != B.cols()) fail_shape("matmul_nt ", A.rows(), "x", A.cols(), " * (", B.rows(), "x", B.cols(), ")^T");
  return t.record(A * B.transpose(), {a, b}, [a, b](Tape& tp, Var, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b));
    if (tp.needs_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) fail_shape("add shape mismatch");
  return t.record(A + B, {a, b}, [a, b](Tape& tp, Var, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

// Adds a 1xC row to every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  const Matrix& A = t.value(a);
  const Matrix& R = t.value(row);
  if (R.rows() != 1 || R.cols() != A.cols()) fail_shape("add_row expects a 1x", A.cols(), " row");
  Matrix out = A.rowwise() + R.row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, Var, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

// a * W + b for a row-major batch of inputs.
inline Var affine(Tape& t, Var a, Var w, Var b) { return add_row(t, matmul(t, a, w), b); }

inline Var scale(Tape& t, Var a, double s) {
  return t.record(t.value(a) * s, {a}, [a, s](Tape& tp, Var, const Matrix& g) { tp.accumulate(a, g * s); });
}

inline Var hadamard(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) fail_shape("hadamard shape mismatch");
  return t.record(A.cwiseProduct(B), {a, b}, [a, b](Tape& tp, Var, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

// Row sums as an Rx1 column.
inline Var row_sum(Tape& t, Var a) {
  const Matrix& A = t.value(a);
  const Eigen::Index cols = A.cols();
  return t.record(A.rowwise().sum(), {a}, [a, cols](Tape& tp, Var, const Matrix& g) {
    tp.accumulate(a, g.replicate(1, cols));
  });
}

// Column means as a 1xC row.
inline Var mean_rows(Tape& t, Var a) {
  const Matrix& A = t.value(a);
  const Eigen::Index rows = A.rows();
  if (rows == 0) fail_shape("mean_rows of an empty matrix");
  return t.record(A.colwise().mean(), {a}, [a, rows](Tape& tp, Var, const Matrix& g) {
    tp.accumulate(a, g.replicate(rows, 1) / static_cast<double>(rows));
  });
}

inline Var relu(Tape& t, Var a) {
  return t.record(t.value(a).cwiseMax(0.0), {a}, [a](Tape& tp, Var, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct((tp.value(a).array() > 0.0).cast<double>().matrix()));
  });
}

// tanh approximation of GELU.
inline Var gelu(Tape& t, Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const Matrix& X = t.value(a);
  Matrix out = X.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); });
  return t.record(std::move(out), {a}, [a](Tape& tp, Var, const Matrix& g) {
    Matrix d = tp.value(a).unaryExpr([](double x) {
      const double u = k * (x + c * x * x * x);
      const double th = std::tanh(u);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * c * x * x);
    });
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

// Row-wise softmax. Rows whose maximum is +inf put uniform mass on the +inf
// entries; -inf entries always get zero weight.
inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    if (std::isinf(mx) && mx > 0) {
      const double count = (x.row(r).array() == mx).count();
      for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) == mx ? 1.0 / count : 0.0;
      continue;
    }
    double total = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      y(r, c) = std::exp(x(r, c) - mx);
      total += y(r, c);
    }
    y.row(r) /= total;
  }
  return y;
}

inline Var softmax_rows(Tape& t, Var a) {
  return t.record(softmax_rows_value(t.value(a)), {a}, [a](Tape& tp, Var self, const Matrix& g) {
    const Matrix& y = tp.value(self);
    const Matrix dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g;
    d.colwise() -= dot.col(0);
    tp.accumulate(a, d.cwiseProduct(y));
  });
}

// Per-row layer normalisation with 1xC gain and bias.
inline Var layer_norm_rows(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Matrix& X = t.value(x);
  const Matrix& G = t.value(gain);
  const Matrix& B = t.value(bias);
  const Eigen::Index cols = X.cols();
  if (G.rows() != 1 || G.cols() != cols || B.rows() != 1 || B.cols() != cols) {
    fail_shape("layer_norm_rows gain/bias must be 1x", cols);
  }
  Matrix xhat(X.rows(), cols);
  Vector inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * G.row(0).array()).matrix();
  out.rowwise() += B.row(0);
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, Var, const Matrix& g) {
                    const Matrix& G = tp.value(gain);
                    if (tp.needs_grad(gain)) tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                    if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                    if (!tp.needs_grad(x)) return;
                    const double n = static_cast<double>(g.cols());
                    Matrix gx = (g.array().rowwise() * G.row(0).array()).matrix();
                    Matrix dx(g.rows(), g.cols());
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const double sum_g = gx.row(r).sum();
                      const double sum_gx = gx.row(r).dot(xhat.row(r));
                      dx.row(r) = inv_std(r) / n * (n * gx.row(r).array() - sum_g - xhat.row(r).array() * sum_gx);
                    }
                    tp.accumulate(x, dx);
                  });
}

inline Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) fail_shape("concat_rows of nothing");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) fail_shape("concat_rows column mismatch");
    rows += t.value(p).rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, t.value(p).rows()) = t.value(p);
    at += t.value(p).rows();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [owned](Tape& tp, Var, const Matrix& g) {
    Eigen::Index at = 0;
    for (Var p : owned) {
      const Eigen::Index r = tp.value(p).rows();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(at, r));
      at += r;
    }
  });
}

inline Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) fail_shape("concat_cols of nothing");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) fail_shape("concat_cols row mismatch");
    cols += t.value(p).cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, t.value(p).cols()) = t.value(p);
    at += t.value(p).cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [owned](Tape& tp, Var, const Matrix& g) {
    Eigen::Index at = 0;
    for (Var p : owned) {
      const Eigen::Index c = tp.value(p).cols();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

inline Var slice_cols(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& A = t.value(a);
  if (start < 0 || count < 0 || start + count > A.cols()) fail_shape("slice_cols out of range");
  return t.record(A.middleCols(start, count), {a}, [a, start, count](Tape& tp, Var, const Matrix& g) {
    Matrix d = Matrix::Zero(tp.value(a).rows(), tp.value(a).cols());
    d.middleCols(start, count) = g;
    tp.accumulate(a, d);
  });
}

// Repeats each row of a `blocks`-row matrix `times` times consecutively:
// output row b*times + i equals input row b.
inline Var repeat_rows(Tape& t, Var a, Eigen::Index times) {
  const Matrix& A = t.value(a);
  Matrix out(A.rows() * times, A.cols());
  for (Eigen::Index b = 0; b < A.rows(); ++b) out.middleRows(b * times, times) = A.row(b).replicate(times, 1);
  return t.record(std::move(out), {a}, [a, times](Tape& tp, Var, const Matrix& g) {
    const Matrix& A = tp.value(a);
    Matrix d(A.rows(), A.cols());
    for (Eigen::Index b = 0; b < A.rows(); ++b) d.row(b) = g.middleRows(b * times, times).colwise().sum();
    tp.accumulate(a, d);
  });
}

// Leading rows [0, count) of a.
inline Var top_rows(Tape& t, Var a, Eigen::Index count) {
  const Matrix& A = t.value(a);
  if (count < 0 || count > A.rows()) fail_shape("top_rows out of range");
  return t.record(A.topRows(count), {a}, [a, count](Tape& tp, Var, const Matrix& g) {
    Matrix d = Matrix::Zero(tp.value(a).rows(), tp.value(a).cols());
    d.topRows(count) = g;
    tp.accumulate(a, d);
  });
}

}  // namespace ad
}  // namespace disenq
