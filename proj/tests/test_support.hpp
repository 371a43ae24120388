#pragma once

#include "disenq/autodiff.hpp"

#include <functional>
#include <vector>

namespace disenq::testing {

// Central differences of `f` w.r.t. every entry of every matrix in `wrt`.
inline std::vector<Matrix> numeric_grads(const std::vector<Matrix*>& wrt, const std::function<double()>& f,
                                         double h = 1e-5) {
  std::vector<Matrix> out;
  for (Matrix* m : wrt) {
    Matrix g(m->rows(), m->cols());
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double x = m->data()[i];
      m->data()[i] = x + h;
      const double fp = f();
      m->data()[i] = x - h;
      const double fm = f();
      m->data()[i] = x;
      g.data()[i] = (fp - fm) / (2 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// Worst per-tensor relative error ||a - n|| / max(||a||, ||n||, floor).
inline double max_rel_error(const std::vector<Matrix>& analytic, const std::vector<Matrix>& numeric,
                            double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({analytic[i].norm(), numeric[i].norm(), floor});
    worst = std::max(worst, (analytic[i] - numeric[i]).norm() / denom);
  }
  return worst;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double stddev = 1.0) {
  return gaussian_matrix(rng, r, c, stddev);
}

// Gradient check for y = op(inputs) contracted against a fixed random weight.
inline double check_op(std::vector<Matrix> inputs,
                       const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& op,
                       std::uint64_t seed = 7) {
  Rng rng(seed);
  Matrix weight;
  std::vector<Matrix> analytic;
  {
    ad::Tape t;
    std::vector<ad::Var> vars;
    for (const Matrix& m : inputs) vars.push_back(t.input(m));
    ad::Var y = op(t, vars);
    weight = random_matrix(rng, t.value(y).rows(), t.value(y).cols());
    std::pair<ad::Var, Matrix> seedp{y, weight};
    t.backward(std::span<const std::pair<ad::Var, Matrix>>(&seedp, 1));
    for (ad::Var v : vars) analytic.push_back(t.grad(v));
  }
  std::vector<Matrix*> wrt;
  for (Matrix& m : inputs) wrt.push_back(&m);
  auto f = [&] {
    ad::Tape t(false);
    std::vector<ad::Var> vars;
    for (const Matrix& m : inputs) vars.push_back(t.input(m));
    return t.value(op(t, vars)).cwiseProduct(weight).sum();
  };
  return max_rel_error(analytic, numeric_grads(wrt, f));
}

}  // namespace disenq::testing
