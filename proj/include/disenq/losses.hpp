#pragma once

// Training objective: identity and action cross-entropy, batch-hard triplet
// on biometrics features, orthogonality between biometrics and
// non-biometrics features, their weighted sum, and the PK batch sampler.
// Every loss returns its value together with the analytic input gradient.

#include "disenq/autodiff.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace disenq {

struct LossWeights {
  double id = 0.01;
  double triplet = 0.01;
  double orthogonality = 0.01;
  double action = 0.01;
  double margin = 0.3;

  bool operator==(const LossWeights&) const = default;

  void validate() const {
    for (double w : {id, triplet, orthogonality, action, margin}) {
      if (!(w >= 0.0) || !std::isfinite(w)) fail_validation("loss weights and margin must be finite and >= 0");
    }
  }
};

// kCosine: mean per-sample |cos|. kRawNorm: mean per-sample |dot|.
// kCosineCrossCovariance: average of kCosine and the batch cross-covariance
// norm of row-normalized, batch-centered features.
// kCosineCrossCorrelation: average of kCosine and the mean squared batch
// correlation between every biometrics and every non-biometrics coordinate.
// The correlation term only moves the non-biometrics features; letting it pull
// on F_b as well fights the identity losses and collapses training.
enum class OrthogonalityMode { kCosine, kRawNorm, kCosineCrossCovariance, kCosineCrossCorrelation };

struct LossValue {
  double value = 0.0;
  Matrix grad;  // d value / d input, same shape as the input
};

// Linear identity/action classifiers on pooled features.
struct ClassifierHead {
  Parameter weight;  // D_q x C
  Parameter bias;    // 1 x C

  ClassifierHead() = default;
  ClassifierHead(const std::string& name, int in_dim, int classes, Rng& rng, double init_std = 0.02)
      : weight(name + ".w", gaussian_matrix(rng, in_dim, classes, init_std)), bias(name + ".b", Matrix::Zero(1, classes)) {
    if (classes < 1) fail_validation(name, ": needs at least one class");
  }

  Eigen::Index classes() const { return weight.value.cols(); }

  ParameterRefs parameters() { return {&weight, &bias}; }
};

// -log softmax(logits)[label]; logits is a 1 x C row.
inline LossValue cross_entropy(const RowVector& logits, int label) {
  if (label < 0 || label >= logits.size()) fail_validation("label ", label, " outside [0, ", logits.size(), ")");
  const Matrix p = ad::softmax_rows_value(logits);
  LossValue out;
  const double mx = logits.maxCoeff();
  if (std::isinf(mx) && mx > 0) {
    out.value = logits(label) == mx ? -std::log(p(0, label)) : std::numeric_limits<double>::infinity();
  } else {
    double lse = 0.0;
    for (Eigen::Index c = 0; c < logits.size(); ++c) lse += std::exp(logits(c) - mx);
    out.value = std::log(lse) + mx - logits(label);
  }
  out.grad = p;
  out.grad(0, label) -= 1.0;
  return out;
}

// Batch-hard triplet loss. features: B x D, labels: B ids. For each anchor,
// hardest positive = farthest same-label sample, hardest negative = nearest
// different-label sample; loss = mean_a max(d(a,p) - d(a,n) + margin, 0).
inline LossValue triplet_loss(const Matrix& features, std::span<const int> labels, double margin) {
  const Eigen::Index B = features.rows();
  if (static_cast<std::size_t>(B) != labels.size()) fail_shape("triplet: ", B, " features but ", labels.size(), " labels");
  std::map<int, int> counts;
  for (int l : labels) counts[l] += 1;
  if (counts.size() < 2) fail_validation("triplet: batch needs at least 2 identities");
  for (auto [label, n] : counts) {
    if (n < 2) fail_validation("triplet: identity ", label, " has a single sample in the batch");
  }

  Matrix dist(B, B);
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < B; ++j) dist(i, j) = (features.row(i) - features.row(j)).norm();
  }
  LossValue out;
  out.grad = Matrix::Zero(B, features.cols());
  // d||x_i - x_j|| / d x_i; zero at coincident points (subgradient).
  auto add_distance_grad = [&](Eigen::Index i, Eigen::Index j, double coeff) {
    const double d = dist(i, j);
    if (d < 1e-12) return;
    const RowVector u = (features.row(i) - features.row(j)) / d;
    out.grad.row(i) += coeff * u;
    out.grad.row(j) -= coeff * u;
  };
  for (Eigen::Index a = 0; a < B; ++a) {
    Eigen::Index pos = -1;
    Eigen::Index neg = -1;
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    const double term = dist(a, pos) - dist(a, neg) + margin;
    if (term <= 0.0) continue;
    out.value += term;
    add_distance_grad(a, pos, 1.0 / B);
    add_distance_grad(a, neg, -1.0 / B);
  }
  out.value /= static_cast<double>(B);
  return out;
}

struct OrthogonalityValue {
  double value = 0.0;
  Matrix grad_biometrics;
  Matrix grad_non_biometrics;
};

// ||U^T V||_F / B where U, V are the row-normalized, batch-centered features.
// Lies in [0, 1]; zero when no coordinate of one set linearly co-varies with
// any coordinate of the other across the batch. Rows with norm below 1e-12
// count as zero vectors.
inline OrthogonalityValue cross_covariance_loss(const Matrix& biometrics, const Matrix& non_biometrics) {
  if (biometrics.rows() != non_biometrics.rows() || biometrics.cols() != non_biometrics.cols()) {
    fail_shape("cross_covariance: feature shapes differ");
  }
  const Eigen::Index B = biometrics.rows();
  if (B == 0) fail_shape("cross_covariance: empty batch");
  auto normalize = [](const Matrix& x, Vector& norms) {
    norms = x.rowwise().norm();
    Matrix u = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (norms(i) >= 1e-12) u.row(i) = x.row(i) / norms(i);
    }
    return u;
  };
  Vector nb, nn;
  const Matrix ub = normalize(biometrics, nb);
  const Matrix un = normalize(non_biometrics, nn);
  const Matrix cb = ub.rowwise() - ub.colwise().mean();
  const Matrix cn = un.rowwise() - un.colwise().mean();
  const Matrix c = cb.transpose() * cn / double(B);
  OrthogonalityValue out;
  out.value = c.norm();
  out.grad_biometrics = Matrix::Zero(B, biometrics.cols());
  out.grad_non_biometrics = Matrix::Zero(B, biometrics.cols());
  if (out.value < 1e-12) return out;
  const Matrix g = c / out.value;
  Matrix gb = cn * g.transpose() / double(B);
  Matrix gn = cb * g / double(B);
  // Back through centering (projection is symmetric) and row normalization.
  gb = gb.rowwise() - gb.colwise().mean();
  gn = gn.rowwise() - gn.colwise().mean();
  auto unnormalize = [](const Matrix& grad, const Matrix& u, const Vector& norms, Matrix& dst) {
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      if (norms(i) < 1e-12) continue;
      dst.row(i) = (grad.row(i) - grad.row(i).dot(u.row(i)) * u.row(i)) / norms(i);
    }
  };
  unnormalize(gb, ub, nb, out.grad_biometrics);
  unnormalize(gn, un, nn, out.grad_non_biometrics);
  return out;
}

// Mean over coordinate pairs (j, k) of corr(b_.j, n_.k)^2 across the batch.
// Per-coordinate standardization makes this blind to feature scale, so a
// coordinate cannot hide co-variation by varying only slightly. Coordinates
// with variance below 1e-12 are treated as constant (no correlation, no gradient).
inline OrthogonalityValue cross_correlation_loss(const Matrix& biometrics, const Matrix& non_biometrics) {
  if (biometrics.rows() != non_biometrics.rows()) fail_shape("cross_correlation: batch sizes differ");
  const Eigen::Index B = biometrics.rows();
  if (B == 0) fail_shape("cross_correlation: empty batch");
  auto standardize = [B](const Matrix& x, RowVector& inv_sd) {
    Matrix z = x.rowwise() - x.colwise().mean();
    inv_sd = RowVector::Zero(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double var = z.col(c).squaredNorm() / double(B);
      if (var < 1e-12) {
        z.col(c).setZero();
      } else {
        inv_sd(c) = 1.0 / std::sqrt(var);
        z.col(c) *= inv_sd(c);
      }
    }
    return z;
  };
  RowVector sb, sn;
  const Matrix zb = standardize(biometrics, sb);
  const Matrix zn = standardize(non_biometrics, sn);
  const double pairs = double(biometrics.cols() * non_biometrics.cols());
  const Matrix c = zb.transpose() * zn / double(B);
  OrthogonalityValue out;
  out.value = c.squaredNorm() / pairs;
  const Matrix dc = 2.0 * c / pairs;
  // Back through the per-column standardization.
  auto back = [B](const Matrix& dz, const Matrix& z, const RowVector& inv_sd) {
    Matrix dx = dz.rowwise() - dz.colwise().mean();
    const RowVector zdz = (z.array() * dz.array()).colwise().sum() / double(B);
    dx -= z * zdz.asDiagonal();
    return Matrix(dx * inv_sd.asDiagonal());
  };
  out.grad_biometrics = back(zn * dc.transpose() / double(B), zb, sb);
  out.grad_non_biometrics = back(zb * dc / double(B), zn, sn);
  return out;
}

// Mean over rows of |cos(b_i, n_i)| (cosine mode) or of |b_i . n_i| (raw mode).
// Pairs with a norm below 1e-12 contribute 0 and no gradient.
inline OrthogonalityValue orthogonality_loss(const Matrix& biometrics, const Matrix& non_biometrics,
                                             OrthogonalityMode mode = OrthogonalityMode::kCosine) {
  if (biometrics.rows() != non_biometrics.rows() || biometrics.cols() != non_biometrics.cols()) {
    fail_shape("orthogonality: feature shapes differ");
  }
  const Eigen::Index B = biometrics.rows();
  if (B == 0) fail_shape("orthogonality: empty batch");
  OrthogonalityValue out;
  out.grad_biometrics = Matrix::Zero(B, biometrics.cols());
  out.grad_non_biometrics = Matrix::Zero(B, biometrics.cols());
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto b = biometrics.row(i);
    const auto n = non_biometrics.row(i);
    const double dot = b.dot(n);
    if (mode == OrthogonalityMode::kRawNorm) {
      const double sign = dot > 0 ? 1.0 : (dot < 0 ? -1.0 : 0.0);
      out.value += std::abs(dot);
      out.grad_biometrics.row(i) = sign * n / double(B);
      out.grad_non_biometrics.row(i) = sign * b / double(B);
      continue;
    }
    const double nb = b.norm();
    const double nn = n.norm();
    if (nb < 1e-12 || nn < 1e-12) continue;
    const double c = dot / (nb * nn);
    const double sign = c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0);
    out.value += std::abs(c);
    // d cos / d b = n/(|b||n|) - cos * b/|b|^2
    out.grad_biometrics.row(i) = sign * (n / (nb * nn) - c * b / (nb * nb)) / double(B);
    out.grad_non_biometrics.row(i) = sign * (b / (nb * nn) - c * n / (nn * nn)) / double(B);
  }
  out.value /= static_cast<double>(B);
  if (mode == OrthogonalityMode::kCosineCrossCovariance || mode == OrthogonalityMode::kCosineCrossCorrelation) {
    const OrthogonalityValue cc = mode == OrthogonalityMode::kCosineCrossCovariance
                                      ? cross_covariance_loss(biometrics, non_biometrics)
                                      : cross_correlation_loss(biometrics, non_biometrics);
    out.value = 0.5 * (out.value + cc.value);
    if (mode == OrthogonalityMode::kCosineCrossCovariance) out.grad_biometrics += cc.grad_biometrics;
    out.grad_biometrics *= 0.5;
    out.grad_non_biometrics = 0.5 * (out.grad_non_biometrics + cc.grad_non_biometrics);
  }
  return out;
}

struct LossComponents {
  double id = 0.0;
  double triplet = 0.0;
  double orthogonality = 0.0;
  double action = 0.0;
};

// λ1·L_ID + λ2·L_Tri + λ3·L_Orth + λ4·L_Act.
inline double total_loss(const LossComponents& c, const LossWeights& w) {
  const std::pair<const char*, double> named[] = {
      {"id", c.id}, {"triplet", c.triplet}, {"orthogonality", c.orthogonality}, {"action", c.action}};
  for (const auto& [name, value] : named) {
    if (!std::isfinite(value)) throw std::runtime_error(detail::concat("loss component '", name, "' is not finite"));
  }
  return w.id * c.id + w.triplet * c.triplet + w.orthogonality * c.orthogonality + w.action * c.action;
}

// P identities x K clips, drawn without replacement. `identities` lists the
// label of each candidate sample; returned values are positions into it.
inline std::vector<std::size_t> pk_sample(std::span<const int> identities, int P, int K, Rng& rng) {
  if (P < 1 || K < 1) fail_validation("pk_sample: P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < identities.size(); ++i) by_id[identities[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [id, members] : by_id) {
    if (static_cast<int>(members.size()) >= K) eligible.push_back(id);
  }
  if (static_cast<int>(eligible.size()) < P) {
    fail_validation("pk_sample: need ", P, " identities with >= ", K, " clips, have ", eligible.size());
  }
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<std::size_t> batch;
  batch.reserve(static_cast<std::size_t>(P * K));
  for (int p = 0; p < P; ++p) {
    std::vector<std::size_t> members = by_id[eligible[static_cast<std::size_t>(p)]];
    std::shuffle(members.begin(), members.end(), rng);
    batch.insert(batch.end(), members.begin(), members.begin() + K);
  }
  return batch;
}

}  // namespace disenq
