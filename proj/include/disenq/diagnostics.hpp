#pragma once

// Disentanglement diagnostics: InfoNCE mutual-information estimates, linear
// leakage probes, orthogonality statistics and embedding export.

#include "disenq/config.hpp"
#include "disenq/io.hpp"
#include "disenq/model.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <numeric>

namespace disenq {

struct MIEstimate {
  std::string pair;
  double lower_bound = 0.0;    // nats, ln(B) - matched loss
  double matched_loss = 0.0;
  double mismatched_loss = 0.0;
  int batch_size = 0;
};

struct LeakageResult {
  std::string feature;
  std::string target;
  double accuracy = 0.0;
  double chance = 0.0;
  std::string skipped;  // non-empty when the labels cannot support a probe
};

struct OrthogonalityStats {
  double mean_abs_cos = 0.0;
  double max_abs_cos = 0.0;
};

struct InfoNceConfig {
  int steps = 200;
  int batch_size = 64;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

namespace detail {

// Column z-scoring with statistics from `fit`; constant columns map to 0.
inline Matrix standardize(const Matrix& fit, const Matrix& x) {
  const RowVector mean = fit.colwise().mean();
  RowVector sd = ((fit.rowwise() - mean).array().square().colwise().sum() / double(std::max<Eigen::Index>(1, fit.rows()))).sqrt();
  Matrix out = x.rowwise() - mean;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    out.col(c) = sd(c) > 1e-12 ? Vector(out.col(c) / sd(c)) : Vector::Zero(out.rows());
  }
  return out;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Mean InfoNCE loss of a bilinear critic on one aligned batch; optional gradient.
inline double infonce_batch(const Matrix& x, const Matrix& y, const Matrix& w, Matrix* grad) {
  const Matrix s = x * w * y.transpose();
  const Matrix p = ad::softmax_rows_value(s);
  const auto B = static_cast<double>(s.rows());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) loss -= std::log(std::max(p(i, i), 1e-300));
  loss /= B;
  if (grad) {
    Matrix ds = p;
    ds.diagonal().array() -= 1.0;
    ds /= B;
    *grad = x.transpose() * ds * y;
  }
  return loss;
}

}  // namespace detail

// Trains a bilinear critic x^T W y on half of the aligned rows and reports the
// InfoNCE bound on the other half. Mismatched loss uses a shuffled pairing.
inline MIEstimate infonce_mi(const Matrix& x, const Matrix& y, const InfoNceConfig& cfg, std::string pair = {}) {
  if (x.rows() != y.rows()) fail_shape("infonce_mi: X has ", x.rows(), " rows, Y has ", y.rows());
  const auto n = static_cast<std::size_t>(x.rows());
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  if (cfg.batch_size < 2) fail_validation("infonce_mi: batch size must be >= 2");
  if (n < B) fail_validation("infonce_mi: need at least ", B, " aligned samples, have ", n);

  Rng rng(derive_seed(cfg.seed, 400));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  // Train / validation / evaluation rows. Each part needs a full batch, so
  // small sets reuse rows across parts.
  auto part = [&](std::size_t from, std::size_t to) {
    return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(from), order.begin() + static_cast<std::ptrdiff_t>(to));
  };
  std::vector<std::size_t> fit_rows, val_rows, eval_rows;
  if (n >= 4 * B) {
    fit_rows = part(0, n / 2);
    val_rows = part(n / 2, 3 * n / 4);
    eval_rows = part(3 * n / 4, n);
  } else if (n >= 2 * B) {
    fit_rows = part(0, n / 2);
    val_rows = eval_rows = part(n / 2, n);
  } else {
    fit_rows = val_rows = eval_rows = order;
  }
  const Matrix xf = detail::gather_rows(x, fit_rows);
  const Matrix yf = detail::gather_rows(y, fit_rows);
  const Matrix xs = detail::standardize(xf, x);
  const Matrix ys = detail::standardize(yf, y);

  auto mean_loss = [&](const std::vector<std::size_t>& rows, const Matrix& w, const std::vector<std::size_t>* pairing) {
    double total = 0.0;
    const std::size_t batches = rows.size() / B;
    for (std::size_t k = 0; k < batches; ++k) {
      std::span<const std::size_t> r(rows.data() + k * B, B);
      std::span<const std::size_t> p = pairing ? std::span<const std::size_t>(pairing->data() + k * B, B) : r;
      total += detail::infonce_batch(detail::gather_rows(xs, r), detail::gather_rows(ys, p), w, nullptr);
    }
    return total / double(batches);
  };

  // Plain minibatch SGD with early stopping on the validation rows; the
  // zero critic (bound exactly 0) is the starting candidate. Adaptive
  // per-entry steps inflate off-diagonal noise and overfit at these sizes.
  Matrix w = Matrix::Zero(x.cols(), y.cols());
  Matrix best = w;
  double best_val = mean_loss(val_rows, w, nullptr);
  Matrix grad;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> batch = fit_rows;
    std::shuffle(batch.begin(), batch.end(), rng);
    batch.resize(B);
    detail::infonce_batch(detail::gather_rows(xs, batch), detail::gather_rows(ys, batch), w, &grad);
    w -= cfg.lr * grad;
    if (step % 10 == 0 || step == cfg.steps) {
      const double v = mean_loss(val_rows, w, nullptr);
      if (v < best_val) {
        best_val = v;
        best = w;
      }
    }
  }

  std::vector<std::size_t> shuffled = eval_rows;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const double matched = mean_loss(eval_rows, best, nullptr);
  const double mismatched = mean_loss(eval_rows, best, &shuffled);
  MIEstimate out;
  out.pair = std::move(pair);
  out.batch_size = cfg.batch_size;
  out.matched_loss = matched;
  out.mismatched_loss = mismatched;
  out.lower_bound = std::log(double(B)) - out.matched_loss;
  return out;
}

struct ProbeConfig {
  int folds = 5;
  int iterations = 300;
  double l2 = 1e-3;
  double lr = 0.1;
  std::uint64_t seed = 0;
};

// Multinomial logistic regression (full-batch Adam, L2) with stratified k-fold
// cross-validation; features are standardized on each training fold.
inline LeakageResult leakage_probe(const Matrix& features, std::span<const int> labels, const ProbeConfig& cfg,
                                   std::string feature = {}, std::string target = {}) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) fail_shape("leakage_probe: features and labels differ in length");
  if (cfg.folds < 2) fail_validation("leakage_probe: need at least 2 folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) fail_validation("leakage_probe: need at least 2 classes, have ", by_class.size());
  std::size_t majority = 0;
  for (const auto& [label, members] : by_class) {
    if (members.size() < 5) fail_validation("leakage_probe: class ", label, " has ", members.size(), " samples, need >= 5");
    majority = std::max(majority, members.size());
  }
  std::map<int, int> column;
  for (const auto& [label, members] : by_class) column.emplace(label, static_cast<int>(column.size()));
  const auto C = static_cast<Eigen::Index>(column.size());

  Rng rng(derive_seed(cfg.seed, 500));
  std::vector<int> fold_of(labels.size());
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k) fold_of[members[k]] = static_cast<int>(k % static_cast<std::size_t>(cfg.folds));
  }

  std::size_t correct = 0;
  for (int f = 0; f < cfg.folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < labels.size(); ++i) (fold_of[i] == f ? te : tr).push_back(i);
    if (te.empty()) continue;
    const Matrix xtr_raw = detail::gather_rows(features, tr);
    const Matrix xtr = detail::standardize(xtr_raw, xtr_raw);
    const Matrix xte = detail::standardize(xtr_raw, detail::gather_rows(features, te));
    Matrix y = Matrix::Zero(static_cast<Eigen::Index>(tr.size()), C);
    for (std::size_t i = 0; i < tr.size(); ++i) y(static_cast<Eigen::Index>(i), column.at(labels[tr[i]])) = 1.0;

    Matrix w = Matrix::Zero(features.cols(), C), mw = w, vw = w;
    RowVector b = RowVector::Zero(C), mb = b, vb = b;
    const double n = static_cast<double>(tr.size());
    for (int it = 1; it <= cfg.iterations; ++it) {
      const Matrix p = ad::softmax_rows_value((xtr * w).rowwise() + b);
      const Matrix d = (p - y) / n;
      const Matrix gw = xtr.transpose() * d + cfg.l2 * w;
      const RowVector gb = d.colwise().sum();
      mw = 0.9 * mw + 0.1 * gw;
      vw = 0.999 * vw + 0.001 * gw.cwiseProduct(gw);
      mb = 0.9 * mb + 0.1 * gb;
      vb = 0.999 * vb + 0.001 * gb.cwiseProduct(gb);
      const double c1 = 1 - std::pow(0.9, it), c2 = 1 - std::pow(0.999, it);
      w.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + 1e-8);
      b.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + 1e-8);
    }
    const Matrix scores = (xte * w).rowwise() + b;
    for (std::size_t i = 0; i < te.size(); ++i) {
      Eigen::Index best = 0;
      scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      if (best == column.at(labels[te[i]])) ++correct;
    }
  }
  LeakageResult out;
  out.feature = std::move(feature);
  out.target = std::move(target);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  out.chance = static_cast<double>(majority) / static_cast<double>(labels.size());
  return out;
}

inline OrthogonalityStats orthogonality_stats(const Matrix& biometrics, const Matrix& non_biometrics) {
  if (biometrics.rows() != non_biometrics.rows() || biometrics.cols() != non_biometrics.cols()) {
    fail_shape("orthogonality_stats: feature sets are not aligned");
  }
  OrthogonalityStats s;
  if (biometrics.rows() == 0) return s;
  for (Eigen::Index i = 0; i < biometrics.rows(); ++i) {
    const double c = std::abs(cosine(biometrics.row(i), non_biometrics.row(i)));
    s.mean_abs_cos += c;
    s.max_abs_cos = std::max(s.max_abs_cos, c);
  }
  s.mean_abs_cos /= static_cast<double>(biometrics.rows());
  return s;
}

// Stacks one stream of per-clip features (or a subset of clips) into rows.
inline Matrix stack_stream(std::span<const DisentangledFeatures> features, int stream,
                           std::span<const std::size_t> rows = {}) {
  const std::size_t n = rows.empty() ? features.size() : rows.size();
  if (n == 0) return Matrix();
  const Eigen::Index d = features[rows.empty() ? 0 : rows[0]].stream(stream).size();
  Matrix out(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    out.row(static_cast<Eigen::Index>(i)) = features[rows.empty() ? i : rows[i]].stream(stream);
  }
  return out;
}

inline std::vector<EmbeddingRecord> embedding_records(std::span<const DisentangledFeatures> features, const Dataset& ds) {
  if (features.size() != ds.size()) fail_shape("feature count does not match dataset size");
  std::vector<EmbeddingRecord> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    out[i] = {s.clip_id, s.identity, s.action, s.clothing, s.view,
              {features[i].biometrics, features[i].motion, features[i].non_biometrics}};
  }
  return out;
}

inline void export_embeddings(const Model& model, const Dataset& ds, const fs::path& path, int workers = 1) {
  if (ds.size() == 0) fail_validation("export_embeddings: dataset is empty");
  const auto features = infer_all(model, ds, workers);
  write_embeddings(path, embedding_records(features, ds));
}

struct DiagnosticsReport {
  std::vector<MIEstimate> mutual_information;
  std::vector<LeakageResult> probes;
  OrthogonalityStats orthogonality;
  std::size_t clips = 0;
};

// Runs the full suite on the given clips (normally the held-out identities).
inline DiagnosticsReport run_diagnostics(std::span<const DisentangledFeatures> features, const Dataset& ds,
                                         std::span<const std::size_t> rows, const DiagnosticsConfig& cfg,
                                         std::uint64_t seed) {
  if (rows.empty()) fail_validation("diagnostics: no clips selected");
  DiagnosticsReport rep;
  rep.clips = rows.size();
  const Matrix fb = stack_stream(features, kBiometrics, rows);
  const Matrix fm = stack_stream(features, kMotion, rows);
  const Matrix fn = stack_stream(features, kNonBiometrics, rows);

  InfoNceConfig mi{cfg.critic_steps, std::min<int>(cfg.critic_batch, static_cast<int>(rows.size())), cfg.critic_lr, seed};
  rep.mutual_information.push_back(infonce_mi(fb, fb, mi, "biometrics-biometrics"));
  rep.mutual_information.push_back(infonce_mi(fm, fm, mi, "motion-motion"));
  rep.mutual_information.push_back(infonce_mi(fb, fm, mi, "biometrics-motion"));
  rep.mutual_information.push_back(infonce_mi(fb, fn, mi, "biometrics-non_biometrics"));
  rep.mutual_information.push_back(infonce_mi(fm, fn, mi, "motion-non_biometrics"));

  std::vector<int> ids, actions;
  for (std::size_t r : rows) {
    ids.push_back(ds.samples[r].identity);
    actions.push_back(ds.samples[r].action);
  }
  ProbeConfig pc{cfg.probe_folds, cfg.probe_iterations, cfg.probe_l2, 0.1, seed};
  const std::pair<const char*, const Matrix*> streams[] = {
      {"biometrics", &fb}, {"motion", &fm}, {"non_biometrics", &fn}};
  auto probe = [&](const Matrix& m, const std::vector<int>& labels, const char* feature, const char* target) {
    // Small held-out sets can leave a single class; report that instead of failing the run.
    try {
      rep.probes.push_back(leakage_probe(m, labels, pc, feature, target));
    } catch (const ValidationError& e) {
      rep.probes.push_back({feature, target, 0.0, 0.0, e.what()});
    }
  };
  for (const auto& [name, m] : streams) {
    probe(*m, ids, name, "identity");
    probe(*m, actions, name, "action");
  }
  rep.orthogonality = orthogonality_stats(fb, fn);
  return rep;
}

inline nlohmann::json diagnostics_to_json(const DiagnosticsReport& r) {
  nlohmann::json mi = nlohmann::json::array();
  for (const auto& e : r.mutual_information) {
    mi.push_back({{"pair", e.pair},
                  {"lower_bound", e.lower_bound},
                  {"matched_loss", e.matched_loss},
                  {"mismatched_loss", e.mismatched_loss},
                  {"batch_size", e.batch_size},
                  {"ceiling", std::log(double(e.batch_size))}});
  }
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : r.probes) {
    nlohmann::json j = {{"feature", p.feature}, {"target", p.target}};
    if (p.skipped.empty()) {
      j["accuracy"] = p.accuracy;
      j["chance"] = p.chance;
    } else {
      j["skipped"] = p.skipped;
    }
    probes.push_back(std::move(j));
  }
  return {{"clips", r.clips},
          {"mutual_information", mi},
          {"probes", probes},
          {"orthogonality", {{"mean_abs_cos", r.orthogonality.mean_abs_cos}, {"max_abs_cos", r.orthogonality.max_abs_cos}}}};
}

}  // namespace disenq
