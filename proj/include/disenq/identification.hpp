#pragma once

// Retrieval head: adaptive fusion of biometrics and motion cosine
// similarities, gallery ranking and Rank-k / mAP scoring.

#include "disenq/autodiff.hpp"
#include "disenq/query_transformer.hpp"
#include "disenq/world.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace disenq {

// (sim_b, sim_m) -> ReLU hidden layer -> softmax -> (alpha_1, alpha_2).
struct AdaptiveWeigher {
  static constexpr int kHidden = 16;

  Parameter w1;  // 2 x 16
  Parameter b1;  // 1 x 16
  Parameter w2;  // 16 x 2
  Parameter b2;  // 1 x 2
  // Decision offset of the auxiliary verification loss; unused when scoring.
  Parameter offset;  // 1 x 1

  AdaptiveWeigher() : AdaptiveWeigher(0) {}

  // Output layer starts at zero, so an untrained weigher returns (0.5, 0.5).
  explicit AdaptiveWeigher(std::uint64_t seed) {
    Rng rng(seed);
    w1 = Parameter("weigher.w1", gaussian_matrix(rng, 2, kHidden, 1.0));
    b1 = Parameter("weigher.b1", Matrix::Constant(1, kHidden, 0.1));
    w2 = Parameter("weigher.w2", Matrix::Zero(kHidden, 2));
    b2 = Parameter("weigher.b2", Matrix::Zero(1, 2));
    offset = Parameter("weigher.offset", Matrix::Zero(1, 1));
  }

  ParameterRefs parameters() { return {&w1, &b1, &w2, &b2, &offset}; }

  std::array<double, 2> weights(double sim_b, double sim_m) const {
    RowVector in(2);
    in << sim_b, sim_m;
    RowVector h = (in * w1.value + b1.value).cwiseMax(0.0);
    RowVector logits = h * w2.value + b2.value;
    const Matrix a = ad::softmax_rows_value(logits);
    return {a(0, 0), a(0, 1)};
  }
};

namespace ad {

// Fused similarity for every row of `sims` (P x 2 columns sim_b, sim_m); P x 1.
inline Var fused_similarity(Tape& t, const AdaptiveWeigher& w, Var sims) {
  Var h = relu(t, affine(t, sims, t.param(w.w1), t.param(w.b1)));
  Var alpha = softmax_rows(t, affine(t, h, t.param(w.w2), t.param(w.b2)));
  return row_sum(t, hadamard(t, alpha, sims));
}

}  // namespace ad

enum class ScoreMode { kAdaptive, kFixed, kBiometrics, kMotion, kNonBiometrics };

inline std::string score_mode_name(ScoreMode m) {
  switch (m) {
    case ScoreMode::kAdaptive: return "adaptive";
    case ScoreMode::kFixed: return "fixed";
    case ScoreMode::kBiometrics: return "biometrics";
    case ScoreMode::kMotion: return "motion";
    case ScoreMode::kNonBiometrics: return "non_biometrics";
  }
  return "?";
}

struct Scorer {
  ScoreMode mode = ScoreMode::kAdaptive;
  const AdaptiveWeigher* weigher = nullptr;
  std::array<double, 2> fixed_alpha{0.5, 0.5};

  double operator()(const DisentangledFeatures& a, const DisentangledFeatures& b) const {
    switch (mode) {
      case ScoreMode::kBiometrics: return cosine(a.biometrics, b.biometrics);
      case ScoreMode::kMotion: return cosine(a.motion, b.motion);
      case ScoreMode::kNonBiometrics: return cosine(a.non_biometrics, b.non_biometrics);
      case ScoreMode::kFixed: {
        return fixed_alpha[0] * cosine(a.biometrics, b.biometrics) + fixed_alpha[1] * cosine(a.motion, b.motion);
      }
      case ScoreMode::kAdaptive: {
        if (weigher == nullptr) fail_validation("adaptive scoring requires a weigher");
        const double sb = cosine(a.biometrics, b.biometrics);
        const double sm = cosine(a.motion, b.motion);
        const auto alpha = weigher->weights(sb, sm);
        return alpha[0] * sb + alpha[1] * sm;
      }
    }
    return 0.0;
  }
};

// alpha_1 * cos(F_b^A, F_b^B) + alpha_2 * cos(F_m^A, F_m^B).
inline double pair_similarity(const DisentangledFeatures& a, const DisentangledFeatures& b, const AdaptiveWeigher& weigher) {
  return Scorer{ScoreMode::kAdaptive, &weigher}(a, b);
}

// Gallery positions sorted by descending score, ties by ascending position.
// With `exclude_same_view`, candidates sharing the probe's view are dropped;
// an empty result means the probe has no candidates.
inline std::vector<std::size_t> rank_gallery(const DisentangledFeatures& probe, std::span<const DisentangledFeatures> gallery,
                                             const Scorer& scorer, bool exclude_same_view = false, int probe_view = -1,
                                             std::span<const int> gallery_views = {}) {
  if (exclude_same_view && gallery_views.size() != gallery.size()) fail_shape("gallery views missing for view exclusion");
  std::vector<std::size_t> order;
  std::vector<double> scores(gallery.size(), 0.0);
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    if (exclude_same_view && gallery_views[g] == probe_view) continue;
    scores[g] = scorer(probe, gallery[g]);
    order.push_back(g);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Ranks precomputed scores (same tie rule as rank_gallery).
inline std::vector<std::size_t> rank_scores(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

struct ProbeResult {
  std::size_t probe = 0;  // position in the probe list
  int label = 0;
  double average_precision = 0.0;
  std::size_t first_match = 0;  // 1-based rank of the first correct match
  std::vector<std::size_t> ranking;
};

struct RetrievalReport {
  std::string protocol;
  std::string scoring;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double mean_ap = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = Rank-k
  std::size_t num_probes = 0;
  std::size_t num_skipped = 0;
  std::vector<ProbeResult> per_probe;
};

inline constexpr std::size_t kCmcDepth = 20;

// Rank-k is the fraction of scored probes with a correct match in the top k;
// AP averages precision@i over the correct positions i. Probes without any
// correct match in their ranking are dropped and counted in num_skipped.
inline RetrievalReport compute_cmc_map(std::span<const std::vector<std::size_t>> rankings, std::span<const int> probe_labels,
                                       std::span<const int> gallery_labels) {
  if (rankings.size() != probe_labels.size()) fail_shape("one ranking per probe required");
  if (rankings.empty()) fail_validation("compute_cmc_map: empty probe set");
  RetrievalReport report;
  std::vector<double> hits(kCmcDepth, 0.0);
  for (std::size_t p = 0; p < rankings.size(); ++p) {
    const auto& ranking = rankings[p];
    ProbeResult r;
    r.probe = p;
    r.label = probe_labels[p];
    r.ranking = ranking;
    std::size_t correct = 0;
    double precision_sum = 0.0;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
      if (ranking[i] >= gallery_labels.size()) fail_shape("ranking refers to gallery position ", ranking[i]);
      if (gallery_labels[ranking[i]] != r.label) continue;
      ++correct;
      if (correct == 1) r.first_match = i + 1;
      precision_sum += static_cast<double>(correct) / static_cast<double>(i + 1);
    }
    if (correct == 0) {
      ++report.num_skipped;
      continue;
    }
    r.average_precision = precision_sum / static_cast<double>(correct);
    for (std::size_t k = r.first_match; k <= kCmcDepth; ++k) hits[k - 1] += 1.0;
    report.mean_ap += r.average_precision;
    report.per_probe.push_back(std::move(r));
  }
  report.num_probes = report.per_probe.size();
  if (report.num_probes == 0) return report;
  const double n = static_cast<double>(report.num_probes);
  report.mean_ap /= n;
  report.cmc.resize(kCmcDepth);
  for (std::size_t k = 0; k < kCmcDepth; ++k) report.cmc[k] = hits[k] / n;
  report.rank1 = report.cmc[0];
  report.rank5 = report.cmc[4];
  report.rank10 = report.cmc[9];
  return report;
}

// Scores probe/gallery features of one split. `features` is indexed by
// dataset position. Probes whose candidate set is empty after view
// exclusion count as skipped.
inline RetrievalReport evaluate_split(std::span<const DisentangledFeatures> features, const Dataset& ds, const Split& split,
                                      const Scorer& scorer, const std::string& protocol_name) {
  std::vector<DisentangledFeatures> gallery;
  std::vector<int> gallery_labels;
  std::vector<int> gallery_views;
  for (std::size_t g : split.gallery) {
    gallery.push_back(features[g]);
    gallery_labels.push_back(ds.samples[g].identity);
    gallery_views.push_back(ds.samples[g].view);
  }
  std::vector<std::vector<std::size_t>> rankings;
  std::vector<int> probe_labels;
  std::vector<std::size_t> probe_positions;
  std::size_t empty_candidates = 0;
  for (std::size_t p : split.probe) {
    auto ranking = rank_gallery(features[p], gallery, scorer, split.exclude_same_view, ds.samples[p].view, gallery_views);
    if (ranking.empty()) {
      ++empty_candidates;
      continue;
    }
    rankings.push_back(std::move(ranking));
    probe_labels.push_back(ds.samples[p].identity);
    probe_positions.push_back(p);
  }
  if (rankings.empty()) fail_validation("no probe has gallery candidates under ", protocol_name);
  RetrievalReport report = compute_cmc_map(rankings, probe_labels, gallery_labels);
  report.num_skipped += empty_candidates;
  report.protocol = protocol_name;
  report.scoring = score_mode_name(scorer.mode);
  for (auto& r : report.per_probe) {
    r.probe = probe_positions[r.probe];
    for (auto& g : r.ranking) g = split.gallery[g];
  }
  return report;
}

// Expected Rank-1 of a random ranking: mean fraction of correct candidates.
inline double chance_rank1(const Dataset& ds, const Split& split) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t p : split.probe) {
    std::size_t candidates = 0;
    std::size_t correct = 0;
    for (std::size_t g : split.gallery) {
      if (split.exclude_same_view && ds.samples[g].view == ds.samples[p].view) continue;
      ++candidates;
      if (ds.samples[g].identity == ds.samples[p].identity) ++correct;
    }
    if (candidates == 0 || correct == 0) continue;
    total += static_cast<double>(correct) / static_cast<double>(candidates);
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

// Report JSON; per_probe rankings are dataset clip ids.
inline nlohmann::json report_to_json(const RetrievalReport& r, const Dataset* ds = nullptr) {
  nlohmann::json per_probe = nlohmann::json::array();
  for (const auto& p : r.per_probe) {
    nlohmann::json ranking = nlohmann::json::array();
    for (std::size_t g : p.ranking) {
      if (ds) {
        ranking.push_back(ds->samples[g].clip_id);
      } else {
        ranking.push_back(g);
      }
    }
    per_probe.push_back({{"probe", ds ? nlohmann::json(ds->samples[p.probe].clip_id) : nlohmann::json(p.probe)},
                         {"identity", p.label},
                         {"average_precision", p.average_precision},
                         {"first_match_rank", p.first_match},
                         {"ranking", std::move(ranking)}});
  }
  return {{"protocol", r.protocol}, {"scoring", r.scoring}, {"rank1", r.rank1},        {"rank5", r.rank5},
          {"rank10", r.rank10},     {"mAP", r.mean_ap},     {"cmc", r.cmc},            {"num_probes", r.num_probes},
          {"num_skipped", r.num_skipped}, {"per_probe", std::move(per_probe)}};
}

}  // namespace disenq
