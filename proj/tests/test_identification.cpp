#include "disenq/identification.hpp"
#include "disenq/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace disenq;
using disenq::testing::random_matrix;

namespace {

DisentangledFeatures random_features(Rng& rng, int dim = 6) {
  return {random_matrix(rng, 1, dim), random_matrix(rng, 1, dim), random_matrix(rng, 1, dim)};
}

AdaptiveWeigher trained_looking_weigher(std::uint64_t seed) {
  AdaptiveWeigher w(seed);
  Rng rng(seed + 1);
  w.w2.value = random_matrix(rng, AdaptiveWeigher::kHidden, 2, 2.0);
  w.b2.value = random_matrix(rng, 1, 2);
  return w;
}

TEST(Weigher, UntrainedIsEven) {
  const AdaptiveWeigher w(3);
  const auto a = w.weights(0.3, -0.8);
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
}

TEST(Weigher, WeightsOnSimplex) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const AdaptiveWeigher w = trained_looking_weigher(seed);
    for (double sb = -1.0; sb <= 1.0; sb += 0.05) {
      for (double sm = -1.0; sm <= 1.0; sm += 0.05) {
        const auto a = w.weights(sb, sm);
        EXPECT_GE(a[0], 0.0);
        EXPECT_GE(a[1], 0.0);
        EXPECT_NEAR(a[0] + a[1], 1.0, 1e-6);
      }
    }
  }
}

TEST(PairSimilarity, Examples) {
  Rng rng(1);
  const AdaptiveWeigher w = trained_looking_weigher(1);
  const DisentangledFeatures a = random_features(rng);
  EXPECT_NEAR(pair_similarity(a, a, w), 1.0, 1e-12);

  // Equal stream similarities give that similarity whatever the weights.
  DisentangledFeatures b = a;
  b.biometrics = random_matrix(rng, 1, 6);
  b.motion = b.biometrics;
  DisentangledFeatures c = a;
  c.motion = c.biometrics;
  const double s = cosine(b.biometrics, c.biometrics);
  EXPECT_NEAR(pair_similarity(b, c, w), s, 1e-12);

  // Fixed weights (0.5, 0.5) on sims (0.8, 0.6).
  DisentangledFeatures p, q;
  p.biometrics = p.motion = RowVector::Unit(2, 0);
  q.biometrics.resize(2);
  q.biometrics << 0.8, 0.6;
  q.motion.resize(2);
  q.motion << 0.6, 0.8;
  EXPECT_NEAR(Scorer{ScoreMode::kFixed}(p, q), 0.7, 1e-12);
  EXPECT_NEAR(pair_similarity(p, q, AdaptiveWeigher(0)), 0.7, 1e-12);
}

TEST(PairSimilarity, BoundedAndSymmetric) {
  Rng rng(2);
  const AdaptiveWeigher w = trained_looking_weigher(2);
  for (int i = 0; i < 200; ++i) {
    const DisentangledFeatures a = random_features(rng), b = random_features(rng);
    const double s = pair_similarity(a, b, w);
    EXPECT_GE(s, -1.0 - 1e-12);
    EXPECT_LE(s, 1.0 + 1e-12);
    EXPECT_DOUBLE_EQ(s, pair_similarity(b, a, w));
  }
  DisentangledFeatures z{RowVector::Zero(3), RowVector::Zero(3), RowVector::Zero(3)};
  EXPECT_EQ(Scorer{ScoreMode::kFixed}(z, z), 0.0);
}

TEST(RankGallery, SelfFirstAndTieRule) {
  Rng rng(3);
  std::vector<DisentangledFeatures> gallery;
  for (int i = 0; i < 6; ++i) gallery.push_back(random_features(rng));
  const Scorer fixed{ScoreMode::kFixed};
  EXPECT_EQ(rank_gallery(gallery[4], gallery, fixed)[0], 4u);

  gallery[5] = gallery[1];
  const auto order = rank_gallery(gallery[1], gallery, fixed);
  EXPECT_EQ(order[0], 1u);
  EXPECT_EQ(order[1], 5u);
  const std::vector<double> tied{0.2, 0.5, 0.5, 0.1};
  EXPECT_EQ(rank_scores(tied), (std::vector<std::size_t>{1, 2, 0, 3}));
}

TEST(RankGallery, ViewExclusion) {
  Rng rng(4);
  std::vector<DisentangledFeatures> gallery;
  for (int i = 0; i < 6; ++i) gallery.push_back(random_features(rng));
  const std::vector<int> views{0, 1, 0, 1, 0, 1};
  const auto order = rank_gallery(gallery[0], gallery, Scorer{ScoreMode::kFixed}, true, 0, views);
  ASSERT_EQ(order.size(), 3u);
  for (auto g : order) EXPECT_EQ(views[g], 1);
  const std::vector<int> same(6, 0);
  EXPECT_TRUE(rank_gallery(gallery[0], gallery, Scorer{ScoreMode::kFixed}, true, 0, same).empty());
}

TEST(RankGallery, PositiveScalingKeepsOrder) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-1, 1), k(0.01, 100);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(20);
    for (auto& x : s) x = u(rng);
    std::vector<double> scaled = s;
    const double c = k(rng);
    for (auto& x : scaled) x *= c;
    EXPECT_EQ(rank_scores(s), rank_scores(scaled));
  }
}

// Straight from the definitions: top-k hit test and precision at each correct position.
struct Reference {
  double rank[3] = {0, 0, 0};
  double map = 0;
  std::size_t scored = 0;
};

Reference brute_force(const std::vector<std::vector<std::size_t>>& rankings, const std::vector<int>& probe_labels,
                      const std::vector<int>& gallery_labels) {
  Reference ref;
  const std::size_t ks[3] = {1, 5, 10};
  for (std::size_t p = 0; p < rankings.size(); ++p) {
    std::vector<std::size_t> correct_positions;
    for (std::size_t i = 0; i < rankings[p].size(); ++i) {
      if (gallery_labels[rankings[p][i]] == probe_labels[p]) correct_positions.push_back(i + 1);
    }
    if (correct_positions.empty()) continue;
    ++ref.scored;
    for (int k = 0; k < 3; ++k) {
      bool hit = false;
      for (std::size_t i = 0; i < std::min(ks[k], rankings[p].size()); ++i) {
        hit = hit || gallery_labels[rankings[p][i]] == probe_labels[p];
      }
      ref.rank[k] += hit ? 1 : 0;
    }
    double ap = 0;
    for (std::size_t j = 0; j < correct_positions.size(); ++j) {
      std::size_t in_top = 0;
      for (std::size_t i = 0; i < correct_positions[j]; ++i) {
        in_top += gallery_labels[rankings[p][i]] == probe_labels[p] ? 1 : 0;
      }
      ap += static_cast<double>(in_top) / static_cast<double>(correct_positions[j]);
    }
    ref.map += ap / static_cast<double>(correct_positions.size());
  }
  for (auto& r : ref.rank) r /= static_cast<double>(ref.scored);
  ref.map /= static_cast<double>(ref.scored);
  return ref;
}

TEST(CmcMap, MatchesBruteForceReference) {
  Rng rng(6);
  std::uniform_int_distribution<int> size(1, 50);
  for (int trial = 0; trial < 300; ++trial) {
    const int P = size(rng), G = size(rng);
    std::uniform_int_distribution<int> label(0, std::max(1, G / 3));
    std::vector<int> gallery_labels(static_cast<std::size_t>(G)), probe_labels;
    for (auto& l : gallery_labels) l = label(rng);
    std::vector<std::vector<std::size_t>> rankings;
    for (int p = 0; p < P; ++p) {
      probe_labels.push_back(gallery_labels[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, G - 1)(rng))]);
      std::vector<std::size_t> r(static_cast<std::size_t>(G));
      std::iota(r.begin(), r.end(), 0);
      std::shuffle(r.begin(), r.end(), rng);
      rankings.push_back(std::move(r));
    }
    const RetrievalReport rep = compute_cmc_map(rankings, probe_labels, gallery_labels);
    const Reference ref = brute_force(rankings, probe_labels, gallery_labels);
    ASSERT_EQ(rep.num_probes, ref.scored);
    EXPECT_NEAR(rep.rank1, ref.rank[0], 1e-9);
    EXPECT_NEAR(rep.rank5, ref.rank[1], 1e-9);
    EXPECT_NEAR(rep.rank10, ref.rank[2], 1e-9);
    EXPECT_NEAR(rep.mean_ap, ref.map, 1e-9);
    EXPECT_LE(rep.rank1, rep.rank5);
    EXPECT_LE(rep.rank5, rep.rank10);
  }
}

TEST(CmcMap, Examples) {
  const std::vector<int> gallery{7, 3, 7};
  const std::vector<std::vector<std::size_t>> one{{0, 1, 2}};
  const RetrievalReport r = compute_cmc_map(one, std::vector<int>{7}, gallery);
  EXPECT_NEAR(r.mean_ap, (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_EQ(r.rank1, 1.0);

  const std::vector<std::vector<std::size_t>> perfect{{1, 0, 2}, {0, 2, 1}};
  const RetrievalReport q = compute_cmc_map(perfect, std::vector<int>{3, 7}, gallery);
  EXPECT_EQ(q.rank1, 1.0);
  EXPECT_EQ(q.mean_ap, 1.0);

  const std::vector<std::vector<std::size_t>> none{{0, 1, 2}};
  EXPECT_EQ(compute_cmc_map(none, std::vector<int>{9}, gallery).num_skipped, 1u);
  EXPECT_THROW(compute_cmc_map(std::vector<std::vector<std::size_t>>{}, std::vector<int>{}, gallery), ValidationError);
}

TEST(CmcMap, RandomScoresNearChance) {
  Rng rng(8);
  const int G = 40;
  std::vector<int> gallery(G);
  for (int g = 0; g < G; ++g) gallery[static_cast<std::size_t>(g)] = g % 10;  // 4 correct per label
  std::vector<std::vector<std::size_t>> rankings;
  std::vector<int> labels;
  std::normal_distribution<double> n(0, 1);
  for (int p = 0; p < 20000; ++p) {
    std::vector<double> s(G);
    for (auto& x : s) x = n(rng);
    rankings.push_back(rank_scores(s));
    labels.push_back(p % 10);
  }
  EXPECT_NEAR(compute_cmc_map(rankings, labels, gallery).rank1, 4.0 / 40.0, 0.01);
}

Dataset tiny_dataset(int views) {
  Dataset ds;
  ds.num_identities = 4;
  ds.num_actions = 2;
  ds.num_views = views;
  int n = 0;
  for (int id = 0; id < 4; ++id) {
    for (int a = 0; a < 2; ++a) {
      for (int v = 0; v < views; ++v) {
        VideoSample s;
        s.clip_id = "c" + std::to_string(n++);
        s.identity = id;
        s.action = a;
        s.view = v;
        ds.samples.push_back(s);
      }
    }
  }
  return ds;
}

TEST(EvaluateSplit, ExclusionVacuousOnSingleView) {
  const Dataset ds = tiny_dataset(1);
  Rng rng(9);
  std::vector<DisentangledFeatures> feats;
  for (std::size_t i = 0; i < ds.size(); ++i) feats.push_back(random_features(rng));
  Split split;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.samples[i].action == 0 ? split.gallery : split.probe).push_back(i);
  const Scorer sc{ScoreMode::kFixed};
  const RetrievalReport inc = evaluate_split(feats, ds, split, sc, "a");
  // With one view everything shares the probe's view, so exclusion empties each candidate set.
  split.exclude_same_view = true;
  EXPECT_THROW(evaluate_split(feats, ds, split, sc, "b"), ValidationError);
  EXPECT_GE(inc.rank5, inc.rank1);
}

TEST(EvaluateSplit, DeterministicAndMapsDatasetPositions) {
  const Dataset ds = tiny_dataset(2);
  Rng rng(10);
  std::vector<DisentangledFeatures> feats;
  for (std::size_t i = 0; i < ds.size(); ++i) feats.push_back(random_features(rng));
  Split split;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.samples[i].action == 0 ? split.gallery : split.probe).push_back(i);
  split.exclude_same_view = true;
  const AdaptiveWeigher w = trained_looking_weigher(3);
  const Scorer sc{ScoreMode::kAdaptive, &w};
  const auto a = report_to_json(evaluate_split(feats, ds, split, sc, "p"), &ds);
  const auto b = report_to_json(evaluate_split(feats, ds, split, sc, "p"), &ds);
  EXPECT_EQ(a.dump(), b.dump());
  for (const auto& probe : a["per_probe"]) {
    EXPECT_EQ(probe["ranking"].size(), 4u);  // only the other view survives
  }
  EXPECT_EQ(a["scoring"], "adaptive");
  EXPECT_NEAR(chance_rank1(ds, split), 0.25, 1e-12);
}

TEST(WeigherLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    AdaptiveWeigher w = trained_looking_weigher(seed);
    w.offset.value(0, 0) = 0.1;
    Rng rng(seed + 50);
    const Matrix fb = random_matrix(rng, 8, 5), fm = random_matrix(rng, 8, 5);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    for (Parameter* p : w.parameters()) p->zero_grad();
    weigher_pair_loss(w, fb, fm, labels, 5.0, 1.0);
    std::vector<Matrix> analytic;
    std::vector<Matrix*> wrt;
    for (Parameter* p : w.parameters()) {
      analytic.push_back(p->grad);
      wrt.push_back(&p->value);
    }
    auto f = [&] {
      AdaptiveWeigher copy = w;
      return weigher_pair_loss(copy, fb, fm, labels, 5.0, 0.0);
    };
    EXPECT_LT(disenq::testing::max_rel_error(analytic, disenq::testing::numeric_grads(wrt, f)), 1e-4) << seed;
  }
}

}  // namespace
