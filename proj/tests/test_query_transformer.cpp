#include "disenq/query_transformer.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace disenq;
using disenq::testing::random_matrix;

namespace {

DisenQConfig small_config() {
  DisenQConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.queries_per_stream = 2;
  c.text_dim = 5;
  c.visual_dim = 6;
  c.ffn_dim = 12;
  c.init_std = 0.4;
  return c;
}

QueryBank make_bank(std::uint64_t seed, DisenQConfig cfg = small_config()) {
  Rng rng(seed);
  QueryBank bank(cfg, rng);
  // Move off the trivial initial point so every parameter matters.
  for (Parameter* p : bank.parameters()) p->value += random_matrix(rng, p->value.rows(), p->value.cols(), 0.3);
  return bank;
}

TextTriplet random_text(Rng& rng, int dim) {
  return TextTriplet(gaussian_vector(rng, dim, 1.0), gaussian_vector(rng, dim, 1.0), gaussian_vector(rng, dim, 1.0));
}

TEST(QueryTransformer, SingleQuerySelfAttention) {
  DisenQConfig cfg = small_config();
  cfg.queries_per_stream = 1;
  const QueryBank bank = make_bank(1, cfg);
  const AttentionParams& a = bank.layers[0].self_attn;
  const Matrix z = bank.queries[0].value;
  const Matrix w = ad::attention_weights(a, z, z, cfg.heads, 0);
  EXPECT_DOUBLE_EQ(w(0, 0), 1.0);
  // The attended value is the projected query itself.
  const Matrix v = (z * a.wv.value).rowwise() + a.bv.value.row(0);
  const Matrix attended = (v * a.wo.value).rowwise() + a.bo.value.row(0);
  ad::Tape t(false);
  const Matrix expected = t.value(ad::layer_norm_rows(t, t.constant(z + attended), t.param(bank.layers[0].self_norm.gain),
                                                      t.param(bank.layers[0].self_norm.bias)));
  EXPECT_LT((self_attend_isolated(z, bank) - expected).norm(), 1e-12);
}

TEST(QueryTransformer, IdenticalStreamInputsGiveIdenticalOutputs) {
  const QueryBank bank = make_bank(2);
  Rng rng(3);
  const Matrix z = random_matrix(rng, 2, 8);
  EXPECT_EQ(self_attend_isolated(z, bank, 0), self_attend_isolated(z, bank, 0));
}

TEST(QueryTransformer, CrossAttendOverRepeatedToken) {
  const QueryBank bank = make_bank(4);
  Rng rng(5);
  const RowVector v = random_matrix(rng, 1, 6);
  const VideoFeature video{v.replicate(5, 1)};
  const Matrix z = random_matrix(rng, 2, 8);
  const QueryLayer& l = bank.layers[0];
  const RowVector pv = v * bank.visual_proj_w[0].value + bank.visual_proj_b[0].value;
  const RowVector value = pv * l.cross_attn.wv.value + l.cross_attn.bv.value;
  const RowVector readout = value * l.cross_attn.wo.value + l.cross_attn.bo.value;
  ad::Tape t(false);
  const Matrix expected =
      t.value(ad::layer_norm_rows(t, t.constant(z.rowwise() + readout), t.param(l.cross_norm.gain), t.param(l.cross_norm.bias)));
  EXPECT_LT((cross_attend(z, video, Matrix(0, 5), bank) - expected).norm(), 1e-12);
}

TEST(QueryTransformer, AttentionWeightsNormalised) {
  const QueryBank bank = make_bank(6);
  Rng rng(7);
  const Matrix z = random_matrix(rng, 2, 8), ctx = random_matrix(rng, 9, 8, 3.0);
  for (int h = 0; h < 2; ++h) {
    const Matrix w = ad::attention_weights(bank.layers[1].cross_attn, z, ctx, 2, h);
    EXPECT_GE(w.minCoeff(), 0.0);
    for (Eigen::Index r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-12);
  }
}

TEST(QueryTransformer, TextTokenChangesCrossAttention) {
  const QueryBank bank = make_bank(8);
  Rng rng(9);
  const VideoFeature video{random_matrix(rng, 4, 6)};
  const Matrix z = random_matrix(rng, 2, 8);
  const Matrix a = cross_attend(z, video, Matrix(0, 5), bank);
  const Matrix b = cross_attend(z, video, Matrix::Zero(1, 5), bank);
  EXPECT_GT((a - b).norm(), 1e-6);
}

TEST(QueryTransformer, OutputShapesMatchAcrossModes) {
  const QueryBank bank = make_bank(10);
  Rng rng(11);
  const VideoFeature video{random_matrix(rng, 4, 6)};
  const TextTriplet text = random_text(rng, 5);
  const DisentangledFeatures tr = forward(video, &text, bank, Mode::kTrain);
  const DisentangledFeatures in = forward(video, nullptr, bank, Mode::kInfer);
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(tr.stream(s).size(), 8);
    EXPECT_EQ(in.stream(s).size(), 8);
  }
  EXPECT_GT((tr.biometrics - in.biometrics).norm(), 1e-9);
}

TEST(QueryTransformer, InvalidConfigRejected) {
  DisenQConfig cfg = small_config();
  cfg.layers = 0;
  Rng rng(1);
  EXPECT_THROW(QueryBank(cfg, rng), ValidationError);
  cfg = small_config();
  cfg.heads = 3;
  EXPECT_THROW(QueryBank(cfg, rng), ValidationError);
  cfg = small_config();
  cfg.streams = 2;
  EXPECT_THROW(QueryBank(cfg, rng), ValidationError);
}

TEST(QueryTransformer, InferenceNeverReadsText) {
  const QueryBank bank = make_bank(12);
  Rng rng(13);
  const VideoFeature video{random_matrix(rng, 4, 6)};
  const TextTriplet poisoned = TextTriplet::poisoned();
  const DisentangledFeatures a = forward(video, &poisoned, bank, Mode::kInfer);
  const DisentangledFeatures b = forward(video, nullptr, bank, Mode::kInfer);
  EXPECT_EQ(a.biometrics, b.biometrics);
  EXPECT_THROW(forward(video, &poisoned, bank, Mode::kTrain), PoisonedAccess);
  EXPECT_THROW(forward(video, nullptr, bank, Mode::kTrain), ValidationError);
}

TEST(QueryTransformer, ZeroCrossValuesDetachVideo) {
  QueryBank bank = make_bank(14);
  for (auto& l : bank.layers) {
    l.cross_attn.wv.value.setZero();
    l.cross_attn.bv.value.setZero();
  }
  Rng rng(15);
  const Matrix f = random_matrix(rng, 4, 6);
  const DisentangledFeatures a = forward(VideoFeature{f}, nullptr, bank, Mode::kInfer);
  const DisentangledFeatures b = forward(VideoFeature{f + random_matrix(rng, 4, 6)}, nullptr, bank, Mode::kInfer);
  EXPECT_LT((a.biometrics - b.biometrics).norm(), 1e-12);
}

TEST(QueryTransformer, StreamsAreIsolated) {
  const QueryBank bank = make_bank(16);
  Rng rng(17);
  const Matrix f = random_matrix(rng, 4, 6);
  const TextTriplet text = random_text(rng, 5);
  for (int s = 0; s < 3; ++s) {
    ad::Tape t;
    ad::StreamOutputs o = ad::forward(t, bank, t.constant(f), &text, Mode::kTrain);
    std::pair<ad::Var, Matrix> seed{o.pooled[static_cast<std::size_t>(s)], Matrix::Ones(1, 8)};
    t.backward(std::span<const std::pair<ad::Var, Matrix>>(&seed, 1));
    for (int other = 0; other < 3; ++other) {
      EXPECT_EQ(t.reached(bank.queries[static_cast<std::size_t>(other)]), other == s) << s << " vs " << other;
    }
  }

  // Finite perturbation of another stream's queries leaves this stream bit-identical.
  QueryBank moved = make_bank(16);
  moved.queries[kMotion].value += random_matrix(rng, 2, 8);
  moved.queries[kNonBiometrics].value += random_matrix(rng, 2, 8);
  const DisentangledFeatures a = forward(VideoFeature{f}, &text, bank, Mode::kTrain);
  const DisentangledFeatures b = forward(VideoFeature{f}, &text, moved, Mode::kTrain);
  EXPECT_EQ(a.biometrics, b.biometrics);
  EXPECT_NE(a.motion, b.motion);
}

TEST(QueryTransformer, SharedWeightsAffectAllStreams) {
  QueryBank bank = make_bank(18);
  Rng rng(19);
  const VideoFeature video{random_matrix(rng, 4, 6)};
  const DisentangledFeatures a = forward(video, nullptr, bank, Mode::kInfer);
  bank.layers[1].ffn_w2.value(0, 0) += 0.5;
  const DisentangledFeatures b = forward(video, nullptr, bank, Mode::kInfer);
  for (int s = 0; s < 3; ++s) EXPECT_GT((a.stream(s) - b.stream(s)).norm(), 1e-9) << s;
}

TEST(QueryTransformer, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (bool train : {true, false}) {
      QueryBank bank = make_bank(seed);
      Rng rng(seed + 100);
      const Matrix f = random_matrix(rng, 4, 6);
      const TextTriplet text = random_text(rng, 5);
      const Mode mode = train ? Mode::kTrain : Mode::kInfer;
      std::array<Matrix, 3> w;
      for (auto& m : w) m = random_matrix(rng, 1, 8);

      ad::Tape t;
      ad::StreamOutputs o = ad::forward(t, bank, t.constant(f), &text, mode, {true, false, true});
      std::vector<std::pair<ad::Var, Matrix>> seeds;
      for (std::size_t s = 0; s < 3; ++s) seeds.emplace_back(o.pooled[s], w[s]);
      t.backward(seeds);
      // A key bias shifts every score in a row equally, so softmax cancels it. Its
      // gradient is exactly zero and finite differences only see rounding noise there.
      std::vector<Matrix> analytic, key_bias;
      std::vector<Matrix*> wrt, key_bias_wrt;
      for (Parameter* p : bank.parameters()) {
        const bool is_key_bias = p->name.ends_with("attn.bk");
        (is_key_bias ? key_bias : analytic).push_back(t.param_grad(*p));
        (is_key_bias ? key_bias_wrt : wrt).push_back(&p->value);
      }
      ASSERT_FALSE(key_bias.empty());
      auto loss = [&] {
        ad::Tape u(false);
        ad::StreamOutputs q = ad::forward(u, bank, u.constant(f), &text, mode, {true, false, true});
        double total = 0;
        for (std::size_t s = 0; s < 3; ++s) total += u.value(q.pooled[s]).cwiseProduct(w[s]).sum();
        return total;
      };
      // Text projections receive no gradient in inference mode; both sides are then zero.
      EXPECT_LT(disenq::testing::max_rel_error(analytic, disenq::testing::numeric_grads(wrt, loss), 1e-7), 1e-4)
          << "seed " << seed << (train ? " train" : " infer");
      const std::vector<Matrix> key_bias_numeric = disenq::testing::numeric_grads(key_bias_wrt, loss);
      for (std::size_t i = 0; i < key_bias.size(); ++i) {
        EXPECT_LT(key_bias[i].cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT(key_bias_numeric[i].cwiseAbs().maxCoeff(), 1e-8);
      }
    }
  }
}

TEST(QueryTransformer, SingleStreamAliasesOutputs) {
  DisenQConfig cfg = small_config();
  cfg.streams = 1;
  const QueryBank bank = make_bank(20, cfg);
  Rng rng(21);
  const DisentangledFeatures o = forward(VideoFeature{random_matrix(rng, 4, 6)}, nullptr, bank, Mode::kInfer);
  EXPECT_EQ(o.biometrics, o.motion);
  EXPECT_EQ(o.motion, o.non_biometrics);
}

}  // namespace
