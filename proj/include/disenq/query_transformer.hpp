#pragma once

// Disentangling querying transformer.
//
// Three learnable query sets (biometrics, motion, non-biometrics) run through
// the same stack of layers in three separate passes. Each layer applies
// self-attention within one stream, cross-attention over the concatenation of
// the projected video tokens and that stream's projected text token, and a
// feed-forward block; all sublayers are post-norm residual. Streams share
// every weight but never see each other's activations.

#include "disenq/autodiff.hpp"
#include "disenq/encoder.hpp"
#include "disenq/world.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace disenq {

enum class Mode { kTrain, kInfer };

// Stream indices.
inline constexpr int kBiometrics = 0;
inline constexpr int kMotion = 1;
inline constexpr int kNonBiometrics = 2;

inline const char* stream_name(int s) {
  switch (s) {
    case kBiometrics: return "biometrics";
    case kMotion: return "motion";
    case kNonBiometrics: return "non_biometrics";
    default: return "?";
  }
}

struct DisenQConfig {
  int layers = 2;
  int heads = 4;
  int model_dim = 64;
  int queries_per_stream = 4;
  int text_dim = 32;
  int visual_dim = 32;
  int ffn_dim = 128;
  // 3 = disentangled streams; 1 = single-stream ablation (no disentanglement).
  int streams = 3;
  // One visual and one text input projection for all streams, or one per stream.
  bool shared_input_projection = true;
  double init_std = 0.02;

  bool operator==(const DisenQConfig&) const = default;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) fail_validation("disenq: ", name, " must be >= 1, got ", v);
    };
    positive(layers, "layers");
    positive(heads, "heads");
    positive(model_dim, "model_dim");
    positive(queries_per_stream, "queries_per_stream");
    positive(text_dim, "text_dim");
    positive(visual_dim, "visual_dim");
    positive(ffn_dim, "ffn_dim");
    if (model_dim % heads != 0) fail_validation("disenq: model_dim ", model_dim, " not divisible by heads ", heads);
    if (streams != 1 && streams != 3) fail_validation("disenq: streams must be 1 or 3, got ", streams);
    if (!(init_std > 0.0)) fail_validation("disenq: init_std must be positive");
  }
};

struct AttentionParams {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;

  AttentionParams() = default;
  AttentionParams(const std::string& prefix, int dim, Rng& rng, double std) {
    auto w = [&](const char* n) { return Parameter(prefix + n, gaussian_matrix(rng, dim, dim, std)); };
    auto b = [&](const char* n) { return Parameter(prefix + n, Matrix::Zero(1, dim)); };
    wq = w(".wq");
    bq = b(".bq");
    wk = w(".wk");
    bk = b(".bk");
    wv = w(".wv");
    bv = b(".bv");
    wo = w(".wo");
    bo = b(".bo");
  }

  void collect(ParameterRefs& out) {
    for (Parameter* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) out.push_back(p);
  }
};

struct NormParams {
  Parameter gain, bias;

  NormParams() = default;
  NormParams(const std::string& prefix, int dim)
      : gain(prefix + ".gain", Matrix::Ones(1, dim)), bias(prefix + ".bias", Matrix::Zero(1, dim)) {}

  void collect(ParameterRefs& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

struct QueryLayer {
  AttentionParams self_attn;
  NormParams self_norm;
  AttentionParams cross_attn;
  NormParams cross_norm;
  Parameter ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  NormParams ffn_norm;

  void collect(ParameterRefs& out) {
    self_attn.collect(out);
    self_norm.collect(out);
    cross_attn.collect(out);
    cross_norm.collect(out);
    for (Parameter* p : {&ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2}) out.push_back(p);
    ffn_norm.collect(out);
  }
};

// Learnable queries plus the shared layer stack and input projections.
struct QueryBank {
  DisenQConfig config;
  std::vector<Parameter> queries;          // one K x D_q matrix per stream
  std::vector<Parameter> visual_proj_w;    // D x D_q, one or one-per-stream
  std::vector<Parameter> visual_proj_b;    // 1 x D_q
  std::vector<Parameter> text_proj_w;      // D_t x D_q
  std::vector<Parameter> text_proj_b;      // 1 x D_q
  std::vector<QueryLayer> layers;

  QueryBank() = default;

  QueryBank(const DisenQConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    const double s = cfg.init_std;
    const int d = cfg.model_dim;
    for (int i = 0; i < cfg.streams; ++i) {
      queries.emplace_back(detail::concat("disenq.queries.", stream_name(i)),
                           gaussian_matrix(rng, cfg.queries_per_stream, d, 0.02));
    }
    const int projections = cfg.shared_input_projection ? 1 : cfg.streams;
    for (int i = 0; i < projections; ++i) {
      visual_proj_w.emplace_back(detail::concat("disenq.visual_proj", i, ".w"), gaussian_matrix(rng, cfg.visual_dim, d, s));
      visual_proj_b.emplace_back(detail::concat("disenq.visual_proj", i, ".b"), Matrix::Zero(1, d));
      text_proj_w.emplace_back(detail::concat("disenq.text_proj", i, ".w"), gaussian_matrix(rng, cfg.text_dim, d, s));
      text_proj_b.emplace_back(detail::concat("disenq.text_proj", i, ".b"), Matrix::Zero(1, d));
    }
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = detail::concat("disenq.layer", l);
      QueryLayer layer;
      layer.self_attn = AttentionParams(p + ".self_attn", d, rng, s);
      layer.self_norm = NormParams(p + ".self_norm", d);
      layer.cross_attn = AttentionParams(p + ".cross_attn", d, rng, s);
      layer.cross_norm = NormParams(p + ".cross_norm", d);
      layer.ffn_w1 = Parameter(p + ".ffn.w1", gaussian_matrix(rng, d, cfg.ffn_dim, s));
      layer.ffn_b1 = Parameter(p + ".ffn.b1", Matrix::Zero(1, cfg.ffn_dim));
      layer.ffn_w2 = Parameter(p + ".ffn.w2", gaussian_matrix(rng, cfg.ffn_dim, d, s));
      layer.ffn_b2 = Parameter(p + ".ffn.b2", Matrix::Zero(1, d));
      layer.ffn_norm = NormParams(p + ".ffn_norm", d);
      layers.push_back(std::move(layer));
    }
  }

  // Stable order used by the optimizer and checkpoints.
  ParameterRefs parameters() {
    ParameterRefs out;
    for (auto& q : queries) out.push_back(&q);
    for (std::size_t i = 0; i < visual_proj_w.size(); ++i) {
      out.push_back(&visual_proj_w[i]);
      out.push_back(&visual_proj_b[i]);
      out.push_back(&text_proj_w[i]);
      out.push_back(&text_proj_b[i]);
    }
    for (auto& l : layers) l.collect(out);
    return out;
  }

  std::size_t projection_index(int stream) const { return config.shared_input_projection ? 0 : static_cast<std::size_t>(stream); }
};

struct DisentangledFeatures {
  RowVector biometrics;      // F_b
  RowVector motion;          // F_m
  RowVector non_biometrics;  // F_b̂

  const RowVector& stream(int s) const {
    switch (s) {
      case kBiometrics: return biometrics;
      case kMotion: return motion;
      case kNonBiometrics: return non_biometrics;
      default: fail_validation("stream index out of range: ", s);
    }
  }
};

namespace ad {

// Multi-head attention: queries (M x D) attend over pre-projected keys and values (C x D).
inline Var attend(Tape& t, const AttentionParams& p, Var queries, Var keys, Var values, int heads) {
  const Eigen::Index d = t.value(queries).cols();
  const Eigen::Index dh = d / heads;
  Var q = affine(t, queries, t.param(p.wq), t.param(p.bq));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(t, q, h * dh, dh);
    Var kh = slice_cols(t, keys, h * dh, dh);
    Var vh = slice_cols(t, values, h * dh, dh);
    Var weights = softmax_rows(t, scale(t, matmul_nt(t, qh, kh), inv_sqrt));
    outs.push_back(matmul(t, weights, vh));
  }
  Var merged = heads == 1 ? outs[0] : concat_cols(t, outs);
  return affine(t, merged, t.param(p.wo), t.param(p.bo));
}

// Attention weights (M x C) of one head, for inspection.
inline Matrix attention_weights(const AttentionParams& p, const Matrix& queries, const Matrix& context, int heads, int head) {
  const Eigen::Index d = queries.cols();
  const Eigen::Index dh = d / heads;
  Matrix q = (queries * p.wq.value).rowwise() + p.bq.value.row(0);
  Matrix k = (context * p.wk.value).rowwise() + p.bk.value.row(0);
  Matrix s = q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() / std::sqrt(double(dh));
  return softmax_rows_value(s);
}

// LN(x + SelfAttn(x)) over one stream's queries only.
inline Var self_attend_isolated(Tape& t, const QueryLayer& layer, Var stream, int heads) {
  const AttentionParams& a = layer.self_attn;
  Var k = affine(t, stream, t.param(a.wk), t.param(a.bk));
  Var v = affine(t, stream, t.param(a.wv), t.param(a.bv));
  Var attended = attend(t, a, stream, k, v, heads);
  return layer_norm_rows(t, add(t, stream, attended), t.param(layer.self_norm.gain), t.param(layer.self_norm.bias));
}

// Cross-attention keys/values of the visual part of the context, shared by
// every stream that uses the same input projection.
struct VisualContext {
  Var keys;
  Var values;
};

inline VisualContext visual_context(Tape& t, const QueryLayer& layer, Var projected_visual) {
  const AttentionParams& a = layer.cross_attn;
  return {affine(t, projected_visual, t.param(a.wk), t.param(a.bk)),
          affine(t, projected_visual, t.param(a.wv), t.param(a.bv))};
}

// LN(x + CrossAttn(x, [F; T_x])). With no text rows, the context is F alone.
inline Var cross_attend(Tape& t, const QueryLayer& layer, Var stream, const VisualContext& visual,
                        std::optional<Var> projected_text, int heads) {
  const AttentionParams& a = layer.cross_attn;
  Var keys = visual.keys;
  Var values = visual.values;
  if (projected_text) {
    Var tk = affine(t, *projected_text, t.param(a.wk), t.param(a.bk));
    Var tv = affine(t, *projected_text, t.param(a.wv), t.param(a.bv));
    const std::array<Var, 2> kparts{keys, tk};
    const std::array<Var, 2> vparts{values, tv};
    keys = concat_rows(t, kparts);
    values = concat_rows(t, vparts);
  }
  Var attended = attend(t, a, stream, keys, values, heads);
  return layer_norm_rows(t, add(t, stream, attended), t.param(layer.cross_norm.gain), t.param(layer.cross_norm.bias));
}

inline Var feed_forward(Tape& t, const QueryLayer& layer, Var x) {
  Var h = gelu(t, affine(t, x, t.param(layer.ffn_w1), t.param(layer.ffn_b1)));
  Var y = affine(t, h, t.param(layer.ffn_w2), t.param(layer.ffn_b2));
  return layer_norm_rows(t, add(t, x, y), t.param(layer.ffn_norm.gain), t.param(layer.ffn_norm.bias));
}

// Pooled stream outputs (1 x D_q each). In single-stream mode all three
// entries alias the one stream.
struct StreamOutputs {
  std::array<Var, 3> pooled;
};

// `text_keep[s]` drops stream s's text token from the context when false
// (training-time modality dropout); ignored in inference mode.
inline StreamOutputs forward(Tape& t, const QueryBank& bank, Var video, const TextTriplet* texts, Mode mode,
                             std::array<bool, 3> text_keep = {true, true, true}) {
  const DisenQConfig& cfg = bank.config;
  if (t.value(video).cols() != cfg.visual_dim) {
    fail_shape("video feature dim ", t.value(video).cols(), " != disenq visual_dim ", cfg.visual_dim);
  }
  if (t.value(video).rows() < 1) fail_shape("video feature has no tokens");
  if (mode == Mode::kTrain && texts == nullptr) fail_validation("training-mode forward requires a text triplet");

  const std::size_t projections = cfg.shared_input_projection ? 1 : static_cast<std::size_t>(cfg.streams);
  std::vector<Var> projected_visual;
  for (std::size_t i = 0; i < projections; ++i) {
    projected_visual.push_back(affine(t, video, t.param(bank.visual_proj_w[i]), t.param(bank.visual_proj_b[i])));
  }

  // Projected text rows for each stream (train mode only; never touched in infer mode).
  std::array<std::optional<Var>, 3> text_rows;
  if (mode == Mode::kTrain) {
    if (texts->dim() != cfg.text_dim) fail_shape("text dim ", texts->dim(), " != disenq text_dim ", cfg.text_dim);
    auto project = [&](int stream_text, std::size_t proj) {
      Var raw = t.constant(texts->stream(stream_text).transpose());
      return affine(t, raw, t.param(bank.text_proj_w[proj]), t.param(bank.text_proj_b[proj]));
    };
    if (cfg.streams == 3) {
      for (int s = 0; s < 3; ++s) {
        if (text_keep[static_cast<std::size_t>(s)]) text_rows[static_cast<std::size_t>(s)] = project(s, bank.projection_index(s));
      }
    } else {
      std::vector<Var> rows;
      for (int s = 0; s < 3; ++s) {
        if (text_keep[static_cast<std::size_t>(s)]) rows.push_back(project(s, 0));
      }
      if (!rows.empty()) text_rows[0] = rows.size() == 1 ? rows[0] : concat_rows(t, rows);
    }
  }

  std::vector<Var> state;
  for (int s = 0; s < cfg.streams; ++s) state.push_back(t.param(bank.queries[static_cast<std::size_t>(s)]));
  for (const QueryLayer& layer : bank.layers) {
    std::vector<VisualContext> contexts;
    for (Var pv : projected_visual) contexts.push_back(visual_context(t, layer, pv));
    for (int s = 0; s < cfg.streams; ++s) {
      const auto si = static_cast<std::size_t>(s);
      Var x = self_attend_isolated(t, layer, state[si], cfg.heads);
      x = cross_attend(t, layer, x, contexts[bank.projection_index(s)], text_rows[si], cfg.heads);
      state[si] = feed_forward(t, layer, x);
    }
  }
  StreamOutputs out;
  if (cfg.streams == 3) {
    for (std::size_t s = 0; s < 3; ++s) out.pooled[s] = mean_rows(t, state[s]);
  } else {
    Var pooled = mean_rows(t, state[0]);
    out.pooled = {pooled, pooled, pooled};
  }
  return out;
}

}  // namespace ad

// Matrix-level conveniences (no gradient tracking).

inline Matrix self_attend_isolated(const Matrix& stream_queries, const QueryBank& bank, int layer = 0) {
  if (stream_queries.cols() != bank.config.model_dim) fail_shape("stream queries must have ", bank.config.model_dim, " columns");
  ad::Tape t(false);
  return t.value(ad::self_attend_isolated(t, bank.layers.at(static_cast<std::size_t>(layer)), t.constant(stream_queries),
                                          bank.config.heads));
}

// Cross-attention of one stream over [projected F; projected T_x]. Pass an
// empty text matrix (0 rows) for the inference-mode context.
inline Matrix cross_attend(const Matrix& stream_queries, const VideoFeature& video, const Matrix& text_rows,
                           const QueryBank& bank, int layer = 0, int stream = kBiometrics) {
  if (video.tokens.size() == 0) fail_shape("cross_attend requires a video feature");
  if (stream_queries.cols() != bank.config.model_dim) fail_shape("stream queries must have ", bank.config.model_dim, " columns");
  ad::Tape t(false);
  const std::size_t proj = bank.projection_index(stream);
  ad::Var pv = ad::affine(t, t.constant(video.tokens), t.param(bank.visual_proj_w[proj]), t.param(bank.visual_proj_b[proj]));
  const QueryLayer& l = bank.layers.at(static_cast<std::size_t>(layer));
  ad::VisualContext ctx = ad::visual_context(t, l, pv);
  std::optional<ad::Var> text;
  if (text_rows.rows() > 0) {
    text = ad::affine(t, t.constant(text_rows), t.param(bank.text_proj_w[proj]), t.param(bank.text_proj_b[proj]));
  }
  return t.value(ad::cross_attend(t, l, t.constant(stream_queries), ctx, text, bank.config.heads));
}

inline DisentangledFeatures forward(const VideoFeature& video, const TextTriplet* texts, const QueryBank& bank, Mode mode) {
  ad::Tape t(false);
  ad::StreamOutputs o = ad::forward(t, bank, t.constant(video.tokens), texts, mode);
  return {t.value(o.pooled[0]), t.value(o.pooled[1]), t.value(o.pooled[2])};
}

}  // namespace disenq
