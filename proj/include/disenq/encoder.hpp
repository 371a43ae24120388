#pragma once

// Per-frame token projection with learned frame-position embeddings, followed
// by temporal attention pooling applied independently at every token position.

#include "disenq/autodiff.hpp"
#include "disenq/world.hpp"

#include <span>
#include <vector>

namespace disenq {

struct EncoderConfig {
  int tokens = 8;
  int dim = 32;
  int max_frames = 8;

  bool operator==(const EncoderConfig&) const = default;

  void validate() const {
    if (tokens < 1 || dim < 1 || max_frames < 1) fail_validation("encoder: tokens, dim and max_frames must be >= 1");
  }
};

struct EncoderParams {
  EncoderConfig config;
  Parameter projection;  // dim x dim, applied as tokens * projection
  Parameter positions;   // max_frames x dim
  Parameter pool_query;  // 1 x dim

  EncoderParams() = default;

  // Identity projection, N(0, init_std^2) positions, zero pooling query
  // (uniform temporal weights at initialisation).
  EncoderParams(const EncoderConfig& cfg, Rng& rng, double init_std = 0.02) : config(cfg) {
    cfg.validate();
    projection = Parameter("encoder.projection", Matrix::Identity(cfg.dim, cfg.dim));
    positions = Parameter("encoder.positions", gaussian_matrix(rng, cfg.max_frames, cfg.dim, init_std));
    pool_query = Parameter("encoder.pool_query", Matrix::Zero(1, cfg.dim));
  }

  ParameterRefs parameters() { return {&projection, &positions, &pool_query}; }
};

struct FrameTokens {
  Matrix tokens;  // N x D
  int frame_index = 0;
};

struct VideoFeature {
  Matrix tokens;  // N x D
};

namespace ad {

// Temporal attention pooling. `frames` stacks T frames of N tokens row-wise
// (row t*N + n). For each token position n, scores s_t = frames[t,n] . query
// and the output row n is sum_t softmax_t(s)[t] * frames[t,n].
inline Var temporal_attention_pool(Tape& t, Var frames, Var query, Eigen::Index num_tokens) {
  const Matrix& X = t.value(frames);
  const Matrix& q = t.value(query);
  if (num_tokens < 1 || X.rows() % num_tokens != 0) fail_shape("pooled frames do not divide into ", num_tokens, " tokens");
  if (q.rows() != 1 || q.cols() != X.cols()) fail_shape("pool query must be 1x", X.cols());
  const Eigen::Index T = X.rows() / num_tokens;
  if (T < 1) fail_shape("temporal pooling needs at least one frame");
  const Eigen::Index N = num_tokens;

  // scores(t, n)
  Matrix scores(T, N);
  for (Eigen::Index f = 0; f < T; ++f) {
    for (Eigen::Index n = 0; n < N; ++n) scores(f, n) = X.row(f * N + n).dot(q.row(0));
  }
  // Column-wise softmax over frames, via the row softmax of the transpose.
  Matrix weights = softmax_rows_value(scores.transpose()).transpose();
  Matrix out = Matrix::Zero(N, X.cols());
  for (Eigen::Index f = 0; f < T; ++f) {
    for (Eigen::Index n = 0; n < N; ++n) out.row(n) += weights(f, n) * X.row(f * N + n);
  }
  return t.record(std::move(out), {frames, query},
                  [frames, query, N, T, weights = std::move(weights)](Tape& tp, Var self, const Matrix& g) {
                    const Matrix& X = tp.value(frames);
                    const Matrix& q = tp.value(query);
                    const Matrix& out = tp.value(self);
                    Matrix dX = Matrix::Zero(X.rows(), X.cols());
                    Matrix dq = Matrix::Zero(1, X.cols());
                    for (Eigen::Index n = 0; n < N; ++n) {
                      for (Eigen::Index f = 0; f < T; ++f) {
                        const double a = weights(f, n);
                        if (a == 0.0) continue;
                        const auto x = X.row(f * N + n);
                        // d out_n / d s_f = a_f (x_f - out_n)
                        const double ds = a * g.row(n).dot(x - out.row(n));
                        dX.row(f * N + n) += a * g.row(n) + ds * q.row(0);
                        dq.row(0) += ds * x;
                      }
                    }
                    tp.accumulate(frames, dX);
                    tp.accumulate(query, dq);
                  });
}

// Projected tokens plus position embeddings, all frames stacked: (T*N) x D.
inline Var embed_frames(Tape& t, const EncoderParams& p, const Matrix& stacked_frames, int num_frames) {
  const EncoderConfig& cfg = p.config;
  if (num_frames < 1) fail_shape("embed_frames needs at least one frame");
  if (stacked_frames.cols() != cfg.dim) fail_shape("frame token dim ", stacked_frames.cols(), " != encoder dim ", cfg.dim);
  if (stacked_frames.rows() != static_cast<Eigen::Index>(num_frames) * cfg.tokens) {
    fail_shape("expected ", num_frames, " frames of ", cfg.tokens, " tokens, got ", stacked_frames.rows(), " rows");
  }
  if (num_frames > cfg.max_frames) fail_shape("clip has ", num_frames, " frames, encoder supports ", cfg.max_frames);
  Var x = t.constant(stacked_frames);
  Var projected = matmul(t, x, t.param(p.projection));
  Var pos = top_rows(t, t.param(p.positions), num_frames);
  return add(t, projected, repeat_rows(t, pos, cfg.tokens));
}

// Video-level token set F (N x D) for one sample.
inline Var encode(Tape& t, const EncoderParams& p, const VideoSample& sample) {
  if (sample.frames.empty()) fail_shape("sample ", sample.clip_id, " has no frames");
  Var embedded = embed_frames(t, p, sample.stacked(), static_cast<int>(sample.frames.size()));
  return temporal_attention_pool(t, embedded, t.param(p.pool_query), p.config.tokens);
}

}  // namespace ad

// Matrix-level conveniences (no gradient tracking).

inline std::vector<FrameTokens> embed_frames(const VideoSample& sample, const EncoderParams& p) {
  if (sample.frames.empty()) fail_shape("sample ", sample.clip_id, " has no frames");
  ad::Tape t(false);
  const int T = static_cast<int>(sample.frames.size());
  const Matrix& out = t.value(ad::embed_frames(t, p, sample.stacked(), T));
  std::vector<FrameTokens> frames;
  for (int f = 0; f < T; ++f) frames.push_back({out.middleRows(static_cast<Eigen::Index>(f) * p.config.tokens, p.config.tokens), f});
  return frames;
}

// Pools frames with explicit per-(frame, token) scores; scores is T x N and
// may contain +/-inf.
inline VideoFeature pool_with_scores(std::span<const FrameTokens> frames, const Matrix& scores) {
  if (frames.empty()) fail_shape("temporal_pool needs at least one frame");
  const Eigen::Index N = frames[0].tokens.rows();
  const auto T = static_cast<Eigen::Index>(frames.size());
  if (scores.rows() != T || scores.cols() != N) fail_shape("scores must be T x N");
  const Matrix weights = ad::softmax_rows_value(scores.transpose()).transpose();
  VideoFeature out{Matrix::Zero(N, frames[0].tokens.cols())};
  for (Eigen::Index f = 0; f < T; ++f) {
    for (Eigen::Index n = 0; n < N; ++n) {
      if (weights(f, n) != 0.0) out.tokens.row(n) += weights(f, n) * frames[static_cast<std::size_t>(f)].tokens.row(n);
    }
  }
  return out;
}

inline VideoFeature temporal_pool(std::span<const FrameTokens> frames, const EncoderParams& p) {
  if (frames.empty()) fail_shape("temporal_pool needs at least one frame");
  const Eigen::Index N = frames[0].tokens.rows();
  Matrix scores(static_cast<Eigen::Index>(frames.size()), N);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].tokens.rows() != N) fail_shape("frames disagree on token count");
    scores.row(static_cast<Eigen::Index>(f)) = (frames[f].tokens * p.pool_query.value.transpose()).transpose();
  }
  return pool_with_scores(frames, scores);
}

inline VideoFeature encode(const VideoSample& sample, const EncoderParams& p) {
  ad::Tape t(false);
  return {t.value(ad::encode(t, p, sample))};
}

}  // namespace disenq
