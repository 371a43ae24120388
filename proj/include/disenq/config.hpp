#pragma once

// Run configuration and its JSON form. Missing keys fall back to the
// defaults below, so a config file only needs the values it changes.

#include "disenq/encoder.hpp"
#include "disenq/losses.hpp"
#include "disenq/query_transformer.hpp"
#include "disenq/world.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace disenq {

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainingConfig {
  int epochs = 60;
  int identities_per_batch = 8;  // P
  int clips_per_identity = 4;    // K
  // 0 = floor(train clips / batch size).
  int batches_per_epoch = 0;
  // Probability of dropping a stream's text token from a training clip's context.
  double text_dropout = 0.5;
  OrthogonalityMode orthogonality = OrthogonalityMode::kCosine;
  bool adaptive_weigher = true;
  double weigher_loss_weight = 0.01;
  double weigher_temperature = 5.0;
  // Real-ingestion frame sampling (stride between sampled frames).
  int frame_stride = 4;

  bool operator==(const TrainingConfig&) const = default;
  int batch_size() const { return identities_per_batch * clips_per_identity; }
};

struct DiagnosticsConfig {
  int critic_steps = 200;
  int critic_batch = 64;
  double critic_lr = 0.05;
  int probe_folds = 5;
  int probe_iterations = 300;
  double probe_l2 = 1e-3;

  bool operator==(const DiagnosticsConfig&) const = default;
};

struct RunConfig {
  WorldSpec world;
  EncoderConfig encoder;
  DisenQConfig disenq;
  LossWeights loss;
  OptimizerConfig optimizer;
  TrainingConfig training;
  DiagnosticsConfig diagnostics;
  SplitRatios split;
  std::uint64_t split_seed = 1;
  std::vector<std::string> protocols = {"same_activity+include_view", "same_activity+exclude_view",
                                        "cross_activity+include_view", "cross_activity+exclude_view"};
  std::uint64_t seed = 1;
  std::string output_dir = "runs";
  int workers = 1;

  bool operator==(const RunConfig&) const = default;

  void validate() const {
    world.validate();
    encoder.validate();
    disenq.validate();
    loss.validate();
    if (encoder.dim != disenq.visual_dim) fail_validation("encoder.dim must equal disenq.visual_dim");
    if (training.epochs < 0) fail_validation("training.epochs must be >= 0");
    if (training.identities_per_batch < 2 || training.clips_per_identity < 2) {
      fail_validation("training batches need P >= 2 identities and K >= 2 clips");
    }
    if (!(training.text_dropout >= 0.0 && training.text_dropout <= 1.0)) fail_validation("training.text_dropout must be in [0,1]");
    if (!(optimizer.lr > 0.0)) fail_validation("optimizer.lr must be positive");
    if (training.frame_stride < 1) fail_validation("training.frame_stride must be >= 1");
    if (workers < 1) fail_validation("workers must be >= 1");
    for (const auto& p : protocols) (void)Protocol::parse(p);
  }

  // Keeps model dimensions consistent with the world.
  void sync_dimensions() {
    encoder.tokens = world.tokens_per_frame;
    encoder.dim = world.token_dim;
    encoder.max_frames = world.frames_per_clip;
    disenq.visual_dim = world.token_dim;
    disenq.text_dim = world.text_dim;
  }
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const TextJitter& t) {
  j = {{"biometrics", t.biometrics}, {"motion", t.motion}, {"non_biometrics", t.non_biometrics}};
}
inline void from_json(const nlohmann::json& j, TextJitter& t) {
  const TextJitter d;
  t.biometrics = j.value("biometrics", d.biometrics);
  t.motion = j.value("motion", d.motion);
  t.non_biometrics = j.value("non_biometrics", d.non_biometrics);
}

inline void to_json(nlohmann::json& j, const WorldSpec& w) {
  j = {{"num_identities", w.num_identities},
       {"num_actions", w.num_actions},
       {"num_clothing", w.num_clothing},
       {"num_views", w.num_views},
       {"clips_per_combination", w.clips_per_combination},
       {"frames_per_clip", w.frames_per_clip},
       {"tokens_per_frame", w.tokens_per_frame},
       {"token_dim", w.token_dim},
       {"latent_dim", w.latent_dim},
       {"text_dim", w.text_dim},
       {"noise_sigma", w.noise_sigma},
       {"motion_amplitude", w.motion_amplitude},
       {"text_jitter", w.text_jitter},
       {"token_roles", w.token_roles},
       {"seed", w.seed}};
}
inline void from_json(const nlohmann::json& j, WorldSpec& w) {
  const WorldSpec d;
  w.num_identities = j.value("num_identities", d.num_identities);
  w.num_actions = j.value("num_actions", d.num_actions);
  w.num_clothing = j.value("num_clothing", d.num_clothing);
  w.num_views = j.value("num_views", d.num_views);
  w.clips_per_combination = j.value("clips_per_combination", d.clips_per_combination);
  w.frames_per_clip = j.value("frames_per_clip", d.frames_per_clip);
  w.tokens_per_frame = j.value("tokens_per_frame", d.tokens_per_frame);
  w.token_dim = j.value("token_dim", d.token_dim);
  w.latent_dim = j.value("latent_dim", d.latent_dim);
  w.text_dim = j.value("text_dim", d.text_dim);
  w.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  w.motion_amplitude = j.value("motion_amplitude", d.motion_amplitude);
  w.text_jitter = j.value("text_jitter", d.text_jitter);
  w.token_roles = j.value("token_roles", d.token_roles);
  w.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& e) {
  j = {{"tokens", e.tokens}, {"dim", e.dim}, {"max_frames", e.max_frames}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& e) {
  const EncoderConfig d;
  e.tokens = j.value("tokens", d.tokens);
  e.dim = j.value("dim", d.dim);
  e.max_frames = j.value("max_frames", d.max_frames);
}

inline void to_json(nlohmann::json& j, const DisenQConfig& c) {
  j = {{"layers", c.layers},
       {"heads", c.heads},
       {"model_dim", c.model_dim},
       {"queries_per_stream", c.queries_per_stream},
       {"text_dim", c.text_dim},
       {"visual_dim", c.visual_dim},
       {"ffn_dim", c.ffn_dim},
       {"streams", c.streams},
       {"shared_input_projection", c.shared_input_projection},
       {"init_std", c.init_std}};
}
inline void from_json(const nlohmann::json& j, DisenQConfig& c) {
  const DisenQConfig d;
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.queries_per_stream = j.value("queries_per_stream", d.queries_per_stream);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.visual_dim = j.value("visual_dim", d.visual_dim);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.streams = j.value("streams", d.streams);
  c.shared_input_projection = j.value("shared_input_projection", d.shared_input_projection);
  c.init_std = j.value("init_std", d.init_std);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_id", w.id}, {"lambda_triplet", w.triplet}, {"lambda_orthogonality", w.orthogonality},
       {"lambda_action", w.action}, {"margin", w.margin}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.id = j.value("lambda_id", d.id);
  w.triplet = j.value("lambda_triplet", d.triplet);
  w.orthogonality = j.value("lambda_orthogonality", d.orthogonality);
  w.action = j.value("lambda_action", d.action);
  w.margin = j.value("margin", d.margin);
}

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = {{"lr", o.lr}, {"weight_decay", o.weight_decay}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
}
inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  const OptimizerConfig d;
  o.lr = j.value("lr", d.lr);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
  o.beta1 = j.value("beta1", d.beta1);
  o.beta2 = j.value("beta2", d.beta2);
  o.eps = j.value("eps", d.eps);
}

inline const char* orthogonality_mode_name(OrthogonalityMode m) {
  switch (m) {
    case OrthogonalityMode::kCosine: return "cosine";
    case OrthogonalityMode::kRawNorm: return "raw_norm";
    case OrthogonalityMode::kCosineCrossCovariance: return "cosine+cross_covariance";
    case OrthogonalityMode::kCosineCrossCorrelation: return "cosine+cross_correlation";
  }
  return "cosine";
}

inline void to_json(nlohmann::json& j, const TrainingConfig& t) {
  j = {{"epochs", t.epochs},
       {"identities_per_batch", t.identities_per_batch},
       {"clips_per_identity", t.clips_per_identity},
       {"batches_per_epoch", t.batches_per_epoch},
       {"text_dropout", t.text_dropout},
       {"orthogonality", orthogonality_mode_name(t.orthogonality)},
       {"adaptive_weigher", t.adaptive_weigher},
       {"weigher_loss_weight", t.weigher_loss_weight},
       {"weigher_temperature", t.weigher_temperature},
       {"frame_stride", t.frame_stride}};
}
inline void from_json(const nlohmann::json& j, TrainingConfig& t) {
  const TrainingConfig d;
  t.epochs = j.value("epochs", d.epochs);
  t.identities_per_batch = j.value("identities_per_batch", d.identities_per_batch);
  t.clips_per_identity = j.value("clips_per_identity", d.clips_per_identity);
  t.batches_per_epoch = j.value("batches_per_epoch", d.batches_per_epoch);
  t.text_dropout = j.value("text_dropout", d.text_dropout);
  const std::string orth = j.value("orthogonality", std::string("cosine"));
  if (orth == "cosine") {
    t.orthogonality = OrthogonalityMode::kCosine;
  } else if (orth == "raw_norm") {
    t.orthogonality = OrthogonalityMode::kRawNorm;
  } else if (orth == "cosine+cross_covariance") {
    t.orthogonality = OrthogonalityMode::kCosineCrossCovariance;
  } else if (orth == "cosine+cross_correlation") {
    t.orthogonality = OrthogonalityMode::kCosineCrossCorrelation;
  } else {
    fail_validation(
        "training.orthogonality must be 'cosine', 'raw_norm', 'cosine+cross_covariance' or 'cosine+cross_correlation'");
  }
  t.adaptive_weigher = j.value("adaptive_weigher", d.adaptive_weigher);
  t.weigher_loss_weight = j.value("weigher_loss_weight", d.weigher_loss_weight);
  t.weigher_temperature = j.value("weigher_temperature", d.weigher_temperature);
  t.frame_stride = j.value("frame_stride", d.frame_stride);
}

inline void to_json(nlohmann::json& j, const DiagnosticsConfig& c) {
  j = {{"critic_steps", c.critic_steps}, {"critic_batch", c.critic_batch}, {"critic_lr", c.critic_lr},
       {"probe_folds", c.probe_folds},   {"probe_iterations", c.probe_iterations}, {"probe_l2", c.probe_l2}};
}
inline void from_json(const nlohmann::json& j, DiagnosticsConfig& c) {
  const DiagnosticsConfig d;
  c.critic_steps = j.value("critic_steps", d.critic_steps);
  c.critic_batch = j.value("critic_batch", d.critic_batch);
  c.critic_lr = j.value("critic_lr", d.critic_lr);
  c.probe_folds = j.value("probe_folds", d.probe_folds);
  c.probe_iterations = j.value("probe_iterations", d.probe_iterations);
  c.probe_l2 = j.value("probe_l2", d.probe_l2);
}

inline void to_json(nlohmann::json& j, const SplitRatios& s) {
  j = {{"train_identities", s.train_identities}, {"gallery_fraction", s.gallery_fraction}};
}
inline void from_json(const nlohmann::json& j, SplitRatios& s) {
  const SplitRatios d;
  s.train_identities = j.value("train_identities", d.train_identities);
  s.gallery_fraction = j.value("gallery_fraction", d.gallery_fraction);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"world", c.world},
       {"encoder", c.encoder},
       {"disenq", c.disenq},
       {"loss", c.loss},
       {"optimizer", c.optimizer},
       {"training", c.training},
       {"diagnostics", c.diagnostics},
       {"split", c.split},
       {"split_seed", c.split_seed},
       {"protocols", c.protocols},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"workers", c.workers}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d;
  c.world = j.value("world", d.world);
  // Model dims default to the world's dims unless given explicitly.
  RunConfig synced = d;
  synced.world = c.world;
  synced.sync_dimensions();
  c.encoder = j.value("encoder", synced.encoder);
  c.disenq = j.contains("disenq") ? j.at("disenq").get<DisenQConfig>() : synced.disenq;
  if (j.contains("disenq")) {
    if (!j.at("disenq").contains("visual_dim")) c.disenq.visual_dim = synced.disenq.visual_dim;
    if (!j.at("disenq").contains("text_dim")) c.disenq.text_dim = synced.disenq.text_dim;
  }
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    if (!e.contains("tokens")) c.encoder.tokens = synced.encoder.tokens;
    if (!e.contains("dim")) c.encoder.dim = synced.encoder.dim;
    if (!e.contains("max_frames")) c.encoder.max_frames = synced.encoder.max_frames;
  }
  c.loss = j.value("loss", d.loss);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.training = j.value("training", d.training);
  c.diagnostics = j.value("diagnostics", d.diagnostics);
  c.split = j.value("split", d.split);
  c.split_seed = j.value("split_seed", d.split_seed);
  c.protocols = j.value("protocols", d.protocols);
  c.seed = j.value("seed", d.seed);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.workers = j.value("workers", d.workers);
}

inline std::string serialize_config(const RunConfig& c) { return nlohmann::json(c).dump(2); }

namespace detail {
// Every object key in `j` must exist at the same place in `reference`.
inline void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  if (!j.is_object() || !reference.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) fail_validation("config: unknown key '", path, "'");
    reject_unknown_keys(value, reference.at(key), path);
  }
}
}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail_validation("config is not valid JSON: ", e.what());
  }
  detail::reject_unknown_keys(j, nlohmann::json(RunConfig{}), "");
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail_validation("config has a field of the wrong type: ", e.what());
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open config file ", path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  RunConfig c = parse_config(text);
  c.validate();
  return c;
}

// FNV-1a over the canonical JSON of every field that influences results
// (output location and worker count excluded).
inline std::uint64_t config_hash(const RunConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  j.erase("workers");
  const std::string text = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace disenq
