#pragma once

// Factorized synthetic worlds: identity x action x clothing x view latents are
// mixed into per-frame token features and into simulated prompt embeddings.

#include "disenq/core.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace disenq {

// Factor order used by token-role gain tables.
enum Factor : int { kIdentity = 0, kAction = 1, kClothing = 2, kView = 3 };

// Gains of the four factors for one token role.
using FactorGains = std::array<double, 4>;

// Spatial tokens are assigned roles cyclically (token n has role n % roles).
// The defaults model a body-shape token, a limb-motion token that also carries
// a person's movement style, a garment token and a background/camera token.
inline std::vector<FactorGains> default_token_roles() {
  return {
      {1.0, 0.0, 0.0, 0.4},  // body
      {0.6, 1.0, 0.0, 0.4},  // motion
      {0.0, 0.0, 1.5, 0.4},  // garment
      {0.0, 0.0, 0.3, 1.5},  // background
  };
}

// Per-stream jitter of simulated prompt embeddings. A draw is
// unit(base) + jitter * g with g ~ N(0, I / text_dim), so two draws of one
// prompt have expected cosine close to 1 / (1 + jitter^2).
struct TextJitter {
  double biometrics = 0.2949;      // repeat cosine ~0.92
  double motion = 0.6860;          // repeat cosine ~0.68
  double non_biometrics = 0.5156;  // repeat cosine ~0.79

  bool operator==(const TextJitter&) const = default;
};

struct WorldSpec {
  int num_identities = 50;
  int num_actions = 10;
  int num_clothing = 2;
  int num_views = 2;
  int clips_per_combination = 1;
  int frames_per_clip = 8;
  int tokens_per_frame = 8;
  int token_dim = 32;
  int latent_dim = 6;
  int text_dim = 32;
  double noise_sigma = 0.5;
  // Amplitude of the time-varying part of each action trajectory.
  double motion_amplitude = 0.5;
  TextJitter text_jitter;
  std::vector<FactorGains> token_roles = default_token_roles();
  std::uint64_t seed = 7;

  bool operator==(const WorldSpec&) const = default;

  int num_clips() const {
    return num_identities * num_actions * num_clothing * num_views * clips_per_combination;
  }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) fail_validation("world: ", name, " must be >= 1, got ", v);
    };
    positive(num_identities, "num_identities");
    positive(num_actions, "num_actions");
    positive(num_clothing, "num_clothing");
    positive(num_views, "num_views");
    positive(clips_per_combination, "clips_per_combination");
    positive(frames_per_clip, "frames_per_clip");
    positive(tokens_per_frame, "tokens_per_frame");
    positive(latent_dim, "latent_dim");
    positive(text_dim, "text_dim");
    if (token_dim < 4) fail_validation("world: token_dim must be >= 4, got ", token_dim);
    if (latent_dim > token_dim) fail_validation("world: latent_dim must not exceed token_dim");
    if (latent_dim > text_dim) fail_validation("world: latent_dim must not exceed text_dim");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail_validation("world: noise_sigma must be >= 0");
    if (!(motion_amplitude >= 0.0)) fail_validation("world: motion_amplitude must be >= 0");
    for (double j : {text_jitter.biometrics, text_jitter.motion, text_jitter.non_biometrics}) {
      if (!(j >= 0.0) || !std::isfinite(j)) fail_validation("world: text jitter must be >= 0");
    }
    if (token_roles.empty()) fail_validation("world: at least one token role is required");
    for (const auto& role : token_roles) {
      for (double g : role) {
        if (!std::isfinite(g)) fail_validation("world: token role gains must be finite");
      }
    }
  }
};

// Thrown when a text accessor is used on a poisoned sentinel.
struct PoisonedAccess : std::logic_error {
  using std::logic_error::logic_error;
};

// Encoded biometrics / motion / non-biometrics prompt embeddings for one clip.
class TextTriplet {
 public:
  TextTriplet() = default;
  TextTriplet(Vector biometrics, Vector motion, Vector non_biometrics)
      : biometrics_(std::move(biometrics)), motion_(std::move(motion)), non_biometrics_(std::move(non_biometrics)) {
    if (biometrics_.size() != motion_.size() || motion_.size() != non_biometrics_.size()) {
      fail_shape("text triplet vectors must share one dimension");
    }
    if (!biometrics_.allFinite() || !motion_.allFinite() || !non_biometrics_.allFinite()) {
      fail_validation("text triplet contains non-finite values");
    }
  }

  // A stand-in whose every accessor throws; used to prove a code path never reads text.
  static TextTriplet poisoned() {
    TextTriplet t;
    t.poisoned_ = true;
    return t;
  }

  bool is_poisoned() const { return poisoned_; }

  const Vector& biometrics() const { return checked(biometrics_); }
  const Vector& motion() const { return checked(motion_); }
  const Vector& non_biometrics() const { return checked(non_biometrics_); }

  // Stream order: 0 biometrics, 1 motion, 2 non-biometrics.
  const Vector& stream(int s) const {
    switch (s) {
      case 0: return biometrics();
      case 1: return motion();
      case 2: return non_biometrics();
      default: fail_validation("text stream index out of range: ", s);
    }
  }

  Eigen::Index dim() const { return checked(biometrics_).size(); }

 private:
  const Vector& checked(const Vector& v) const {
    if (poisoned_) throw PoisonedAccess("text input read through a poisoned sentinel");
    return v;
  }

  Vector biometrics_;
  Vector motion_;
  Vector non_biometrics_;
  bool poisoned_ = false;
};

struct VideoSample {
  std::string clip_id;
  std::vector<Matrix> frames;  // each tokens x dim
  int identity = 0;
  int action = 0;
  int clothing = 0;
  int view = 0;
  int key_frame_index = 0;

  // Frames stacked row-wise: row t * tokens + n holds token n of frame t.
  Matrix stacked() const {
    if (frames.empty()) fail_shape("sample ", clip_id, " has no frames");
    const Eigen::Index n = frames[0].rows();
    Matrix out(static_cast<Eigen::Index>(frames.size()) * n, frames[0].cols());
    for (std::size_t t = 0; t < frames.size(); ++t) out.middleRows(static_cast<Eigen::Index>(t) * n, n) = frames[t];
    return out;
  }
};

struct Dataset {
  int frames_per_clip = 0;
  int tokens_per_frame = 0;
  int token_dim = 0;
  int text_dim = 0;
  int num_identities = 0;
  int num_actions = 0;
  int num_clothing = 0;
  int num_views = 0;
  std::vector<VideoSample> samples;
  std::vector<std::optional<TextTriplet>> texts;  // parallel to samples

  std::size_t size() const { return samples.size(); }

  // True when any clip lacks text embeddings; such datasets cannot be trained on.
  bool inference_only() const {
    return std::any_of(texts.begin(), texts.end(), [](const auto& t) { return !t.has_value(); });
  }

  // Replaces every text triplet by a poisoned sentinel.
  Dataset with_poisoned_text() const {
    Dataset d = *this;
    for (auto& t : d.texts) t = TextTriplet::poisoned();
    return d;
  }
};

// Running-mean store of per-identity biometrics embeddings.
class BiometricsStore {
 public:
  explicit BiometricsStore(Eigen::Index dim) : dim_(dim) {}

  Eigen::Index dim() const { return dim_; }

  // Folds a new embedding into the identity's running mean and returns the mean.
  const Vector& refine(int identity, const Vector& embedding) {
    if (embedding.size() != dim_) {
      fail_shape("biometrics embedding has dimension ", embedding.size(), ", store expects ", dim_);
    }
    auto [it, inserted] = entries_.try_emplace(identity);
    Entry& e = it->second;
    if (inserted) {
      e.mean = embedding;
      e.count = 1;
    } else {
      e.count += 1;
      e.mean += (embedding - e.mean) / static_cast<double>(e.count);
    }
    return e.mean;
  }

  std::size_t count(int identity) const {
    auto it = entries_.find(identity);
    return it == entries_.end() ? 0 : it->second.count;
  }

  const Vector& embedding(int identity) const {
    auto it = entries_.find(identity);
    if (it == entries_.end()) fail_validation("no stored biometrics embedding for identity ", identity);
    return it->second.mean;
  }

 private:
  struct Entry {
    Vector mean;
    std::size_t count = 0;
  };
  Eigen::Index dim_;
  std::map<int, Entry> entries_;
};

// Latents and mixing matrices of one world, fully determined by the spec seed.
class WorldModel {
 public:
  explicit WorldModel(const WorldSpec& spec) : spec_(spec) {
    spec_.validate();
    Rng rng(derive_seed(spec_.seed, 1));
    const int d = spec_.latent_dim;
    auto latents = [&](int count) {
      std::vector<Vector> out;
      for (int i = 0; i < count; ++i) out.push_back(gaussian_vector(rng, d, 1.0 / std::sqrt(double(d))));
      return out;
    };
    identity_ = latents(spec_.num_identities);
    action_base_ = latents(spec_.num_actions);
    action_swing_ = latents(spec_.num_actions);
    clothing_ = latents(spec_.num_clothing);
    view_ = latents(spec_.num_views);
    action_freq_.resize(static_cast<std::size_t>(spec_.num_actions));
    std::uniform_real_distribution<double> freq(0.3, 1.2);
    for (auto& f : action_freq_) f = freq(rng);

    for (int n = 0; n < spec_.tokens_per_frame; ++n) {
      std::array<Matrix, 4> mix;
      for (auto& m : mix) m = random_orthonormal_columns(rng, spec_.token_dim, d);
      mixing_.push_back(std::move(mix));
    }
    for (auto& p : text_proj_) p = random_orthonormal_columns(rng, spec_.text_dim, d);
  }

  const WorldSpec& spec() const { return spec_; }

  // Action latent at frame t for a clip with phase offset `phase`.
  Vector action_latent(int action, int t, double phase) const {
    const auto a = static_cast<std::size_t>(action);
    return action_base_[a] + spec_.motion_amplitude * std::sin(action_freq_[a] * t + phase) * action_swing_[a] * std::sqrt(2.0);
  }

  // Noise-free token matrix of one frame.
  Matrix frame(int identity, int action, int clothing, int view, int t, double phase) const {
    Matrix f(spec_.tokens_per_frame, spec_.token_dim);
    const Vector u_act = action_latent(action, t, phase);
    for (int n = 0; n < spec_.tokens_per_frame; ++n) {
      const auto& g = spec_.token_roles[static_cast<std::size_t>(n) % spec_.token_roles.size()];
      const auto& m = mixing_[static_cast<std::size_t>(n)];
      Vector token = g[kIdentity] * (m[kIdentity] * identity_[static_cast<std::size_t>(identity)]) +
                     g[kAction] * (m[kAction] * u_act) +
                     g[kClothing] * (m[kClothing] * clothing_[static_cast<std::size_t>(clothing)]) +
                     g[kView] * (m[kView] * view_[static_cast<std::size_t>(view)]);
      f.row(n) = token.transpose();
    }
    return f;
  }

  // Noise-free prompt embedding bases (unit vectors in text space).
  Vector biometrics_text_base(int identity) const { return unit(text_proj_[0] * identity_[static_cast<std::size_t>(identity)]); }
  Vector motion_text_base(int action, int key_frame, double phase) const {
    return unit(text_proj_[1] * action_latent(action, key_frame, phase));
  }
  Vector non_biometrics_text_base(int clothing) const { return unit(text_proj_[2] * clothing_[static_cast<std::size_t>(clothing)]); }

  // One simulated prompt-encoder call: base + isotropic jitter.
  Vector jittered(const Vector& base, double jitter, Rng& rng) const {
    return base + gaussian_vector(rng, base.size(), jitter / std::sqrt(double(base.size())));
  }

 private:
  static Vector unit(const Vector& v) {
    const double n = v.norm();
    return n < 1e-12 ? v : Vector(v / n);
  }

  WorldSpec spec_;
  std::vector<Vector> identity_, action_base_, action_swing_, clothing_, view_;
  std::vector<double> action_freq_;
  std::vector<std::array<Matrix, 4>> mixing_;
  std::array<Matrix, 3> text_proj_;
};

inline int default_key_frame(int frames) { return frames / 2; }

namespace detail {

inline Matrix round_to_float(Matrix m) {
  return m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

inline Vector round_to_float(Vector v) {
  return v.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

}  // namespace detail

// Generates every identity x action x clothing x view x clip combination.
// Values are rounded to float32 so a dataset survives a file round trip unchanged.
inline Dataset generate_dataset(const WorldSpec& spec) {
  const WorldModel world(spec);
  Dataset ds;
  ds.frames_per_clip = spec.frames_per_clip;
  ds.tokens_per_frame = spec.tokens_per_frame;
  ds.token_dim = spec.token_dim;
  ds.text_dim = spec.text_dim;
  ds.num_identities = spec.num_identities;
  ds.num_actions = spec.num_actions;
  ds.num_clothing = spec.num_clothing;
  ds.num_views = spec.num_views;

  BiometricsStore store(spec.text_dim);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * 3.14159265358979323846);
  std::uint64_t clip_index = 0;
  for (int id = 0; id < spec.num_identities; ++id) {
    for (int act = 0; act < spec.num_actions; ++act) {
      for (int cl = 0; cl < spec.num_clothing; ++cl) {
        for (int v = 0; v < spec.num_views; ++v) {
          for (int c = 0; c < spec.clips_per_combination; ++c, ++clip_index) {
            Rng rng(derive_seed(spec.seed, 2, clip_index));
            const double phase = phase_dist(rng);
            VideoSample s;
            s.clip_id = detail::concat("clip", clip_index);
            s.identity = id;
            s.action = act;
            s.clothing = cl;
            s.view = v;
            s.key_frame_index = default_key_frame(spec.frames_per_clip);
            for (int t = 0; t < spec.frames_per_clip; ++t) {
              Matrix f = world.frame(id, act, cl, v, t, phase);
              if (spec.noise_sigma > 0) f += gaussian_matrix(rng, f.rows(), f.cols(), spec.noise_sigma);
              s.frames.push_back(detail::round_to_float(std::move(f)));
            }
            const Vector tb = world.jittered(world.biometrics_text_base(id), spec.text_jitter.biometrics, rng);
            const Vector tm = world.jittered(world.motion_text_base(act, s.key_frame_index, phase), spec.text_jitter.motion, rng);
            const Vector tn = world.jittered(world.non_biometrics_text_base(cl), spec.text_jitter.non_biometrics, rng);
            const Vector& refined = store.refine(id, tb);
            ds.texts.emplace_back(TextTriplet(detail::round_to_float(refined), detail::round_to_float(tm),
                                              detail::round_to_float(tn)));
            ds.samples.push_back(std::move(s));
          }
        }
      }
    }
  }
  return ds;
}

// Mean pairwise cosine between repeated prompt-encoder draws of one stream,
// averaged over `prompts` distinct prompts with `repeats` draws each.
// stream: 0 biometrics, 1 motion, 2 non-biometrics.
struct RepeatSimilarity {
  double mean = 0.0;
  double stddev = 0.0;
};

inline RepeatSimilarity prompt_repeat_similarity(const WorldSpec& spec, int stream, int prompts, int repeats,
                                                 std::uint64_t seed) {
  const WorldModel world(spec);
  Rng rng(seed);
  std::vector<double> sims;
  for (int p = 0; p < prompts; ++p) {
    Vector base;
    double jitter = 0.0;
    switch (stream) {
      case 0:
        base = world.biometrics_text_base(p % spec.num_identities);
        jitter = spec.text_jitter.biometrics;
        break;
      case 1:
        base = world.motion_text_base(p % spec.num_actions, default_key_frame(spec.frames_per_clip), 0.1 * p);
        jitter = spec.text_jitter.motion;
        break;
      case 2:
        base = world.non_biometrics_text_base(p % spec.num_clothing);
        jitter = spec.text_jitter.non_biometrics;
        break;
      default:
        fail_validation("stream must be 0, 1 or 2");
    }
    std::vector<Vector> draws;
    for (int r = 0; r < repeats; ++r) draws.push_back(world.jittered(base, jitter, rng));
    for (int i = 0; i < repeats; ++i) {
      for (int j = i + 1; j < repeats; ++j) sims.push_back(cosine(draws[i], draws[j]));
    }
  }
  RepeatSimilarity out;
  if (sims.empty()) return out;
  for (double s : sims) out.mean += s;
  out.mean /= static_cast<double>(sims.size());
  for (double s : sims) out.stddev += (s - out.mean) * (s - out.mean);
  out.stddev = std::sqrt(out.stddev / static_cast<double>(sims.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation splits

enum class ActivityProtocol { kSame, kCross };
enum class ViewProtocol { kInclude, kExclude };

struct Protocol {
  ActivityProtocol activity = ActivityProtocol::kSame;
  ViewProtocol view = ViewProtocol::kInclude;

  bool operator==(const Protocol&) const = default;

  std::string name() const {
    return std::string(activity == ActivityProtocol::kSame ? "same_activity" : "cross_activity") + "+" +
           (view == ViewProtocol::kInclude ? "include_view" : "exclude_view");
  }

  static Protocol parse(const std::string& text) {
    const auto plus = text.find('+');
    if (plus == std::string::npos) fail_validation("protocol must look like same_activity+include_view, got '", text, "'");
    const std::string a = text.substr(0, plus);
    const std::string v = text.substr(plus + 1);
    Protocol p;
    if (a == "same_activity") {
      p.activity = ActivityProtocol::kSame;
    } else if (a == "cross_activity") {
      p.activity = ActivityProtocol::kCross;
    } else {
      fail_validation("unknown activity protocol '", a, "'");
    }
    if (v == "include_view") {
      p.view = ViewProtocol::kInclude;
    } else if (v == "exclude_view") {
      p.view = ViewProtocol::kExclude;
    } else {
      fail_validation("unknown view protocol '", v, "'");
    }
    return p;
  }

  static std::vector<Protocol> all() {
    return {{ActivityProtocol::kSame, ViewProtocol::kInclude},
            {ActivityProtocol::kSame, ViewProtocol::kExclude},
            {ActivityProtocol::kCross, ViewProtocol::kInclude},
            {ActivityProtocol::kCross, ViewProtocol::kExclude}};
  }
};

struct SplitRatios {
  double train_identities = 0.8;
  double gallery_fraction = 0.8;

  bool operator==(const SplitRatios&) const = default;
};

// Indices into a Dataset.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> gallery;
  std::vector<std::size_t> probe;
  bool exclude_same_view = false;
};

namespace detail {

inline std::size_t fraction_count(std::size_t n, double fraction) {
  auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  return std::clamp<std::size_t>(k, 1, n - 1);
}

}  // namespace detail

// The train/test identity partition depends only on split_seed, so every
// protocol evaluates the same held-out identities.
inline std::vector<int> train_identities(const Dataset& ds, std::uint64_t split_seed,
                                         const SplitRatios& ratios = {}) {
  std::set<int> ids;
  for (const auto& s : ds.samples) ids.insert(s.identity);
  if (ids.size() < 2) fail_validation("split needs at least 2 identities, dataset has ", ids.size());
  std::vector<int> order(ids.begin(), ids.end());
  Rng rng(derive_seed(split_seed, 11));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(detail::fraction_count(order.size(), ratios.train_identities));
  std::sort(order.begin(), order.end());
  return order;
}

inline Split split_protocol(const Dataset& ds, const Protocol& protocol, std::uint64_t split_seed,
                            const SplitRatios& ratios = {}) {
  const std::vector<int> train_ids = train_identities(ds, split_seed, ratios);
  const std::set<int> train_set(train_ids.begin(), train_ids.end());
  Split split;
  split.exclude_same_view = protocol.view == ViewProtocol::kExclude;
  std::vector<std::size_t> test;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    (train_set.count(ds.samples[i].identity) ? split.train : test).push_back(i);
  }

  std::set<int> test_actions;
  for (std::size_t i : test) test_actions.insert(ds.samples[i].action);
  Rng rng(derive_seed(split_seed, 12, protocol.activity == ActivityProtocol::kSame ? 0 : 1));

  if (protocol.activity == ActivityProtocol::kCross) {
    if (test_actions.size() < 2) fail_validation("cross_activity split needs at least 2 actions among test clips");
    std::vector<int> actions(test_actions.begin(), test_actions.end());
    std::shuffle(actions.begin(), actions.end(), rng);
    const std::size_t n_gallery = detail::fraction_count(actions.size(), ratios.gallery_fraction);
    const std::set<int> gallery_actions(actions.begin(), actions.begin() + static_cast<std::ptrdiff_t>(n_gallery));
    for (std::size_t i : test) {
      (gallery_actions.count(ds.samples[i].action) ? split.gallery : split.probe).push_back(i);
    }
  } else {
    // Stratify by action so probe and gallery cover the same action set.
    std::map<int, std::vector<std::size_t>> by_action;
    for (std::size_t i : test) by_action[ds.samples[i].action].push_back(i);
    for (auto& [action, clips] : by_action) {
      if (clips.size() < 2) continue;  // cannot appear on both sides
      std::shuffle(clips.begin(), clips.end(), rng);
      const std::size_t n_gallery = detail::fraction_count(clips.size(), ratios.gallery_fraction);
      split.gallery.insert(split.gallery.end(), clips.begin(), clips.begin() + static_cast<std::ptrdiff_t>(n_gallery));
      split.probe.insert(split.probe.end(), clips.begin() + static_cast<std::ptrdiff_t>(n_gallery), clips.end());
    }
    std::sort(split.gallery.begin(), split.gallery.end());
    std::sort(split.probe.begin(), split.probe.end());
  }
  if (split.gallery.empty() || split.probe.empty()) fail_validation("split left probe or gallery empty");
  return split;
}

}  // namespace disenq
