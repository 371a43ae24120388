#pragma once

// The full trainable model: encoder, query bank, classifier heads and the
// adaptive weigher, plus text-free feature extraction and AdamW.

#include "disenq/config.hpp"
#include "disenq/encoder.hpp"
#include "disenq/identification.hpp"
#include "disenq/losses.hpp"
#include "disenq/query_transformer.hpp"

#include <exception>
#include <mutex>
#include <thread>
#include <unordered_map>
#include <vector>

namespace disenq {

struct Model {
  EncoderParams encoder;
  QueryBank bank;
  ClassifierHead identity_head;
  ClassifierHead action_head;
  AdaptiveWeigher weigher;

  Model() = default;

  Model(const RunConfig& cfg, int num_train_identities, int num_actions) {
    Rng rng(derive_seed(cfg.seed, 100));
    encoder = EncoderParams(cfg.encoder, rng, cfg.disenq.init_std);
    bank = QueryBank(cfg.disenq, rng);
    identity_head = ClassifierHead("head.identity", cfg.disenq.model_dim, num_train_identities, rng, cfg.disenq.init_std);
    action_head = ClassifierHead("head.action", cfg.disenq.model_dim, num_actions, rng, cfg.disenq.init_std);
    weigher = AdaptiveWeigher(derive_seed(cfg.seed, 101));
  }

  // Copying would leave tapes keyed to the wrong addresses; moves keep them valid
  // only before any tape is created, which is how the harness uses them.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  // Stable order: encoder, query bank, identity head, action head, weigher.
  ParameterRefs parameters() {
    ParameterRefs out = encoder.parameters();
    for (Parameter* p : bank.parameters()) out.push_back(p);
    for (Parameter* p : identity_head.parameters()) out.push_back(p);
    for (Parameter* p : action_head.parameters()) out.push_back(p);
    for (Parameter* p : weigher.parameters()) out.push_back(p);
    return out;
  }

  std::unordered_map<const Parameter*, Parameter*> owner_map() {
    std::unordered_map<const Parameter*, Parameter*> m;
    for (Parameter* p : parameters()) m.emplace(p, p);
    return m;
  }
};

// Runs `fn(i)` for i in [0, n) on up to `workers` threads. Each index is
// handled by exactly one thread; callers write results to slot i only.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Text-free features of one clip.
inline DisentangledFeatures infer_features(const Model& model, const VideoSample& sample) {
  ad::Tape t(false);
  ad::Var video = ad::encode(t, model.encoder, sample);
  ad::StreamOutputs o = ad::forward(t, model.bank, video, nullptr, Mode::kInfer);
  return {t.value(o.pooled[0]), t.value(o.pooled[1]), t.value(o.pooled[2])};
}

// Text-free features of every clip; the dataset's text entries are never read.
inline std::vector<DisentangledFeatures> infer_all(const Model& model, const Dataset& ds, int workers = 1) {
  std::vector<DisentangledFeatures> out(ds.size());
  parallel_for(ds.size(), workers, [&](std::size_t i) { out[i] = infer_features(model, ds.samples[i]); });
  return out;
}

// Decoupled-weight-decay Adam. Parameters no gradient reached during a step
// are left untouched, weight decay included.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}

  void step(const ParameterRefs& params) {
    if (m_.empty()) {
      for (Parameter* p : params) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("optimizer state does not match parameter list");
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      if (!p.touched) continue;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value *= 1.0 - cfg_.lr * cfg_.weight_decay;
      p.value.array() -= cfg_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
  }

  std::uint64_t steps() const { return steps_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

  void restore(std::uint64_t steps, std::vector<Matrix> m, std::vector<Matrix> v) {
    steps_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace disenq
