#pragma once

// Training loop: PK batches, per-clip tapes, the weighted objective, the
// auxiliary weigher loss and AdamW updates.

#include "disenq/model.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace disenq {

struct EpochRecord {
  int epoch = 0;
  LossComponents components;
  double total = 0.0;
  double weigher = 0.0;
  int batches = 0;
};

inline nlohmann::json epoch_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"loss_id", r.components.id},
          {"loss_triplet", r.components.triplet},
          {"loss_orthogonality", r.components.orthogonality},
          {"loss_action", r.components.action},
          {"total", r.total},
          {"loss_weigher", r.weigher},
          {"batches", r.batches}};
}

// Thrown when the objective stops being finite.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BatchResult {
  LossComponents components;
  double total = 0.0;
  double weigher = 0.0;
};

// Class-balanced binary cross-entropy on sigmoid(tau * (s - offset)) over
// every within-batch pair, where s is the fused similarity; positives and
// negatives each carry half the weight. Accumulates the weigher's gradients.
inline double weigher_pair_loss(AdaptiveWeigher& weigher, const Matrix& fb, const Matrix& fm, std::span<const int> labels,
                                double temperature, double weight) {
  const Eigen::Index B = fb.rows();
  std::vector<std::array<double, 2>> sims;
  std::vector<double> targets;
  std::size_t positives = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = i + 1; j < B; ++j) {
      sims.push_back({cosine(fb.row(i), fb.row(j)), cosine(fm.row(i), fm.row(j))});
      const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
      targets.push_back(same ? 1.0 : 0.0);
      positives += same ? 1 : 0;
    }
  }
  if (sims.empty()) return 0.0;
  const std::size_t negatives = sims.size() - positives;
  const double w_pos = positives ? 0.5 / double(positives) : 0.0;
  const double w_neg = negatives ? 0.5 / double(negatives) : 0.0;
  const double norm = (positives ? 0.5 : 0.0) + (negatives ? 0.5 : 0.0);
  Matrix s(static_cast<Eigen::Index>(sims.size()), 2);
  for (std::size_t p = 0; p < sims.size(); ++p) s.row(static_cast<Eigen::Index>(p)) << sims[p][0], sims[p][1];
  ad::Tape tape(true);
  ad::Var fused = ad::fused_similarity(tape, weigher, tape.constant(s));
  const Matrix& v = tape.value(fused);
  const double beta = weigher.offset.value(0, 0);
  double loss = 0.0;
  double grad_beta = 0.0;
  Matrix grad(v.rows(), 1);
  for (Eigen::Index p = 0; p < v.rows(); ++p) {
    const double z = temperature * (v(p, 0) - beta);
    const double y = targets[static_cast<std::size_t>(p)];
    const double wp = (y > 0 ? w_pos : w_neg) / norm;
    // softplus(z) - y z, stable form
    loss += wp * (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z);
    const double sig = 1.0 / (1.0 + std::exp(-z));
    grad(p, 0) = weight * wp * temperature * (sig - y);
    grad_beta -= grad(p, 0);
  }
  if (weight > 0.0) {
    const std::pair<ad::Var, Matrix> seed{fused, grad};
    tape.backward(std::span<const std::pair<ad::Var, Matrix>>(&seed, 1));
    std::unordered_map<const Parameter*, Parameter*> owners;
    for (Parameter* p : weigher.parameters()) owners.emplace(p, p);
    tape.accumulate_param_grads(owners);
    weigher.offset.grad(0, 0) += grad_beta;
    weigher.offset.touched = true;
  }
  return loss;
}

class Trainer {
 public:
  // Builds a fresh model for the dataset's training identities.
  Trainer(const RunConfig& cfg, const Dataset& ds) : cfg_(cfg), ds_(&ds) {
    cfg_.validate();
    if (ds.inference_only()) fail_validation("dataset lacks text embeddings for some clips; it can only be evaluated");
    check_dims();
    setup_split();
    model_ = Model(cfg_, static_cast<int>(label_of_identity_.size()), ds.num_actions);
    optimizer_ = AdamW(cfg_.optimizer);
    rng_ = Rng(derive_seed(cfg_.seed, 300));
  }

  // Resumes from restored state.
  Trainer(const RunConfig& cfg, const Dataset& ds, Model model, AdamW optimizer, int epoch, Rng rng)
      : cfg_(cfg), ds_(&ds), model_(std::move(model)), optimizer_(std::move(optimizer)), epoch_(epoch), rng_(rng) {
    cfg_.validate();
    if (ds.inference_only()) fail_validation("dataset lacks text embeddings for some clips; it can only be evaluated");
    check_dims();
    setup_split();
    if (model_.identity_head.classes() != static_cast<Eigen::Index>(label_of_identity_.size())) {
      fail_validation("checkpoint identity head has ", model_.identity_head.classes(), " classes, dataset split has ",
                      label_of_identity_.size(), " training identities");
    }
  }

  const RunConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const AdamW& optimizer() const { return optimizer_; }
  int epoch() const { return epoch_; }
  const Rng& rng() const { return rng_; }
  const std::vector<std::size_t>& train_indices() const { return train_; }

  int batches_per_epoch() const {
    if (cfg_.training.batches_per_epoch > 0) return cfg_.training.batches_per_epoch;
    return std::max<int>(1, static_cast<int>(train_.size()) / cfg_.training.batch_size());
  }

  EpochRecord run_epoch() {
    Rng epoch_rng(rng_());
    EpochRecord rec;
    rec.epoch = epoch_ + 1;
    const int batches = batches_per_epoch();
    for (int b = 0; b < batches; ++b) {
      const BatchResult r = train_batch(epoch_rng);
      rec.components.id += r.components.id;
      rec.components.triplet += r.components.triplet;
      rec.components.orthogonality += r.components.orthogonality;
      rec.components.action += r.components.action;
      rec.total += r.total;
      rec.weigher += r.weigher;
    }
    const double n = static_cast<double>(batches);
    rec.components.id /= n;
    rec.components.triplet /= n;
    rec.components.orthogonality /= n;
    rec.components.action /= n;
    rec.total /= n;
    rec.weigher /= n;
    rec.batches = batches;
    ++epoch_;
    return rec;
  }

  // One optimisation step on a PK batch drawn from `rng`.
  BatchResult train_batch(Rng& rng) {
    const auto positions = pk_sample(train_identity_labels_, cfg_.training.identities_per_batch,
                                     cfg_.training.clips_per_identity, rng);
    std::vector<std::size_t> batch;
    for (std::size_t p : positions) batch.push_back(train_[p]);
    std::vector<std::array<bool, 3>> keep(batch.size());
    std::bernoulli_distribution drop(cfg_.training.text_dropout);
    for (auto& k : keep) {
      for (auto& flag : k) flag = !drop(rng);
    }
    return step(batch, keep);
  }

  // Forward, loss, backward and update on an explicit batch.
  BatchResult step(const std::vector<std::size_t>& batch, const std::vector<std::array<bool, 3>>& text_keep) {
    BatchResult result = loss_and_grad(batch, text_keep);
    optimizer_.step(params_cache());
    return result;
  }

  // Forward and backward without the update. Parameter grads then hold the
  // gradient of result.total + weigher_loss_weight * result.weigher.
  BatchResult loss_and_grad(const std::vector<std::size_t>& batch, const std::vector<std::array<bool, 3>>& text_keep) {
    const auto B = static_cast<Eigen::Index>(batch.size());
    const int dq = cfg_.disenq.model_dim;
    std::vector<ad::Tape> tapes;
    tapes.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) tapes.emplace_back(true);
    struct Outputs {
      ad::StreamOutputs streams;
      ad::Var id_logits, action_logits;
    };
    std::vector<Outputs> outs(batch.size());
    parallel_for(batch.size(), cfg_.workers, [&](std::size_t i) {
      ad::Tape& t = tapes[i];
      const std::size_t idx = batch[i];
      ad::Var video = ad::encode(t, model_.encoder, ds_->samples[idx]);
      outs[i].streams = ad::forward(t, model_.bank, video, &*ds_->texts[idx], Mode::kTrain, text_keep[i]);
      outs[i].id_logits = ad::affine(t, outs[i].streams.pooled[kBiometrics], t.param(model_.identity_head.weight),
                                     t.param(model_.identity_head.bias));
      outs[i].action_logits = ad::affine(t, outs[i].streams.pooled[kMotion], t.param(model_.action_head.weight),
                                         t.param(model_.action_head.bias));
    });

    Matrix fb(B, dq), fm(B, dq), fn(B, dq);
    std::vector<int> id_labels(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      fb.row(r) = tapes[i].value(outs[i].streams.pooled[kBiometrics]);
      fm.row(r) = tapes[i].value(outs[i].streams.pooled[kMotion]);
      fn.row(r) = tapes[i].value(outs[i].streams.pooled[kNonBiometrics]);
      id_labels[i] = label_of_identity_.at(ds_->samples[batch[i]].identity);
    }

    const LossWeights& w = cfg_.loss;
    BatchResult result;
    std::vector<Matrix> g_id(batch.size()), g_act(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      LossValue ce = cross_entropy(tapes[i].value(outs[i].id_logits), id_labels[i]);
      result.components.id += ce.value / double(B);
      g_id[i] = ce.grad * (w.id / double(B));
      LossValue ca = cross_entropy(tapes[i].value(outs[i].action_logits), ds_->samples[batch[i]].action);
      result.components.action += ca.value / double(B);
      g_act[i] = ca.grad * (w.action / double(B));
    }
    const LossValue tri = triplet_loss(fb, id_labels, w.margin);
    result.components.triplet = tri.value;
    const bool disentangled = cfg_.disenq.streams == 3;
    OrthogonalityValue orth;
    if (disentangled) {
      orth = orthogonality_loss(fb, fn, cfg_.training.orthogonality);
      result.components.orthogonality = orth.value;
    }
    try {
      result.total = total_loss(result.components, w);
    } catch (const std::runtime_error& e) {
      throw TrainingDiverged(e.what());
    }

    for (Parameter* p : params_cache()) p->zero_grad();
    parallel_for(batch.size(), cfg_.workers, [&](std::size_t i) {
      const auto r = static_cast<Eigen::Index>(i);
      std::vector<std::pair<ad::Var, Matrix>> seeds;
      if (w.id > 0) seeds.emplace_back(outs[i].id_logits, g_id[i]);
      if (w.action > 0) seeds.emplace_back(outs[i].action_logits, g_act[i]);
      if (w.triplet > 0) seeds.emplace_back(outs[i].streams.pooled[kBiometrics], w.triplet * tri.grad.row(r));
      if (disentangled && w.orthogonality > 0) {
        seeds.emplace_back(outs[i].streams.pooled[kBiometrics], w.orthogonality * orth.grad_biometrics.row(r));
        seeds.emplace_back(outs[i].streams.pooled[kNonBiometrics], w.orthogonality * orth.grad_non_biometrics.row(r));
      }
      if (!seeds.empty()) tapes[i].backward(seeds);
    });
    const auto owners = owners_cache();
    for (const auto& t : tapes) t.accumulate_param_grads(owners);

    if (cfg_.training.adaptive_weigher) {
      result.weigher = weigher_pair_loss(model_.weigher, fb, fm, id_labels, cfg_.training.weigher_temperature,
                                         cfg_.training.weigher_loss_weight);
      if (!std::isfinite(result.weigher)) throw TrainingDiverged("loss component 'weigher' is not finite");
    }
    return result;
  }

  // Contiguous identity-head label of a training identity.
  const std::map<int, int>& identity_labels() const { return label_of_identity_; }

 private:
  void check_dims() const {
    if (ds_->token_dim != cfg_.encoder.dim || ds_->tokens_per_frame != cfg_.encoder.tokens) {
      fail_shape("dataset tokens x dim ", ds_->tokens_per_frame, "x", ds_->token_dim, " do not match encoder ",
                 cfg_.encoder.tokens, "x", cfg_.encoder.dim);
    }
    if (ds_->frames_per_clip > cfg_.encoder.max_frames) fail_shape("dataset clips are longer than encoder.max_frames");
    if (ds_->text_dim != cfg_.disenq.text_dim) {
      fail_shape("dataset text dim ", ds_->text_dim, " does not match disenq.text_dim ", cfg_.disenq.text_dim);
    }
  }

  void setup_split() {
    const auto ids = train_identities(*ds_, cfg_.split_seed, cfg_.split);
    for (std::size_t i = 0; i < ids.size(); ++i) label_of_identity_[ids[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < ds_->size(); ++i) {
      if (label_of_identity_.count(ds_->samples[i].identity)) {
        train_.push_back(i);
        train_identity_labels_.push_back(ds_->samples[i].identity);
      }
    }
  }

  const ParameterRefs& params_cache() {
    if (params_.empty()) params_ = model_.parameters();
    return params_;
  }

  const std::unordered_map<const Parameter*, Parameter*>& owners_cache() {
    if (owners_.empty()) owners_ = model_.owner_map();
    return owners_;
  }

  RunConfig cfg_;
  const Dataset* ds_;
  Model model_;
  AdamW optimizer_;
  int epoch_ = 0;
  Rng rng_;
  std::map<int, int> label_of_identity_;
  std::vector<std::size_t> train_;
  std::vector<int> train_identity_labels_;
  ParameterRefs params_;
  std::unordered_map<const Parameter*, Parameter*> owners_;
};

}  // namespace disenq
