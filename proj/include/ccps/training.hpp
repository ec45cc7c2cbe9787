#pragma once

// Two-stage training: contrastive pre-training of the encoder, then joint
// cross-entropy fine-tuning of encoder and head. Both stages run a fixed
// number of AdamW steps on mini-batches drawn by reshuffling the training set
// every epoch. Single-threaded and deterministic for a fixed seed.

#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "ccps/features.hpp"
#include "ccps/model.hpp"
#include "ccps/nn.hpp"
#include "ccps/rng.hpp"

namespace ccps {

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};
using LossCurve = std::vector<LossPoint>;

inline std::string loss_curve_csv(const LossCurve& curve) {
  std::string out = "step,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", p.step, p.loss);
    out += buf;
  }
  return out;
}

/// A standardized answer ready for the network.
template <class T>
struct BasicExample {
  std::vector<T> x;  // L x 75
  std::size_t L = 0;
  std::uint32_t label = 0;
};
using TrainingExample = BasicExample<float>;

inline std::vector<TrainingExample> standardize(std::span<const FeatureMatrix> data, const Standardizer& s) {
  std::vector<TrainingExample> out;
  out.reserve(data.size());
  for (const auto& fm : data) out.push_back({s.apply(fm.values), fm.rows(), fm.label});
  return out;
}

template <class Range>
void require_both_classes(const Range& data) {
  bool pos = false, neg = false;
  for (const auto& ex : data) (ex.label ? pos : neg) = true;
  if (!pos || !neg)
    throw ValidationError("training data must contain both correct and incorrect answers (found only label " +
                          std::string(pos ? "1" : "0") + ")");
}

/// Epoch-wise reshuffled index stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    shuffle(order_, rng_);
  }

  void next(std::size_t batch, std::vector<std::size_t>& out) {
    out.clear();
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        shuffle(order_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
  }

 private:
  std::vector<std::size_t> order_;
  SplitMix64 rng_;
  std::size_t pos_ = 0;
};

namespace train_streams {
inline constexpr std::uint64_t kInit = 10;
inline constexpr std::uint64_t kPretrain = 11;
inline constexpr std::uint64_t kFinetune = 12;
}  // namespace train_streams

/// Mean pairwise contrastive loss of one batch; accumulates encoder gradients.
template <class T>
double contrastive_batch(ConfidenceNet<T>& net, std::span<const BasicExample<T>* const> batch, double margin,
                         std::vector<typename ConfidenceNet<T>::Cache>& caches) {
  caches.resize(batch.size());
  std::vector<std::span<const T>> emb;
  std::vector<std::uint32_t> labels;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    emb.push_back(net.encode(batch[b]->x, batch[b]->L, caches[b]));
    labels.push_back(batch[b]->label);
  }
  std::vector<std::vector<T>> grads(batch.size(), std::vector<T>(net.embedding_dim(), T(0)));
  const double loss = nn::contrastive_loss<T>(emb, labels, margin, grads);
  for (std::size_t b = 0; b < batch.size(); ++b) net.backward_encoder(caches[b], grads[b]);
  return loss;
}

/// Mean (class-weighted) cross-entropy of one batch; accumulates all gradients.
template <class T>
double cross_entropy_batch(ConfidenceNet<T>& net, std::span<const BasicExample<T>* const> batch,
                           const std::array<double, 2>& class_weights, typename ConfidenceNet<T>::Cache& cache) {
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::array<T, 2> dlogits{};
  for (const auto* ex : batch) {
    const auto logits = net.classify(net.encode(ex->x, ex->L, cache), cache);
    loss += nn::softmax_cross_entropy<T>(logits, ex->label, class_weights[ex->label] * scale, dlogits);
    const auto de = net.backward_head(cache, dlogits);
    net.backward_encoder(cache, de);
  }
  return loss;
}

/// Runs cfg.pretrain_steps AdamW steps on the encoder only.
inline LossCurve contrastive_pretrain(ConfidenceNet<float>& net, std::span<const TrainingExample> data,
                                      const TrainConfig& cfg) {
  cfg.validate();
  require_both_classes(data);
  nn::AdamW<float> opt(net.encoder_params(), cfg.optimizer());
  BatchSampler sampler(data.size(), derive_seed(cfg.seed, train_streams::kPretrain));
  std::vector<std::size_t> idx;
  std::vector<const TrainingExample*> batch;
  std::vector<ConfidenceNet<float>::Cache> caches;
  LossCurve curve;
  curve.reserve(cfg.pretrain_steps);
  for (std::size_t step = 1; step <= cfg.pretrain_steps; ++step) {
    sampler.next(cfg.batch_size, idx);
    batch.clear();
    for (auto i : idx) batch.push_back(&data[i]);
    opt.zero_grad();
    const double loss = contrastive_batch<float>(net, batch, cfg.margin, caches);
    opt.step();
    curve.push_back({step, loss});
  }
  return curve;
}

/// Runs cfg.finetune_steps AdamW steps on encoder and head together.
inline LossCurve finetune_steps(ConfidenceNet<float>& net, std::span<const TrainingExample> data,
                                const TrainConfig& cfg) {
  cfg.validate();
  require_both_classes(data);
  nn::AdamW<float> opt(net.params(), cfg.optimizer());
  BatchSampler sampler(data.size(), derive_seed(cfg.seed, train_streams::kFinetune));
  std::vector<std::size_t> idx;
  std::vector<const TrainingExample*> batch;
  ConfidenceNet<float>::Cache cache;
  LossCurve curve;
  curve.reserve(cfg.finetune_steps);
  for (std::size_t step = 1; step <= cfg.finetune_steps; ++step) {
    sampler.next(cfg.batch_size, idx);
    batch.clear();
    for (auto i : idx) batch.push_back(&data[i]);
    opt.zero_grad();
    const double loss = cross_entropy_batch<float>(net, batch, cfg.class_weights, cache);
    opt.step();
    curve.push_back({step, loss});
  }
  return curve;
}

/// Fits the standardizer on `train` (unless one is supplied), fine-tunes
/// `net`, and packages the result.
inline ConfidenceModel joint_finetune(ConfidenceNet<float> net, std::span<const FeatureMatrix> train,
                                      const TrainConfig& cfg, const Standardizer* prefit = nullptr,
                                      LossCurve* curve = nullptr) {
  require_both_classes(train);
  ConfidenceModel model;
  model.format = net.format();
  model.config = cfg;
  model.standardizer = prefit ? *prefit : Standardizer::fit(train);
  const auto data = standardize(train, model.standardizer);
  auto c = finetune_steps(net, data, cfg);
  if (curve) *curve = std::move(c);
  model.net = std::move(net);
  return model;
}

struct TrainResult {
  ConfidenceModel model;
  LossCurve pretrain_curve;
  LossCurve finetune_curve;
};

inline void check_format(std::span<const FeatureMatrix> data, AnswerFormat format) {
  for (const auto& fm : data) {
    if (fm.rows() == 0) throw ValidationError("answer '" + fm.answer_id + "' has no feature rows");
    if (format == AnswerFormat::MC && fm.rows() != 1)
      throw ValidationError("answer '" + fm.answer_id + "' has " + std::to_string(fm.rows()) + " rows; MC needs 1");
    if (fm.rows() > kMaxOeTokens) throw ValidationError("answer '" + fm.answer_id + "' exceeds 30 tokens");
  }
}

/// Both stages, with the standardizer fitted once on the training split and
/// shared by pre-training and fine-tuning.
inline TrainResult train_confidence_model(std::span<const FeatureMatrix> train, AnswerFormat format,
                                          const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ValidationError("training set is empty");
  check_format(train, format);
  require_both_classes(train);
  TrainResult result;
  const auto standardizer = Standardizer::fit(train);
  const auto data = standardize(train, standardizer);
  auto net = ConfidenceNet<float>::initialized(format, derive_seed(cfg.seed, train_streams::kInit));
  result.pretrain_curve = contrastive_pretrain(net, data, cfg);
  result.model = joint_finetune(std::move(net), train, cfg, &standardizer, &result.finetune_curve);
  return result;
}

}  // namespace ccps
