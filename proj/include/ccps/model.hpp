#pragma once

// Confidence network (encoder + classification head), feature standardizer,
// and the packaged model with its binary file format.
//
//   MC: encoder  75 -> 64 -> 32 -> 16 -> 8   (ELU on all but the embedding)
//       head      8 -> 48 -> 24 -> 12 -> 2   (ELU on hidden layers)
//   OE: encoder  conv 75->64 k3 + ReLU, conv 64->32 k3 + ReLU, max pool, 32 -> 16
//       head     16 -> 32 (ReLU) -> 2

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ccps/binary_io.hpp"
#include "ccps/features.hpp"
#include "ccps/nn.hpp"
#include "ccps/probe_data.hpp"
#include "ccps/rng.hpp"

namespace ccps {

inline constexpr std::size_t kConvKernel = 3;

inline std::vector<std::size_t> mc_encoder_widths() { return {kFeatureDim, 64, 32, 16, 8}; }
inline std::vector<std::size_t> mc_head_widths() { return {8, 48, 24, 12, 2}; }
inline std::vector<std::size_t> oe_encoder_widths() { return {kFeatureDim, 64, 32, 16}; }  // conv, conv, linear
inline std::vector<std::size_t> oe_head_widths() { return {16, 32, 2}; }

template <class T>
class ConfidenceNet {
 public:
  struct Cache {
    std::size_t L = 0;
    typename nn::Mlp<T>::Cache mlp;
    typename nn::ConvEncoder<T>::Cache conv;
    typename nn::Mlp<T>::Cache head;
  };

  ConfidenceNet() = default;

  explicit ConfidenceNet(AnswerFormat format) : format_(format) {
    if (format == AnswerFormat::MC) {
      mlp_encoder_ = nn::Mlp<T>(mc_encoder_widths(), nn::Activation::Elu, false, "encoder");
      head_ = nn::Mlp<T>(mc_head_widths(), nn::Activation::Elu, false, "head");
    } else {
      const auto w = oe_encoder_widths();
      conv_encoder_ = nn::ConvEncoder<T>(w[0], w[1], w[2], w[3], kConvKernel);
      head_ = nn::Mlp<T>(oe_head_widths(), nn::Activation::Relu, false, "head");
    }
  }

  /// Fresh network with seeded initialization (encoder first, then head).
  static ConfidenceNet initialized(AnswerFormat format, std::uint64_t seed) {
    ConfidenceNet net(format);
    SplitMix64 rng(seed);
    if (format == AnswerFormat::MC) net.mlp_encoder_.init(rng);
    else net.conv_encoder_.init(rng);
    net.head_.init(rng);
    return net;
  }

  AnswerFormat format() const noexcept { return format_; }
  std::size_t embedding_dim() const noexcept {
    return format_ == AnswerFormat::MC ? mlp_encoder_.out_dim() : conv_encoder_.out_dim();
  }

  void check_input(std::size_t values, std::size_t L) const {
    if (L == 0) throw ValidationError("confidence network input has no tokens");
    if (values != L * kFeatureDim)
      throw ValidationError("confidence network expects rows of " + std::to_string(kFeatureDim) + " features");
    if (format_ == AnswerFormat::MC && L != 1) throw ValidationError("MC input must have exactly one row");
    if (format_ == AnswerFormat::OE && L > kMaxOeTokens) throw ValidationError("OE input longer than 30 tokens");
  }

  /// rows: L x 75 standardized features.
  std::span<const T> encode(std::span<const T> rows, std::size_t L, Cache& cache) const {
    check_input(rows.size(), L);
    cache.L = L;
    return format_ == AnswerFormat::MC ? mlp_encoder_.forward(rows, cache.mlp) : conv_encoder_.forward(rows, L, cache.conv);
  }

  std::span<const T> classify(std::span<const T> embedding, Cache& cache) const {
    return head_.forward(embedding, cache.head);
  }

  std::span<const T> embedding(const Cache& cache) const {
    return format_ == AnswerFormat::MC ? std::span<const T>(cache.mlp.output) : std::span<const T>(cache.conv.output);
  }

  /// Backprop d(loss)/d(logits) through the head; returns d(loss)/d(embedding).
  std::vector<T> backward_head(const Cache& cache, std::span<const T> dlogits) {
    std::vector<T> de;
    head_.backward(cache.head, dlogits, de);
    return de;
  }

  void backward_encoder(const Cache& cache, std::span<const T> de) {
    if (format_ == AnswerFormat::MC) {
      std::vector<T> dx;
      mlp_encoder_.backward(cache.mlp, de, dx);
    } else {
      conv_encoder_.backward(cache.conv, de);
    }
  }

  /// P(correct) = softmax(head(encoder(rows)))[1].
  double confidence(std::span<const T> rows, std::size_t L, Cache& cache) const {
    const auto logits = classify(encode(rows, L, cache), cache);
    const double a = static_cast<double>(logits[0]), b = static_cast<double>(logits[1]);
    return 1.0 / (1.0 + std::exp(a - b));
  }

  std::vector<nn::Param<T>*> encoder_params() {
    std::vector<nn::Param<T>*> out;
    auto add = [&](nn::Param<T>& p) { out.push_back(&p); };
    if (format_ == AnswerFormat::MC) mlp_encoder_.for_each_param(add);
    else conv_encoder_.for_each_param(add);
    return out;
  }

  std::vector<nn::Param<T>*> head_params() {
    std::vector<nn::Param<T>*> out;
    head_.for_each_param([&](nn::Param<T>& p) { out.push_back(&p); });
    return out;
  }

  std::vector<nn::Param<T>*> params() {
    auto all = encoder_params();
    for (auto* p : head_params()) all.push_back(p);
    return all;
  }

  std::size_t encoder_parameter_count() const { return count(const_cast<ConfidenceNet*>(this)->encoder_params()); }
  std::size_t head_parameter_count() const { return count(const_cast<ConfidenceNet*>(this)->head_params()); }
  std::size_t parameter_count() const { return encoder_parameter_count() + head_parameter_count(); }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  template <class U>
  ConfidenceNet<U> cast() const {
    ConfidenceNet<U> out(format_);
    auto src = const_cast<ConfidenceNet*>(this)->params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i)
      dst[i]->value.assign(src[i]->value.begin(), src[i]->value.end());
    return out;
  }

 private:
  static std::size_t count(const std::vector<nn::Param<T>*>& ps) {
    std::size_t n = 0;
    for (auto* p : ps) n += p->size();
    return n;
  }

  AnswerFormat format_ = AnswerFormat::MC;
  nn::Mlp<T> mlp_encoder_;
  nn::ConvEncoder<T> conv_encoder_;
  nn::Mlp<T> head_;
};

/// Per-feature z-scoring fitted on training rows (every token of every answer).
struct Standardizer {
  static constexpr double kStdFloor = 1e-6;

  std::vector<float> mean;
  std::vector<float> stddev;

  bool fitted() const noexcept { return mean.size() == kFeatureDim; }

  static Standardizer fit(std::span<const FeatureMatrix> data) {
    std::array<double, kFeatureDim> sum{}, sq{};
    std::size_t rows = 0;
    for (const auto& fm : data)
      for (std::size_t r = 0; r < fm.rows(); ++r, ++rows) {
        const auto row = fm.row(r);
        for (std::size_t k = 0; k < kFeatureDim; ++k) sum[k] += row[k];
      }
    if (rows == 0) throw ValidationError("cannot fit a standardizer on an empty dataset");
    std::array<double, kFeatureDim> mu{};
    for (std::size_t k = 0; k < kFeatureDim; ++k) mu[k] = sum[k] / static_cast<double>(rows);
    for (const auto& fm : data)
      for (std::size_t r = 0; r < fm.rows(); ++r) {
        const auto row = fm.row(r);
        for (std::size_t k = 0; k < kFeatureDim; ++k) sq[k] += (row[k] - mu[k]) * (row[k] - mu[k]);
      }
    Standardizer s;
    s.mean.resize(kFeatureDim);
    s.stddev.resize(kFeatureDim);
    for (std::size_t k = 0; k < kFeatureDim; ++k) {
      s.mean[k] = static_cast<float>(mu[k]);
      s.stddev[k] = static_cast<float>(std::max(std::sqrt(sq[k] / static_cast<double>(rows)), kStdFloor));
    }
    return s;
  }

  std::vector<float> apply(std::span<const float> values) const {
    std::vector<float> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto k = i % kFeatureDim;
      out[i] = (values[i] - mean[k]) / stddev[k];
    }
    return out;
  }

  bool operator==(const Standardizer&) const = default;
};

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.1;
  std::size_t batch_size = 32;
  std::size_t pretrain_steps = 5000;
  std::size_t finetune_steps = 5000;
  double margin = 1.0;
  std::uint64_t seed = 0;
  std::array<double, 2> class_weights{1.0, 1.0};  // cross-entropy weight for label 0 / 1

  void validate() const {
    if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be non-negative");
    if (batch_size == 0) throw ValidationError("batch size must be positive");
    if (!(margin > 0.0)) throw ValidationError("contrastive margin must be positive");
    if (!(class_weights[0] > 0.0 && class_weights[1] > 0.0)) throw ValidationError("class weights must be positive");
  }

  nn::AdamWConfig optimizer() const { return {lr, weight_decay, 0.9, 0.999, 1e-8}; }

  bool operator==(const TrainConfig&) const = default;
};

struct Prediction {
  std::vector<float> embedding;
  double p = 0.0;
};

/// Trained confidence estimator. Inference is const and thread-safe.
struct ConfidenceModel {
  AnswerFormat format = AnswerFormat::MC;
  Standardizer standardizer;
  ConfidenceNet<float> net;
  TrainConfig config;

  Prediction forward(const FeatureMatrix& fm) const {
    if (fm.values.size() % kFeatureDim != 0) throw ValidationError("feature matrix rows must have 75 values");
    if (!standardizer.fitted()) throw ValidationError("model has no fitted standardizer");
    const auto x = standardizer.apply(fm.values);
    typename ConfidenceNet<float>::Cache cache;
    Prediction out;
    out.p = net.confidence(x, fm.rows(), cache);
    const auto e = net.embedding(cache);
    out.embedding.assign(e.begin(), e.end());
    return out;
  }

  double predict(const FeatureMatrix& fm) const { return forward(fm).p; }
};

inline constexpr std::uint32_t kModelFileVersion = 1;

/// Model file: "CCPM", u32 version, u32 format, architecture (u32 D_f,
/// u32 count + encoder widths, u32 count + head widths, u32 kernel), config
/// snapshot, standardizer mean/std (75 f32 each), u32 tensor count, then per
/// tensor: name, u32 length, f32 values, encoder tensors first.
inline std::vector<std::uint8_t> encode_model(const ConfidenceModel& m) {
  io::ByteWriter w;
  w.magic("CCPM");
  w.u32(kModelFileVersion);
  w.u32(static_cast<std::uint32_t>(m.format));
  w.u32(static_cast<std::uint32_t>(kFeatureDim));
  const bool mc = m.format == AnswerFormat::MC;
  for (const auto& widths : {mc ? mc_encoder_widths() : oe_encoder_widths(), mc ? mc_head_widths() : oe_head_widths()}) {
    w.u32(static_cast<std::uint32_t>(widths.size()));
    for (auto x : widths) w.u32(static_cast<std::uint32_t>(x));
  }
  w.u32(mc ? 0u : static_cast<std::uint32_t>(kConvKernel));

  const auto& c = m.config;
  w.f64(c.lr);
  w.f64(c.weight_decay);
  w.u64(c.batch_size);
  w.u64(c.pretrain_steps);
  w.u64(c.finetune_steps);
  w.f64(c.margin);
  w.u64(c.seed);
  w.f64(c.class_weights[0]);
  w.f64(c.class_weights[1]);

  if (!m.standardizer.fitted()) throw ValidationError("cannot save a model without a fitted standardizer");
  w.f32s(m.standardizer.mean);
  w.f32s(m.standardizer.stddev);

  auto params = const_cast<ConfidenceNet<float>&>(m.net).params();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (auto* p : params) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->size()));
    w.f32s(p->value);
  }
  return w.bytes();
}

inline ConfidenceModel decode_model(std::span<const std::uint8_t> bytes, const std::string& name) {
  io::ByteReader r(bytes, name);
  r.expect_magic("CCPM");
  const auto at_version = r.offset();
  if (const auto v = r.u32(); v != kModelFileVersion) r.fail_at(at_version, "unsupported version " + std::to_string(v));
  const auto at_fmt = r.offset();
  const auto fmt = r.u32();
  if (fmt > 1) r.fail_at(at_fmt, "unknown format tag");
  ConfidenceModel m;
  m.format = static_cast<AnswerFormat>(fmt);
  const bool mc = m.format == AnswerFormat::MC;
  const auto at_arch = r.offset();
  if (r.u32() != kFeatureDim) r.fail_at(at_arch, "feature dimension mismatch");
  for (const auto& expected : {mc ? mc_encoder_widths() : oe_encoder_widths(), mc ? mc_head_widths() : oe_head_widths()}) {
    const auto at = r.offset();
    const auto n = r.u32();
    std::vector<std::size_t> got;
    for (std::uint32_t i = 0; i < n && i < 64; ++i) got.push_back(r.u32());
    if (got != expected) r.fail_at(at, "unsupported architecture");
  }
  const auto at_kernel = r.offset();
  if (r.u32() != (mc ? 0u : kConvKernel)) r.fail_at(at_kernel, "unsupported kernel size");

  auto& c = m.config;
  c.lr = r.f64();
  c.weight_decay = r.f64();
  c.batch_size = r.u64();
  c.pretrain_steps = r.u64();
  c.finetune_steps = r.u64();
  c.margin = r.f64();
  c.seed = r.u64();
  c.class_weights[0] = r.f64();
  c.class_weights[1] = r.f64();

  m.standardizer.mean.resize(kFeatureDim);
  m.standardizer.stddev.resize(kFeatureDim);
  r.finite_f32s(m.standardizer.mean, "standardizer mean");
  const auto at_std = r.offset();
  r.finite_f32s(m.standardizer.stddev, "standardizer std");
  for (float v : m.standardizer.stddev)
    if (!(v >= static_cast<float>(Standardizer::kStdFloor))) r.fail_at(at_std, "standardizer std below floor");

  m.net = ConfidenceNet<float>(m.format);
  auto params = m.net.params();
  const auto at_count = r.offset();
  if (r.u32() != params.size()) r.fail_at(at_count, "parameter tensor count mismatch");
  for (auto* p : params) {
    const auto at = r.offset();
    const auto tensor_name = r.str(256);
    if (tensor_name != p->name) r.fail_at(at, "expected tensor '" + p->name + "', found '" + tensor_name + "'");
    const auto at_len = r.offset();
    if (r.u32() != p->size()) r.fail_at(at_len, "tensor '" + p->name + "' has the wrong length");
    r.finite_f32s(p->value, p->name);
  }
  if (!r.at_end()) r.fail("trailing bytes after parameters");
  return m;
}

inline void save_model(const ConfidenceModel& m, const std::string& path) { io::write_file(path, encode_model(m)); }
inline ConfidenceModel load_model(const std::string& path) { return decode_model(io::read_file(path), path); }

}  // namespace ccps
