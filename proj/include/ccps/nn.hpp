#pragma once

// Minimal neural-network engine: dense and 1-D convolution layers, ELU/ReLU,
// global max pooling, the two training losses, and AdamW. Layers operate on
// one example at a time and accumulate parameter gradients across calls, so a
// mini-batch is a loop of forward/backward passes followed by one optimizer
// step. Everything is templated on the scalar type; training uses float and
// the gradient checks use double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ccps/errors.hpp"
#include "ccps/rng.hpp"

namespace ccps::nn {

template <class T>
struct Param {
  std::string name;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  Param(std::string n, std::size_t size) : name(std::move(n)), value(size, T(0)), grad(size, T(0)) {}

  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() noexcept { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)).
template <class T>
void glorot_uniform(std::vector<T>& w, std::size_t fan_in, std::size_t fan_out, SplitMix64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
}

/// Dot product with eight independent partial sums so the compiler can
/// vectorize it without reassociation flags. Summation order is fixed, so the
/// result is deterministic.
template <class T>
T dot(const T* a, const T* b, std::size_t n) noexcept {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

enum class Activation : std::uint8_t { None = 0, Elu = 1, Relu = 2 };

template <class T>
T activate(Activation a, T x) noexcept {
  switch (a) {
    case Activation::Elu: return x > T(0) ? x : static_cast<T>(std::expm1(x));
    case Activation::Relu: return x > T(0) ? x : T(0);
    default: return x;
  }
}

/// Derivative at pre-activation x.
template <class T>
T activate_grad(Activation a, T x) noexcept {
  switch (a) {
    case Activation::Elu: return x > T(0) ? T(1) : static_cast<T>(std::exp(x));
    case Activation::Relu: return x > T(0) ? T(1) : T(0);
    default: return T(1);
  }
}

/// y = W x + b with W stored out x in, row-major.
template <class T>
struct Dense {
  std::size_t in = 0, out = 0;
  Param<T> weight, bias;

  Dense() = default;
  Dense(std::size_t in_dim, std::size_t out_dim, const std::string& name)
      : in(in_dim), out(out_dim), weight(name + ".weight", in_dim * out_dim), bias(name + ".bias", out_dim) {}

  void init(SplitMix64& rng) {
    glorot_uniform(weight.value, in, out, rng);
    std::fill(bias.value.begin(), bias.value.end(), T(0));
  }

  void forward(std::span<const T> x, std::span<T> y) const {
    for (std::size_t o = 0; o < out; ++o) {
      y[o] = bias.value[o] + dot(weight.value.data() + o * in, x.data(), in);
    }
  }

  /// Accumulates dW, db; writes dx when non-empty.
  void backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
    for (std::size_t o = 0; o < out; ++o) {
      const T g = dy[o];
      bias.grad[o] += g;
      if (g == T(0)) continue;
      T* gw = weight.grad.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) gw[i] += g * x[i];
    }
    if (dx.empty()) return;
    std::fill(dx.begin(), dx.end(), T(0));
    for (std::size_t o = 0; o < out; ++o) {
      const T g = dy[o];
      if (g == T(0)) continue;
      const T* w = weight.value.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dx[i] += g * w[i];
    }
  }
};

/// Stride-1 convolution over the token axis, padded by kernel/2 on each side
/// with copies of the edge tokens, so the output has the input's length and a
/// constant sequence maps to a constant sequence. Sequences are token-major (L x channels);
/// the kernel is stored out x kernel x in.
template <class T>
struct Conv1d {
  std::size_t in_ch = 0, out_ch = 0, kernel = 3;
  Param<T> weight, bias;

  Conv1d() = default;
  Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, const std::string& name)
      : in_ch(in_channels),
        out_ch(out_channels),
        kernel(kernel_size),
        weight(name + ".weight", in_channels * out_channels * kernel_size),
        bias(name + ".bias", out_channels) {}

  void init(SplitMix64& rng) {
    glorot_uniform(weight.value, in_ch * kernel, out_ch * kernel, rng);
    std::fill(bias.value.begin(), bias.value.end(), T(0));
  }

  /// Input token read by tap k at output position t (clamped into [0, L)).
  static std::size_t source(std::size_t t, std::size_t k, std::size_t kernel, std::size_t L) noexcept {
    const auto s = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(kernel / 2);
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(s, 0, static_cast<std::ptrdiff_t>(L) - 1));
  }

  void forward(std::span<const T> x, std::size_t L, std::span<T> y) const {
    for (std::size_t t = 0; t < L; ++t) {
      T* yt = y.data() + t * out_ch;
      for (std::size_t o = 0; o < out_ch; ++o) yt[o] = bias.value[o];
      for (std::size_t k = 0; k < kernel; ++k) {
        const T* xs = x.data() + source(t, k, kernel, L) * in_ch;
        for (std::size_t o = 0; o < out_ch; ++o) {
          yt[o] += dot(weight.value.data() + (o * kernel + k) * in_ch, xs, in_ch);
        }
      }
    }
  }

  void backward(std::span<const T> x, std::size_t L, std::span<const T> dy, std::span<T> dx) {
    if (!dx.empty()) std::fill(dx.begin(), dx.end(), T(0));
    for (std::size_t t = 0; t < L; ++t) {
      const T* gt = dy.data() + t * out_ch;
      for (std::size_t o = 0; o < out_ch; ++o) bias.grad[o] += gt[o];
      for (std::size_t k = 0; k < kernel; ++k) {
        const auto s = source(t, k, kernel, L);
        const T* xs = x.data() + s * in_ch;
        for (std::size_t o = 0; o < out_ch; ++o) {
          const T g = gt[o];
          if (g == T(0)) continue;
          T* gw = weight.grad.data() + (o * kernel + k) * in_ch;
          for (std::size_t i = 0; i < in_ch; ++i) gw[i] += g * xs[i];
          if (!dx.empty()) {
            const T* w = weight.value.data() + (o * kernel + k) * in_ch;
            T* dxs = dx.data() + s * in_ch;
            for (std::size_t i = 0; i < in_ch; ++i) dxs[i] += g * w[i];
          }
        }
      }
    }
  }
};

/// Max over the token axis per channel. Ties go to the lowest token index,
/// which is also where the gradient is routed.
template <class T>
void global_max_pool(std::span<const T> x, std::size_t L, std::size_t channels, std::span<T> y,
                     std::span<std::size_t> where) {
  for (std::size_t c = 0; c < channels; ++c) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < L; ++t)
      if (x[t * channels + c] > x[best * channels + c]) best = t;
    y[c] = x[best * channels + c];
    where[c] = best;
  }
}

/// Stack of dense layers with one activation after every hidden layer and,
/// optionally, after the last.
template <class T>
struct Mlp {
  std::vector<Dense<T>> layers;
  Activation activation = Activation::None;
  bool activate_last = false;

  struct Cache {
    std::vector<std::vector<T>> inputs;  // input of each layer
    std::vector<std::vector<T>> pre;     // pre-activation output of each layer
    std::vector<T> output;
  };

  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths, Activation act, bool act_last, const std::string& name)
      : activation(act), activate_last(act_last) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers.emplace_back(widths[i], widths[i + 1], name + "." + std::to_string(i));
  }

  std::size_t in_dim() const noexcept { return layers.front().in; }
  std::size_t out_dim() const noexcept { return layers.back().out; }

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{in_dim()};
    for (const auto& l : layers) w.push_back(l.out);
    return w;
  }

  void init(SplitMix64& rng) {
    for (auto& l : layers) l.init(rng);
  }

  bool activated(std::size_t layer) const noexcept { return layer + 1 < layers.size() || activate_last; }

  std::span<const T> forward(std::span<const T> x, Cache& cache) const {
    cache.inputs.resize(layers.size());
    cache.pre.resize(layers.size());
    cache.inputs[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& pre = cache.pre[l];
      pre.resize(layers[l].out);
      layers[l].forward(cache.inputs[l], pre);
      auto& next = l + 1 < layers.size() ? cache.inputs[l + 1] : cache.output;
      next.resize(pre.size());
      const auto act = activated(l) ? activation : Activation::None;
      for (std::size_t i = 0; i < pre.size(); ++i) next[i] = activate(act, pre[i]);
    }
    return cache.output;
  }

  /// Accumulates parameter gradients; returns d(loss)/d(input) in dx.
  void backward(const Cache& cache, std::span<const T> dy, std::vector<T>& dx) {
    std::vector<T> grad(dy.begin(), dy.end()), below;
    for (std::size_t l = layers.size(); l-- > 0;) {
      if (activated(l))
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= activate_grad(activation, cache.pre[l][i]);
      below.resize(layers[l].in);
      layers[l].backward(cache.inputs[l], grad, below);
      grad.swap(below);
    }
    dx = std::move(grad);
  }

  template <class F>
  void for_each_param(F&& f) {
    for (auto& l : layers) {
      f(l.weight);
      f(l.bias);
    }
  }
};

/// Sequence encoder: conv(k) + ReLU, conv(k) + ReLU, global max pool, linear.
template <class T>
struct ConvEncoder {
  Conv1d<T> conv1, conv2;
  Dense<T> proj;

  struct Cache {
    std::size_t L = 0;
    std::vector<T> x, pre1, act1, pre2, act2, pooled, output;
    std::vector<std::size_t> where;
  };

  ConvEncoder() = default;
  ConvEncoder(std::size_t in, std::size_t c1, std::size_t c2, std::size_t emb, std::size_t kernel)
      : conv1(in, c1, kernel, "encoder.conv1"), conv2(c1, c2, kernel, "encoder.conv2"), proj(c2, emb, "encoder.proj") {}

  std::size_t in_dim() const noexcept { return conv1.in_ch; }
  std::size_t out_dim() const noexcept { return proj.out; }

  void init(SplitMix64& rng) {
    conv1.init(rng);
    conv2.init(rng);
    proj.init(rng);
  }

  std::span<const T> forward(std::span<const T> x, std::size_t L, Cache& c) const {
    c.L = L;
    c.x.assign(x.begin(), x.end());
    c.pre1.resize(L * conv1.out_ch);
    conv1.forward(c.x, L, c.pre1);
    c.act1.resize(c.pre1.size());
    for (std::size_t i = 0; i < c.pre1.size(); ++i) c.act1[i] = activate(Activation::Relu, c.pre1[i]);
    c.pre2.resize(L * conv2.out_ch);
    conv2.forward(c.act1, L, c.pre2);
    c.act2.resize(c.pre2.size());
    for (std::size_t i = 0; i < c.pre2.size(); ++i) c.act2[i] = activate(Activation::Relu, c.pre2[i]);
    c.pooled.resize(conv2.out_ch);
    c.where.resize(conv2.out_ch);
    global_max_pool<T>(c.act2, L, conv2.out_ch, c.pooled, c.where);
    c.output.resize(proj.out);
    proj.forward(c.pooled, c.output);
    return c.output;
  }

  void backward(const Cache& c, std::span<const T> dy, std::vector<T>* dx = nullptr) {
    const auto L = c.L;
    std::vector<T> d_pooled(conv2.out_ch);
    proj.backward(c.pooled, dy, d_pooled);
    std::vector<T> d2(L * conv2.out_ch, T(0));
    for (std::size_t ch = 0; ch < conv2.out_ch; ++ch) d2[c.where[ch] * conv2.out_ch + ch] = d_pooled[ch];
    for (std::size_t i = 0; i < d2.size(); ++i) d2[i] *= activate_grad(Activation::Relu, c.pre2[i]);
    std::vector<T> d1(L * conv1.out_ch);
    conv2.backward(c.act1, L, d2, d1);
    for (std::size_t i = 0; i < d1.size(); ++i) d1[i] *= activate_grad(Activation::Relu, c.pre1[i]);
    if (dx) {
      dx->resize(c.x.size());
      conv1.backward(c.x, L, d1, *dx);
    } else {
      conv1.backward(c.x, L, d1, {});
    }
  }

  template <class F>
  void for_each_param(F&& f) {
    f(conv1.weight);
    f(conv1.bias);
    f(conv2.weight);
    f(conv2.bias);
    f(proj.weight);
    f(proj.bias);
  }
};

/// Softmax cross-entropy of `logits` against class `label`, scaled by
/// `weight`; writes d(loss)/d(logits).
template <class T>
double softmax_cross_entropy(std::span<const T> logits, std::size_t label, double weight, std::span<T> dlogits) {
  double hi = static_cast<double>(logits[0]);
  for (T z : logits) hi = std::max(hi, static_cast<double>(z));
  double sum = 0.0;
  for (T z : logits) sum += std::exp(static_cast<double>(z) - hi);
  const double lse = hi + std::log(sum);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double p = std::exp(static_cast<double>(logits[k]) - lse);
    dlogits[k] = static_cast<T>(weight * (p - (k == label ? 1.0 : 0.0)));
  }
  return weight * (lse - static_cast<double>(logits[label]));
}

/// Pairwise max-margin contrastive loss averaged over all pairs i < j:
/// same-class pairs cost D^2, cross-class pairs max(0, margin - D)^2, with D
/// the Euclidean distance between embeddings. Gradients are accumulated into
/// `grads` (one vector per embedding, pre-sized).
template <class T>
double contrastive_loss(const std::vector<std::span<const T>>& emb, std::span<const std::uint32_t> labels,
                        double margin, std::vector<std::vector<T>>& grads) {
  const std::size_t n = emb.size();
  if (n < 2) return 0.0;
  const double pairs = static_cast<double>(n * (n - 1) / 2);
  double total = 0.0;
  const std::size_t dim = emb[0].size();
  std::vector<double> diff(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        diff[k] = static_cast<double>(emb[i][k]) - static_cast<double>(emb[j][k]);
        d2 += diff[k] * diff[k];
      }
      double coeff;  // d(pair loss)/d(e_i) = coeff * (e_i - e_j)
      if (labels[i] == labels[j]) {
        total += d2;
        coeff = 2.0;
      } else {
        const double d = std::sqrt(d2);
        const double gap = margin - d;
        if (gap <= 0.0) continue;
        total += gap * gap;
        coeff = d > 0.0 ? -2.0 * gap / d : 0.0;
      }
      coeff /= pairs;
      for (std::size_t k = 0; k < dim; ++k) {
        const auto g = static_cast<T>(coeff * diff[k]);
        grads[i][k] += g;
        grads[j][k] -= g;
      }
    }
  }
  return total / pairs;
}

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

/// One AdamW update with decoupled weight decay:
///   theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)
template <class T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamWState& state, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ValidationError("adamw_step: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ValidationError("adamw_step: optimizer state size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    const double theta = static_cast<double>(params[i]);
    params[i] = static_cast<T>(theta - cfg.lr * cfg.weight_decay * theta - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

/// AdamW over a fixed list of parameters (state kept per parameter).
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Param<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg), states_(params_.size()) {}

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i)
      adamw_step<T>(params_[i]->value, params_[i]->grad, states_[i], cfg_);
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<Param<T>*> params_;
  AdamWConfig cfg_;
  std::vector<AdamWState> states_;
};

}  // namespace ccps::nn
