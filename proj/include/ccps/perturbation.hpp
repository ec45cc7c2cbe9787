#pragma once

// Adversarial perturbation of a token's final hidden state.
//
// With a linear LM head Z = W h + b and loss L = -log softmax(Z)[t], the
// gradient has the closed form dL/dh = W^T (p - onehot(t)), computed here as
// sum_{v != t} p_v (w_v - w_t) to avoid cancellation in p_t - 1 when the
// distribution is nearly one-hot. States are moved along the normalised
// gradient by eps_s = s * eps_max / S for s = 1..S.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ccps/errors.hpp"
#include "ccps/probe_data.hpp"
#include "ccps/softmax.hpp"

namespace ccps {

struct PerturbationConfig {
  double eps_max = 20.0;
  std::size_t steps = 5;

  /// Magnitude of step s (1-based).
  double epsilon(std::size_t s) const noexcept { return static_cast<double>(s) * (eps_max / static_cast<double>(steps)); }

  /// Reported by epsilon_to_flip when no step changes the argmax.
  double flip_sentinel() const noexcept {
    return eps_max * static_cast<double>(steps + 1) / static_cast<double>(steps);
  }

  void validate() const {
    if (!(eps_max > 0.0) || !std::isfinite(eps_max)) throw ValidationError("eps_max must be a positive finite number");
    if (steps == 0) throw ValidationError("perturbation steps must be positive");
  }
};

/// Gradients with a norm below this are treated as exactly zero.
inline constexpr double kZeroJacobianNorm = 1e-12;

template <class T>
struct TokenTrajectory {
  std::uint32_t token = 0;
  std::size_t hidden_dim = 0;
  std::size_t vocab_size = 0;
  std::vector<T> h0;
  std::vector<T> z0;
  double loss = 0.0;
  std::vector<T> jacobian;
  double jacobian_norm = 0.0;
  std::vector<T> direction;     // unit length or all zero
  std::vector<double> epsilons; // eps_1..eps_S
  std::vector<T> hs;            // S x d_h
  std::vector<T> zs;            // S x V

  std::size_t steps() const noexcept { return epsilons.size(); }
  std::span<const T> hidden(std::size_t s) const noexcept {
    return std::span<const T>(hs).subspan(s * hidden_dim, hidden_dim);
  }
  std::span<const T> logits(std::size_t s) const noexcept {
    return std::span<const T>(zs).subspan(s * vocab_size, vocab_size);
  }
  bool zero_direction() const noexcept {
    for (T v : direction)
      if (v != T(0)) return false;
    return true;
  }
};

template <class T>
void compute_logits(const BasicLMHead<T>& head, std::span<const T> h, std::span<T> out) {
  if (h.size() != head.hidden_dim)
    throw ValidationError("hidden state has length " + std::to_string(h.size()) + ", LM head expects d_h = " +
                          std::to_string(head.hidden_dim));
  if (out.size() != head.vocab_size) throw ValidationError("logit buffer length must equal V");
  for (std::size_t v = 0; v < head.vocab_size; ++v) {
    const auto w = head.row(v);
    double acc = head.has_bias() ? static_cast<double>(head.bias[v]) : 0.0;
    for (std::size_t j = 0; j < h.size(); ++j) acc += static_cast<double>(w[j]) * static_cast<double>(h[j]);
    out[v] = static_cast<T>(acc);
  }
}

template <class T>
std::vector<T> compute_logits(const BasicLMHead<T>& head, std::span<const T> h) {
  std::vector<T> z(head.vocab_size);
  compute_logits(head, h, std::span<T>(z));
  return z;
}

template <class T>
struct LossGradient {
  double loss = 0.0;
  std::vector<T> jacobian;
};

/// Negative log-likelihood of token t at state h and its gradient w.r.t. h.
template <class T>
LossGradient<T> compute_jacobian(const BasicLMHead<T>& head, std::span<const T> h, std::uint32_t t) {
  if (t >= head.vocab_size)
    throw ValidationError("token id out of range: " + std::to_string(t) + " >= V=" + std::to_string(head.vocab_size));
  const auto z = compute_logits(head, h);
  const double lse = log_sum_exp(std::span<const T>(z));
  LossGradient<T> out;
  out.loss = lse - static_cast<double>(z[t]);

  std::vector<double> grad(head.hidden_dim, 0.0);
  const auto wt = head.row(t);
  for (std::size_t v = 0; v < head.vocab_size; ++v) {
    if (v == t) continue;
    const double p = std::exp(static_cast<double>(z[v]) - lse);
    if (p == 0.0) continue;
    const auto wv = head.row(v);
    for (std::size_t j = 0; j < head.hidden_dim; ++j)
      grad[j] += p * (static_cast<double>(wv[j]) - static_cast<double>(wt[j]));
  }
  out.jacobian.assign(grad.begin(), grad.end());
  return out;
}

template <class T>
TokenTrajectory<T> perturb(const BasicLMHead<T>& head, std::span<const T> h, std::uint32_t t,
                           const PerturbationConfig& config = {}) {
  config.validate();
  TokenTrajectory<T> traj;
  traj.token = t;
  traj.hidden_dim = head.hidden_dim;
  traj.vocab_size = head.vocab_size;
  traj.h0.assign(h.begin(), h.end());
  traj.z0 = compute_logits(head, h);

  auto lg = compute_jacobian(head, h, t);
  traj.loss = lg.loss;
  traj.jacobian = std::move(lg.jacobian);

  double norm2 = 0.0;
  for (T g : traj.jacobian) norm2 += static_cast<double>(g) * static_cast<double>(g);
  traj.jacobian_norm = std::sqrt(norm2);

  traj.direction.assign(head.hidden_dim, T(0));
  const bool moves = traj.jacobian_norm >= kZeroJacobianNorm;
  if (moves)
    for (std::size_t j = 0; j < head.hidden_dim; ++j)
      traj.direction[j] = static_cast<T>(static_cast<double>(traj.jacobian[j]) / traj.jacobian_norm);

  const auto S = config.steps;
  traj.epsilons.resize(S);
  traj.hs.resize(S * head.hidden_dim);
  traj.zs.resize(S * head.vocab_size);
  for (std::size_t s = 0; s < S; ++s) {
    const double eps = config.epsilon(s + 1);
    traj.epsilons[s] = eps;
    std::span<T> hs(traj.hs.data() + s * head.hidden_dim, head.hidden_dim);
    std::span<T> zs(traj.zs.data() + s * head.vocab_size, head.vocab_size);
    if (!moves) {
      std::copy(traj.h0.begin(), traj.h0.end(), hs.begin());
      std::copy(traj.z0.begin(), traj.z0.end(), zs.begin());
      continue;
    }
    for (std::size_t j = 0; j < head.hidden_dim; ++j)
      hs[j] = static_cast<T>(static_cast<double>(traj.h0[j]) + eps * static_cast<double>(traj.direction[j]));
    compute_logits(head, std::span<const T>(hs), zs);
  }
  return traj;
}

}  // namespace ccps
