#pragma once

// The 75 per-token stability features, in canonical order:
//
//   [0, 12)   original-state features
//   [12, 15)  overall perturbation features
//   [15, 47)  perturbed-state metrics x (min, max, mean, std) over the S steps
//   [47, 75)  original-vs-perturbed comparison metrics x (min, max, mean, std)
//
// Everything is computed in double from the trajectory and stored as float.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ccps/perturbation.hpp"
#include "ccps/probe_data.hpp"
#include "ccps/softmax.hpp"

namespace ccps {

inline constexpr std::size_t kOriginalFeatureCount = 12;
inline constexpr std::size_t kOverallFeatureCount = 3;
inline constexpr std::size_t kPerturbedMetricCount = 8;
inline constexpr std::size_t kComparisonMetricCount = 7;
inline constexpr std::size_t kStatCount = 4;
inline constexpr std::size_t kPerturbedFeatureCount = kPerturbedMetricCount * kStatCount;
inline constexpr std::size_t kComparisonFeatureCount = kComparisonMetricCount * kStatCount;
inline constexpr std::size_t kFeatureDim =
    kOriginalFeatureCount + kOverallFeatureCount + kPerturbedFeatureCount + kComparisonFeatureCount;
static_assert(kFeatureDim == 75);

inline constexpr std::size_t kOverallOffset = kOriginalFeatureCount;
inline constexpr std::size_t kPerturbedOffset = kOverallOffset + kOverallFeatureCount;
inline constexpr std::size_t kComparisonOffset = kPerturbedOffset + kPerturbedFeatureCount;

/// Floor applied to probabilities inside log terms of entropy, KL and JS.
inline constexpr double kProbFloor = 1e-12;
/// Vectors with a smaller norm have cosine similarity 0 with anything.
inline constexpr double kCosineNormFloor = 1e-12;

inline const std::array<std::string, kFeatureDim>& feature_names() {
  static const auto names = [] {
    std::array<std::string, kFeatureDim> n;
    const char* original[] = {"original_log_prob_actual",
                              "original_prob_actual",
                              "original_logit_actual",
                              "original_prob_argmax",
                              "original_logit_argmax",
                              "original_entropy",
                              "original_margin_logit_top1_top2",
                              "original_margin_prob_top1_top2",
                              "original_norm_logits_L2",
                              "original_std_logits",
                              "original_norm_hidden_state_L2",
                              "is_actual_token_original_argmax"};
    const char* overall[] = {"jacobian_norm_token", "epsilon_to_flip_token", "pei_value_token"};
    const char* perturbed[] = {"perturbed_log_prob_actual", "perturbed_prob_actual",
                               "perturbed_logit_actual",    "perturbed_prob_argmax",
                               "perturbed_logit_argmax",    "perturbed_entropy",
                               "perturbed_margin_logit_top1_top2", "perturbed_norm_logits_L2"};
    const char* comparison[] = {"delta_log_prob_actual_from_original",
                                "did_argmax_change_from_original",
                                "kl_div_perturbed_from_original",
                                "js_div_perturbed_from_original",
                                "cosine_sim_logits_perturbed_to_original",
                                "cosine_sim_hidden_perturbed_to_original",
                                "l2_dist_hidden_perturbed_from_original"};
    const char* stats[] = {"min", "max", "mean", "std"};
    std::size_t k = 0;
    for (auto* s : original) n[k++] = s;
    for (auto* s : overall) n[k++] = s;
    for (auto* m : perturbed)
      for (auto* s : stats) n[k++] = std::string(m) + "_" + s;
    for (auto* m : comparison)
      for (auto* s : stats) n[k++] = std::string(m) + "_" + s;
    return n;
  }();
  return names;
}

/// min / max / mean / population std of a sequence. Values are summed
/// relative to the first element so a constant sequence gives mean equal to
/// that constant and std exactly 0.
struct Summary {
  double min = 0.0, max = 0.0, mean = 0.0, std = 0.0;

  static Summary of(std::span<const double> xs) {
    Summary s;
    if (xs.empty()) return s;
    const double base = xs[0];
    s.min = s.max = base;
    double shift_sum = 0.0;
    for (double x : xs) {
      s.min = std::min(s.min, x);
      s.max = std::max(s.max, x);
      shift_sum += x - base;
    }
    const double n = static_cast<double>(xs.size());
    const double shift_mean = shift_sum / n;
    s.mean = base + shift_mean;
    double ss = 0.0;
    for (double x : xs) {
      const double d = (x - base) - shift_mean;
      ss += d * d;
    }
    s.std = std::sqrt(ss / n);
    return s;
  }
};

namespace detail {

/// Statistics of one logit vector shared by the original and perturbed groups.
struct DistributionStats {
  std::vector<double> probs;
  double log_prob_actual = 0.0;
  double prob_actual = 0.0;
  double logit_actual = 0.0;
  double prob_argmax = 0.0;
  double logit_argmax = 0.0;
  double entropy = 0.0;
  double margin_logit = 0.0;
  double margin_prob = 0.0;
  double norm_logits = 0.0;
  std::size_t top = 0;
};

inline double safe_log(double p) { return std::log(std::max(p, kProbFloor)); }

template <class T>
DistributionStats distribution_stats(std::span<const T> z, std::uint32_t t) {
  DistributionStats d;
  const double lse = log_sum_exp(z);
  d.probs.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) d.probs[i] = std::exp(static_cast<double>(z[i]) - lse);
  d.log_prob_actual = static_cast<double>(z[t]) - lse;
  d.prob_actual = d.probs[t];
  d.logit_actual = static_cast<double>(z[t]);
  d.top = argmax(z);
  d.logit_argmax = static_cast<double>(z[d.top]);
  d.prob_argmax = d.probs[d.top];

  double second_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i)
    if (i != d.top) second_logit = std::max(second_logit, static_cast<double>(z[i]));
  if (z.size() > 1) {
    d.margin_logit = d.logit_argmax - second_logit;
    d.margin_prob = d.prob_argmax - std::exp(second_logit - lse);
  }
  double h = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    h -= d.probs[i] * safe_log(d.probs[i]);
    n2 += static_cast<double>(z[i]) * static_cast<double>(z[i]);
  }
  d.entropy = h;
  d.norm_logits = std::sqrt(n2);
  return d;
}

template <class T>
double l2_norm(std::span<const T> x) {
  double acc = 0.0;
  for (T v : x) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

}  // namespace detail

/// D_KL(p || q) in nats with the probability floor; clamped at 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i] * (detail::safe_log(p[i]) - detail::safe_log(q[i]));
  }
  return std::max(acc, 0.0);
}

/// Jensen-Shannon divergence in nats, within [0, ln 2].
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  const double js = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m);
  return std::clamp(js, 0.0, std::numbers::ln2);
}

/// Cosine similarity; 0 when either vector is (near) zero.
template <class T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (std::sqrt(na) < kCosineNormFloor || std::sqrt(nb) < kCosineNormFloor) return 0.0;
  // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is exactly 1.
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

template <class T>
std::array<double, kOriginalFeatureCount> original_features(const TokenTrajectory<T>& traj) {
  const auto z0 = std::span<const T>(traj.z0);
  const auto d = detail::distribution_stats(z0, traj.token);

  const double n = static_cast<double>(z0.size());
  double mean = 0.0;
  for (T v : z0) mean += static_cast<double>(v);
  mean /= n;
  double var = 0.0;
  for (T v : z0) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);

  return {d.log_prob_actual,
          d.prob_actual,
          d.logit_actual,
          d.prob_argmax,
          d.logit_argmax,
          d.entropy,
          d.margin_logit,
          d.margin_prob,
          d.norm_logits,
          std::sqrt(var / n),
          detail::l2_norm(std::span<const T>(traj.h0)),
          d.top == traj.token ? 1.0 : 0.0};
}

/// Smallest eps_s whose argmax differs from the original; the sentinel
/// eps_max * (S + 1) / S when no step flips it.
template <class T>
double epsilon_to_flip(const TokenTrajectory<T>& traj) {
  const auto top0 = argmax(std::span<const T>(traj.z0));
  for (std::size_t s = 0; s < traj.steps(); ++s)
    if (argmax(traj.logits(s)) != top0) return traj.epsilons[s];
  const double S = static_cast<double>(traj.steps());
  return traj.epsilons.back() * (S + 1.0) / S;
}

template <class T>
std::array<double, kOverallFeatureCount> overall_features(const TokenTrajectory<T>& traj) {
  const auto z0 = std::span<const T>(traj.z0);
  const double lp0 = static_cast<double>(z0[traj.token]) - log_sum_exp(z0);
  double drop = 0.0;
  for (std::size_t s = 0; s < traj.steps(); ++s) {
    const auto zs = traj.logits(s);
    drop += lp0 - (static_cast<double>(zs[traj.token]) - log_sum_exp(zs));
  }
  return {traj.jacobian_norm, epsilon_to_flip(traj), drop / static_cast<double>(traj.steps())};
}

namespace detail {

template <std::size_t M>
std::array<double, M * kStatCount> summarize(const std::array<std::vector<double>, M>& per_step) {
  std::array<double, M * kStatCount> out{};
  for (std::size_t m = 0; m < M; ++m) {
    const auto s = Summary::of(per_step[m]);
    out[m * kStatCount + 0] = s.min;
    out[m * kStatCount + 1] = s.max;
    out[m * kStatCount + 2] = s.mean;
    out[m * kStatCount + 3] = s.std;
  }
  return out;
}

}  // namespace detail

template <class T>
std::array<double, kPerturbedFeatureCount> perturbed_features(const TokenTrajectory<T>& traj) {
  std::array<std::vector<double>, kPerturbedMetricCount> per_step;
  for (std::size_t s = 0; s < traj.steps(); ++s) {
    const auto d = detail::distribution_stats(traj.logits(s), traj.token);
    const double values[] = {d.log_prob_actual, d.prob_actual,  d.logit_actual, d.prob_argmax,
                             d.logit_argmax,    d.entropy,      d.margin_logit, d.norm_logits};
    for (std::size_t m = 0; m < kPerturbedMetricCount; ++m) per_step[m].push_back(values[m]);
  }
  return detail::summarize(per_step);
}

template <class T>
std::array<double, kComparisonFeatureCount> comparison_features(const TokenTrajectory<T>& traj) {
  const auto z0 = std::span<const T>(traj.z0);
  const auto h0 = std::span<const T>(traj.h0);
  const auto d0 = detail::distribution_stats(z0, traj.token);

  std::array<std::vector<double>, kComparisonMetricCount> per_step;
  for (std::size_t s = 0; s < traj.steps(); ++s) {
    const auto zs = traj.logits(s);
    const auto hs = traj.hidden(s);
    const auto ds = detail::distribution_stats(zs, traj.token);
    double dist2 = 0.0;
    for (std::size_t j = 0; j < h0.size(); ++j) {
      const double diff = static_cast<double>(hs[j]) - static_cast<double>(h0[j]);
      dist2 += diff * diff;
    }
    const double values[] = {d0.log_prob_actual - ds.log_prob_actual,
                             ds.top != d0.top ? 1.0 : 0.0,
                             kl_divergence(d0.probs, ds.probs),
                             js_divergence(d0.probs, ds.probs),
                             cosine_similarity(z0, zs),
                             cosine_similarity(h0, hs),
                             std::sqrt(dist2)};
    for (std::size_t m = 0; m < kComparisonMetricCount; ++m) per_step[m].push_back(values[m]);
  }
  return detail::summarize(per_step);
}

/// Full canonical feature vector for one trajectory.
template <class T>
std::array<double, kFeatureDim> token_features(const TokenTrajectory<T>& traj) {
  std::array<double, kFeatureDim> f{};
  auto out = f.begin();
  for (double v : original_features(traj)) *out++ = v;
  for (double v : overall_features(traj)) *out++ = v;
  for (double v : perturbed_features(traj)) *out++ = v;
  for (double v : comparison_features(traj)) *out++ = v;
  return f;
}

/// Per-answer feature rows: length() x 75, row-major.
struct FeatureMatrix {
  std::string answer_id;
  std::uint32_t label = 0;
  std::vector<float> values;

  std::size_t rows() const noexcept { return values.size() / kFeatureDim; }
  std::span<const float> row(std::size_t i) const noexcept {
    return std::span<const float>(values).subspan(i * kFeatureDim, kFeatureDim);
  }

  bool operator==(const FeatureMatrix&) const = default;
};

inline FeatureMatrix extract(const AnswerRecord& record, const LMHead& head, const PerturbationConfig& config = {}) {
  if (record.length() == 0) throw ValidationError("record '" + record.answer_id + "' has no tokens");
  if (record.hidden_states.size() != record.length() * head.hidden_dim)
    throw ValidationError("record '" + record.answer_id + "' hidden states do not match d_h");
  FeatureMatrix fm;
  fm.answer_id = record.answer_id;
  fm.label = record.label;
  fm.values.reserve(record.length() * kFeatureDim);
  for (std::size_t i = 0; i < record.length(); ++i) {
    const auto traj = perturb(head, record.state(i, head.hidden_dim), record.token_ids[i], config);
    for (double v : token_features(traj)) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f))
        throw ValidationError("record '" + record.answer_id + "': non-finite feature at token " + std::to_string(i));
      fm.values.push_back(f);
    }
  }
  return fm;
}

/// Extracts every record on up to `threads` workers. Output order follows
/// input order and the bytes do not depend on the thread count.
inline std::vector<FeatureMatrix> extract_all(std::span<const AnswerRecord> records, const LMHead& head,
                                              const PerturbationConfig& config = {}, std::size_t threads = 1) {
  config.validate();
  std::vector<FeatureMatrix> out(records.size());
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(records.size(), 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) out[i] = extract(records[i], head, config);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < threads; ++w)
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < records.size(); i += threads) out[i] = extract(records[i], head, config);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace ccps
