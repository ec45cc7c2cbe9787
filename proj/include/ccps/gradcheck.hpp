#pragma once

// Finite-difference verification of analytic gradients (double precision).

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ccps/model.hpp"
#include "ccps/nn.hpp"
#include "ccps/training.hpp"

namespace ccps::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Relative error between two gradient tensors, measured against the larger
/// of their max-norms. Absolute when both max-norms are below `floor`.
inline double tensor_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                                    double floor = 1e-12) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale < floor ? diff : diff / scale;
}

/// Central differences on an O(1) loss with h = 1e-5 resolve gradients to
/// about 1e-11, so tensors below this are compared absolutely (e.g. the last
/// encoder bias under the contrastive loss, which cancels in e_i - e_j).
inline constexpr double kGradientNoiseFloor = 1e-8;

/// `grad()` fills every param's .grad with the analytic gradient; `loss()`
/// evaluates the objective (and may clobber .grad). Central differences with
/// step h on every element.
inline GradCheckResult gradient_check(const std::vector<Param<double>*>& params, const std::function<double()>& loss,
                                      const std::function<void()>& grad, double h = 1e-5) {
  grad();
  std::vector<std::vector<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    std::vector<double> numeric(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = loss();
      p->value[i] = orig - h;
      const double down = loss();
      p->value[i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    const double err = tensor_relative_error(analytic[k], numeric, kGradientNoiseFloor);
    res.checked += p->size();
    if (err >= res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_param = p->name;
    }
  }
  return res;
}

enum class CheckedLoss { CrossEntropy, Contrastive };

/// Gradient check of a full confidence network on a batch. Cross-entropy
/// covers encoder and head; the contrastive loss covers the encoder.
inline GradCheckResult backprop_check(ConfidenceNet<double>& net, const std::vector<BasicExample<double>>& examples,
                                      CheckedLoss which, double margin = 1.0, double h = 1e-5) {
  std::vector<const BasicExample<double>*> batch;
  for (const auto& e : examples) batch.push_back(&e);
  const std::array<double, 2> weights{1.0, 1.0};
  ConfidenceNet<double>::Cache cache;
  std::vector<ConfidenceNet<double>::Cache> caches;

  auto run = [&] {
    net.zero_grad();
    return which == CheckedLoss::CrossEntropy ? cross_entropy_batch<double>(net, batch, weights, cache)
                                              : contrastive_batch<double>(net, batch, margin, caches);
  };
  const auto params = which == CheckedLoss::CrossEntropy ? net.params() : net.encoder_params();
  return gradient_check(params, run, [&] { run(); }, h);
}

}  // namespace ccps::nn
