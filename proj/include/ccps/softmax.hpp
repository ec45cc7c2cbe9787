#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace ccps {

/// log(sum(exp(z))) with max-shift, accumulated in double.
template <class T>
double log_sum_exp(std::span<const T> z) {
  double hi = -std::numeric_limits<double>::infinity();
  for (T v : z) hi = std::max(hi, static_cast<double>(v));
  double acc = 0.0;
  for (T v : z) acc += std::exp(static_cast<double>(v) - hi);
  return hi + std::log(acc);
}

template <class T>
std::vector<double> softmax(std::span<const T> z) {
  const double lse = log_sum_exp(z);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(static_cast<double>(z[i]) - lse);
  return p;
}

/// Index of the largest element; ties resolve to the lowest index.
template <class T>
std::size_t argmax(std::span<const T> z) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = i;
  return best;
}

}  // namespace ccps
