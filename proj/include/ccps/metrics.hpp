#pragma once

// Calibration and discrimination metrics over (confidence, outcome) pairs.
// All accumulation is in double.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccps/errors.hpp"

namespace ccps {

struct EvalRecord {
  double p = 0.0;  // predicted probability the answer is correct
  int o = 0;       // 1 if it was correct
};

inline void validate_records(std::span<const EvalRecord> records) {
  if (records.empty()) throw ValidationError("metric input is empty");
  for (const auto& r : records) {
    if (!std::isfinite(r.p) || r.p < 0.0 || r.p > 1.0)
      throw ValidationError("confidence must be a finite value in [0, 1]");
    if (r.o != 0 && r.o != 1) throw ValidationError("outcome must be 0 or 1");
  }
}

struct CalibrationBin {
  double lower = 0.0, upper = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;  // mean p in the bin, 0 if empty
  double accuracy = 0.0;    // mean o in the bin, 0 if empty
};

struct EceResult {
  double ece = 0.0;
  std::vector<CalibrationBin> bins;
};

/// 1-based bin of p: bin j covers ((j-1)/b, j/b], and p = 0 goes to bin 1.
inline std::size_t calibration_bin(double p, std::size_t bins) {
  const double b = static_cast<double>(bins);
  auto j = static_cast<std::size_t>(std::clamp(std::ceil(p * b), 1.0, b));
  // Correct for rounding in p * b against the exact boundaries j / b.
  while (j > 1 && p <= static_cast<double>(j - 1) / b) --j;
  while (j < bins && p > static_cast<double>(j) / b) ++j;
  return j;
}

inline EceResult ece(std::span<const EvalRecord> records, std::size_t bins = 10) {
  validate_records(records);
  if (bins == 0) throw ValidationError("ECE needs at least one bin");
  EceResult out;
  out.bins.resize(bins);
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  for (const auto& r : records) {
    const auto j = calibration_bin(r.p, bins) - 1;
    ++out.bins[j].count;
    conf_sum[j] += r.p;
    acc_sum[j] += r.o;
  }
  const double n = static_cast<double>(records.size());
  for (std::size_t j = 0; j < bins; ++j) {
    auto& bin = out.bins[j];
    bin.lower = static_cast<double>(j) / static_cast<double>(bins);
    bin.upper = static_cast<double>(j + 1) / static_cast<double>(bins);
    if (bin.count == 0) continue;
    const double c = static_cast<double>(bin.count);
    bin.confidence = conf_sum[j] / c;
    bin.accuracy = acc_sum[j] / c;
    out.ece += (c / n) * std::abs(bin.confidence - bin.accuracy);
  }
  return out;
}

inline double brier(std::span<const EvalRecord> records) {
  validate_records(records);
  double acc = 0.0;
  for (const auto& r : records) acc += (r.p - r.o) * (r.p - r.o);
  return acc / static_cast<double>(records.size());
}

inline double accuracy(std::span<const EvalRecord> records) {
  validate_records(records);
  double acc = 0.0;
  for (const auto& r : records) acc += r.o;
  return acc / static_cast<double>(records.size());
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U / (P * N)).
inline double auroc(std::span<const EvalRecord> records) {
  validate_records(records);
  std::vector<EvalRecord> sorted(records.begin(), records.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.p < b.p; });
  double positives = 0.0, negatives = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t k = i;
    double pos_in_group = 0.0;
    while (k < sorted.size() && sorted[k].p == sorted[i].p) pos_in_group += sorted[k++].o;
    // Average of the 1-based ranks i+1 .. k.
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + k);
    rank_sum += pos_in_group * mid_rank;
    positives += pos_in_group;
    negatives += static_cast<double>(k - i) - pos_in_group;
    i = k;
  }
  if (positives == 0.0 || negatives == 0.0)
    throw ValidationError("AUROC is undefined when only one class is present");
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

/// Average precision: sum over descending score thresholds of
/// (recall gain) x (precision at that threshold). Tied scores form one
/// threshold.
inline double aucpr(std::span<const EvalRecord> records) {
  validate_records(records);
  std::vector<EvalRecord> sorted(records.begin(), records.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.p > b.p; });
  double positives = 0.0;
  for (const auto& r : sorted) positives += r.o;
  if (positives == 0.0) throw ValidationError("AUCPR is undefined without positive outcomes");
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t k = i;
    while (k < sorted.size() && sorted[k].p == sorted[i].p) {
      (sorted[k].o ? tp : fp) += 1.0;
      ++k;
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = k;
  }
  return ap;
}

struct MetricReport {
  std::size_t n = 0;
  double ece = 0.0;
  double brier = 0.0;
  double acc = 0.0;
  std::optional<double> aucpr;  // empty when undefined for the input
  std::optional<double> auroc;
  std::vector<CalibrationBin> bins;
};

inline MetricReport evaluate(std::span<const EvalRecord> records, std::size_t bins = 10) {
  validate_records(records);
  MetricReport rep;
  rep.n = records.size();
  auto e = ece(records, bins);
  rep.ece = e.ece;
  rep.bins = std::move(e.bins);
  rep.brier = brier(records);
  rep.acc = accuracy(records);
  const bool has_pos = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.o == 1; });
  const bool has_neg = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.o == 0; });
  if (has_pos) rep.aucpr = aucpr(records);
  if (has_pos && has_neg) rep.auroc = auroc(records);
  return rep;
}

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["n"] = r.n;
  j["ece"] = r.ece;
  j["brier"] = r.brier;
  j["acc"] = r.acc;
  j["aucpr"] = r.aucpr ? nlohmann::ordered_json(*r.aucpr) : nlohmann::ordered_json(nullptr);
  j["auroc"] = r.auroc ? nlohmann::ordered_json(*r.auroc) : nlohmann::ordered_json(nullptr);
  auto& bins = j["bins"] = nlohmann::ordered_json::array();
  for (const auto& b : r.bins)
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count},
                    {"confidence", b.confidence}, {"accuracy", b.accuracy}});
  return j;
}

/// Reliability-diagram data, one row per bin.
inline std::string bins_to_csv(const std::vector<CalibrationBin>& bins, const std::string& task = {}) {
  std::string out;
  char buf[160];
  for (const auto& b : bins) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%zu,%.17g,%.17g\n", b.lower, b.upper, b.count, b.confidence, b.accuracy);
    out += (task.empty() ? "" : task + ",") + buf;
  }
  return out;
}

/// Aligned plain-text table; metrics shown as percentages.
inline std::string reports_to_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::size_t width = 4;
  for (const auto& [name, _] : rows) width = std::max(width, name.size());
  auto pct = [](std::optional<double> v) {
    char buf[32];
    if (!v) return std::string("     n/a");
    std::snprintf(buf, sizeof buf, "%8.2f", 100.0 * *v);
    return std::string(buf);
  };
  char head[256];
  std::snprintf(head, sizeof head, "%-*s %8s %8s %8s %8s %8s %8s\n", static_cast<int>(width), "task", "n", "ECE",
                "BRIER", "ACC", "AUCPR", "AUROC");
  std::string out = head;
  for (const auto& [name, r] : rows) {
    char left[128];
    std::snprintf(left, sizeof left, "%-*s %8zu", static_cast<int>(width), name.c_str(), r.n);
    out += std::string(left) + " " + pct(r.ece) + " " + pct(r.brier) + " " + pct(r.acc) + " " + pct(r.aucpr) +
           " " + pct(r.auroc) + "\n";
  }
  return out;
}

}  // namespace ccps
