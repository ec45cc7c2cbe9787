#pragma once

// Feature file: "CCPF", u32 version=1, u32 D_f=75, u32 format (0 MC, 1 OE),
// u32 answer count, then per answer: u32 id length, id bytes, u32 L,
// u32 label, L*75 f32 (little-endian).

#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "ccps/binary_io.hpp"
#include "ccps/features.hpp"
#include "ccps/probe_data.hpp"

namespace ccps {

inline constexpr std::uint32_t kFeatureFileVersion = 1;

struct FeatureSet {
  AnswerFormat format = AnswerFormat::MC;
  std::vector<FeatureMatrix> answers;

  bool operator==(const FeatureSet&) const = default;
};

inline std::vector<std::uint8_t> encode_feature_set(const FeatureSet& set) {
  io::ByteWriter w;
  w.magic("CCPF");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(kFeatureDim));
  w.u32(static_cast<std::uint32_t>(set.format));
  w.u32(static_cast<std::uint32_t>(set.answers.size()));
  for (const auto& fm : set.answers) {
    if (fm.values.empty() || fm.values.size() % kFeatureDim != 0)
      throw ValidationError("answer '" + fm.answer_id + "': feature matrix is not L x 75");
    w.str(fm.answer_id);
    w.u32(static_cast<std::uint32_t>(fm.rows()));
    w.u32(fm.label);
    w.f32s(fm.values);
  }
  return w.bytes();
}

inline FeatureSet decode_feature_set(std::span<const std::uint8_t> bytes, const std::string& name) {
  io::ByteReader r(bytes, name);
  r.expect_magic("CCPF");
  const auto at_version = r.offset();
  if (const auto v = r.u32(); v != kFeatureFileVersion) r.fail_at(at_version, "unsupported version " + std::to_string(v));
  const auto at_dim = r.offset();
  if (const auto d = r.u32(); d != kFeatureDim) r.fail_at(at_dim, "feature dimension " + std::to_string(d) + " != 75");
  const auto at_fmt = r.offset();
  const auto fmt = r.u32();
  if (fmt > 1) r.fail_at(at_fmt, "unknown answer format tag " + std::to_string(fmt));
  FeatureSet set;
  set.format = static_cast<AnswerFormat>(fmt);
  const auto count = r.u32();
  set.answers.reserve(std::min<std::size_t>(count, r.remaining() / 16));
  for (std::uint32_t i = 0; i < count; ++i) {
    r.set_record(i);
    FeatureMatrix fm;
    fm.answer_id = r.str(4096);
    const auto at_len = r.offset();
    const auto L = r.u32();
    if (L == 0 || L > kMaxOeTokens || (set.format == AnswerFormat::MC && L != 1))
      r.fail_at(at_len, "invalid answer length " + std::to_string(L));
    const auto at_label = r.offset();
    fm.label = r.u32();
    if (fm.label > 1) r.fail_at(at_label, "label must be 0 or 1");
    fm.values.resize(static_cast<std::size_t>(L) * kFeatureDim);
    r.finite_f32s(fm.values, "features");
    set.answers.push_back(std::move(fm));
  }
  if (!r.at_end()) r.fail("trailing bytes after " + std::to_string(count) + " answers");
  return set;
}

inline void write_feature_set(const FeatureSet& set, const std::string& path) {
  io::write_file(path, encode_feature_set(set));
}

inline FeatureSet read_feature_set(const std::string& path) { return decode_feature_set(io::read_file(path), path); }

namespace detail {

inline std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace detail

/// One CSV row per token: answer_id, token_index, label, then the 75 named
/// features.
inline std::string features_to_csv(const FeatureSet& set) {
  std::string out = "answer_id,token_index,label";
  for (const auto& n : feature_names()) out += "," + n;
  out += "\n";
  for (const auto& fm : set.answers) {
    for (std::size_t i = 0; i < fm.rows(); ++i) {
      out += detail::csv_quote(fm.answer_id) + "," + std::to_string(i) + "," + std::to_string(fm.label);
      for (float v : fm.row(i)) out += "," + detail::format_float(v);
      out += "\n";
    }
  }
  return out;
}

/// Same content as the CSV, one JSON object per token with keys f0..f74.
inline std::string features_to_jsonl(const FeatureSet& set) {
  std::string out;
  for (const auto& fm : set.answers) {
    for (std::size_t i = 0; i < fm.rows(); ++i) {
      nlohmann::ordered_json j;
      j["answer_id"] = fm.answer_id;
      j["token_index"] = i;
      j["label"] = fm.label;
      const auto row = fm.row(i);
      for (std::size_t k = 0; k < kFeatureDim; ++k) j["f" + std::to_string(k)] = row[k];
      out += j.dump() + "\n";
    }
  }
  return out;
}

}  // namespace ccps
