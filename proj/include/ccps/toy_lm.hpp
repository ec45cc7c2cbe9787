#pragma once

// Synthetic stand-in for a frozen LLM: a random linear LM head plus labelled
// answers whose hidden states come from two class-conditional distributions.
//
// For every token a target vocabulary entry k is drawn and the hidden state is
//
//     h = (base + separability * gap * label) * w_k / |w_k| + noise * N(0, I)
//
// so correct answers (label 1) sit further out along their token's head row,
// i.e. produce more confident logits. The emitted token id is the argmax of
// the resulting logits, as under greedy decoding. With separability = 0 both
// classes share one distribution.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccps/perturbation.hpp"
#include "ccps/probe_data.hpp"
#include "ccps/rng.hpp"

namespace ccps {

struct ToyLMConfig {
  std::size_t d_h = 16;
  std::size_t vocab_size = 32;
  std::uint64_t seed = 0;
  std::size_t n_records = 1000;
  AnswerFormat format = AnswerFormat::MC;
  std::size_t max_len = 10;  // OE only
  double separability = 1.0;
  std::uint64_t record_offset = 0;  // index of the first record; splits share a head

  void validate() const {
    if (d_h == 0) throw ValidationError("'d_h' must be positive");
    if (vocab_size < 2) throw ValidationError("'V' must be at least 2");
    if (n_records == 0) throw ValidationError("'n_records' must be positive");
    if (format == AnswerFormat::OE && (max_len == 0 || max_len > kMaxOeTokens))
      throw ValidationError("'max_len' must be in [1, 30]");
    if (!(separability >= 0.0 && separability <= 1.0)) throw ValidationError("'separability' must be in [0, 1]");
  }
};

namespace toy {
inline constexpr double kBaseStrength = 1.0;
inline constexpr double kStrengthGap = 5.0;
inline constexpr double kNoise = 1.0;
inline constexpr std::uint64_t kHeadStream = 0;
inline constexpr std::uint64_t kRecordStream = 1;
}  // namespace toy

/// Reads a config object. Unknown keys and badly typed values are rejected
/// with a message naming the key.
inline ToyLMConfig toy_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  ToyLMConfig c;
  auto size_key = [&](const std::string& key, std::size_t& out) {
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ValidationError("invalid value for '" + key + "': expected a non-negative integer");
    out = v.get<std::size_t>();
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "d_h") size_key(key, c.d_h);
    else if (key == "V") size_key(key, c.vocab_size);
    else if (key == "n_records") size_key(key, c.n_records);
    else if (key == "max_len") size_key(key, c.max_len);
    else if (key == "record_offset") {
      if (!value.is_number_unsigned()) throw ValidationError("invalid value for 'record_offset': expected a non-negative integer");
      c.record_offset = value.get<std::uint64_t>();
    }
    else if (key == "seed") {
      if (!value.is_number_integer()) throw ValidationError("invalid value for 'seed': expected an integer");
      c.seed = value.get<std::uint64_t>();
    } else if (key == "format") {
      if (!value.is_string()) throw ValidationError("invalid value for 'format': expected \"MC\" or \"OE\"");
      c.format = parse_format(value.get<std::string>(), "format");
    } else if (key == "separability") {
      if (!value.is_number()) throw ValidationError("invalid value for 'separability': expected a number");
      c.separability = value.get<double>();
    } else {
      throw ValidationError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json toy_config_to_json(const ToyLMConfig& c) {
  return {{"d_h", c.d_h},       {"V", c.vocab_size},       {"seed", c.seed},
          {"n_records", c.n_records}, {"format", std::string(to_string(c.format))},
          {"max_len", c.max_len}, {"separability", c.separability}, {"record_offset", c.record_offset}};
}

inline LMHead toy_lm_head(const ToyLMConfig& c) {
  SplitMix64 rng(derive_seed(c.seed, toy::kHeadStream));
  LMHead head{c.vocab_size, c.d_h, std::vector<float>(c.vocab_size * c.d_h), {}};
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_h));
  for (auto& w : head.weights) w = static_cast<float>(rng.normal() * scale);
  return head;
}

/// Record `index` depends only on (config seed, separability, shape, index).
inline AnswerRecord toy_record(const ToyLMConfig& c, const LMHead& head, std::uint64_t index) {
  SplitMix64 rng(derive_seed(c.seed, toy::kRecordStream, index));
  AnswerRecord rec;
  rec.answer_id = std::to_string(index - c.record_offset);
  rec.format = c.format;
  rec.label = rng.uniform() < 0.5 ? 1u : 0u;
  const std::size_t L = c.format == AnswerFormat::MC ? 1 : 1 + static_cast<std::size_t>(rng.below(c.max_len));
  const double strength = toy::kBaseStrength + c.separability * toy::kStrengthGap * rec.label;

  std::vector<float> h(c.d_h);
  for (std::size_t i = 0; i < L; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(c.vocab_size));
    const auto wk = head.row(k);
    double norm2 = 0.0;
    for (float w : wk) norm2 += static_cast<double>(w) * w;
    const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
    for (std::size_t j = 0; j < c.d_h; ++j)
      h[j] = static_cast<float>(strength * wk[j] * inv + toy::kNoise * rng.normal());
    const auto z = compute_logits(head, std::span<const float>(h));
    rec.token_ids.push_back(static_cast<std::uint32_t>(argmax(std::span<const float>(z))));
    rec.hidden_states.insert(rec.hidden_states.end(), h.begin(), h.end());
  }
  return rec;
}

inline ProbeDump generate(const ToyLMConfig& c) {
  c.validate();
  ProbeDump dump;
  dump.lm_head = toy_lm_head(c);
  dump.manifest.d_h = c.d_h;
  dump.manifest.vocab_size = c.vocab_size;
  dump.manifest.record_count = c.n_records;
  dump.manifest.format = c.format;
  dump.manifest.source = "toy_lm " + toy_config_to_json(c).dump();
  dump.records.reserve(c.n_records);
  for (std::size_t i = 0; i < c.n_records; ++i) dump.records.push_back(toy_record(c, dump.lm_head, c.record_offset + i));
  return dump;
}

}  // namespace ccps
