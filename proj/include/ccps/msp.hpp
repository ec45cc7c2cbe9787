#pragma once

#include <cmath>

#include "ccps/perturbation.hpp"
#include "ccps/probe_data.hpp"
#include "ccps/softmax.hpp"

namespace ccps {

/// Reference confidence without training: the geometric mean of the answer
/// tokens' original probabilities, exp(mean_i log P0(t_i)).
inline double msp_confidence(const AnswerRecord& record, const LMHead& head) {
  if (record.length() == 0) throw ValidationError("record '" + record.answer_id + "' has no tokens");
  double sum_log = 0.0;
  for (std::size_t i = 0; i < record.length(); ++i) {
    const auto t = record.token_ids[i];
    if (t >= head.vocab_size) throw ValidationError("token id out of range");
    const auto z = compute_logits(head, record.state(i, head.hidden_dim));
    sum_log += static_cast<double>(z[t]) - log_sum_exp(std::span<const float>(z));
  }
  return std::exp(sum_log / static_cast<double>(record.length()));
}

}  // namespace ccps
