#pragma once

// Rule-based rewards: bracket-format parsing plus exact-match accuracy.

#include <optional>
#include <string>

#include "vrpo/types.hpp"

namespace vrpo {

struct ResponseParts {
  std::optional<std::string> think_text;
  std::optional<std::string> answer_text;
  bool well_formed = false;
};

struct RewardBreakdown {
  int accuracy = 0;  // {0,1}
  int format = 0;    // {0,1}
  float total = 0.0f;
};

inline constexpr float kDefaultFormatWeight = 0.5f;

// Extracts the first <think>...</think> and first <answer>...</answer>
// spans. Direct mode is well formed iff the answer span is present and no
// think span appears; concise/cot require both spans, think before answer,
// non-overlapping. Never throws on arbitrary input.
ResponseParts parse_response(const std::string& raw, Mode mode);

int format_reward(const ResponseParts& parts, Mode mode);

// 1 iff the trimmed, case-normalized answer equals the gold letter.
int accuracy_reward(const ResponseParts& parts, char gold);

RewardBreakdown score_response(const std::string& raw, Mode mode, char gold,
                               float format_weight = kDefaultFormatWeight);

}  // namespace vrpo
