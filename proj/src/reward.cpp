#include "vrpo/reward.hpp"

#include <algorithm>
#include <cctype>

namespace vrpo {

namespace {

struct Span {
  std::size_t open_at = std::string::npos;   // position of the opening tag
  std::size_t body_from = std::string::npos;
  std::size_t body_to = std::string::npos;   // position of the closing tag
  bool found = false;
};

Span find_span(const std::string& raw, const std::string& open, const std::string& close) {
  Span s;
  s.open_at = raw.find(open);
  if (s.open_at == std::string::npos) return s;
  s.body_from = s.open_at + open.size();
  s.body_to = raw.find(close, s.body_from);
  if (s.body_to == std::string::npos) return s;
  s.found = true;
  return s;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

ResponseParts parse_response(const std::string& raw, Mode mode) {
  ResponseParts parts;
  const Span think = find_span(raw, "<think>", "</think>");
  const Span answer = find_span(raw, "<answer>", "</answer>");
  const bool think_opened = raw.find("<think>") != std::string::npos;

  if (think.found)
    parts.think_text = raw.substr(think.body_from, think.body_to - think.body_from);
  if (answer.found)
    parts.answer_text = raw.substr(answer.body_from, answer.body_to - answer.body_from);

  if (mode == Mode::kDirect) {
    // strict: any think bracket disqualifies a direct response
    parts.well_formed = answer.found && !think_opened;
  } else {
    parts.well_formed = think.found && answer.found &&
                        think.body_to + std::string("</think>").size() <= answer.open_at;
  }
  return parts;
}

int format_reward(const ResponseParts& parts, Mode /*mode*/) {
  return parts.well_formed ? 1 : 0;
}

int accuracy_reward(const ResponseParts& parts, char gold) {
  if (!parts.answer_text.has_value()) return 0;
  std::string a = trim(*parts.answer_text);
  if (a.size() != 1) return 0;
  const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(a[0])));
  return c == gold ? 1 : 0;
}

RewardBreakdown score_response(const std::string& raw, Mode mode, char gold,
                               float format_weight) {
  ResponseParts parts = parse_response(raw, mode);
  RewardBreakdown r;
  r.format = format_reward(parts, mode);
  r.accuracy = accuracy_reward(parts, gold);
  r.total = static_cast<float>(r.accuracy) + format_weight * static_cast<float>(r.format);
  return r;
}

}  // namespace vrpo
