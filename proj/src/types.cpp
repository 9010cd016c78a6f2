#include "vrpo/types.hpp"

#include "vrpo/vocab.hpp"

namespace vrpo {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kDirect: return "direct";
    case Mode::kConcise: return "concise";
    case Mode::kCot: return "cot";
  }
  return "?";
}

Mode mode_from_name(const std::string& s) {
  if (s == "direct") return Mode::kDirect;
  if (s == "concise") return Mode::kConcise;
  if (s == "cot") return Mode::kCot;
  throw ConfigError("unknown mode '" + s + "' (expected direct|concise|cot)");
}

const char* positional_mode_name(PositionalMode m) {
  switch (m) {
    case PositionalMode::kLearned: return "learned";
    case PositionalMode::kRotary: return "rotary";
    case PositionalMode::kNone: return "none";
  }
  return "?";
}

PositionalMode positional_mode_from_name(const std::string& s) {
  if (s == "learned") return PositionalMode::kLearned;
  if (s == "rotary") return PositionalMode::kRotary;
  if (s == "none") return PositionalMode::kNone;
  throw ConfigError("unknown positional mode '" + s + "'");
}

void ModelConfig::validate() const {
  VRPO_CHECK(n_layers >= 1 && n_heads >= 1 && d_model >= n_heads && d_ff >= 1, ConfigError,
             "model config: non-positive dimension");
  VRPO_CHECK(d_model % n_heads == 0, ConfigError,
             "model config: d_model " << d_model << " not divisible by n_heads " << n_heads);
  VRPO_CHECK(max_seq_len >= 8, ConfigError, "model config: max_seq_len too small");
  VRPO_CHECK(visual_dim >= 1, ConfigError, "model config: visual_dim must be positive");
}

int DecodeBudget::default_budget(Mode m) {
  switch (m) {
    case Mode::kDirect: return 4;
    case Mode::kConcise: return 32;
    case Mode::kCot: return 256;
  }
  return 32;
}

DecodeBudget DecodeBudget::for_mode(Mode m, float temperature) {
  DecodeBudget b;
  b.mode = m;
  b.max_new_tokens = default_budget(m);
  b.temperature = temperature;
  b.stop_tokens = {vocab::eos_id()};
  return b;
}

void TokenSequence::validate() const {
  const int n = length();
  VRPO_CHECK(static_cast<int>(positions.size()) == n && static_cast<int>(sizes.size()) == n &&
                 static_cast<int>(modality.size()) == n,
             ContractError, "TokenSequence: metadata length mismatch");
  VRPO_CHECK(n_visual >= 0 && n_visual <= n, ContractError, "TokenSequence: bad n_visual");
  for (int i = 0; i < n; ++i) {
    VRPO_CHECK(sizes[static_cast<std::size_t>(i)] >= 1.0f, ContractError,
               "TokenSequence: size weight < 1");
    const bool want_visual = i < n_visual;
    VRPO_CHECK((modality[static_cast<std::size_t>(i)] == Modality::kVisual) == want_visual,
               ContractError, "TokenSequence: modality partition violated");
  }
}

std::vector<int> KVCache::per_layer_lengths() const {
  std::vector<int> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(static_cast<int>(l.k.rows()));
  return out;
}

std::size_t KVCache::bytes() const {
  std::size_t b = 0;
  for (const auto& l : layers)
    b += sizeof(float) * static_cast<std::size_t>(l.k.size() + l.v.size());
  return b;
}

}  // namespace vrpo
