#pragma once

// Shared domain types for the model, the token-compression pass and the
// harness: configs, the token sequence that compression acts on, and the
// per-layer KV cache.

#include <cstdint>
#include <string>
#include <vector>

#include "vrpo/common.hpp"

namespace vrpo {

enum class Mode { kDirect, kConcise, kCot };

const char* mode_name(Mode m);
Mode mode_from_name(const std::string& s);

enum class PositionalMode { kLearned, kRotary, kNone };

const char* positional_mode_name(PositionalMode m);
PositionalMode positional_mode_from_name(const std::string& s);

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 0;  // 0 = use the built-in vocab size
  int max_seq_len = 320;
  int visual_dim = 16;
  PositionalMode positional_mode = PositionalMode::kLearned;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct DecodeBudget {
  Mode mode = Mode::kConcise;
  int max_new_tokens = 32;
  float temperature = 1.0f;
  std::vector<int> stop_tokens;  // empty = {<eos>}

  // Mode defaults: direct=4, concise=32, cot=256.
  static DecodeBudget for_mode(Mode m, float temperature = 1.0f);
  static int default_budget(Mode m);
};

enum class Modality : std::uint8_t { kVisual, kText };

// Interleaved token states entering the LLM: a visual prefix followed by
// text tokens. States carry no positional signal; positions are injected by
// the forward pass. Size weights track merged-token mass (1 = unmerged).
struct TokenSequence {
  MatRM states;                    // [n, d_model]
  std::vector<int> positions;
  std::vector<float> sizes;
  std::vector<Modality> modality;
  std::vector<int> text_ids;       // token ids of the text suffix
  int n_visual = 0;
  int next_position = 0;           // position id of the first decoded token

  int length() const { return static_cast<int>(states.rows()); }
  int n_text() const { return length() - n_visual; }
  void validate() const;
};

struct LayerKV {
  MatRM k;  // [len, d_model], heads folded
  MatRM v;
};

// Per-layer key/value entries. Pruned entries are physically absent: the
// matrices shrink, lengths drop, nothing is masked.
struct KVCache {
  std::vector<LayerKV> layers;
  std::vector<int> positions;      // aligned with entries (uniform across layers
  std::vector<float> sizes;        //   once prefill has finished)
  std::vector<std::uint8_t> visual;
  int next_position = 0;
  int max_seq_len = 0;

  int length() const { return layers.empty() ? 0 : static_cast<int>(layers[0].k.rows()); }
  std::vector<int> per_layer_lengths() const;
  std::size_t bytes() const;
};

// Byte accounting for the prefill/decode working set; used to demonstrate
// that physical pruning actually lowers the peak footprint.
struct MemoryStats {
  std::size_t current_bytes = 0;
  std::size_t peak_bytes = 0;

  void add(std::size_t b) {
    current_bytes += b;
    if (current_bytes > peak_bytes) peak_bytes = current_bytes;
  }
  void sub(std::size_t b) { current_bytes -= (b > current_bytes ? current_bytes : b); }
};

}  // namespace vrpo
