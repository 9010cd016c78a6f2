#pragma once

// Small decoder-only multimodal transformer: projected visual tokens are
// prefixed to text tokens, prefill fills a per-layer KV cache (optionally
// compressed), decode extends it one token at a time. A separate
// differentiable path (graph_prefill / sequence_logprob) replays the same
// math through the autograd tape, including the decode-phase conditioning
// produced by physical pruning.

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "vrpo/compress.hpp"
#include "vrpo/tensor.hpp"
#include "vrpo/types.hpp"

namespace vrpo {

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;
  Tensor ln2_g, ln2_b;
  Tensor w_up, b_up, w_down, b_down;
};

struct ModelParams {
  ModelConfig config;
  Tensor tok_emb;   // [V, d]
  Tensor pos_emb;   // [max_seq_len, d]; defined only for learned positions
  Tensor vis_w;     // [d_v, d]
  Tensor vis_b;     // [d]
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor head;      // [d, V]

  static ModelParams init(const ModelConfig& config, Rng& rng);
  NamedTensors named();               // shares storage
  std::vector<Tensor> all();
  ModelParams clone() const;          // deep copy (fresh storage)
  void set_requires_grad(bool b);
  std::int64_t param_count() const;
};

void save_model(const std::string& stem, ModelParams& params,
                const std::map<std::string, std::string>& extra_meta = {});
ModelParams load_model(const std::string& stem);

// Frame feature vectors projected through the trainable projector, then
// text token embeddings; positions 0..n-1. States carry no positional
// signal yet (the forward pass injects it), so identical frames map to
// identical visual token states.
TokenSequence embed_inputs(const ModelParams& params, std::span<const VecX> frames,
                           std::span<const int> text_ids);

struct CompressionTrace {
  MergeRecord merge;
  std::vector<std::vector<int>> prune_kept;  // survivors per prune event
  std::vector<int> per_layer_lens;           // tokens processed by each layer
};

struct PrefillResult {
  KVCache cache;
  VecX last_logits;
  CompressionTrace trace;
  MemoryStats mem;
  int input_tokens = 0;  // pre-compression token count
};

PrefillResult prefill(const ModelParams& params, const TokenSequence& seq,
                      const CompressionPlan* plan = nullptr);

// Appends one token to the cache and returns next-token logits.
VecX decode_step(const ModelParams& params, KVCache& cache, int token_id,
                 MemoryStats* mem = nullptr);

struct Generation {
  std::vector<int> tokens;       // includes the stop token when hit
  std::vector<float> logprobs;   // log pi(token | prefix) at temperature 1
  std::string text;
  int prefill_tokens = 0;        // post-compression cache length
  int input_tokens = 0;          // pre-compression prompt length
  std::vector<int> prefill_layer_lens;
  MemoryStats mem;
};

// Samples up to budget.max_new_tokens (temperature 0 = greedy argmax,
// lowest id wins ties); stops after emitting a stop token.
Generation generate(const ModelParams& params, const TokenSequence& prompt,
                    const DecodeBudget& budget, const CompressionPlan* plan,
                    std::uint64_t seed);

// Cacheless causal forward over an embedded sequence (no compression);
// logits at every position. The re-forward oracle for cached decoding.
MatRM full_forward_logits(const ModelParams& params, const TokenSequence& seq);

// ---- differentiable path ----------------------------------------------

struct PromptInputs {
  std::vector<VecX> frames;
  std::vector<int> text_ids;
};

struct GraphPrefill {
  std::vector<Tensor> k_final, v_final;  // per layer, pruned to the final set
  std::vector<int> final_positions;
  std::vector<float> final_sizes;
  Tensor last_logits;                    // [1, V]
  CompressionTrace trace;
  int prompt_final_len = 0;
  int next_position = 0;
};

GraphPrefill graph_prefill(const ModelParams& params, const PromptInputs& prompt,
                           const CompressionPlan* plan);

// Teacher-forced per-token log-probabilities of `response` given the prompt,
// differentiable w.r.t. the parameters. Mirrors cached decoding exactly:
// response tokens attend to the post-pruning prompt KV plus earlier response
// tokens.
Tensor sequence_logprob(const ModelParams& params, const PromptInputs& prompt,
                        std::span<const int> response, const CompressionPlan* plan);

}  // namespace vrpo
