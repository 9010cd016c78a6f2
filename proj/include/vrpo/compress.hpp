#pragma once

// Visual-token compression: merge-before-LLM (bipartite soft matching on
// cosine similarity), prune-within-LLM (attention received from text
// queries, physical removal), and the transformer FLOP model used to trade
// token count against frame count.

#include <cstdint>
#include <map>
#include <set>
#include <span>

#include "vrpo/types.hpp"

namespace vrpo {

struct CompressionPlan {
  float merge_ratio = 0.0f;            // fraction of visual tokens removed by merging
  std::vector<int> prune_layers;       // layer indices that score & prune
  float keep_ratio = 1.0f;             // visual tokens kept per prune layer
  bool proportional_attention = true;  // +log(size) on key logits

  bool merges() const { return merge_ratio > 0.0f; }
  bool prunes_at(int layer) const;
  void validate(int n_layers) const;

  // Identity plan: nothing merged, nothing pruned.
  static CompressionPlan none();
  // Default prune layers: 5 evenly spaced layers excluding layer 0 when
  // n_layers >= 5, else ceil(n_layers/2) layers.
  static std::vector<int> default_prune_layers(int n_layers);
  // Default plan used by the 6x-frames budget trade (merge .75, keep .5).
  static CompressionPlan defaults(int n_layers);
};

struct MergeRecord {
  // surviving original index -> absorbed original indices
  std::map<int, std::set<int>> absorbed;
  // size weights of survivors, in surviving order
  std::vector<float> survivor_sizes;
  // original index of each surviving token, in surviving order (covers the
  // whole sequence, text included)
  std::vector<int> survivor_origin;

  bool empty() const { return absorbed.empty(); }
  int merged_count() const;
};

// Merges visually similar tokens in place (states, positions, sizes,
// modality shrink; text untouched). Bipartite rounds over index parity;
// each round merges the highest-cosine A->B pairs. Ratios above 0.5 take
// multiple rounds since one pass can at most halve the visual tokens.
// Survivor states are group size-weighted means of the pre-merge states,
// applied as a single averaging matrix.
MergeRecord merge_tokens(TokenSequence& seq, float merge_ratio);

// Group-averaging matrix M [n_after, n_before] so that merged_states =
// M * states. `pre_sizes` are the size weights before merging.
MatRM merge_record_matrix(const MergeRecord& record, std::span<const float> pre_sizes,
                          int n_before);

// One bipartite matching pass over `states` rows [0, n_visual): for
// each even-index token the most cosine-similar odd-index token,
// best `quota` pairs first. Returns (a, b, similarity) triples sorted by
// descending similarity, ties broken toward lower a index.
struct MergePair {
  int a;  // absorbed (even-parity index)
  int b;  // survivor (odd-parity index)
  float similarity;
};
std::vector<MergePair> bipartite_pairs(const MatRM& states, int n_visual, int quota);

// Attention-received pruning score per visual token: mean over heads and
// over text-query rows of the attention weight each visual column receives.
// `head_probs` are materialized [n, n] row-stochastic matrices.
std::vector<float> prune_scores(std::span<const MatRM> head_probs, int n_visual,
                                int n_text_queries_from);

// Survivor indices (ascending) for top-ceil(keep_ratio*n_visual) visual
// tokens by score plus every non-visual token. Ties keep the lower index.
std::vector<int> prune_selection(std::span<const float> scores, int n_visual, int n_total,
                                 float keep_ratio);

// Keeps the top ceil(keep_ratio * n_visual) visual tokens (plus all text
// tokens), physically compacting `seq` and every cache layer filled so far.
// Returns surviving indices relative to the pre-prune sequence.
std::vector<int> prune_tokens(int layer_index, std::span<const MatRM> head_probs,
                              TokenSequence& seq, KVCache& cache, int layers_done,
                              float keep_ratio);

// Physically compacts `seq` and the first `layers_done` cache layers down to
// the `kept` indices (the mechanics behind prune_tokens).
void apply_prune(TokenSequence& seq, KVCache& cache, int layers_done,
                 const std::vector<int>& kept);

struct FlopReport {
  std::uint64_t prefill_flops = 0;
  std::uint64_t decode_flops = 0;
};

// Standard dense-transformer count. Per layer on n tokens:
//   attention = 2*(4*n*d^2 + 2*n^2*d),  mlp = 2*(2*n*d*d_ff).
// Prefill sums the per-layer (post-pruning) lengths; decode charges each
// generated token against the current cache length, starting from
// `decode_start_len` (default: the last prefill layer length).
FlopReport estimate_flops(std::span<const int> per_layer_seq_lens, int decode_len,
                          const ModelConfig& config, int decode_start_len = -1);

}  // namespace vrpo
