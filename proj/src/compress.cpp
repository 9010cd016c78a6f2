#include "vrpo/compress.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vrpo {

bool CompressionPlan::prunes_at(int layer) const {
  if (keep_ratio >= 1.0f) return false;
  return std::find(prune_layers.begin(), prune_layers.end(), layer) != prune_layers.end();
}

void CompressionPlan::validate(int n_layers) const {
  VRPO_CHECK(merge_ratio >= 0.0f && merge_ratio < 1.0f, PlanError,
             "merge_ratio " << merge_ratio << " outside [0,1)");
  VRPO_CHECK(keep_ratio > 0.0f && keep_ratio <= 1.0f, PlanError,
             "keep_ratio " << keep_ratio << " outside (0,1]");
  for (int l : prune_layers)
    VRPO_CHECK(l >= 0 && l < n_layers, PlanError,
               "prune layer " << l << " outside 0.." << n_layers - 1);
}

CompressionPlan CompressionPlan::none() { return {}; }

std::vector<int> CompressionPlan::default_prune_layers(int n_layers) {
  int k = n_layers >= 5 ? 5 : (n_layers + 1) / 2;
  if (n_layers <= 1) return {};
  k = std::min(k, n_layers - 1);
  std::vector<int> layers;
  if (k == 1) {
    layers.push_back(n_layers / 2);
    return layers;
  }
  // evenly spaced over [1, n_layers-1]
  for (int i = 0; i < k; ++i) {
    const double t = 1.0 + static_cast<double>(i) * (n_layers - 2) / (k - 1);
    const int l = static_cast<int>(std::lround(t));
    if (layers.empty() || layers.back() != l) layers.push_back(l);
  }
  return layers;
}

CompressionPlan CompressionPlan::defaults(int n_layers) {
  CompressionPlan p;
  p.merge_ratio = 0.75f;
  p.keep_ratio = 0.5f;
  p.prune_layers = default_prune_layers(n_layers);
  p.proportional_attention = true;
  return p;
}

int MergeRecord::merged_count() const {
  int n = 0;
  for (const auto& [survivor, absorbed_set] : absorbed)
    n += static_cast<int>(absorbed_set.size());
  return n;
}

std::vector<MergePair> bipartite_pairs(const MatRM& states, int n_visual, int quota) {
  std::vector<MergePair> pairs;
  if (quota <= 0 || n_visual < 2) return pairs;
  std::vector<int> set_a, set_b;
  for (int i = 0; i < n_visual; ++i) (i % 2 == 0 ? set_a : set_b).push_back(i);
  if (set_a.empty() || set_b.empty()) return pairs;

  VecX norms(n_visual);
  for (int i = 0; i < n_visual; ++i) norms[i] = states.row(i).norm();

  pairs.reserve(set_a.size());
  for (int a : set_a) {
    int best_b = -1;
    float best_sim = -2.0f;
    for (int b : set_b) {
      const float denom = std::max(norms[a] * norms[b], 1e-12f);
      const float sim = states.row(a).dot(states.row(b)) / denom;
      if (sim > best_sim) {  // ties keep the earlier (lower-index) b
        best_sim = sim;
        best_b = b;
      }
    }
    pairs.push_back({a, best_b, best_sim});
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const MergePair& x, const MergePair& y) {
    if (x.similarity != y.similarity) return x.similarity > y.similarity;
    return x.a < y.a;
  });
  if (static_cast<int>(pairs.size()) > quota) pairs.resize(static_cast<std::size_t>(quota));
  return pairs;
}

namespace {

void compact_sequence(TokenSequence& seq, const std::vector<int>& keep) {
  MatRM states(static_cast<Eigen::Index>(keep.size()), seq.states.cols());
  std::vector<int> positions;
  std::vector<float> sizes;
  std::vector<Modality> modality;
  positions.reserve(keep.size());
  sizes.reserve(keep.size());
  modality.reserve(keep.size());
  int n_visual = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const int src = keep[i];
    states.row(static_cast<Eigen::Index>(i)) = seq.states.row(src);
    positions.push_back(seq.positions[static_cast<std::size_t>(src)]);
    sizes.push_back(seq.sizes[static_cast<std::size_t>(src)]);
    modality.push_back(seq.modality[static_cast<std::size_t>(src)]);
    if (seq.modality[static_cast<std::size_t>(src)] == Modality::kVisual) ++n_visual;
  }
  seq.states = std::move(states);
  seq.positions = std::move(positions);
  seq.sizes = std::move(sizes);
  seq.modality = std::move(modality);
  seq.n_visual = n_visual;
}

}  // namespace

MergeRecord merge_tokens(TokenSequence& seq, float merge_ratio) {
  MergeRecord record;
  if (merge_ratio <= 0.0f) return record;
  VRPO_CHECK(merge_ratio < 1.0f, PlanError, "merge_ratio " << merge_ratio << " >= 1");
  const int n_vis0 = seq.n_visual;
  VRPO_CHECK(n_vis0 >= 2, PlanError, "merge requires at least 2 visual tokens");
  int target_remove = static_cast<int>(std::ceil(merge_ratio * static_cast<float>(n_vis0)));
  target_remove = std::min(target_remove, n_vis0 - 1);

  const MatRM states0 = seq.states;
  const std::vector<float> sizes0 = seq.sizes;
  const int n0 = seq.length();

  // original-index bookkeeping across rounds
  std::vector<int> origin(static_cast<std::size_t>(seq.length()));
  std::iota(origin.begin(), origin.end(), 0);
  std::map<int, std::set<int>> absorbed;  // original survivor -> original absorbed

  int removed = 0;
  while (removed < target_remove && seq.n_visual >= 2) {
    auto pairs = bipartite_pairs(seq.states, seq.n_visual, target_remove - removed);
    if (pairs.empty()) break;
    std::vector<char> gone(static_cast<std::size_t>(seq.length()), 0);
    for (const MergePair& p : pairs) {
      const float sa = seq.sizes[static_cast<std::size_t>(p.a)];
      const float sb = seq.sizes[static_cast<std::size_t>(p.b)];
      const float total = sa + sb;
      seq.states.row(p.b) =
          (sa * seq.states.row(p.a) + sb * seq.states.row(p.b)) / total;
      const float pos_mean = (sa * static_cast<float>(seq.positions[static_cast<std::size_t>(p.a)]) +
                              sb * static_cast<float>(seq.positions[static_cast<std::size_t>(p.b)])) /
                             total;
      seq.positions[static_cast<std::size_t>(p.b)] = static_cast<int>(std::lround(pos_mean));
      seq.sizes[static_cast<std::size_t>(p.b)] = total;
      gone[static_cast<std::size_t>(p.a)] = 1;

      const int orig_a = origin[static_cast<std::size_t>(p.a)];
      const int orig_b = origin[static_cast<std::size_t>(p.b)];
      auto& bucket = absorbed[orig_b];
      bucket.insert(orig_a);
      // transitively absorb everything orig_a had already swallowed
      auto it = absorbed.find(orig_a);
      if (it != absorbed.end() && orig_a != orig_b) {
        bucket.insert(it->second.begin(), it->second.end());
        absorbed.erase(it);
      }
      ++removed;
    }
    std::vector<int> keep;
    std::vector<int> new_origin;
    keep.reserve(static_cast<std::size_t>(seq.length()));
    for (int i = 0; i < seq.length(); ++i) {
      if (!gone[static_cast<std::size_t>(i)]) {
        keep.push_back(i);
        new_origin.push_back(origin[static_cast<std::size_t>(i)]);
      }
    }
    compact_sequence(seq, keep);
    origin = std::move(new_origin);
  }

  record.absorbed = std::move(absorbed);
  for (int i = 0; i < seq.n_visual; ++i)
    record.survivor_sizes.push_back(seq.sizes[static_cast<std::size_t>(i)]);
  record.survivor_origin = std::move(origin);

  // Rebuild survivor states as one-shot group means over the pre-merge
  // states; the round-by-round running means above only steer the matching.
  if (!record.empty()) seq.states = merge_record_matrix(record, sizes0, n0) * states0;
  return record;
}

MatRM merge_record_matrix(const MergeRecord& record, std::span<const float> pre_sizes,
                          int n_before) {
  const int n_after = static_cast<int>(record.survivor_origin.size());
  MatRM m = MatRM::Zero(n_after, n_before);
  for (int i = 0; i < n_after; ++i) {
    const int orig = record.survivor_origin[static_cast<std::size_t>(i)];
    auto it = record.absorbed.find(orig);
    if (it == record.absorbed.end()) {
      m(i, orig) = 1.0f;
      continue;
    }
    float total = pre_sizes[static_cast<std::size_t>(orig)];
    for (int src : it->second) total += pre_sizes[static_cast<std::size_t>(src)];
    m(i, orig) = pre_sizes[static_cast<std::size_t>(orig)] / total;
    for (int src : it->second) m(i, src) = pre_sizes[static_cast<std::size_t>(src)] / total;
  }
  return m;
}

std::vector<float> prune_scores(std::span<const MatRM> head_probs, int n_visual,
                                int n_text_queries_from) {
  VRPO_CHECK(!head_probs.empty(), ContractError, "prune_scores: no attention heads");
  const int n = static_cast<int>(head_probs[0].rows());
  VRPO_CHECK(n_text_queries_from < n, ContractError,
             "prune_scores: no text-token queries to score from");
  std::vector<float> scores(static_cast<std::size_t>(n_visual), 0.0f);
  const int n_text = n - n_text_queries_from;
  for (const MatRM& p : head_probs) {
    for (int q = n_text_queries_from; q < n; ++q)
      for (int j = 0; j < n_visual; ++j) scores[static_cast<std::size_t>(j)] += p(q, j);
  }
  const float denom = static_cast<float>(head_probs.size()) * static_cast<float>(n_text);
  for (float& s : scores) s /= denom;
  return scores;
}

std::vector<int> prune_selection(std::span<const float> scores, int n_visual, int n_total,
                                 float keep_ratio) {
  std::vector<int> keep(static_cast<std::size_t>(n_total));
  std::iota(keep.begin(), keep.end(), 0);
  if (keep_ratio >= 1.0f || n_visual == 0) return keep;
  const int n_keep_vis =
      static_cast<int>(std::ceil(keep_ratio * static_cast<float>(n_visual)));
  if (n_keep_vis >= n_visual) return keep;

  std::vector<int> vis_idx(static_cast<std::size_t>(n_visual));
  std::iota(vis_idx.begin(), vis_idx.end(), 0);
  std::stable_sort(vis_idx.begin(), vis_idx.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  vis_idx.resize(static_cast<std::size_t>(n_keep_vis));
  std::sort(vis_idx.begin(), vis_idx.end());  // preserve relative order

  keep.clear();
  keep.insert(keep.end(), vis_idx.begin(), vis_idx.end());
  for (int i = n_visual; i < n_total; ++i) keep.push_back(i);
  return keep;
}

std::vector<int> prune_tokens(int layer_index, std::span<const MatRM> head_probs,
                              TokenSequence& seq, KVCache& cache, int layers_done,
                              float keep_ratio) {
  VRPO_CHECK(keep_ratio > 0.0f && keep_ratio <= 1.0f, PlanError,
             "keep_ratio " << keep_ratio << " outside (0,1]");
  const int n = seq.length();
  const int n_vis = seq.n_visual;
  if (keep_ratio >= 1.0f || n_vis == 0) {
    std::vector<int> keep(static_cast<std::size_t>(n));
    std::iota(keep.begin(), keep.end(), 0);
    return keep;
  }
  VRPO_CHECK(seq.n_text() > 0, ContractError,
             "prune at layer " << layer_index << ": scoring undefined without text tokens");

  std::vector<float> scores = prune_scores(head_probs, n_vis, n_vis);
  std::vector<int> keep = prune_selection(scores, n_vis, n, keep_ratio);
  if (static_cast<int>(keep.size()) == n) return keep;
  apply_prune(seq, cache, layers_done, keep);
  return keep;
}

void apply_prune(TokenSequence& seq, KVCache& cache, int layers_done,
                 const std::vector<int>& kept) {
  compact_sequence(seq, kept);

  // Physically compact the KV entries of every layer filled so far.
  for (int l = 0; l < layers_done && l < static_cast<int>(cache.layers.size()); ++l) {
    LayerKV& kv = cache.layers[static_cast<std::size_t>(l)];
    MatRM k(static_cast<Eigen::Index>(kept.size()), kv.k.cols());
    MatRM v(static_cast<Eigen::Index>(kept.size()), kv.v.cols());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      k.row(static_cast<Eigen::Index>(i)) = kv.k.row(kept[i]);
      v.row(static_cast<Eigen::Index>(i)) = kv.v.row(kept[i]);
    }
    kv.k = std::move(k);
    kv.v = std::move(v);
  }
  if (!cache.positions.empty()) {
    std::vector<int> positions;
    std::vector<float> sizes;
    std::vector<std::uint8_t> visual;
    for (int src : kept) {
      positions.push_back(cache.positions[static_cast<std::size_t>(src)]);
      sizes.push_back(cache.sizes[static_cast<std::size_t>(src)]);
      visual.push_back(cache.visual[static_cast<std::size_t>(src)]);
    }
    cache.positions = std::move(positions);
    cache.sizes = std::move(sizes);
    cache.visual = std::move(visual);
  }
}

FlopReport estimate_flops(std::span<const int> per_layer_seq_lens, int decode_len,
                          const ModelConfig& config, int decode_start_len) {
  for (int n : per_layer_seq_lens)
    VRPO_CHECK(n >= 0, ContractError, "estimate_flops: negative length");
  VRPO_CHECK(decode_len >= 0, ContractError, "estimate_flops: negative decode length");
  const auto d = static_cast<std::uint64_t>(config.d_model);
  const auto dff = static_cast<std::uint64_t>(config.d_ff);

  FlopReport report;
  for (int len : per_layer_seq_lens) {
    const auto n = static_cast<std::uint64_t>(len);
    const std::uint64_t attn = 2 * (4 * n * d * d + 2 * n * n * d);
    const std::uint64_t mlp = 2 * (2 * n * d * dff);
    report.prefill_flops += attn + mlp;
  }

  if (decode_len > 0) {
    std::uint64_t start = 0;
    if (decode_start_len >= 0)
      start = static_cast<std::uint64_t>(decode_start_len);
    else if (!per_layer_seq_lens.empty())
      start = static_cast<std::uint64_t>(per_layer_seq_lens.back());
    const auto layers = static_cast<std::uint64_t>(config.n_layers);
    for (std::uint64_t t = 0; t < static_cast<std::uint64_t>(decode_len); ++t) {
      const std::uint64_t ctx = start + t + 1;  // cache plus the new token
      const std::uint64_t attn = 2 * (4 * d * d + 2 * ctx * d);
      const std::uint64_t mlp = 2 * (2 * d * dff);
      report.decode_flops += layers * (attn + mlp);
    }
  }
  return report;
}

}  // namespace vrpo
