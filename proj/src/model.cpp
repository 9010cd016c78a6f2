#include "vrpo/model.hpp"

#include <algorithm>
#include <cmath>

#include "vrpo/checkpoint.hpp"
#include "vrpo/kernels.hpp"
#include "vrpo/vocab.hpp"

namespace vrpo {

namespace {

constexpr float kInitStd = 0.08f;

float inv_sqrt_head(const ModelConfig& cfg) {
  return 1.0f / std::sqrt(static_cast<float>(cfg.head_dim()));
}

Eigen::RowVectorXf log_size_row(std::span<const float> sizes, bool proportional) {
  Eigen::RowVectorXf r = Eigen::RowVectorXf::Zero(static_cast<Eigen::Index>(sizes.size()));
  if (proportional)
    for (std::size_t j = 0; j < sizes.size(); ++j)
      r[static_cast<Eigen::Index>(j)] = std::log(sizes[j]);
  return r;
}

std::size_t mat_bytes(Eigen::Index rows, Eigen::Index cols) {
  return sizeof(float) * static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
}

}  // namespace

// ---- parameters --------------------------------------------------------

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  if (p.config.vocab_size == 0) p.config.vocab_size = vocab::size();
  const int v = p.config.vocab_size, d = config.d_model, dff = config.d_ff;

  p.tok_emb = Tensor::randn({v, d}, rng, kInitStd, true);
  if (config.positional_mode == PositionalMode::kLearned)
    p.pos_emb = Tensor::randn({config.max_seq_len, d}, rng, kInitStd, true);
  p.vis_w = Tensor::randn({config.visual_dim, d}, rng, kInitStd, true);
  p.vis_b = Tensor::zeros({d}, true);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_g = Tensor::full({d}, 1.0f, true);
    lp.ln1_b = Tensor::zeros({d}, true);
    lp.wq = Tensor::randn({d, d}, rng, kInitStd, true);
    lp.wk = Tensor::randn({d, d}, rng, kInitStd, true);
    lp.wv = Tensor::randn({d, d}, rng, kInitStd, true);
    lp.wo = Tensor::randn({d, d}, rng, kInitStd, true);
    lp.ln2_g = Tensor::full({d}, 1.0f, true);
    lp.ln2_b = Tensor::zeros({d}, true);
    lp.w_up = Tensor::randn({d, dff}, rng, kInitStd, true);
    lp.b_up = Tensor::zeros({dff}, true);
    lp.w_down = Tensor::randn({dff, d}, rng, kInitStd, true);
    lp.b_down = Tensor::zeros({d}, true);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_g = Tensor::full({d}, 1.0f, true);
  p.lnf_b = Tensor::zeros({d}, true);
  p.head = Tensor::randn({d, v}, rng, kInitStd, true);
  return p;
}

NamedTensors ModelParams::named() {
  NamedTensors out;
  out.emplace_back("tok_emb", tok_emb);
  if (pos_emb.defined()) out.emplace_back("pos_emb", pos_emb);
  out.emplace_back("vis_w", vis_w);
  out.emplace_back("vis_b", vis_b);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams& lp = layers[l];
    out.emplace_back(p + "ln1_g", lp.ln1_g);
    out.emplace_back(p + "ln1_b", lp.ln1_b);
    out.emplace_back(p + "wq", lp.wq);
    out.emplace_back(p + "wk", lp.wk);
    out.emplace_back(p + "wv", lp.wv);
    out.emplace_back(p + "wo", lp.wo);
    out.emplace_back(p + "ln2_g", lp.ln2_g);
    out.emplace_back(p + "ln2_b", lp.ln2_b);
    out.emplace_back(p + "w_up", lp.w_up);
    out.emplace_back(p + "b_up", lp.b_up);
    out.emplace_back(p + "w_down", lp.w_down);
    out.emplace_back(p + "b_down", lp.b_down);
  }
  out.emplace_back("lnf_g", lnf_g);
  out.emplace_back("lnf_b", lnf_b);
  out.emplace_back("head", head);
  return out;
}

std::vector<Tensor> ModelParams::all() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;
  auto deep = [](Tensor& t) {
    if (!t.defined()) return;
    Tensor fresh = Tensor::from_span(t.shape(), {t.data(), static_cast<std::size_t>(t.size())},
                                     t.requires_grad());
    t = fresh;
  };
  deep(copy.tok_emb);
  deep(copy.pos_emb);
  deep(copy.vis_w);
  deep(copy.vis_b);
  for (LayerParams& lp : copy.layers) {
    deep(lp.ln1_g); deep(lp.ln1_b);
    deep(lp.wq); deep(lp.wk); deep(lp.wv); deep(lp.wo);
    deep(lp.ln2_g); deep(lp.ln2_b);
    deep(lp.w_up); deep(lp.b_up); deep(lp.w_down); deep(lp.b_down);
  }
  deep(copy.lnf_g);
  deep(copy.lnf_b);
  deep(copy.head);
  return copy;
}

void ModelParams::set_requires_grad(bool b) {
  for (auto& [name, t] : named()) t.set_requires_grad(b);
}

std::int64_t ModelParams::param_count() const {
  std::int64_t n = 0;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->named()) n += t.size();
  return n;
}

void save_model(const std::string& stem, ModelParams& params,
                const std::map<std::string, std::string>& extra_meta) {
  std::map<std::string, std::string> meta = extra_meta;
  const ModelConfig& c = params.config;
  meta["n_layers"] = std::to_string(c.n_layers);
  meta["n_heads"] = std::to_string(c.n_heads);
  meta["d_model"] = std::to_string(c.d_model);
  meta["d_ff"] = std::to_string(c.d_ff);
  meta["vocab_size"] = std::to_string(c.vocab_size);
  meta["max_seq_len"] = std::to_string(c.max_seq_len);
  meta["visual_dim"] = std::to_string(c.visual_dim);
  meta["positional_mode"] = positional_mode_name(c.positional_mode);
  NamedTensors named = params.named();
  save_checkpoint(stem, named, meta);
}

ModelParams load_model(const std::string& stem) {
  auto meta = read_checkpoint_meta(stem);
  ModelConfig c;
  auto need = [&](const char* key) -> std::string {
    auto it = meta.find(key);
    VRPO_CHECK(it != meta.end(), CompatError, "checkpoint meta lacks '" << key << "'");
    return it->second;
  };
  c.n_layers = std::stoi(need("n_layers"));
  c.n_heads = std::stoi(need("n_heads"));
  c.d_model = std::stoi(need("d_model"));
  c.d_ff = std::stoi(need("d_ff"));
  c.vocab_size = std::stoi(need("vocab_size"));
  c.max_seq_len = std::stoi(need("max_seq_len"));
  c.visual_dim = std::stoi(need("visual_dim"));
  c.positional_mode = positional_mode_from_name(need("positional_mode"));
  VRPO_CHECK(c.vocab_size == vocab::size(), CompatError,
             "checkpoint vocab size " << c.vocab_size << " != built-in " << vocab::size());
  Rng rng(0);
  ModelParams params = ModelParams::init(c, rng);
  NamedTensors named = params.named();
  load_checkpoint(stem, named);
  return params;
}

// ---- embedding ----------------------------------------------------------

TokenSequence embed_inputs(const ModelParams& params, std::span<const VecX> frames,
                           std::span<const int> text_ids) {
  const ModelConfig& cfg = params.config;
  const int n_vis = static_cast<int>(frames.size());
  const int n_text = static_cast<int>(text_ids.size());
  const int n = n_vis + n_text;
  VRPO_CHECK(n >= 1, ContractError, "embed_inputs: empty input");
  VRPO_CHECK(n <= cfg.max_seq_len, CapacityError,
             "embed_inputs: " << n << " tokens exceed max_seq_len " << cfg.max_seq_len);

  TokenSequence seq;
  seq.states.resize(n, cfg.d_model);
  if (n_vis > 0) {
    MatRM f(n_vis, cfg.visual_dim);
    for (int i = 0; i < n_vis; ++i) {
      VRPO_CHECK(frames[static_cast<std::size_t>(i)].size() == cfg.visual_dim, DimensionError,
                 "embed_inputs: frame dim " << frames[static_cast<std::size_t>(i)].size()
                                            << " != visual_dim " << cfg.visual_dim);
      f.row(i) = frames[static_cast<std::size_t>(i)].transpose();
    }
    seq.states.topRows(n_vis).noalias() = f * params.vis_w.mat();
    seq.states.topRows(n_vis).rowwise() +=
        Eigen::Map<const Eigen::RowVectorXf>(params.vis_b.data(), cfg.d_model);
  }
  for (int i = 0; i < n_text; ++i) {
    const int id = text_ids[static_cast<std::size_t>(i)];
    VRPO_CHECK(id >= 0 && id < cfg.vocab_size, DimensionError,
               "embed_inputs: token id " << id << " out of vocab");
    seq.states.row(n_vis + i) = params.tok_emb.mat().row(id);
  }
  seq.positions.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) seq.positions[static_cast<std::size_t>(i)] = i;
  seq.sizes.assign(static_cast<std::size_t>(n), 1.0f);
  seq.modality.assign(static_cast<std::size_t>(n), Modality::kText);
  std::fill(seq.modality.begin(), seq.modality.begin() + n_vis, Modality::kVisual);
  seq.text_ids.assign(text_ids.begin(), text_ids.end());
  seq.n_visual = n_vis;
  seq.next_position = n;
  return seq;
}

// ---- inference forward ---------------------------------------------------

namespace {

// Attention-received mass accumulated for pruning, in the same order
// prune_scores uses (head, then query row, then key column).
struct ScoreAccum {
  int n_visual = 0;
  int text_from = 0;
  std::vector<float> sums;
};

// One attention sub-block on matrices. Each head's probability matrix is
// materialized transiently (same GEMM shapes as the autograd path, so both
// paths see bit-identical values) and released after its context rows; at
// pruning layers `accum` collects the text-query attention mass per visual
// key before release.
MatRM attention_block(const ModelConfig& cfg, const LayerParams& lp, const MatRM& xh,
                      const MatRM& k_all, const MatRM& v_all,
                      std::span<const int> q_positions,
                      const Eigen::RowVectorXf& log_sizes, int causal_offset,
                      ScoreAccum* accum, MemoryStats* mem) {
  const int dh = cfg.head_dim();
  const float inv = inv_sqrt_head(cfg);
  const int nq = static_cast<int>(xh.rows());
  const int nk = static_cast<int>(k_all.rows());

  MatRM q = xh * lp.wq.mat();
  if (mem) mem->add(mat_bytes(nq, cfg.d_model));
  if (cfg.positional_mode == PositionalMode::kRotary)
    kern::rope_rows_inplace(q, q_positions, cfg.n_heads);

  MatRM ctx(nq, cfg.d_model);
  if (mem) mem->add(mat_bytes(nq, cfg.d_model));
  if (accum != nullptr) accum->sums.assign(static_cast<std::size_t>(accum->n_visual), 0.0f);

  for (int h = 0; h < cfg.n_heads; ++h) {
    auto qh = q.middleCols(h * dh, dh);
    auto kh = k_all.middleCols(h * dh, dh);
    auto vh = v_all.middleCols(h * dh, dh);
    MatRM s = (qh * kh.transpose()) * inv;
    if (mem) mem->add(mat_bytes(nq, nk));
    s.rowwise() += log_sizes;
    for (int i = 0; i < nq; ++i) {
      const int limit = causal_offset + i + 1;  // keys visible to query i
      if (limit < nk) s.row(i).tail(nk - limit).setConstant(kern::kMaskNegInf);
    }
    kern::softmax_rows_inplace(s);
    if (accum != nullptr) {
      for (int qr = accum->text_from; qr < nq; ++qr)
        for (int j = 0; j < accum->n_visual; ++j)
          accum->sums[static_cast<std::size_t>(j)] += s(qr, j);
    }
    ctx.middleCols(h * dh, dh).noalias() = s * vh;
    if (mem) mem->sub(mat_bytes(nq, nk));
  }
  MatRM out = ctx * lp.wo.mat();
  if (mem) {
    mem->add(mat_bytes(nq, cfg.d_model));
    mem->sub(mat_bytes(nq, cfg.d_model));  // ctx released
    mem->sub(mat_bytes(nq, cfg.d_model));  // q released
  }
  return out;
}

void mlp_block_inplace(const ModelConfig& cfg, const LayerParams& lp, MatRM& x,
                       MemoryStats* mem) {
  MatRM h = kern::layer_norm_rows(
      x, Eigen::Map<const VecX>(lp.ln2_g.data(), cfg.d_model),
      Eigen::Map<const VecX>(lp.ln2_b.data(), cfg.d_model));
  MatRM u = h * lp.w_up.mat();
  u.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(lp.b_up.data(), cfg.d_ff);
  if (mem) mem->add(mat_bytes(u.rows(), u.cols()));
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = kern::gelu_scalar(u.data()[i]);
  MatRM down = u * lp.w_down.mat();
  down.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(lp.b_down.data(), cfg.d_model);
  x += down;
  if (mem) mem->sub(mat_bytes(u.rows(), u.cols()));
}

VecX head_logits_row(const ModelParams& params, const Eigen::RowVectorXf& hidden_row) {
  const ModelConfig& cfg = params.config;
  MatRM y = kern::layer_norm_rows(MatRM(hidden_row),
                                  Eigen::Map<const VecX>(params.lnf_g.data(), cfg.d_model),
                                  Eigen::Map<const VecX>(params.lnf_b.data(), cfg.d_model));
  MatRM logits(1, params.head.cols());
  logits.noalias() = y * params.head.mat();
  return logits.row(0).transpose();
}

}  // namespace

PrefillResult prefill(const ModelParams& params, const TokenSequence& seq,
                      const CompressionPlan* plan) {
  const ModelConfig& cfg = params.config;
  VRPO_CHECK(seq.length() >= 1, ContractError, "prefill: empty sequence");
  VRPO_CHECK(seq.length() <= cfg.max_seq_len, CapacityError,
             "prefill: sequence length " << seq.length() << " exceeds " << cfg.max_seq_len);
  if (plan != nullptr) plan->validate(cfg.n_layers);
  const bool proportional = plan == nullptr ? true : plan->proportional_attention;

  PrefillResult result;
  result.input_tokens = seq.length();

  TokenSequence work = seq;
  result.mem.add(mat_bytes(work.states.rows(), work.states.cols()));

  if (plan != nullptr && plan->merges()) {
    const std::size_t before = mat_bytes(work.states.rows(), work.states.cols());
    result.trace.merge = merge_tokens(work, plan->merge_ratio);
    result.mem.sub(before);
    result.mem.add(mat_bytes(work.states.rows(), work.states.cols()));
  }

  if (cfg.positional_mode == PositionalMode::kLearned) {
    for (int i = 0; i < work.length(); ++i) {
      const int p = work.positions[static_cast<std::size_t>(i)];
      VRPO_CHECK(p < cfg.max_seq_len, CapacityError, "prefill: position " << p << " too large");
      work.states.row(i) += params.pos_emb.mat().row(p);
    }
  }

  KVCache& cache = result.cache;
  cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  cache.positions = work.positions;
  cache.sizes = work.sizes;
  cache.visual.resize(static_cast<std::size_t>(work.length()));
  for (int i = 0; i < work.length(); ++i)
    cache.visual[static_cast<std::size_t>(i)] =
        work.modality[static_cast<std::size_t>(i)] == Modality::kVisual ? 1 : 0;
  cache.next_position = work.next_position;
  cache.max_seq_len = cfg.max_seq_len;

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    const int n = work.length();
    result.trace.per_layer_lens.push_back(n);
    const bool materialize = plan != nullptr && plan->prunes_at(l);

    MatRM xh = kern::layer_norm_rows(
        work.states, Eigen::Map<const VecX>(lp.ln1_g.data(), cfg.d_model),
        Eigen::Map<const VecX>(lp.ln1_b.data(), cfg.d_model));
    result.mem.add(mat_bytes(n, cfg.d_model));

    MatRM k = xh * lp.wk.mat();
    MatRM v = xh * lp.wv.mat();
    if (cfg.positional_mode == PositionalMode::kRotary)
      kern::rope_rows_inplace(k, work.positions, cfg.n_heads);
    LayerKV& kv = cache.layers[static_cast<std::size_t>(l)];
    kv.k = std::move(k);
    kv.v = std::move(v);
    result.mem.add(2 * mat_bytes(n, cfg.d_model));

    const Eigen::RowVectorXf log_sizes = log_size_row(work.sizes, proportional);
    const bool scoring = materialize && work.n_visual > 0;
    ScoreAccum accum;
    accum.n_visual = work.n_visual;
    accum.text_from = work.n_visual;
    if (scoring)
      VRPO_CHECK(work.n_text() > 0, ContractError,
                 "prefill: prune layer " << l << " needs text-token queries");
    MatRM att = attention_block(cfg, lp, xh, kv.k, kv.v, work.positions, log_sizes,
                                /*causal_offset=*/0, scoring ? &accum : nullptr,
                                &result.mem);
    result.mem.sub(mat_bytes(n, cfg.d_model));  // xh released
    work.states += att;
    result.mem.sub(mat_bytes(n, cfg.d_model));  // att released

    mlp_block_inplace(cfg, lp, work.states, &result.mem);

    if (scoring) {
      const float denom =
          static_cast<float>(cfg.n_heads) * static_cast<float>(work.n_text());
      std::vector<float> scores = accum.sums;
      for (float& s : scores) s /= denom;
      std::vector<int> kept =
          prune_selection(scores, work.n_visual, work.length(), plan->keep_ratio);
      if (static_cast<int>(kept.size()) < work.length()) {
        const std::size_t cache_before = cache.bytes();
        const std::size_t states_before = mat_bytes(work.states.rows(), work.states.cols());
        apply_prune(work, cache, l + 1, kept);
        result.trace.prune_kept.push_back(std::move(kept));
        result.mem.sub(cache_before - cache.bytes());
        result.mem.sub(states_before - mat_bytes(work.states.rows(), work.states.cols()));
      }
    }
  }

  result.last_logits = head_logits_row(params, work.states.row(work.length() - 1));
  result.mem.sub(mat_bytes(work.states.rows(), work.states.cols()));
  return result;
}

VecX decode_step(const ModelParams& params, KVCache& cache, int token_id, MemoryStats* mem) {
  const ModelConfig& cfg = params.config;
  VRPO_CHECK(!cache.layers.empty() && cache.length() > 0, ContractError,
             "decode_step: cache not primed by prefill");
  VRPO_CHECK(token_id >= 0 && token_id < cfg.vocab_size, DimensionError,
             "decode_step: token id out of vocab");
  VRPO_CHECK(cache.length() + 1 <= cache.max_seq_len && cache.next_position < cfg.max_seq_len,
             CapacityError, "decode_step: max_seq_len exceeded");

  const int pos = cache.next_position;
  Eigen::RowVectorXf x = params.tok_emb.mat().row(token_id);
  if (cfg.positional_mode == PositionalMode::kLearned) x += params.pos_emb.mat().row(pos);

  cache.positions.push_back(pos);
  cache.sizes.push_back(1.0f);
  cache.visual.push_back(0);
  cache.next_position = pos + 1;
  const std::vector<int> qpos = {pos};

  const int dh = cfg.head_dim();
  const float inv = inv_sqrt_head(cfg);
  MatRM xrow(1, cfg.d_model);
  xrow.row(0) = x;

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    MatRM xh = kern::layer_norm_rows(
        xrow, Eigen::Map<const VecX>(lp.ln1_g.data(), cfg.d_model),
        Eigen::Map<const VecX>(lp.ln1_b.data(), cfg.d_model));
    MatRM q = xh * lp.wq.mat();
    MatRM k = xh * lp.wk.mat();
    MatRM v = xh * lp.wv.mat();
    if (cfg.positional_mode == PositionalMode::kRotary) {
      kern::rope_rows_inplace(q, qpos, cfg.n_heads);
      kern::rope_rows_inplace(k, qpos, cfg.n_heads);
    }

    LayerKV& kv = cache.layers[static_cast<std::size_t>(l)];
    const Eigen::Index len = kv.k.rows();
    kv.k.conservativeResize(len + 1, Eigen::NoChange);
    kv.v.conservativeResize(len + 1, Eigen::NoChange);
    kv.k.row(len) = k.row(0);
    kv.v.row(len) = v.row(0);
    if (mem) mem->add(2 * mat_bytes(1, cfg.d_model));

    const Eigen::RowVectorXf log_sizes = log_size_row(cache.sizes, true);
    MatRM ctx(1, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Eigen::RowVectorXf s =
          (q.row(0).middleCols(h * dh, dh) * kv.k.middleCols(h * dh, dh).transpose()) * inv;
      s += log_sizes;
      const float m = s.maxCoeff();
      Eigen::RowVectorXf e = (s.array() - m).exp();
      e /= e.sum();
      ctx.row(0).middleCols(h * dh, dh).noalias() = e * kv.v.middleCols(h * dh, dh);
    }
    xrow += ctx * lp.wo.mat();
    mlp_block_inplace(cfg, lp, xrow, nullptr);
  }
  return head_logits_row(params, xrow.row(0));
}

MatRM full_forward_logits(const ModelParams& params, const TokenSequence& seq) {
  const ModelConfig& cfg = params.config;
  VRPO_CHECK(seq.length() >= 1, ContractError, "full_forward: empty sequence");
  VRPO_CHECK(seq.length() <= cfg.max_seq_len, CapacityError, "full_forward: too long");

  MatRM x = seq.states;
  if (cfg.positional_mode == PositionalMode::kLearned) {
    for (int i = 0; i < seq.length(); ++i)
      x.row(i) += params.pos_emb.mat().row(seq.positions[static_cast<std::size_t>(i)]);
  }
  const Eigen::RowVectorXf log_sizes = log_size_row(seq.sizes, true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    MatRM xh = kern::layer_norm_rows(
        x, Eigen::Map<const VecX>(lp.ln1_g.data(), cfg.d_model),
        Eigen::Map<const VecX>(lp.ln1_b.data(), cfg.d_model));
    MatRM k = xh * lp.wk.mat();
    MatRM v = xh * lp.wv.mat();
    if (cfg.positional_mode == PositionalMode::kRotary)
      kern::rope_rows_inplace(k, seq.positions, cfg.n_heads);
    x += attention_block(cfg, lp, xh, k, v, seq.positions, log_sizes, 0, nullptr, nullptr);
    mlp_block_inplace(cfg, lp, x, nullptr);
  }
  MatRM y = kern::layer_norm_rows(x, Eigen::Map<const VecX>(params.lnf_g.data(), cfg.d_model),
                                  Eigen::Map<const VecX>(params.lnf_b.data(), cfg.d_model));
  return y * params.head.mat();
}

Generation generate(const ModelParams& params, const TokenSequence& prompt,
                    const DecodeBudget& budget, const CompressionPlan* plan,
                    std::uint64_t seed) {
  VRPO_CHECK(budget.max_new_tokens >= 1, ContractError, "generate: zero budget");
  Generation gen;
  PrefillResult pf = prefill(params, prompt, plan);
  gen.prefill_tokens = pf.cache.length();
  gen.input_tokens = pf.input_tokens;
  gen.prefill_layer_lens = pf.trace.per_layer_lens;
  gen.mem = pf.mem;

  std::vector<int> stops = budget.stop_tokens;
  if (stops.empty()) stops = {vocab::eos_id()};

  Rng rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  VecX logits = pf.last_logits;
  for (int t = 0; t < budget.max_new_tokens; ++t) {
    // temperature-1 log-probabilities for the policy bookkeeping
    Eigen::RowVectorXf lsm = logits.transpose();
    {
      const float m = lsm.maxCoeff();
      const float lse = std::log((lsm.array() - m).exp().sum()) + m;
      lsm.array() -= lse;
    }
    int chosen;
    if (budget.temperature <= 0.0f) {
      Eigen::Index arg;
      logits.maxCoeff(&arg);
      chosen = static_cast<int>(arg);
    } else {
      Eigen::RowVectorXf scaled = logits.transpose() / budget.temperature;
      const float m = scaled.maxCoeff();
      Eigen::RowVectorXf p = (scaled.array() - m).exp();
      p /= p.sum();
      const double u = uni(rng);
      double acc = 0.0;
      chosen = static_cast<int>(p.size()) - 1;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        acc += static_cast<double>(p[i]);
        if (u < acc) {
          chosen = static_cast<int>(i);
          break;
        }
      }
    }
    gen.tokens.push_back(chosen);
    gen.logprobs.push_back(lsm[chosen]);
    if (std::find(stops.begin(), stops.end(), chosen) != stops.end()) break;
    if (t + 1 >= budget.max_new_tokens) break;
    if (pf.cache.length() + 1 > pf.cache.max_seq_len) break;  // budget capped by capacity
    logits = decode_step(params, pf.cache, chosen, &gen.mem);
  }
  gen.text = vocab::detokenize(gen.tokens);
  return gen;
}

// ---- differentiable path --------------------------------------------------

namespace {

MatRM causal_mask(int nq, int nk, int offset) {
  MatRM m = MatRM::Zero(nq, nk);
  for (int i = 0; i < nq; ++i) {
    const int limit = offset + i + 1;
    if (limit < nk) m.row(i).tail(nk - limit).setConstant(kern::kMaskNegInf);
  }
  return m;
}

Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

struct GraphAttnOut {
  Tensor out;                 // [nq, d]
  std::vector<MatRM> probs;   // detached per-head probabilities (if requested)
};

GraphAttnOut graph_attention(const ModelConfig& cfg, const LayerParams& lp, const Tensor& xh,
                             const Tensor& k_all, const Tensor& v_all,
                             std::span<const int> q_positions, const MatRM& mask,
                             const Eigen::RowVectorXf& log_sizes, bool keep_probs) {
  const int dh = cfg.head_dim();
  const float inv = inv_sqrt_head(cfg);
  Tensor q = matmul(xh, lp.wq);
  if (cfg.positional_mode == PositionalMode::kRotary) q = rope(q, q_positions, cfg.n_heads);

  Tensor ls = Tensor::from_span({static_cast<int>(log_sizes.size())},
                                {log_sizes.data(), static_cast<std::size_t>(log_sizes.size())});
  GraphAttnOut res;
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    Tensor qh = cols(q, h * dh, dh);
    Tensor kh = cols(k_all, h * dh, dh);
    Tensor vh = cols(v_all, h * dh, dh);
    Tensor s = scale(matmul(qh, transpose(kh)), inv);
    s = add(s, ls);
    s = add_const(s, mask);
    Tensor p = softmax(s);
    if (keep_probs) res.probs.push_back(p.to_matrix());
    heads.push_back(matmul(p, vh));
  }
  res.out = matmul(concat_cols(heads), lp.wo);
  return res;
}

Tensor graph_mlp(const ModelConfig&, const LayerParams& lp, const Tensor& x) {
  Tensor h = layer_norm(x, lp.ln2_g, lp.ln2_b);
  Tensor u = gelu(linear_rows(h, lp.w_up, lp.b_up));
  return linear_rows(u, lp.w_down, lp.b_down);
}

}  // namespace

GraphPrefill graph_prefill(const ModelParams& params, const PromptInputs& prompt,
                           const CompressionPlan* plan) {
  const ModelConfig& cfg = params.config;
  const int n_vis0 = static_cast<int>(prompt.frames.size());
  const int n_text = static_cast<int>(prompt.text_ids.size());
  const int n0 = n_vis0 + n_text;
  VRPO_CHECK(n0 >= 1 && n0 <= cfg.max_seq_len, CapacityError,
             "graph_prefill: bad prompt length " << n0);
  if (plan != nullptr) plan->validate(cfg.n_layers);
  const bool proportional = plan == nullptr ? true : plan->proportional_attention;

  GraphPrefill res;

  // Pre-positional token states (projector outputs + token embeddings).
  std::vector<Tensor> parts;
  if (n_vis0 > 0) {
    MatRM f(n_vis0, cfg.visual_dim);
    for (int i = 0; i < n_vis0; ++i)
      f.row(i) = prompt.frames[static_cast<std::size_t>(i)].transpose();
    parts.push_back(linear_rows(Tensor::from_matrix(f), params.vis_w, params.vis_b));
  }
  if (n_text > 0) parts.push_back(gather_rows(params.tok_emb, prompt.text_ids));
  Tensor x = parts.size() == 1 ? parts[0] : concat_rows(parts);

  std::vector<int> positions(static_cast<std::size_t>(n0));
  std::iota(positions.begin(), positions.end(), 0);
  std::vector<float> sizes(static_cast<std::size_t>(n0), 1.0f);
  int n_visual = n_vis0;
  res.next_position = n0;

  // Merge decisions are made by the same routine the inference path uses,
  // on the current values; the differentiable application is a constant
  // group-averaging matrix.
  if (plan != nullptr && plan->merges() && n_visual > 0) {
    TokenSequence scratch;
    scratch.states = x.to_matrix();
    scratch.positions = positions;
    scratch.sizes = sizes;
    scratch.modality.assign(static_cast<std::size_t>(n0), Modality::kText);
    std::fill(scratch.modality.begin(), scratch.modality.begin() + n_visual,
              Modality::kVisual);
    scratch.n_visual = n_visual;
    scratch.text_ids = prompt.text_ids;
    scratch.next_position = n0;
    res.trace.merge = merge_tokens(scratch, plan->merge_ratio);

    if (!res.trace.merge.empty()) {
      const MatRM merge_mat = merge_record_matrix(res.trace.merge, sizes, n0);
      x = matmul(Tensor::from_matrix(merge_mat), x);
    }
    positions = scratch.positions;
    sizes = scratch.sizes;
    n_visual = scratch.n_visual;
  }

  // positions now reflect the post-merge sequence
  if (cfg.positional_mode == PositionalMode::kLearned)
    x = add(x, gather_rows(params.pos_emb, positions));

  // Maps current sequence slots to row indices of each layer's K/V tensors.
  std::vector<std::vector<int>> idx_map(static_cast<std::size_t>(cfg.n_layers));
  std::vector<Tensor> k_layers(static_cast<std::size_t>(cfg.n_layers));
  std::vector<Tensor> v_layers(static_cast<std::size_t>(cfg.n_layers));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    const int cur = x.rows();
    res.trace.per_layer_lens.push_back(cur);
    const bool materialize_for_prune =
        plan != nullptr && plan->prunes_at(l) && n_visual > 0;

    Tensor xh = layer_norm(x, lp.ln1_g, lp.ln1_b);
    Tensor k = matmul(xh, lp.wk);
    if (cfg.positional_mode == PositionalMode::kRotary) k = rope(k, positions, cfg.n_heads);
    Tensor v = matmul(xh, lp.wv);
    k_layers[static_cast<std::size_t>(l)] = k;
    v_layers[static_cast<std::size_t>(l)] = v;
    idx_map[static_cast<std::size_t>(l)].resize(static_cast<std::size_t>(cur));
    std::iota(idx_map[static_cast<std::size_t>(l)].begin(),
              idx_map[static_cast<std::size_t>(l)].end(), 0);

    const Eigen::RowVectorXf log_sizes = log_size_row(sizes, proportional);
    GraphAttnOut att = graph_attention(cfg, lp, xh, k, v, positions,
                                       causal_mask(cur, cur, 0), log_sizes,
                                       materialize_for_prune);
    x = add(x, att.out);
    x = add(x, graph_mlp(cfg, lp, x));

    if (materialize_for_prune && plan->keep_ratio < 1.0f) {
      VRPO_CHECK(cur - n_visual > 0, ContractError,
                 "graph_prefill: pruning without text tokens");
      std::vector<float> scores = prune_scores(att.probs, n_visual, n_visual);
      std::vector<int> kept = prune_selection(scores, n_visual, cur, plan->keep_ratio);
      if (static_cast<int>(kept.size()) < cur) {
        res.trace.prune_kept.push_back(kept);
        x = gather_rows(x, kept);
        std::vector<int> new_pos;
        std::vector<float> new_sizes;
        int new_vis = 0;
        for (int s : kept) {
          new_pos.push_back(positions[static_cast<std::size_t>(s)]);
          new_sizes.push_back(sizes[static_cast<std::size_t>(s)]);
          if (s < n_visual) ++new_vis;
        }
        positions = std::move(new_pos);
        sizes = std::move(new_sizes);
        n_visual = new_vis;
        for (int j = 0; j <= l; ++j) {
          auto& m = idx_map[static_cast<std::size_t>(j)];
          std::vector<int> nm;
          nm.reserve(kept.size());
          for (int s : kept) nm.push_back(m[static_cast<std::size_t>(s)]);
          m = std::move(nm);
        }
      }
    }
  }

  res.k_final.resize(static_cast<std::size_t>(cfg.n_layers));
  res.v_final.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& m = idx_map[static_cast<std::size_t>(l)];
    const bool identity = static_cast<int>(m.size()) == k_layers[static_cast<std::size_t>(l)].rows();
    if (identity) {
      res.k_final[static_cast<std::size_t>(l)] = k_layers[static_cast<std::size_t>(l)];
      res.v_final[static_cast<std::size_t>(l)] = v_layers[static_cast<std::size_t>(l)];
    } else {
      res.k_final[static_cast<std::size_t>(l)] = gather_rows(k_layers[static_cast<std::size_t>(l)], m);
      res.v_final[static_cast<std::size_t>(l)] = gather_rows(v_layers[static_cast<std::size_t>(l)], m);
    }
  }
  res.final_positions = positions;
  res.final_sizes = sizes;
  res.prompt_final_len = static_cast<int>(positions.size());

  Tensor y_last = layer_norm(rows(x, x.rows() - 1, 1), params.lnf_g, params.lnf_b);
  res.last_logits = matmul(y_last, params.head);
  return res;
}

Tensor sequence_logprob(const ModelParams& params, const PromptInputs& prompt,
                        std::span<const int> response, const CompressionPlan* plan) {
  const ModelConfig& cfg = params.config;
  const int len = static_cast<int>(response.size());
  VRPO_CHECK(len >= 1, ContractError, "sequence_logprob: empty response");

  GraphPrefill pre = graph_prefill(params, prompt, plan);

  Tensor all_logits;
  if (len == 1) {
    all_logits = pre.last_logits;
  } else {
    const int lb = len - 1;  // rows fed back in (the last token is only predicted)
    VRPO_CHECK(pre.next_position + lb <= cfg.max_seq_len, CapacityError,
               "sequence_logprob: response overruns max_seq_len");
    std::vector<int> in_ids(response.begin(), response.begin() + lb);
    Tensor y = gather_rows(params.tok_emb, in_ids);
    std::vector<int> rpos(static_cast<std::size_t>(lb));
    std::iota(rpos.begin(), rpos.end(), pre.next_position);
    if (cfg.positional_mode == PositionalMode::kLearned)
      y = add(y, gather_rows(params.pos_emb, rpos));

    const int nf = pre.prompt_final_len;
    std::vector<float> cat_sizes(pre.final_sizes);
    cat_sizes.resize(static_cast<std::size_t>(nf + lb), 1.0f);
    const bool proportional = plan == nullptr ? true : plan->proportional_attention;
    const Eigen::RowVectorXf log_sizes = log_size_row(cat_sizes, proportional);
    const MatRM mask = causal_mask(lb, nf + lb, nf);

    for (int l = 0; l < cfg.n_layers; ++l) {
      const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
      Tensor yh = layer_norm(y, lp.ln1_g, lp.ln1_b);
      Tensor kr = matmul(yh, lp.wk);
      if (cfg.positional_mode == PositionalMode::kRotary) kr = rope(kr, rpos, cfg.n_heads);
      Tensor vr = matmul(yh, lp.wv);
      std::vector<Tensor> kcat = {pre.k_final[static_cast<std::size_t>(l)], kr};
      std::vector<Tensor> vcat = {pre.v_final[static_cast<std::size_t>(l)], vr};
      Tensor k_all = concat_rows(kcat);
      Tensor v_all = concat_rows(vcat);
      GraphAttnOut att =
          graph_attention(cfg, lp, yh, k_all, v_all, rpos, mask, log_sizes, false);
      y = add(y, att.out);
      y = add(y, graph_mlp(cfg, lp, y));
    }
    Tensor logits_b = matmul(layer_norm(y, params.lnf_g, params.lnf_b), params.head);
    std::vector<Tensor> cat = {pre.last_logits, logits_b};
    all_logits = concat_rows(cat);
  }

  std::vector<int> ids(response.begin(), response.end());
  return pick_per_row(log_softmax(all_logits), ids);
}

}  // namespace vrpo
