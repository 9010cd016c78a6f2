#include "vrpo/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "vrpo/parallel.hpp"
#include "vrpo/vocab.hpp"

namespace vrpo {

void GrpoConfig::validate() const {
  VRPO_CHECK(group_size >= 2, ConfigError, "grpo: group size must be >= 2");
  VRPO_CHECK(clip_epsilon > 0.0f && clip_epsilon < 1.0f, ConfigError,
             "grpo: clip epsilon outside (0,1)");
  VRPO_CHECK(kl_beta >= 0.0f, ConfigError, "grpo: negative KL coefficient");
  VRPO_CHECK(learning_rate > 0.0f, ConfigError, "grpo: non-positive learning rate");
  VRPO_CHECK(updates_per_group >= 1 && prompts_per_step >= 1, ConfigError,
             "grpo: non-positive loop counts");
}

std::vector<float> compute_advantages(std::span<const float> rewards, float std_floor) {
  const int g = static_cast<int>(rewards.size());
  VRPO_CHECK(g >= 2, ConfigError, "compute_advantages: need a group of at least 2");
  double mean = 0.0;
  for (float r : rewards) mean += r;
  mean /= g;
  double var = 0.0;
  for (float r : rewards) var += (r - mean) * (r - mean);
  var /= g;  // population variance
  const double sd = std::sqrt(var);
  std::vector<float> adv(static_cast<std::size_t>(g), 0.0f);
  if (sd < static_cast<double>(std_floor)) return adv;
  for (int i = 0; i < g; ++i)
    adv[static_cast<std::size_t>(i)] = static_cast<float>((rewards[static_cast<std::size_t>(i)] - mean) / sd);
  return adv;
}

double kl_term(double logp_theta, double logp_ref) {
  const double d = logp_ref - logp_theta;
  return std::exp(d) - d - 1.0;
}

namespace {

Tensor const_vec(std::span<const float> v) {
  return Tensor::from_span({static_cast<int>(v.size())}, v);
}

}  // namespace

Tensor grpo_loss(const GroupRollout& group, const ModelParams& theta,
                 const ModelParams& ref, const CompressionPlan* plan,
                 const GrpoConfig& cfg, LossStats* stats) {
  const int g = static_cast<int>(group.responses.size());
  VRPO_CHECK(g >= 2, ConfigError, "grpo_loss: group smaller than 2");
  const float lo = 1.0f - cfg.clip_epsilon;
  const float hi = 1.0f + cfg.clip_epsilon;

  Tensor acc;  // sum over responses of per-response mean objective
  int used = 0;
  for (const RolloutResponse& resp : group.responses) {
    const int len = static_cast<int>(resp.tokens.size());
    if (len == 0) {
      std::cerr << "[grpo] warning: zero-length response excluded from loss\n";
      continue;
    }
    Tensor logp = sequence_logprob(theta, group.prompt, resp.tokens, plan);

    std::vector<float> logp_ref_v(static_cast<std::size_t>(len));
    {
      NoGradScope ng;
      Tensor lr_t = sequence_logprob(ref, group.prompt, resp.tokens, plan);
      std::copy(lr_t.data(), lr_t.data() + len, logp_ref_v.begin());
    }

    Tensor old_t = const_vec(resp.logprobs_old);
    Tensor ref_t = const_vec(logp_ref_v);

    Tensor objective;  // per-response scalar, already length-normalized
    Tensor delta = sub(ref_t, logp);                      // logp_ref - logp_theta
    Tensor k = add_scalar(sub(exp_t(delta), delta), -1.0f);  // exp(d) - d - 1

    if (cfg.sequence_level_ratio) {
      Tensor ratio = exp_t(sub(sum(logp), sum(old_t)));
      Tensor surr = minimum(scale(ratio, resp.advantage),
                            scale(clamp(ratio, lo, hi), resp.advantage));
      objective = sub(surr, scale(mean(k), cfg.kl_beta));
      if (stats != nullptr) {
        const float r = ratio.item();
        const bool clipped = (resp.advantage > 0.0f && r > hi) ||
                             (resp.advantage < 0.0f && r < lo);
        stats->clipped_tokens += clipped ? len : 0;
      }
    } else {
      Tensor ratio = exp_t(sub(logp, old_t));
      Tensor surr = minimum(scale(ratio, resp.advantage),
                            scale(clamp(ratio, lo, hi), resp.advantage));
      objective = scale(sum(sub(surr, scale(k, cfg.kl_beta))), 1.0f / static_cast<float>(len));
      if (stats != nullptr) {
        for (int t = 0; t < len; ++t) {
          const float r = ratio.data()[t];
          const bool clipped = (resp.advantage > 0.0f && r > hi) ||
                               (resp.advantage < 0.0f && r < lo);
          if (clipped) ++stats->clipped_tokens;
        }
      }
    }
    if (stats != nullptr) {
      stats->total_tokens += len;
      for (int t = 0; t < len; ++t) stats->kl_sum += static_cast<double>(k.data()[t]);
    }
    acc = acc.defined() ? add(acc, objective) : objective;
    ++used;
  }
  VRPO_CHECK(used > 0, ContractError, "grpo_loss: no usable responses in group");
  return scale(acc, -1.0f / static_cast<float>(g));
}

GrpoTrainer::GrpoTrainer(ModelParams params, GrpoConfig cfg,
                         std::optional<CompressionPlan> plan)
    : theta_(std::move(params)),
      ref_(theta_.clone()),
      cfg_(cfg),
      plan_(std::move(plan)),
      opt_(theta_.all(), AdamWConfig{cfg.learning_rate, 0.9f, 0.999f, 1e-8f,
                                     cfg.weight_decay, cfg.warmup_steps}) {
  cfg_.validate();
  if (plan_.has_value()) plan_->validate(theta_.config.n_layers);
  ref_.set_requires_grad(false);
}

GroupRollout GrpoTrainer::sample_group(const SynthVideoSample& sample,
                                       std::uint64_t group_seed) {
  GroupRollout group;
  group.prompt = build_prompt(sample, cfg_.train_mode);
  group.gold = sample.gold;
  group.mode = cfg_.train_mode;
  group.responses.resize(static_cast<std::size_t>(cfg_.group_size));

  const CompressionPlan* plan = plan_.has_value() ? &*plan_ : nullptr;
  TokenSequence prompt_seq = embed_inputs(theta_, group.prompt.frames, group.prompt.text_ids);
  DecodeBudget budget = DecodeBudget::for_mode(cfg_.train_mode, cfg_.rollout_temperature);

  parallel_for(cfg_.group_size, cfg_.workers, [&](int i) {
    Generation gen = generate(theta_, prompt_seq, budget, plan,
                              derive_seed(group_seed, 0x9e11, static_cast<std::uint64_t>(i)));
    RolloutResponse& r = group.responses[static_cast<std::size_t>(i)];
    r.tokens = std::move(gen.tokens);
    r.logprobs_old = std::move(gen.logprobs);
    r.text = std::move(gen.text);
    RewardBreakdown b = score_response(r.text, cfg_.train_mode, group.gold, cfg_.format_weight);
    b.total = cfg_.accuracy_weight * static_cast<float>(b.accuracy) +
              cfg_.format_weight * static_cast<float>(b.format);
    r.reward = b;
  });

  std::vector<float> rewards;
  rewards.reserve(group.responses.size());
  for (const RolloutResponse& r : group.responses) rewards.push_back(r.reward.total);
  std::vector<float> adv = compute_advantages(rewards, cfg_.std_floor);
  for (std::size_t i = 0; i < group.responses.size(); ++i)
    group.responses[i].advantage = adv[i];
  return group;
}

StepStats GrpoTrainer::train_step(std::span<const SynthVideoSample> batch,
                                  std::uint64_t step_seed) {
  VRPO_CHECK(!batch.empty(), ContractError, "train_step: empty batch");

  std::vector<GroupRollout> groups(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b)
    groups[b] = sample_group(batch[b], derive_seed(step_seed, 0xb0, b));

  StepStats out;
  out.step = step_;
  for (const GroupRollout& grp : groups) {
    for (const RolloutResponse& r : grp.responses) {
      out.mean_reward += r.reward.total;
      out.mean_accuracy += r.reward.accuracy;
      out.mean_format += r.reward.format;
      out.mean_length += static_cast<double>(r.tokens.size());
    }
  }
  const double n_resp = static_cast<double>(batch.size() * static_cast<std::size_t>(cfg_.group_size));
  out.mean_reward /= n_resp;
  out.mean_accuracy /= n_resp;
  out.mean_format /= n_resp;
  out.mean_length /= n_resp;

  const CompressionPlan* plan = plan_.has_value() ? &*plan_ : nullptr;
  GradTape tape;
  for (int u = 0; u < cfg_.updates_per_group; ++u) {
    LossStats ls;
    opt_.zero_grad();
    double loss_val = 0.0;
    {
      TapeScope scope(tape);
      Tensor total;
      for (const GroupRollout& grp : groups) {
        Tensor l = grpo_loss(grp, theta_, ref_, plan, cfg_, &ls);
        total = total.defined() ? add(total, l) : l;
      }
      total = scale(total, 1.0f / static_cast<float>(groups.size()));
      loss_val = static_cast<double>(total.item());
      if (!std::isfinite(loss_val)) {
        std::cerr << "[grpo] non-finite loss at step " << step_ << "; group dump:\n";
        for (const GroupRollout& grp : groups)
          for (const RolloutResponse& r : grp.responses)
            std::cerr << "  len=" << r.tokens.size() << " reward=" << r.reward.total
                      << " adv=" << r.advantage << " text=\"" << r.text << "\"\n";
        throw NumericError("grpo: non-finite loss");
      }
      backward(total);
    }
    tape.clear();
    out.lr = opt_.current_lr();
    opt_.step();
    out.loss = loss_val;
    if (ls.total_tokens > 0) {
      out.mean_kl = ls.kl_sum / ls.total_tokens;
      out.clip_fraction = static_cast<double>(ls.clipped_tokens) / ls.total_tokens;
    }
  }
  ++step_;
  out.step = step_;
  return out;
}

// ---- pretraining -----------------------------------------------------------

double corpus_nll(const ModelParams& params, std::span<const PretrainPair> pairs,
                  int workers) {
  if (pairs.empty()) return 0.0;
  std::vector<double> nll(pairs.size(), 0.0);
  std::vector<int> counts(pairs.size(), 0);
  parallel_for(static_cast<int>(pairs.size()), workers, [&](int i) {
    const PretrainPair& p = pairs[static_cast<std::size_t>(i)];
    NoGradScope ng;
    PromptInputs prompt{p.frames, p.prompt_ids};
    Tensor logp = sequence_logprob(params, prompt, p.target_ids, nullptr);
    double s = 0.0;
    for (int t = 0; t < logp.size(); ++t) s -= static_cast<double>(logp.data()[t]);
    nll[static_cast<std::size_t>(i)] = s;
    counts[static_cast<std::size_t>(i)] = static_cast<int>(p.target_ids.size());
  });
  double total = 0.0;
  long tokens = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    total += nll[i];
    tokens += counts[i];
  }
  return total / static_cast<double>(std::max<long>(tokens, 1));
}

ModelParams pretrain(const ModelConfig& config, const std::vector<PretrainPair>& corpus,
                     const PretrainConfig& pcfg, std::uint64_t seed,
                     const std::function<void(const PretrainStats&)>& on_log) {
  VRPO_CHECK(!corpus.empty(), ContractError, "pretrain: empty corpus");
  Rng rng(derive_seed(seed, 0x12e7));
  ModelParams params = ModelParams::init(config, rng);

  // holdout split from the corpus tail
  const int holdout =
      std::min(static_cast<int>(corpus.size()) / 5,
               std::max(1, static_cast<int>(std::lround(pcfg.holdout_fraction *
                                                        static_cast<double>(corpus.size())))));
  const int train_n = static_cast<int>(corpus.size()) - holdout;
  VRPO_CHECK(train_n >= 1, ContractError, "pretrain: corpus too small for a holdout");
  std::span<const PretrainPair> holdout_span(corpus.data() + train_n,
                                             static_cast<std::size_t>(holdout));

  AdamW opt(params.all(), AdamWConfig{pcfg.learning_rate, 0.9f, 0.999f, 1e-8f,
                                      pcfg.weight_decay, pcfg.warmup_steps});
  GradTape tape;
  std::uniform_int_distribution<int> pick(0, train_n - 1);

  for (int step = 0; step < pcfg.steps; ++step) {
    opt.zero_grad();
    double loss_val = 0.0;
    {
      TapeScope scope(tape);
      Tensor total;
      int total_tokens = 0;
      for (int b = 0; b < pcfg.batch_size; ++b) {
        const PretrainPair& p = corpus[static_cast<std::size_t>(pick(rng))];
        PromptInputs prompt{p.frames, p.prompt_ids};
        Tensor logp = sequence_logprob(params, prompt, p.target_ids, nullptr);
        Tensor s = sum(logp);
        total = total.defined() ? add(total, s) : s;
        total_tokens += static_cast<int>(p.target_ids.size());
      }
      Tensor loss = scale(total, -1.0f / static_cast<float>(total_tokens));
      loss_val = static_cast<double>(loss.item());
      VRPO_CHECK(std::isfinite(loss_val), NumericError, "pretrain: non-finite loss");
      backward(loss);
    }
    tape.clear();
    opt.step();

    if (on_log) {
      PretrainStats st;
      st.step = step + 1;
      st.loss = loss_val;
      if ((step + 1) % std::max(1, pcfg.eval_every) == 0 || step + 1 == pcfg.steps)
        st.holdout_ppl = std::exp(corpus_nll(params, holdout_span, pcfg.workers));
      on_log(st);
    }
  }
  return params;
}

}  // namespace vrpo
