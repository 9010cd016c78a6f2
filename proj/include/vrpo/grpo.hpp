#pragma once

// Group Relative Policy Optimization: sample a group of responses per
// prompt, normalize rewards within the group into advantages, optimize the
// clipped importance-ratio surrogate with a KL penalty toward the frozen
// reference policy. No value network, no supervised fine-tuning stage; a
// light supervised pretrain stands in for the base model.

#include <functional>
#include <optional>
#include <span>

#include "vrpo/model.hpp"
#include "vrpo/optim.hpp"
#include "vrpo/prompt.hpp"
#include "vrpo/reward.hpp"
#include "vrpo/tasks.hpp"

namespace vrpo {

struct GrpoConfig {
  int group_size = 8;        // G
  float clip_epsilon = 0.2f; // ratio clip range
  float kl_beta = 0.04f;     // KL coefficient toward the reference policy
  float learning_rate = 1e-4f;
  int total_steps = 400;
  float std_floor = 1e-8f;   // degenerate groups get all-zero advantages
  int updates_per_group = 1;
  int prompts_per_step = 2;
  float rollout_temperature = 1.0f;
  Mode train_mode = Mode::kConcise;
  bool sequence_level_ratio = false;  // token-level ratios by default
  float accuracy_weight = 1.0f;
  float format_weight = kDefaultFormatWeight;
  int warmup_steps = 10;
  float weight_decay = 0.0f;
  int workers = 1;
  int checkpoint_every = 0;  // 0 = only final

  void validate() const;
};

// Eq.-style group advantage normalization with population std; groups whose
// reward std falls below the floor get all-zero advantages.
std::vector<float> compute_advantages(std::span<const float> rewards,
                                      float std_floor = 1e-8f);

// Non-negative per-token KL estimator k = exp(d) - d - 1, d = logp_ref - logp_theta.
double kl_term(double logp_theta, double logp_ref);

struct RolloutResponse {
  std::vector<int> tokens;
  std::vector<float> logprobs_old;  // recorded under the sampling policy
  std::string text;
  RewardBreakdown reward;
  float advantage = 0.0f;
};

struct GroupRollout {
  PromptInputs prompt;
  char gold = 'A';
  Mode mode = Mode::kConcise;
  std::vector<RolloutResponse> responses;
};

struct LossStats {
  double kl_sum = 0.0;
  int clipped_tokens = 0;
  int total_tokens = 0;
};

// Surrogate for one group:
//   -(1/G) sum_i (1/|y_i|) sum_t [ min(r A_i, clip(r,1-e,1+e) A_i) - beta*k_t ]
// differentiable w.r.t. `theta` only. Zero-length responses are excluded.
Tensor grpo_loss(const GroupRollout& group, const ModelParams& theta,
                 const ModelParams& ref, const CompressionPlan* plan,
                 const GrpoConfig& cfg, LossStats* stats = nullptr);

struct StepStats {
  int step = 0;
  double mean_reward = 0.0;
  double mean_accuracy = 0.0;
  double mean_format = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double mean_length = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

class GrpoTrainer {
 public:
  // `params` is the live policy (storage shared with the caller); the
  // reference policy is a frozen deep copy taken here.
  GrpoTrainer(ModelParams params, GrpoConfig cfg,
              std::optional<CompressionPlan> plan = std::nullopt);

  // One sampling round over the prompt batch plus the configured number of
  // gradient updates. Aborts with NumericError and a diagnostic dump of the
  // offending group if the loss goes non-finite.
  StepStats train_step(std::span<const SynthVideoSample> batch, std::uint64_t step_seed);

  GroupRollout sample_group(const SynthVideoSample& sample, std::uint64_t group_seed);

  ModelParams& params() { return theta_; }
  const ModelParams& reference() const { return ref_; }
  const GrpoConfig& config() const { return cfg_; }
  int steps_done() const { return step_; }

 private:
  ModelParams theta_;
  ModelParams ref_;
  GrpoConfig cfg_;
  std::optional<CompressionPlan> plan_;
  AdamW opt_;
  int step_ = 0;
};

// ---- supervised pretraining ----------------------------------------------

struct PretrainConfig {
  int steps = 1500;
  int batch_size = 8;
  float learning_rate = 3e-4f;
  int warmup_steps = 10;
  float weight_decay = 0.01f;
  float holdout_fraction = 0.05f;
  int eval_every = 250;
  int workers = 1;
};

struct PretrainStats {
  int step = 0;
  double loss = 0.0;        // mean per-token cross-entropy of the batch
  double holdout_ppl = 0.0; // 0 when not evaluated this step
};

// Teacher-forced cross-entropy over the corpus. Returns the trained
// parameters; holdout perplexity decreases over training (logged).
ModelParams pretrain(const ModelConfig& config, const std::vector<PretrainPair>& corpus,
                     const PretrainConfig& pcfg, std::uint64_t seed,
                     const std::function<void(const PretrainStats&)>& on_log = {});

// Mean per-token cross-entropy of `params` on pairs (no grad).
double corpus_nll(const ModelParams& params, std::span<const PretrainPair> pairs,
                  int workers = 1);

}  // namespace vrpo
