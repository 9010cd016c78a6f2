#pragma once

#include <vector>

#include "vrpo/tensor.hpp"

namespace vrpo {

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  int warmup_steps = 10;  // linear ramp from lr/warmup to lr
};

// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);

  // Applies one update from the accumulated grads, then leaves grads intact
  // (call zero_grad() before the next backward).
  void step();
  void zero_grad();
  int steps_done() const { return t_; }
  float current_lr() const;
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<ArrX> m_, v_;
  AdamWConfig cfg_;
  int t_ = 0;
};

}  // namespace vrpo
