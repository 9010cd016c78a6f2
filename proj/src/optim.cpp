#include "vrpo/optim.hpp"

#include <cmath>

namespace vrpo {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.push_back(ArrX::Zero(p.size()));
    v_.push_back(ArrX::Zero(p.size()));
  }
}

float AdamW::current_lr() const {
  const int t = t_ + 1;
  if (cfg_.warmup_steps > 0 && t <= cfg_.warmup_steps)
    return cfg_.lr * static_cast<float>(t) / static_cast<float>(cfg_.warmup_steps);
  return cfg_.lr;
}

void AdamW::step() {
  const float lr = current_lr();
  ++t_;
  const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const ArrX& g = p.impl()->grad;
    m_[i] = cfg_.beta1 * m_[i] + (1.0f - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0f - cfg_.beta2) * g.square();
    ArrX mhat = m_[i] / bc1;
    ArrX vhat = v_[i] / bc2;
    p.array() -= lr * (mhat / (vhat.sqrt() + cfg_.eps) + cfg_.weight_decay * p.array());
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace vrpo
