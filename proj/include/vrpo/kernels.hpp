#pragma once

// Non-differentiable Eigen kernels shared by the autograd ops and the
// cached-inference path, so both produce the same floating-point values.

#include <cmath>
#include <span>

#include "vrpo/common.hpp"

namespace vrpo::kern {

inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr float kMaskNegInf = -1e30f;
inline constexpr float kRopeBase = 10000.0f;

// Row-wise softmax with max subtraction.
inline void softmax_rows_inplace(Eigen::Ref<MatRM> x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto row = x.row(i).array();
    const float m = row.maxCoeff();
    row = (row - m).exp();
    row /= row.sum();
  }
}

inline void log_softmax_rows_inplace(Eigen::Ref<MatRM> x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto row = x.row(i).array();
    const float m = row.maxCoeff();
    const float lse = std::log((row - m).exp().sum()) + m;
    row -= lse;
  }
}

// y = gain * (x - mean) / sqrt(var + eps) + bias, per row.
inline MatRM layer_norm_rows(const Eigen::Ref<const MatRM>& x, const VecX& gain,
                             const VecX& bias) {
  MatRM y(x.rows(), x.cols());
  const auto n = static_cast<float>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto row = x.row(i).array();
    const float mu = row.mean();
    const float var = (row - mu).square().sum() / n;
    const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
    y.row(i).array() = (row - mu) * inv * gain.transpose().array() + bias.transpose().array();
  }
  return y;
}

inline float gelu_scalar(float x) {
  // tanh approximation
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  const float u = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad_scalar(float x) {
  const float c = 0.7978845608028654f;
  const float u = c * (x + 0.044715f * x * x * x);
  const float t = std::tanh(u);
  const float du = c * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

// Rotary position twist applied per head to consecutive coefficient pairs.
// `x` is [n, d_model] with heads folded; positions are per-row token ids.
inline void rope_rows_inplace(Eigen::Ref<MatRM> x, std::span<const int> positions,
                              int n_heads) {
  const int d_model = static_cast<int>(x.cols());
  const int d_head = d_model / n_heads;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float pos = static_cast<float>(positions[static_cast<std::size_t>(r)]);
    for (int h = 0; h < n_heads; ++h) {
      const int base = h * d_head;
      for (int i = 0; i + 1 < d_head; i += 2) {
        const float theta = pos * std::pow(kRopeBase, -static_cast<float>(i) /
                                                          static_cast<float>(d_head));
        const float cs = std::cos(theta), sn = std::sin(theta);
        const float a = x(r, base + i), b = x(r, base + i + 1);
        x(r, base + i) = a * cs - b * sn;
        x(r, base + i + 1) = a * sn + b * cs;
      }
    }
  }
}

// Inverse twist (transpose of the rotation); used by the autograd backward.
inline void rope_rows_inverse_inplace(Eigen::Ref<MatRM> x, std::span<const int> positions,
                                      int n_heads) {
  const int d_model = static_cast<int>(x.cols());
  const int d_head = d_model / n_heads;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float pos = static_cast<float>(positions[static_cast<std::size_t>(r)]);
    for (int h = 0; h < n_heads; ++h) {
      const int base = h * d_head;
      for (int i = 0; i + 1 < d_head; i += 2) {
        const float theta = pos * std::pow(kRopeBase, -static_cast<float>(i) /
                                                          static_cast<float>(d_head));
        const float cs = std::cos(theta), sn = std::sin(theta);
        const float a = x(r, base + i), b = x(r, base + i + 1);
        x(r, base + i) = a * cs + b * sn;
        x(r, base + i + 1) = -a * sn + b * cs;
      }
    }
  }
}

inline float logsumexp(const Eigen::Ref<const Eigen::RowVectorXf>& v) {
  const float m = v.maxCoeff();
  return std::log((v.array() - m).exp().sum()) + m;
}

}  // namespace vrpo::kern
