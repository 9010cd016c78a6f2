#pragma once

// Dense float32 tensors with tape-based reverse-mode autodiff.
//
// Tensors are value-semantic handles onto shared storage. Ops are free
// functions; when a GradTape is active (TapeScope) and an input carries
// gradient, the op records a backward closure. backward(loss) replays the
// tape in reverse. Without an active tape, ops are plain eager Eigen math.

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>

#include "vrpo/common.hpp"

namespace vrpo {

struct TensorImpl {
  Shape shape;
  ArrX value;          // row-major flattening of `shape`
  ArrX grad;           // empty until first touched
  bool requires_grad = false;  // leaf (parameter) flag
  bool on_tape = false;        // produced by a recorded op
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor scalar(float v);
  static Tensor from_span(Shape shape, std::span<const float> data, bool requires_grad = false);
  static Tensor from_matrix(const MatRM& m, bool requires_grad = false);
  static Tensor from_vector(const VecX& v, bool requires_grad = false);
  // N(0, stdev^2) entries.
  static Tensor randn(Shape shape, Rng& rng, float stdev = 1.0f, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return impl_->value.size(); }

  float* data() { return impl_->value.data(); }
  const float* data() const { return impl_->value.data(); }
  ArrX& array() { return impl_->value; }
  const ArrX& array() const { return impl_->value; }
  float item() const;

  int rows() const;  // rank-2: dim(0); rank-1/0: 1
  int cols() const;  // trailing dimension
  Eigen::Map<MatRM> mat();
  Eigen::Map<const MatRM> mat() const;
  MatRM to_matrix() const { return mat(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  bool grad_flows() const { return impl_ && (impl_->requires_grad || impl_->on_tape); }

  // Lazily allocates a zero grad buffer.
  ArrX& grad();
  bool has_grad() const { return impl_->grad.size() > 0; }
  void zero_grad();

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of executed differentiable ops. backward() resets the grads
// of every tensor the tape touched, then replays nodes newest-first, so two
// backward passes over the same tape produce bit-identical grads.
class GradTape {
 public:
  void record(std::function<void()> backward_fn, std::initializer_list<Tensor> touched);
  void record(std::function<void()> backward_fn, std::span<const Tensor> touched);
  void clear();
  std::size_t size() const { return nodes_.size(); }

  static GradTape* current();

 private:
  friend void backward(const Tensor& loss);
  friend struct TapeScope;
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorImpl>> touched_;
};

struct TapeScope {
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* prev_;
};

// Populates grads of every grad-flowing tensor reachable from `loss`.
// `loss` must be scalar (ContractError otherwise).
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise; shapes must match, except `b` may be a rank-1 row vector
// broadcast over the rows of rank-2 `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float c);
Tensor scale(const Tensor& a, float c);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float c) { return scale(a, c); }
inline Tensor operator*(float c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, float c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// Softmax along `axis` (-1 = trailing, 0 = leading for rank-2).
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);  // rows of rank-2 (or rank-1 as one row)

// Per-row normalization over the trailing axis, epsilon kLayerNormEps.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor rows(const Tensor& a, int start, int count);
Tensor cols(const Tensor& a, int start, int count);
Tensor gather_rows(const Tensor& a, std::span<const int> idx);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& a, Shape shape);

// out[i] = a(i, idx[i]) for rank-2 a; result rank-1.
Tensor pick_per_row(const Tensor& a, std::span<const int> idx);

// Elementwise min; at ties the gradient follows `a`.
Tensor minimum(const Tensor& a, const Tensor& b);
// Clamp to [lo, hi]; gradient is zero outside the open interval.
Tensor clamp(const Tensor& a, float lo, float hi);

// Adds a constant matrix/vector (no gradient through `c`).
Tensor add_const(const Tensor& a, const MatRM& c);

// Rotary twist of per-head coefficient pairs (see kern::rope_rows_inplace).
Tensor rope(const Tensor& x, std::span<const int> positions, int n_heads);

// Detached copy: same values, no grad flow.
Tensor detach(const Tensor& a);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

}  // namespace vrpo
