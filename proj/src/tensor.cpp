#include "vrpo/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "vrpo/kernels.hpp"

namespace vrpo {

namespace {

thread_local GradTape* t_current_tape = nullptr;

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = ArrX::Zero(numel(impl->shape));
  impl->requires_grad = requires_grad;
  return impl;
}

bool tracing_any(std::initializer_list<const Tensor*> inputs) {
  if (t_current_tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->grad_flows()) return true;
  return false;
}

// Accumulates `g` into `t`'s grad if gradient flows into it.
void accum(const Tensor& t, const ArrX& g) {
  if (t.grad_flows()) const_cast<Tensor&>(t).grad() += g;
}

Tensor make_result(Shape shape) { return Tensor(make_impl(std::move(shape), false)); }


}  // namespace

// ---- Tensor ----------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  Tensor t(make_impl(std::move(shape), requires_grad));
  t.impl()->value.setConstant(v);
  return t;
}

Tensor Tensor::scalar(float v) { return full({}, v); }

Tensor Tensor::from_span(Shape shape, std::span<const float> data, bool requires_grad) {
  VRPO_CHECK(static_cast<std::int64_t>(data.size()) == numel(shape), DimensionError,
             "from_span: " << data.size() << " values for shape " << shape_str(shape));
  Tensor t(make_impl(std::move(shape), requires_grad));
  std::copy(data.begin(), data.end(), t.data());
  return t;
}

Tensor Tensor::from_matrix(const MatRM& m, bool requires_grad) {
  Tensor t(make_impl({static_cast<int>(m.rows()), static_cast<int>(m.cols())}, requires_grad));
  Eigen::Map<MatRM>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

Tensor Tensor::from_vector(const VecX& v, bool requires_grad) {
  Tensor t(make_impl({static_cast<int>(v.size())}, requires_grad));
  std::copy(v.data(), v.data() + v.size(), t.data());
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stdev, bool requires_grad) {
  Tensor t(make_impl(std::move(shape), requires_grad));
  std::normal_distribution<float> dist(0.0f, stdev);
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

float Tensor::item() const {
  VRPO_CHECK(size() == 1, ContractError, "item() on tensor of size " << size());
  return impl_->value[0];
}

int Tensor::rows() const { return rank() >= 2 ? dim(0) : 1; }

int Tensor::cols() const {
  if (rank() == 0) return 1;
  if (rank() == 1) return dim(0);
  std::int64_t c = 1;
  for (int i = 1; i < rank(); ++i) c *= dim(i);
  return static_cast<int>(c);
}

Eigen::Map<MatRM> Tensor::mat() { return {data(), rows(), cols()}; }
Eigen::Map<const MatRM> Tensor::mat() const { return {data(), rows(), cols()}; }

ArrX& Tensor::grad() {
  if (impl_->grad.size() == 0) impl_->grad = ArrX::Zero(impl_->value.size());
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad.size() > 0) impl_->grad.setZero();
}

// ---- GradTape --------------------------------------------------------

GradTape* GradTape::current() { return t_current_tape; }

void GradTape::record(std::function<void()> backward_fn, std::initializer_list<Tensor> touched) {
  nodes_.push_back(std::move(backward_fn));
  for (const Tensor& t : touched)
    if (t.defined()) touched_.push_back(t.impl_ptr());
}

void GradTape::record(std::function<void()> backward_fn, std::span<const Tensor> touched) {
  nodes_.push_back(std::move(backward_fn));
  for (const Tensor& t : touched)
    if (t.defined()) touched_.push_back(t.impl_ptr());
}

void GradTape::clear() {
  nodes_.clear();
  touched_.clear();
}

TapeScope::TapeScope(GradTape& tape) : prev_(t_current_tape) { t_current_tape = &tape; }
TapeScope::~TapeScope() { t_current_tape = prev_; }

NoGradScope::NoGradScope() : prev_(t_current_tape) { t_current_tape = nullptr; }
NoGradScope::~NoGradScope() { t_current_tape = prev_; }

void backward(const Tensor& loss) {
  VRPO_CHECK(loss.defined() && loss.size() == 1, ContractError,
             "backward: loss must be a scalar tensor");
  GradTape* tape = t_current_tape;
  VRPO_CHECK(tape != nullptr, ContractError, "backward: no active GradTape");
  for (auto& impl : tape->touched_) {
    if (impl->grad.size() == 0)
      impl->grad = ArrX::Zero(impl->value.size());
    else
      impl->grad.setZero();
  }
  const_cast<Tensor&>(loss).grad()[0] = 1.0f;
  for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) (*it)();
}

// ---- op helpers ------------------------------------------------------

namespace {

// Marks `out` as tape-produced and records the node.
void record(Tensor& out, std::function<void()> fn, std::initializer_list<Tensor> touched) {
  out.impl()->on_tape = true;
  t_current_tape->record(std::move(fn), touched);
}

void check_rank2ish(const Tensor& t, const char* op) {
  VRPO_CHECK(t.rank() <= 2, DimensionError, op << ": rank " << t.rank() << " unsupported");
}

}  // namespace

// ---- ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2ish(a, "matmul");
  check_rank2ish(b, "matmul");
  VRPO_CHECK(a.cols() == b.rows(), DimensionError,
             "matmul: inner dims " << shape_str(a.shape()) << " x " << shape_str(b.shape()));
  Tensor out = make_result({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  if (tracing_any({&a, &b})) {
    record(
        out,
        [a, b, out]() {
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), out.rows(), out.cols());
          if (a.grad_flows()) {
            Eigen::Map<MatRM> ga(const_cast<Tensor&>(a).grad().data(), a.rows(), a.cols());
            ga.noalias() += go * b.mat().transpose();
          }
          if (b.grad_flows()) {
            Eigen::Map<MatRM> gb(const_cast<Tensor&>(b).grad().data(), b.rows(), b.cols());
            gb.noalias() += a.mat().transpose() * go;
          }
        },
        {a, b, out});
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_rank2ish(a, "transpose");
  Tensor out = make_result({a.cols(), a.rows()});
  out.mat() = a.mat().transpose();
  if (tracing_any({&a})) {
    record(
        out,
        [a, out]() {
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), out.rows(), out.cols());
          Eigen::Map<MatRM> ga(const_cast<Tensor&>(a).grad().data(), a.rows(), a.cols());
          ga += go.transpose();
        },
        {a, out});
  }
  return out;
}

namespace {

enum class EwMode { kSame, kRowBroadcast };

EwMode ew_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return EwMode::kSame;
  if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return EwMode::kRowBroadcast;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

// Sum of the rank-2 grad over rows, for the broadcast operand.
ArrX row_reduce(const ArrX& g, int rows, int cols) {
  Eigen::Map<const MatRM> gm(g.data(), rows, cols);
  VecX s = gm.colwise().sum();
  return s.array();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const EwMode m = ew_mode(a, b, "add");
  Tensor out = make_result(a.shape());
  if (m == EwMode::kSame) {
    out.array() = a.array() + b.array();
  } else {
    out.mat() = a.mat().rowwise() + Eigen::Map<const Eigen::RowVectorXf>(b.data(), b.size());
  }
  if (tracing_any({&a, &b})) {
    record(
        out,
        [a, b, out, m]() {
          const ArrX& go = out.impl()->grad;
          accum(a, go);
          if (b.grad_flows()) {
            if (m == EwMode::kSame)
              const_cast<Tensor&>(b).grad() += go;
            else
              const_cast<Tensor&>(b).grad() += row_reduce(go, a.rows(), a.cols());
          }
        },
        {a, b, out});
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const EwMode m = ew_mode(a, b, "sub");
  Tensor out = make_result(a.shape());
  if (m == EwMode::kSame) {
    out.array() = a.array() - b.array();
  } else {
    out.mat() = a.mat().rowwise() - Eigen::Map<const Eigen::RowVectorXf>(b.data(), b.size());
  }
  if (tracing_any({&a, &b})) {
    record(
        out,
        [a, b, out, m]() {
          const ArrX& go = out.impl()->grad;
          accum(a, go);
          if (b.grad_flows()) {
            if (m == EwMode::kSame)
              const_cast<Tensor&>(b).grad() -= go;
            else
              const_cast<Tensor&>(b).grad() -= row_reduce(go, a.rows(), a.cols());
          }
        },
        {a, b, out});
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  VRPO_CHECK(a.shape() == b.shape(), DimensionError,
             "mul: shapes " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
  Tensor out = make_result(a.shape());
  out.array() = a.array() * b.array();
  if (tracing_any({&a, &b})) {
    record(
        out,
        [a, b, out]() {
          const ArrX& go = out.impl()->grad;
          if (a.grad_flows()) const_cast<Tensor&>(a).grad() += go * b.array();
          if (b.grad_flows()) const_cast<Tensor&>(b).grad() += go * a.array();
        },
        {a, b, out});
  }
  return out;
}

Tensor add_scalar(const Tensor& a, float c) {
  Tensor out = make_result(a.shape());
  out.array() = a.array() + c;
  if (tracing_any({&a})) {
    record(
        out, [a, out]() { accum(a, out.impl()->grad); }, {a, out});
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = make_result(a.shape());
  out.array() = a.array() * c;
  if (tracing_any({&a})) {
    record(
        out, [a, out, c]() { accum(a, ArrX(out.impl()->grad * c)); }, {a, out});
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd grad_from_in_out) {
  Tensor out = make_result(a.shape());
  out.array() = fwd(a.array());
  if (tracing_any({&a})) {
    record(
        out,
        [a, out, grad_from_in_out]() {
          accum(a, ArrX(out.impl()->grad * grad_from_in_out(a.array(), out.array())));
        },
        {a, out});
  }
  return out;
}

}  // namespace

Tensor exp_t(const Tensor& a) {
  return unary_op(
      a, [](const ArrX& x) { return x.exp(); },
      [](const ArrX&, const ArrX& y) { return y; });
}

Tensor log_t(const Tensor& a) {
  return unary_op(
      a, [](const ArrX& x) { return x.log(); },
      [](const ArrX& x, const ArrX&) { return x.inverse(); });
}

Tensor tanh_t(const Tensor& a) {
  return unary_op(
      a, [](const ArrX& x) { return x.tanh(); },
      [](const ArrX&, const ArrX& y) { return 1.0f - y.square(); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](const ArrX& x) { return x.max(0.0f); },
      [](const ArrX& x, const ArrX&) { return (x > 0.0f).cast<float>(); });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a,
      [](const ArrX& x) {
        ArrX y(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) y[i] = kern::gelu_scalar(x[i]);
        return y;
      },
      [](const ArrX& x, const ArrX&) {
        ArrX g(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) g[i] = kern::gelu_grad_scalar(x[i]);
        return g;
      });
}

Tensor softmax(const Tensor& x, int axis) {
  check_rank2ish(x, "softmax");
  VRPO_CHECK(axis == -1 || (x.rank() == 2 && axis == 0) || (x.rank() <= 1 && axis == 0),
             DimensionError, "softmax: axis " << axis << " on " << shape_str(x.shape()));
  if (x.rank() == 2 && axis == 0) return transpose(softmax(transpose(x), -1));

  Tensor out = make_result(x.shape());
  out.mat() = x.mat();
  kern::softmax_rows_inplace(out.mat());
  if (tracing_any({&x})) {
    record(
        out,
        [x, out]() {
          const int r = out.rows(), c = out.cols();
          Eigen::Map<const MatRM> y(out.data(), r, c);
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), r, c);
          Eigen::Map<MatRM> gx(const_cast<Tensor&>(x).grad().data(), r, c);
          for (int i = 0; i < r; ++i) {
            const float s = (go.row(i).array() * y.row(i).array()).sum();
            gx.row(i).array() += (go.row(i).array() - s) * y.row(i).array();
          }
        },
        {x, out});
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  check_rank2ish(x, "log_softmax");
  Tensor out = make_result(x.shape());
  out.mat() = x.mat();
  kern::log_softmax_rows_inplace(out.mat());
  if (tracing_any({&x})) {
    record(
        out,
        [x, out]() {
          const int r = out.rows(), c = out.cols();
          Eigen::Map<const MatRM> y(out.data(), r, c);
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), r, c);
          Eigen::Map<MatRM> gx(const_cast<Tensor&>(x).grad().data(), r, c);
          for (int i = 0; i < r; ++i) {
            const float s = go.row(i).sum();
            gx.row(i).array() += go.row(i).array() - s * y.row(i).array().exp();
          }
        },
        {x, out});
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  check_rank2ish(x, "layer_norm");
  const int c = x.cols();
  VRPO_CHECK(c >= 1, DimensionError, "layer_norm: empty trailing axis");
  VRPO_CHECK(gain.size() == c && bias.size() == c, DimensionError,
             "layer_norm: gain/bias size mismatch");
  Tensor out = make_result(x.shape());
  out.mat() = kern::layer_norm_rows(x.mat(), VecX(Eigen::Map<const VecX>(gain.data(), c)),
                                    VecX(Eigen::Map<const VecX>(bias.data(), c)));
  if (tracing_any({&x, &gain, &bias})) {
    record(
        out,
        [x, gain, bias, out]() {
          using RowArr = Eigen::Array<float, 1, Eigen::Dynamic>;
          const int r = out.rows(), c = out.cols();
          const float n = static_cast<float>(c);
          Eigen::Map<const MatRM> xm(x.data(), r, c);
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), r, c);
          Eigen::Map<const Eigen::RowVectorXf> g(gain.data(), c);
          for (int i = 0; i < r; ++i) {
            auto row = xm.row(i).array();
            const float mu = row.mean();
            const float var = (row - mu).square().sum() / n;
            const float inv = 1.0f / std::sqrt(var + kern::kLayerNormEps);
            RowArr xhat = (row - mu) * inv;
            RowArr dy = go.row(i).array() * g.array();  // d loss / d xhat
            if (x.grad_flows()) {
              const float m1 = dy.mean();
              const float m2 = (dy * xhat).mean();
              Eigen::Map<MatRM> gx(const_cast<Tensor&>(x).grad().data(), r, c);
              gx.row(i).array() += inv * (dy - m1 - xhat * m2);
            }
            if (gain.grad_flows())
              const_cast<Tensor&>(gain).grad() +=
                  (go.row(i).array() * xhat).transpose();
            if (bias.grad_flows())
              const_cast<Tensor&>(bias).grad() += go.row(i).array().transpose();
          }
        },
        {x, gain, bias, out});
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_result({});
  out.array()[0] = a.array().sum();
  if (tracing_any({&a})) {
    record(
        out,
        [a, out]() { accum(a, ArrX::Constant(a.size(), out.impl()->grad[0])); }, {a, out});
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.size())); }

Tensor dot(const Tensor& a, const Tensor& b) {
  VRPO_CHECK(a.size() == b.size(), DimensionError, "dot: size mismatch");
  return sum(mul(a, b));
}

Tensor rows(const Tensor& a, int start, int count) {
  check_rank2ish(a, "rows");
  VRPO_CHECK(start >= 0 && count >= 0 && start + count <= a.rows(), DimensionError,
             "rows: [" << start << "," << start + count << ") of " << a.rows());
  Tensor out = make_result({count, a.cols()});
  out.mat() = a.mat().middleRows(start, count);
  if (tracing_any({&a})) {
    record(
        out,
        [a, out, start, count]() {
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), count, a.cols());
          Eigen::Map<MatRM> ga(const_cast<Tensor&>(a).grad().data(), a.rows(), a.cols());
          ga.middleRows(start, count) += go;
        },
        {a, out});
  }
  return out;
}

Tensor cols(const Tensor& a, int start, int count) {
  check_rank2ish(a, "cols");
  VRPO_CHECK(start >= 0 && count >= 0 && start + count <= a.cols(), DimensionError,
             "cols: [" << start << "," << start + count << ") of " << a.cols());
  Tensor out = make_result({a.rows(), count});
  out.mat() = a.mat().middleCols(start, count);
  if (tracing_any({&a})) {
    record(
        out,
        [a, out, start, count]() {
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), a.rows(), count);
          Eigen::Map<MatRM> ga(const_cast<Tensor&>(a).grad().data(), a.rows(), a.cols());
          ga.middleCols(start, count) += go;
        },
        {a, out});
  }
  return out;
}

Tensor gather_rows(const Tensor& a, std::span<const int> idx) {
  check_rank2ish(a, "gather_rows");
  Tensor out = make_result({static_cast<int>(idx.size()), a.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    VRPO_CHECK(idx[i] >= 0 && idx[i] < a.rows(), DimensionError,
               "gather_rows: index " << idx[i] << " out of " << a.rows());
    out.mat().row(static_cast<Eigen::Index>(i)) = a.mat().row(idx[i]);
  }
  if (tracing_any({&a})) {
    std::vector<int> ids(idx.begin(), idx.end());
    record(
        out,
        [a, out, ids]() {
          Eigen::Map<const MatRM> go(out.impl()->grad.data(), static_cast<int>(ids.size()),
                                     a.cols());
          Eigen::Map<MatRM> ga(const_cast<Tensor&>(a).grad().data(), a.rows(), a.cols());
          for (std::size_t i = 0; i < ids.size(); ++i)
            ga.row(ids[i]) += go.row(static_cast<Eigen::Index>(i));
        },
        {a, out});
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  VRPO_CHECK(!parts.empty(), DimensionError, "concat_rows: empty");
  const int c = parts[0].cols();
  int r = 0;
  for (const Tensor& p : parts) {
    VRPO_CHECK(p.cols() == c, DimensionError, "concat_rows: column mismatch");
    r += p.rows();
  }
  Tensor out = make_result({r, c});
  int at = 0;
  for (const Tensor& p : parts) {
    out.mat().middleRows(at, p.rows()) = p.mat();
    at += p.rows();
  }
  bool traced = false;
  for (const Tensor& p : parts)
    if (t_current_tape && p.grad_flows()) traced = true;
  if (traced) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    held.push_back(out);
    out.impl()->on_tape = true;
    t_current_tape->record(
        [held, out, c]() {
          int at = 0;
          for (std::size_t i = 0; i + 1 < held.size(); ++i) {
            const Tensor& p = held[i];
            if (p.grad_flows()) {
              Eigen::Map<const MatRM> go(out.impl()->grad.data(), out.rows(), c);
              Eigen::Map<MatRM> gp(const_cast<Tensor&>(p).grad().data(), p.rows(), c);
              gp += go.middleRows(at, p.rows());
            }
            at += p.rows();
          }
        },
        std::span<const Tensor>(held));
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  VRPO_CHECK(!parts.empty(), DimensionError, "concat_cols: empty");
  const int r = parts[0].rows();
  int c = 0;
  for (const Tensor& p : parts) {
    VRPO_CHECK(p.rows() == r, DimensionError, "concat_cols: row mismatch");
    c += p.cols();
  }
  Tensor out = make_result({r, c});
  int at = 0;
  for (const Tensor& p : parts) {
    out.mat().middleCols(at, p.cols()) = p.mat();
    at += p.cols();
  }
  bool traced = false;
  for (const Tensor& p : parts)
    if (t_current_tape && p.grad_flows()) traced = true;
  if (traced) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    held.push_back(out);
    out.impl()->on_tape = true;
    t_current_tape->record(
        [held, out, r]() {
          int at = 0;
          for (std::size_t i = 0; i + 1 < held.size(); ++i) {
            const Tensor& p = held[i];
            if (p.grad_flows()) {
              Eigen::Map<const MatRM> go(out.impl()->grad.data(), r, out.cols());
              Eigen::Map<MatRM> gp(const_cast<Tensor&>(p).grad().data(), r, p.cols());
              gp += go.middleCols(at, p.cols());
            }
            at += p.cols();
          }
        },
        std::span<const Tensor>(held));
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  VRPO_CHECK(numel(shape) == a.size(), DimensionError,
             "reshape: " << shape_str(a.shape()) << " -> " << shape_str(shape));
  Tensor out = make_result(std::move(shape));
  out.array() = a.array();
  if (tracing_any({&a})) {
    record(
        out, [a, out]() { accum(a, out.impl()->grad); }, {a, out});
  }
  return out;
}

Tensor pick_per_row(const Tensor& a, std::span<const int> idx) {
  check_rank2ish(a, "pick_per_row");
  VRPO_CHECK(static_cast<int>(idx.size()) == a.rows(), DimensionError,
             "pick_per_row: " << idx.size() << " indices for " << a.rows() << " rows");
  Tensor out = make_result({a.rows()});
  for (int i = 0; i < a.rows(); ++i) {
    VRPO_CHECK(idx[static_cast<std::size_t>(i)] >= 0 &&
                   idx[static_cast<std::size_t>(i)] < a.cols(),
               DimensionError, "pick_per_row: column index out of range");
    out.data()[i] = a.mat()(i, idx[static_cast<std::size_t>(i)]);
  }
  if (tracing_any({&a})) {
    std::vector<int> ids(idx.begin(), idx.end());
    record(
        out,
        [a, out, ids]() {
          Eigen::Map<MatRM> ga(const_cast<Tensor&>(a).grad().data(), a.rows(), a.cols());
          for (int i = 0; i < a.rows(); ++i)
            ga(i, ids[static_cast<std::size_t>(i)]) += out.impl()->grad[i];
        },
        {a, out});
  }
  return out;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  VRPO_CHECK(a.shape() == b.shape(), DimensionError, "minimum: shape mismatch");
  Tensor out = make_result(a.shape());
  out.array() = a.array().min(b.array());
  if (tracing_any({&a, &b})) {
    record(
        out,
        [a, b, out]() {
          const ArrX& go = out.impl()->grad;
          ArrX take_a = (a.array() <= b.array()).cast<float>();
          if (a.grad_flows()) const_cast<Tensor&>(a).grad() += go * take_a;
          if (b.grad_flows()) const_cast<Tensor&>(b).grad() += go * (1.0f - take_a);
        },
        {a, b, out});
  }
  return out;
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  Tensor out = make_result(a.shape());
  out.array() = a.array().max(lo).min(hi);
  if (tracing_any({&a})) {
    record(
        out,
        [a, out, lo, hi]() {
          ArrX inside = ((a.array() > lo) && (a.array() < hi)).cast<float>();
          accum(a, ArrX(out.impl()->grad * inside));
        },
        {a, out});
  }
  return out;
}

Tensor add_const(const Tensor& a, const MatRM& c) {
  VRPO_CHECK(a.rows() == c.rows() && a.cols() == c.cols(), DimensionError,
             "add_const: shape mismatch");
  Tensor out = make_result(a.shape());
  out.mat() = a.mat() + c;
  if (tracing_any({&a})) {
    record(
        out, [a, out]() { accum(a, out.impl()->grad); }, {a, out});
  }
  return out;
}

Tensor rope(const Tensor& x, std::span<const int> positions, int n_heads) {
  check_rank2ish(x, "rope");
  VRPO_CHECK(static_cast<int>(positions.size()) == x.rows(), DimensionError,
             "rope: position count mismatch");
  Tensor out = make_result(x.shape());
  out.mat() = x.mat();
  std::vector<int> pos(positions.begin(), positions.end());
  kern::rope_rows_inplace(out.mat(), pos, n_heads);
  if (tracing_any({&x})) {
    record(
        out,
        [x, out, pos, n_heads]() {
          MatRM g = Eigen::Map<const MatRM>(out.impl()->grad.data(), out.rows(), out.cols());
          kern::rope_rows_inverse_inplace(g, pos, n_heads);
          Eigen::Map<MatRM> gx(const_cast<Tensor&>(x).grad().data(), x.rows(), x.cols());
          gx += g;
        },
        {x, out});
  }
  return out;
}

Tensor detach(const Tensor& a) {
  Tensor out = make_result(a.shape());
  out.array() = a.array();
  return out;
}

}  // namespace vrpo
