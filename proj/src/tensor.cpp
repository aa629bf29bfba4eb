#include "unicombine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "unicombine/kernels.hpp"

namespace unicombine {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename S>
using DataPtr = std::shared_ptr<TensorData<S>>;

template <typename S>
DataPtr<S> make_data(Shape shape) {
  auto d = std::make_shared<TensorData<S>>();
  const auto n = shape_numel(shape);
  d->shape = std::move(shape);
  d->value.assign(static_cast<std::size_t>(n), S(0));
  return d;
}

template <typename S>
bool tracks(const Tensor<S>& t) {
  return t.defined() && t.impl()->requires_grad;
}

// The graph to record on, or null when nothing needs a gradient.
template <typename S>
Graph<S>* recorder(std::initializer_list<const Tensor<S>*> inputs) {
  auto* g = Graph<S>::active();
  if (!g) return nullptr;
  for (const auto* t : inputs)
    if (tracks(*t)) return g;
  return nullptr;
}

template <typename S>
std::vector<S>& grad_of(TensorData<S>& d) {
  if (d.grad.empty()) d.grad.assign(d.value.size(), S(0));
  return d.grad;
}

template <typename S>
void require_2d(const Tensor<S>& t, const char* op) {
  if (!t.defined() || t.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         (t.defined() ? shape_str(t.shape()) : "undefined"));
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape) {
  return Tensor(make_data<S>(std::move(shape)));
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S fill) {
  auto d = make_data<S>(std::move(shape));
  std::fill(d->value.begin(), d->value.end(), fill);
  return Tensor(d);
}

template <typename S>
Tensor<S> Tensor<S>::from(Shape shape, std::vector<S> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  auto d = std::make_shared<TensorData<S>>();
  d->shape = std::move(shape);
  d->value = std::move(values);
  return Tensor(d);
}

template <typename S>
Tensor<S> Tensor<S>::randn(Shape shape, std::mt19937_64& rng, S stddev) {
  auto d = make_data<S>(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : d->value) v = static_cast<S>(dist(rng));
  return Tensor(d);
}

template <typename S>
Tensor<S> Tensor<S>::uniform(Shape shape, std::mt19937_64& rng, S lo, S hi) {
  auto d = make_data<S>(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : d->value) v = static_cast<S>(dist(rng));
  return Tensor(d);
}

template <typename S>
std::int64_t Tensor<S>::rows() const {
  require_2d(*this, "rows");
  return impl_->shape[0];
}

template <typename S>
std::int64_t Tensor<S>::cols() const {
  require_2d(*this, "cols");
  return impl_->shape[1];
}

template <typename S>
S Tensor<S>::item() const {
  if (impl_->value.size() != 1)
    throw ContractError("item() on tensor of shape " + shape_str(impl_->shape));
  return impl_->value[0];
}

template <typename S>
std::span<S> Tensor<S>::grad() {
  return grad_of(*impl_);
}

template <typename S>
void Tensor<S>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
}

template <typename S>
Tensor<S>& Tensor<S>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  auto d = std::make_shared<TensorData<S>>();
  d->shape = impl_->shape;
  d->value = impl_->value;
  return Tensor(d);
}

// ---- Graph ------------------------------------------------------------------

template <typename S>
Graph<S>*& Graph<S>::active_slot() {
  thread_local Graph<S>* slot = nullptr;
  return slot;
}

template <typename S>
Graph<S>* Graph<S>::active() {
  return active_slot();
}

template <typename S>
void Graph<S>::record(std::string_view op, const DataPtr<S>& output,
                      std::vector<DataPtr<S>> inputs, std::function<void()> backward) {
  output->requires_grad = true;
  output->node_id = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(Node{op, output, std::move(inputs), std::move(backward)});
}

template <typename S>
void Graph<S>::clear() {
  nodes_.clear();
}

template <typename S>
void Graph<S>::backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: seed must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) throw ContractError("backward: loss does not track gradients");
  const auto id = loss.node_id();
  if (id >= 0 && (id >= static_cast<std::int64_t>(nodes_.size()) ||
                  nodes_[static_cast<std::size_t>(id)].output != loss.impl()))
    throw ContractError("backward: loss was not recorded on this graph");

  for (auto& node : nodes_) node.output->grad.clear();
  grad_of(*loss.impl())[0] += S(1);
  if (id < 0) return;
  for (auto i = id; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.output->grad.empty()) continue;
    node.backward();
  }
}

// ---- linear algebra -----------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  auto out = make_data<S>({m, n});
  kernels::gemm_nn(a.values().data(), b.values().data(), out->value.data(), m, k, n, false);
  if (auto* g = recorder({&a, &b})) {
    auto pa = a.impl(), pb = b.impl();
    g->record("matmul", out, {pa, pb}, [pa, pb, o = out.get(), m, k, n] {
      if (pa->requires_grad)
        kernels::gemm_nt(o->grad.data(), pb->value.data(), grad_of(*pa).data(), m, n, k, true);
      if (pb->requires_grad)
        kernels::gemm_tn(pa->value.data(), o->grad.data(), grad_of(*pb).data(), k, m, n, true);
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  auto out = make_data<S>({m, n});
  kernels::gemm_nt(a.values().data(), b.values().data(), out->value.data(), m, k, n, false);
  if (auto* g = recorder({&a, &b})) {
    auto pa = a.impl(), pb = b.impl();
    g->record("matmul_nt", out, {pa, pb}, [pa, pb, o = out.get(), m, k, n] {
      if (pa->requires_grad)
        kernels::gemm_nn(o->grad.data(), pb->value.data(), grad_of(*pa).data(), m, n, k, true);
      if (pb->requires_grad)
        kernels::gemm_tn(o->grad.data(), pa->value.data(), grad_of(*pb).data(), n, m, k, true);
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  require_2d(x, "linear");
  require_2d(weight, "linear");
  const auto m = x.rows(), k = x.cols(), n = weight.rows();
  if (weight.cols() != k)
    throw DimensionError("linear: input width " + std::to_string(k) + " vs weight " +
                         shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != n)
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " +
                         std::to_string(n) + " outputs");
  auto out = make_data<S>({m, n});
  kernels::gemm_nt(x.values().data(), weight.values().data(), out->value.data(), m, k, n,
                   false);
  if (bias.defined()) {
    const S* bv = bias.values().data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) out->value[i * n + j] += bv[j];
  }
  if (auto* g = recorder({&x, &weight, &bias})) {
    auto px = x.impl(), pw = weight.impl();
    auto pb = bias.defined() ? bias.impl() : DataPtr<S>{};
    std::vector<DataPtr<S>> ins{px, pw};
    if (pb) ins.push_back(pb);
    g->record("linear", out, std::move(ins), [px, pw, pb, o = out.get(), m, k, n] {
      const S* go = o->grad.data();
      if (px->requires_grad)
        kernels::gemm_nn(go, pw->value.data(), grad_of(*px).data(), m, n, k, true);
      if (pw->requires_grad)
        kernels::gemm_tn(go, px->value.data(), grad_of(*pw).data(), n, m, k, true);
      if (pb && pb->requires_grad) {
        auto& gb = grad_of(*pb);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  require_2d(a, "transpose");
  const auto r = a.rows(), c = a.cols();
  auto out = make_data<S>({c, r});
  const auto& v = a.values();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out->value[j * r + i] = v[i * c + j];
  if (auto* g = recorder({&a})) {
    auto pa = a.impl();
    g->record("transpose", out, {pa}, [pa, o = out.get(), r, c] {
      auto& ga = grad_of(*pa);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) ga[i * c + j] += o->grad[j * r + i];
    });
  }
  return Tensor<S>(out);
}

// ---- elementwise ----------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "add");
  auto out = make_data<S>(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a.values()[i] + b.values()[i];
  if (auto* g = recorder({&a, &b})) {
    auto pa = a.impl(), pb = b.impl();
    g->record("add", out, {pa, pb}, [pa, pb, o = out.get(), n] {
      for (auto* p : {pa.get(), pb.get()}) {
        if (!p->requires_grad) continue;
        auto& gp = grad_of(*p);
        for (std::int64_t i = 0; i < n; ++i) gp[i] += o->grad[i];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "sub");
  auto out = make_data<S>(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a.values()[i] - b.values()[i];
  if (auto* g = recorder({&a, &b})) {
    auto pa = a.impl(), pb = b.impl();
    g->record("sub", out, {pa, pb}, [pa, pb, o = out.get(), n] {
      if (pa->requires_grad) {
        auto& ga = grad_of(*pa);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        auto& gb = grad_of(*pb);
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= o->grad[i];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "mul");
  auto out = make_data<S>(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a.values()[i] * b.values()[i];
  if (auto* g = recorder({&a, &b})) {
    auto pa = a.impl(), pb = b.impl();
    g->record("mul", out, {pa, pb}, [pa, pb, o = out.get(), n] {
      if (pa->requires_grad) {
        auto& ga = grad_of(*pa);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += o->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto& gb = grad_of(*pb);
        for (std::int64_t i = 0; i < n; ++i) gb[i] += o->grad[i] * pa->value[i];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  auto out = make_data<S>(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a.values()[i] * factor;
  if (auto* g = recorder({&a})) {
    auto pa = a.impl();
    g->record("scale", out, {pa}, [pa, o = out.get(), n, factor] {
      auto& ga = grad_of(*pa);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += o->grad[i] * factor;
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S offset) {
  auto out = make_data<S>(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a.values()[i] + offset;
  if (auto* g = recorder({&a})) {
    auto pa = a.impl();
    g->record("add_scalar", out, {pa}, [pa, o = out.get(), n] {
      auto& ga = grad_of(*pa);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += o->grad[i];
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  require_2d(x, "add_rowvec");
  const auto r = x.rows(), c = x.cols();
  if (v.numel() != c)
    throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) + " for rows of " +
                         std::to_string(c));
  auto out = make_data<S>(x.shape());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out->value[i * c + j] = x.values()[i * c + j] + v.values()[j];
  if (auto* g = recorder({&x, &v})) {
    auto px = x.impl(), pv = v.impl();
    g->record("add_rowvec", out, {px, pv}, [px, pv, o = out.get(), r, c] {
      if (px->requires_grad) {
        auto& gx = grad_of(*px);
        for (std::int64_t i = 0; i < r * c; ++i) gx[i] += o->grad[i];
      }
      if (pv->requires_grad) {
        auto& gv = grad_of(*pv);
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) gv[j] += o->grad[i * c + j];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  require_2d(x, "mul_rowvec");
  const auto r = x.rows(), c = x.cols();
  if (v.numel() != c)
    throw DimensionError("mul_rowvec: vector " + shape_str(v.shape()) + " for rows of " +
                         std::to_string(c));
  auto out = make_data<S>(x.shape());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out->value[i * c + j] = x.values()[i * c + j] * v.values()[j];
  if (auto* g = recorder({&x, &v})) {
    auto px = x.impl(), pv = v.impl();
    g->record("mul_rowvec", out, {px, pv}, [px, pv, o = out.get(), r, c] {
      if (px->requires_grad) {
        auto& gx = grad_of(*px);
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) gx[i * c + j] += o->grad[i * c + j] * pv->value[j];
      }
      if (pv->requires_grad) {
        auto& gv = grad_of(*pv);
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) gv[j] += o->grad[i * c + j] * px->value[i * c + j];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  auto out = make_data<S>(x.shape());
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = x.values()[i];
    out->value[i] = v / (S(1) + std::exp(-v));
  }
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("silu", out, {px}, [px, o = out.get(), n] {
      auto& gx = grad_of(*px);
      for (std::int64_t i = 0; i < n; ++i) {
        const S v = px->value[i];
        const S sig = S(1) / (S(1) + std::exp(-v));
        gx[i] += o->grad[i] * sig * (S(1) + v * (S(1) - sig));
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr S kC = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S kA = S(0.044715);
  auto out = make_data<S>(x.shape());
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = x.values()[i];
    out->value[i] = S(0.5) * v * (S(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("gelu", out, {px}, [px, o = out.get(), n] {
      auto& gx = grad_of(*px);
      for (std::int64_t i = 0; i < n; ++i) {
        const S v = px->value[i];
        const S th = std::tanh(kC * (v + kA * v * v * v));
        const S d = S(0.5) * (S(1) + th) +
                    S(0.5) * v * (S(1) - th * th) * kC * (S(1) + S(3) * kA * v * v);
        gx[i] += o->grad[i] * d;
      }
    });
  }
  return Tensor<S>(out);
}

// ---- normalization and reductions ---------------------------------------------------

template <typename S>
Tensor<S> softmax_scaled(const Tensor<S>& x, S scale_factor) {
  require_2d(x, "softmax_scaled");
  if (!(scale_factor > S(0))) throw ContractError("softmax_scaled: scale must be positive");
  const auto r = x.rows(), c = x.cols();
  if (c < 1) throw DimensionError("softmax_scaled: empty row");
  auto out = make_data<S>(x.shape());
  kernels::softmax_rows(x.values().data(), out->value.data(), r, c, scale_factor);
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("softmax_scaled", out, {px}, [px, o = out.get(), r, c, scale_factor] {
      auto& gx = grad_of(*px);
#pragma omp parallel for schedule(static) if (r * c > (1 << 15))
      for (std::int64_t i = 0; i < r; ++i) {
        const S* y = o->value.data() + i * c;
        const S* gy = o->grad.data() + i * c;
        S dot = 0;
        for (std::int64_t j = 0; j < c; ++j) dot += gy[j] * y[j];
        S* gr = gx.data() + i * c;
        for (std::int64_t j = 0; j < c; ++j) gr[j] += scale_factor * y[j] * (gy[j] - dot);
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, S eps) {
  require_2d(x, "layer_norm");
  const auto r = x.rows(), c = x.cols();
  auto out = make_data<S>(x.shape());
  std::vector<S> inv_std(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    const S* xr = x.values().data() + i * c;
    S mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= S(c);
    S var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= S(c);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::int64_t j = 0; j < c; ++j) out->value[i * c + j] = (xr[j] - mu) * is;
  }
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("layer_norm", out, {px}, [px, o = out.get(), r, c, inv = std::move(inv_std)] {
      auto& gx = grad_of(*px);
      for (std::int64_t i = 0; i < r; ++i) {
        const S* y = o->value.data() + i * c;
        const S* gy = o->grad.data() + i * c;
        S mg = 0, mgy = 0;
        for (std::int64_t j = 0; j < c; ++j) {
          mg += gy[j];
          mgy += gy[j] * y[j];
        }
        mg /= S(c);
        mgy /= S(c);
        for (std::int64_t j = 0; j < c; ++j)
          gx[i * c + j] += inv[i] * (gy[j] - mg - y[j] * mgy);
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  auto out = make_data<S>({});
  out->value[0] = std::accumulate(x.values().begin(), x.values().end(), S(0));
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("sum", out, {px}, [px, o = out.get()] {
      auto& gx = grad_of(*px);
      for (auto& v : gx) v += o->grad[0];
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const auto n = x.numel();
  auto out = make_data<S>({});
  out->value[0] = std::accumulate(x.values().begin(), x.values().end(), S(0)) / S(n);
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("mean", out, {px}, [px, o = out.get(), n] {
      auto& gx = grad_of(*px);
      const S d = o->grad[0] / S(n);
      for (auto& v : gx) v += d;
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> mean_square(const Tensor<S>& x) {
  const auto n = x.numel();
  auto out = make_data<S>({});
  S acc = 0;
  for (auto v : x.values()) acc += v * v;
  out->value[0] = acc / S(n);
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("mean_square", out, {px}, [px, o = out.get(), n] {
      auto& gx = grad_of(*px);
      const S d = S(2) * o->grad[0] / S(n);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += d * px->value[i];
    });
  }
  return Tensor<S>(out);
}

// ---- layout ---------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto out = make_data<S>(std::move(shape));
  out->value = x.values();
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("reshape", out, {px}, [px, o = out.get()] {
      auto& gx = grad_of(*px);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o->grad[i];
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::int64_t begin, std::int64_t end) {
  if (!x.defined() || x.ndim() < 1) throw DimensionError("slice_rows: tensor has no rows");
  const auto total = x.dim(0);
  if (begin < 0 || end > total || begin >= end)
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + std::to_string(total));
  const auto row = x.numel() / total;
  Shape shape = x.shape();
  shape[0] = end - begin;
  auto out = make_data<S>(std::move(shape));
  std::copy(x.values().begin() + begin * row, x.values().begin() + end * row,
            out->value.begin());
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("slice_rows", out, {px}, [px, o = out.get(), offset = begin * row] {
      auto& gx = grad_of(*px);
      for (std::size_t i = 0; i < o->grad.size(); ++i) gx[offset + i] += o->grad[i];
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::int64_t begin, std::int64_t end) {
  require_2d(x, "slice_cols");
  const auto r = x.rows(), c = x.cols();
  if (begin < 0 || end > c || begin >= end)
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + std::to_string(c));
  const auto w = end - begin;
  auto out = make_data<S>({r, w});
  for (std::int64_t i = 0; i < r; ++i)
    std::copy_n(x.values().begin() + i * c + begin, w, out->value.begin() + i * w);
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("slice_cols", out, {px}, [px, o = out.get(), r, c, w, begin] {
      auto& gx = grad_of(*px);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < w; ++j) gx[i * c + begin + j] += o->grad[i * w + j];
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw DimensionError("concat_rows: scalar input");
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    Shape tail = p.shape();
    if (tail.size() != shape.size() || !std::equal(tail.begin() + 1, tail.end(), shape.begin() + 1))
      throw DimensionError("concat_rows: trailing shape mismatch " + shape_str(p.shape()) +
                           " vs " + shape_str(shape));
    rows += p.dim(0);
  }
  shape[0] = rows;
  auto out = make_data<S>(std::move(shape));
  std::size_t offset = 0;
  std::vector<DataPtr<S>> ins;
  std::vector<std::size_t> offsets;
  bool any = false;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->value.begin() + offset);
    offsets.push_back(offset);
    offset += p.values().size();
    ins.push_back(p.impl());
    any = any || tracks(p);
  }
  auto* g = Graph<S>::active();
  if (g && any) {
    auto captured = ins;
    g->record("concat_rows", out, std::move(ins),
              [captured = std::move(captured), offsets = std::move(offsets), o = out.get()] {
                for (std::size_t k = 0; k < captured.size(); ++k) {
                  auto& p = *captured[k];
                  if (!p.requires_grad) continue;
                  auto& gp = grad_of(p);
                  for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += o->grad[offsets[k] + i];
                }
              });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  for (const auto& p : parts) require_2d(p, "concat_cols");
  const auto r = parts.front().rows();
  std::int64_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r)
      throw DimensionError("concat_cols: row count mismatch " + shape_str(p.shape()));
    c += p.cols();
  }
  auto out = make_data<S>({r, c});
  std::vector<DataPtr<S>> ins;
  std::vector<std::int64_t> col0;
  std::int64_t at = 0;
  bool any = false;
  for (const auto& p : parts) {
    const auto w = p.cols();
    for (std::int64_t i = 0; i < r; ++i)
      std::copy_n(p.values().begin() + i * w, w, out->value.begin() + i * c + at);
    col0.push_back(at);
    at += w;
    ins.push_back(p.impl());
    any = any || tracks(p);
  }
  auto* g = Graph<S>::active();
  if (g && any) {
    auto captured = ins;
    g->record("concat_cols", out, std::move(ins),
              [captured = std::move(captured), col0 = std::move(col0), o = out.get(), r, c] {
                for (std::size_t k = 0; k < captured.size(); ++k) {
                  auto& p = *captured[k];
                  if (!p.requires_grad) continue;
                  auto& gp = grad_of(p);
                  const auto w = p.shape[1];
                  for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < w; ++j)
                      gp[i * w + j] += o->grad[i * c + col0[k] + j];
                }
              });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> gather(const Tensor<S>& x, std::span<const std::int64_t> index, Shape shape) {
  if (shape_numel(shape) != static_cast<std::int64_t>(index.size()))
    throw DimensionError("gather: index count does not fill " + shape_str(shape));
  const auto n = x.numel();
  auto out = make_data<S>(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= n) throw DimensionError("gather: index out of range");
    out->value[i] = x.values()[index[i]];
  }
  if (auto* g = recorder({&x})) {
    auto px = x.impl();
    g->record("gather", out, {px},
              [px, o = out.get(), idx = std::vector<std::int64_t>(index.begin(), index.end())] {
                auto& gx = grad_of(*px);
                for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += o->grad[i];
              });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const std::int64_t> ids) {
  require_2d(table, "gather_rows");
  const auto v = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  auto out = make_data<S>({static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v)
      throw ContractError("unknown token id " + std::to_string(ids[i]) + " (vocabulary of " +
                          std::to_string(v) + ")");
    std::copy_n(table.values().begin() + ids[i] * d, d, out->value.begin() + i * d);
  }
  if (auto* g = recorder({&table})) {
    auto pt = table.impl();
    g->record("gather_rows", out, {pt},
              [pt, o = out.get(), d, idx = std::vector<std::int64_t>(ids.begin(), ids.end())] {
                auto& gt = grad_of(*pt);
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (std::int64_t j = 0; j < d; ++j) gt[idx[i] * d + j] += o->grad[i * d + j];
              });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> rope(const Tensor<S>& x, const Tensor<S>& cos, const Tensor<S>& sin,
               std::int64_t num_heads) {
  require_2d(x, "rope");
  require_2d(cos, "rope");
  require_same_shape(cos, sin, "rope");
  const auto len = x.rows(), width = x.cols();
  if (num_heads < 1 || width % num_heads != 0)
    throw DimensionError("rope: width " + std::to_string(width) + " not divisible into " +
                         std::to_string(num_heads) + " heads");
  const auto hd = width / num_heads;
  const auto pairs = hd / 2;
  if (hd % 2 != 0 || cos.rows() != len || cos.cols() != pairs)
    throw DimensionError("rope: tables " + shape_str(cos.shape()) + " for input " +
                         shape_str(x.shape()) + " with " + std::to_string(num_heads) + " heads");
  auto out = make_data<S>(x.shape());
  const S* xv = x.values().data();
  const S* cv = cos.values().data();
  const S* sv = sin.values().data();
  for (std::int64_t l = 0; l < len; ++l)
    for (std::int64_t h = 0; h < num_heads; ++h)
      for (std::int64_t j = 0; j < pairs; ++j) {
        const auto at = l * width + h * hd + 2 * j;
        const S c = cv[l * pairs + j], s = sv[l * pairs + j];
        out->value[at] = xv[at] * c - xv[at + 1] * s;
        out->value[at + 1] = xv[at] * s + xv[at + 1] * c;
      }
  if (auto* g = recorder({&x})) {
    auto px = x.impl(), pc = cos.impl(), ps = sin.impl();
    g->record("rope", out, {px}, [px, pc, ps, o = out.get(), len, width, num_heads, hd, pairs] {
      auto& gx = grad_of(*px);
      for (std::int64_t l = 0; l < len; ++l)
        for (std::int64_t h = 0; h < num_heads; ++h)
          for (std::int64_t j = 0; j < pairs; ++j) {
            const auto at = l * width + h * hd + 2 * j;
            const S c = pc->value[l * pairs + j], s = ps->value[l * pairs + j];
            const S g0 = o->grad[at], g1 = o->grad[at + 1];
            gx[at] += g0 * c + g1 * s;
            gx[at + 1] += -g0 * s + g1 * c;
          }
    });
  }
  return Tensor<S>(out);
}

// ---- verification -----------------------------------------------------------------

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double step) {
  if (!(step > 0.0) || !std::isfinite(step))
    throw ContractError("grad_check: step must be positive");
  auto leaf = x.detach();
  leaf.set_requires_grad();
  std::vector<double> analytic;
  {
    Graph<double> graph;
    GraphScope<double> scope(graph);
    auto loss = f(leaf);
    if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: f is not finite at x");
    graph.backward(loss);
    analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }
  NoGradScope<double> off;
  std::vector<double> numeric(analytic.size());
  auto probe = x.detach();
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double orig = probe.values()[i];
    probe.values()[i] = orig + step;
    const double up = f(probe).item();
    probe.values()[i] = orig - step;
    const double down = f(probe).item();
    probe.values()[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("grad_check: f is not finite near coordinate " + std::to_string(i));
    numeric[i] = (up - down) / (2.0 * step);
  }
  double gmax = 0.0;
  for (double v : numeric) gmax = std::max(gmax, std::abs(v));
  const double floor = std::max(1e-2 * gmax, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

template <typename S>
void check_finite(const Tensor<S>& x, std::string_view what) {
  for (auto v : x.values())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

#define UC_TENSOR_OPS(S)                                                                    \
  template class Tensor<S>;                                                                 \
  template class Graph<S>;                                                                  \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> matmul_nt<S>(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> linear<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);       \
  template Tensor<S> transpose<S>(const Tensor<S>&);                                        \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                         \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                                    \
  template Tensor<S> add_rowvec<S>(const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> mul_rowvec<S>(const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> silu<S>(const Tensor<S>&);                                             \
  template Tensor<S> gelu<S>(const Tensor<S>&);                                             \
  template Tensor<S> softmax_scaled<S>(const Tensor<S>&, S);                                \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, S);                                    \
  template Tensor<S> sum<S>(const Tensor<S>&);                                              \
  template Tensor<S> mean<S>(const Tensor<S>&);                                             \
  template Tensor<S> mean_square<S>(const Tensor<S>&);                                      \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                   \
  template Tensor<S> slice_rows<S>(const Tensor<S>&, std::int64_t, std::int64_t);           \
  template Tensor<S> slice_cols<S>(const Tensor<S>&, std::int64_t, std::int64_t);           \
  template Tensor<S> concat_rows<S>(const std::vector<Tensor<S>>&);                         \
  template Tensor<S> concat_cols<S>(const std::vector<Tensor<S>>&);                         \
  template Tensor<S> gather<S>(const Tensor<S>&, std::span<const std::int64_t>, Shape);     \
  template Tensor<S> gather_rows<S>(const Tensor<S>&, std::span<const std::int64_t>);       \
  template Tensor<S> rope<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,          \
                             std::int64_t);                                                 \
  template void check_finite<S>(const Tensor<S>&, std::string_view);

UC_TENSOR_OPS(float)
UC_TENSOR_OPS(double)

#undef UC_TENSOR_OPS

}  // namespace unicombine
