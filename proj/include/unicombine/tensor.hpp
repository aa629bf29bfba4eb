// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a value buffer and an optional gradient
// buffer. Operations record themselves on the Graph that is active on the
// calling thread (see GraphScope) whenever at least one input tracks
// gradients; with no active graph every operation is a plain computation.
//
// Scalars are `float` for training and inference and `double` for the
// verification suites; every type and operation is instantiated for both.
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unicombine/errors.hpp"

namespace unicombine {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename S>
struct TensorData {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  std::int64_t node_id = -1;  // index on the recording graph, -1 for leaves
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData<S>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, S fill);
  static Tensor from(Shape shape, std::vector<S> values);
  static Tensor randn(Shape shape, std::mt19937_64& rng, S stddev = S(1));
  static Tensor uniform(Shape shape, std::mt19937_64& rng, S lo, S hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->value.size()); }
  std::int64_t rows() const;  // 2-D only
  std::int64_t cols() const;  // 2-D only

  std::span<S> data() { return impl_->value; }
  std::span<const S> data() const { return impl_->value; }
  std::vector<S>& values() { return impl_->value; }
  const std::vector<S>& values() const { return impl_->value; }
  S at(std::int64_t r, std::int64_t c) const { return impl_->value[r * cols() + c]; }
  S item() const;

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-filled view of the gradient (allocated on demand).
  std::span<S> grad();
  std::span<const S> grad() const { return impl_->grad; }
  void zero_grad();

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const { return impl_->requires_grad; }
  std::int64_t node_id() const { return impl_->node_id; }

  // Fresh leaf holding a copy of the values.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorData<S>>& impl() const { return impl_; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorData<S>> impl_;
};

// The recording tape. Nodes are appended in execution order, which is already
// a topological order; backward walks it once in reverse.
template <typename S>
class Graph {
 public:
  struct Node {
    std::string_view op;
    std::shared_ptr<TensorData<S>> output;
    std::vector<std::shared_ptr<TensorData<S>>> inputs;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Seeds d(loss)/d(loss) = 1 and accumulates into every tracked leaf.
  // Intermediate gradients are reset first, so repeated calls add the same
  // leaf contribution again.
  void backward(const Tensor<S>& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear();

  void record(std::string_view op, const std::shared_ptr<TensorData<S>>& output,
              std::vector<std::shared_ptr<TensorData<S>>> inputs,
              std::function<void()> backward);

  static Graph* active();

 private:
  template <typename>
  friend class GraphScope;
  template <typename>
  friend class NoGradScope;
  static Graph*& active_slot();

  std::vector<Node> nodes_;
};

// Makes `graph` the recording target on this thread for the scope lifetime.
template <typename S>
class GraphScope {
 public:
  explicit GraphScope(Graph<S>& graph) : previous_(Graph<S>::active_slot()) {
    Graph<S>::active_slot() = &graph;
  }
  ~GraphScope() { Graph<S>::active_slot() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<S>* previous_;
};

// Suspends recording for the scope lifetime.
template <typename S>
class NoGradScope {
 public:
  NoGradScope() : previous_(Graph<S>::active_slot()) { Graph<S>::active_slot() = nullptr; }
  ~NoGradScope() { Graph<S>::active_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph<S>* previous_;
};

// ---- linear algebra -------------------------------------------------------

// [m×k]·[k×n]
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
// [m×k]·[n×k]ᵀ
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b);
// x·Wᵀ (+ bias); W is [out×in].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias = {});
template <typename S>
Tensor<S> transpose(const Tensor<S>& a);

// ---- elementwise ------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S offset);
// x[r×c] + v (v holds c values)
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v);
// x[r×c] ⊙ v (v holds c values)
template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v);
template <typename S>
Tensor<S> silu(const Tensor<S>& x);
// tanh approximation
template <typename S>
Tensor<S> gelu(const Tensor<S>& x);

// ---- normalization and reductions --------------------------------------------

// Rows of softmax(scale·x), stabilized by row-max subtraction.
template <typename S>
Tensor<S> softmax_scaled(const Tensor<S>& x, S scale);
// Per-row zero-mean unit-variance, no affine parameters.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, S eps = S(1e-6));
template <typename S>
Tensor<S> sum(const Tensor<S>& x);
template <typename S>
Tensor<S> mean(const Tensor<S>& x);
// mean(x ⊙ x)
template <typename S>
Tensor<S> mean_square(const Tensor<S>& x);

// ---- layout -----------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::int64_t begin, std::int64_t end);
template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::int64_t begin, std::int64_t end);
template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts);
template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts);
// out.flat[i] = x.flat[index[i]]; gradient scatters back.
template <typename S>
Tensor<S> gather(const Tensor<S>& x, std::span<const std::int64_t> index, Shape shape);
// Embedding lookup: rows of table[vocab×d] selected by ids.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const std::int64_t> ids);

// Rotary position rotation applied per head to x[L × heads·head_dim].
// cos/sin are [L × head_dim/2]; pair (2j, 2j+1) of every head of token l is
// rotated by the angle whose cosine is cos[l, j].
template <typename S>
Tensor<S> rope(const Tensor<S>& x, const Tensor<S>& cos, const Tensor<S>& sin,
               std::int64_t num_heads);

// ---- verification -----------------------------------------------------------

// Largest per-coordinate relative error between the analytic gradient of the
// scalar map f at x and central differences with the given step. The
// denominator is floored at 1e-2 of the largest numeric gradient magnitude so
// coordinates with vanishing gradient are measured on the scale of the map.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double step);

// Converts values between precisions (no gradient history).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.values().begin(), x.values().end());
  return Tensor<To>::from(x.shape(), std::move(out));
}

// Throws NumericError if any value is NaN or infinite.
template <typename S>
void check_finite(const Tensor<S>& x, std::string_view what);

double max_abs_diff(std::span<const float> a, std::span<const float> b);
double max_abs_diff(std::span<const double> a, std::span<const double> b);

}  // namespace unicombine
