#pragma once

// Dense row-major float64 tensors with tape-based reverse-mode
// differentiation. Every op records its adjoint on the thread's active Tape
// when at least one input requires a gradient.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace seqswap {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Handle type: copies share storage, like a framework tensor. Use clone()
// for a value copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  std::size_t cols() const;

  std::span<double> data() const { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() const { node_->grad.clear(); }

  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }

  // Deep copy of the values; the copy carries no gradient and no history.
  Tensor clone() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Ordered record of executed differentiable ops.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  // The adjoint owns whatever nodes it touches.
  void record(Adjoint adjoint) { entries_.push_back(std::move(adjoint)); }

  // Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse order.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Adjoint> entries_;
};

Tape* active_tape();

// Installs a tape as the calling thread's recorder for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (teacher forwards, evaluation, timing).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Backward on the calling thread's active tape.
void backward(const Tensor& loss);

// Packed ragged sequences: rows [offsets[s], offsets[s+1]) form sequence s.
struct Segments {
  std::vector<std::size_t> offsets{0};

  static Segments uniform(std::size_t count, std::size_t length);
  std::size_t count() const { return offsets.size() - 1; }
  std::size_t total() const { return offsets.back(); }
  std::size_t begin(std::size_t s) const { return offsets[s]; }
  std::size_t end(std::size_t s) const { return offsets[s + 1]; }
  std::size_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

// Row permutation that reverses every segment in place.
std::vector<std::size_t> reverse_index(const Segments& segs);

// ---- linear algebra and elementwise ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& a, const Tensor& bias);  // bias broadcast over rows
Tensor mul_row(const Tensor& a, const Tensor& v);      // v broadcast over rows
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// gamma * a + beta with one-element gamma and beta.
Tensor affine_scalar(const Tensor& a, const Tensor& gamma, const Tensor& beta);
// Row r multiplied by the constant weights[r].
Tensor mask_rows(const Tensor& a, std::span<const double> weights);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
// Values clipped to [lo, hi]; the gradient passes through inside the range.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_squared_error(const Tensor& a, const Tensor& b);
// a / sum(a); a must be strictly positive in total.
Tensor normalize(const Tensor& a);

// ---- row/column plumbing ----

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> index, std::size_t out_rows);
Tensor tile_rows(const Tensor& a, std::size_t times);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

// ---- fused neural ops ----

inline constexpr double kLayerNormEps = 1e-6;

Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEps);
// Mean softmax cross-entropy over rows.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Multi-head scaled dot-product attention inside each segment. q, k, v are
// [rows x D] with D = heads * head_dim. When probs is non-null it receives
// the post-softmax matrices, segment-major then head-major.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const Segments& segs, std::vector<std::vector<double>>* probs = nullptr);

// LSTM recurrence per segment. gates_x = x W_x + b is [rows x 4H] in gate order
// (input, forget, cell, output); w_h is [H x 4H]. h0 = c0 = 0.
Tensor lstm_recurrence(const Tensor& gates_x, const Tensor& w_h, const Segments& segs);

// Diagonal selective scan per segment with a [S x P] state per sequence:
//   state_k = exp(dt_k * a) (.) state_{k-1} + dt_k * b_k x_k^T
//   y_k     = state_k^T c_k
// x: [rows x P], dt: [rows x 1], b, c: [rows x S], a: [S].
Tensor ssm_recurrence(const Tensor& x, const Tensor& dt, const Tensor& b, const Tensor& c,
                      const Tensor& a, const Segments& segs);

}  // namespace seqswap
