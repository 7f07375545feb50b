#include "seqswap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "seqswap/error.hpp"

namespace seqswap {

namespace {

thread_local Tape* g_tape = nullptr;

using NodePtr = std::shared_ptr<TensorNode>;

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Grad buffer of an input, or nullptr when it does not need one.
double* grad_of(const NodePtr& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Elementwise unary op with derivative f'(x, y).
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const bool rec = recording({&a});
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, df] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < on->data.size(); ++i) {
        ga[i] += on->grad[i] * df(an->data[i], on->data[i]);
      }
    });
  }
  return result;
}

}  // namespace

// ---------------------------------------------------------------- Tensor

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

std::size_t Tensor::cols() const {
  const Shape& s = node_->shape;
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  return size() / s[0];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
  return node_->data[0];
}

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->data, node_->requires_grad); }

// ---------------------------------------------------------------- Tape

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = previous_; }

void backward(const Tensor& loss) {
  if (g_tape == nullptr) throw ContractError("backward: no active tape");
  g_tape->backward(loss);
}

Segments Segments::uniform(std::size_t count, std::size_t length) {
  Segments s;
  s.offsets.resize(count + 1);
  for (std::size_t i = 0; i <= count; ++i) s.offsets[i] = i * length;
  return s;
}

std::vector<std::size_t> reverse_index(const Segments& segs) {
  std::vector<std::size_t> idx(segs.total());
  for (std::size_t s = 0; s < segs.count(); ++s) {
    const std::size_t b = segs.begin(s), e = segs.end(s);
    for (std::size_t r = b; r < e; ++r) idx[r] = b + (e - 1 - r);
  }
  return idx;
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const bool rec = recording({&a, &b});
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* br = B + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  Tensor result({m, n}, std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node(), on = result.node();
    g_tape->record([an, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      const double* G = on->grad.data();
      const double* A = an->data.data();
      const double* B = bn->data.data();
      if (double* gA = grad_of(an)) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = G + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* br = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
            gA[i * k + p] += acc;
          }
        }
      }
      if (double* gB = grad_of(bn)) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = G + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            double* gb = gB + p * n;
            for (std::size_t j = 0; j < n; ++j) gb[j] += av * gr[j];
          }
        }
      }
    });
  }
  return result;
}

namespace {

// Shared body of add/sub/mul on equal shapes.
enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  require_same_shape(a, b, name);
  const bool rec = recording({&a, &b});
  std::vector<double> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Binary::kAdd: out[i] = x[i] + y[i]; break;
      case Binary::kSub: out[i] = x[i] - y[i]; break;
      case Binary::kMul: out[i] = x[i] * y[i]; break;
    }
  }
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node(), on = result.node();
    g_tape->record([an, bn, on, kind] {
      if (on->grad.empty()) return;
      const std::size_t n = on->data.size();
      const double* g = on->grad.data();
      if (double* ga = grad_of(an)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += kind == Binary::kMul ? g[i] * bn->data[i] : g[i];
      }
      if (double* gb = grad_of(bn)) {
        for (std::size_t i = 0; i < n; ++i) {
          switch (kind) {
            case Binary::kAdd: gb[i] += g[i]; break;
            case Binary::kSub: gb[i] -= g[i]; break;
            case Binary::kMul: gb[i] += g[i] * an->data[i]; break;
          }
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

namespace {

Tensor row_broadcast(const Tensor& a, const Tensor& v, bool multiply, const char* name) {
  require_rank2(a, name);
  const std::size_t m = a.rows(), n = a.cols();
  if (v.size() != n) {
    throw ShapeError(std::string(name) + ": vector of " + std::to_string(v.size()) +
                     " does not match " + std::to_string(n) + " columns");
  }
  const bool rec = recording({&a, &v});
  std::vector<double> out(m * n);
  const auto x = a.data();
  const auto w = v.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = multiply ? x[i * n + j] * w[j] : x[i * n + j] + w[j];
    }
  }
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), vn = v.node(), on = result.node();
    g_tape->record([an, vn, on, m, n, multiply] {
      if (on->grad.empty()) return;
      const double* g = on->grad.data();
      if (double* ga = grad_of(an)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            ga[i * n + j] += multiply ? g[i * n + j] * vn->data[j] : g[i * n + j];
          }
        }
      }
      if (double* gv = grad_of(vn)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            gv[j] += multiply ? g[i * n + j] * an->data[i * n + j] : g[i * n + j];
          }
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add_bias(const Tensor& a, const Tensor& bias) { return row_broadcast(a, bias, false, "add_bias"); }
Tensor mul_row(const Tensor& a, const Tensor& v) { return row_broadcast(a, v, true, "mul_row"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor affine_scalar(const Tensor& a, const Tensor& gamma, const Tensor& beta) {
  if (gamma.size() != 1 || beta.size() != 1) {
    throw ShapeError("affine_scalar: gamma and beta must hold one element");
  }
  const bool rec = recording({&a, &gamma, &beta});
  const double g0 = gamma.at(0), b0 = beta.at(0);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g0 * a.at(i) + b0;
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
    g_tape->record([an, gn, bn, on] {
      if (on->grad.empty()) return;
      const std::size_t n = on->data.size();
      const double* g = on->grad.data();
      if (double* ga = grad_of(an)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * gn->data[0];
      }
      if (double* gg = grad_of(gn)) {
        for (std::size_t i = 0; i < n; ++i) gg[0] += g[i] * an->data[i];
      }
      if (double* gb = grad_of(bn)) {
        for (std::size_t i = 0; i < n; ++i) gb[0] += g[i];
      }
    });
  }
  return result;
}

Tensor mask_rows(const Tensor& a, std::span<const double> weights) {
  require_rank2(a, "mask_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (weights.size() != m) throw ShapeError("mask_rows: weight count differs from row count");
  const bool rec = recording({&a});
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) * w[i];
  }
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, w = std::move(w), m, n] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += on->grad[i * n + j] * w[i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------- elementwise

Tensor sigmoid(const Tensor& a) {
  return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  const bool rec = recording({&a});
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor result({}, {s}, rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += on->grad[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_squared_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_squared_error");
  return mean(square(sub(a, b)));
}

Tensor normalize(const Tensor& a) {
  const bool rec = recording({&a});
  double s = 0.0;
  for (double x : a.data()) s += x;
  if (!(s > 0.0)) throw ContractError("normalize: total must be positive");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / s;
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, s] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      double dot = 0.0;
      for (std::size_t i = 0; i < on->data.size(); ++i) dot += on->grad[i] * on->data[i];
      for (std::size_t i = 0; i < on->data.size(); ++i) ga[i] += (on->grad[i] - dot) / s;
    });
  }
  return result;
}

// ---------------------------------------------------------------- plumbing

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_rank2(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t r : index) {
    if (r >= m) throw ContractError("gather_rows: row index out of range");
  }
  const bool rec = recording({&a});
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(a.data().data() + idx[i] * n, n, out.data() + i * n);
  }
  Tensor result({idx.size(), n}, std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, idx = std::move(idx), n] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[idx[i] * n + j] += on->grad[i * n + j];
      }
    });
  }
  return result;
}

Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> index, std::size_t out_rows) {
  require_rank2(a, "scatter_rows");
  const std::size_t n = a.cols();
  if (index.size() != a.rows()) throw ContractError("scatter_rows: index length differs from rows");
  std::vector<char> seen(out_rows, 0);
  for (std::size_t r : index) {
    if (r >= out_rows || seen[r]) throw ContractError("scatter_rows: invalid or repeated row index");
    seen[r] = 1;
  }
  const bool rec = recording({&a});
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(out_rows * n, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(a.data().data() + i * n, n, out.data() + idx[i] * n);
  }
  Tensor result({out_rows, n}, std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, idx = std::move(idx), n] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += on->grad[idx[i] * n + j];
      }
    });
  }
  return result;
}

Tensor tile_rows(const Tensor& a, std::size_t times) {
  const std::size_t block = a.size();
  const std::size_t r = a.rank() == 2 ? a.rows() : 1;
  const std::size_t n = block / std::max<std::size_t>(r, 1);
  const bool rec = recording({&a});
  std::vector<double> out(block * times);
  for (std::size_t t = 0; t < times; ++t) std::copy(a.data().begin(), a.data().end(), out.begin() + t * block);
  Tensor result({r * times, n}, std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, block, times] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t t = 0; t < times; ++t) {
        for (std::size_t i = 0; i < block; ++i) ga[i] += on->grad[t * block + i];
      }
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (begin > end || end > n) throw ShapeError("slice_cols: column range out of bounds");
  const std::size_t w = end - begin;
  const bool rec = recording({&a});
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * n + begin, w, out.data() + i * w);
  }
  Tensor result({m, w}, std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, m, n, w, begin] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += on->grad[i * w + j];
      }
    });
  }
  return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool rec = false;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    n += p.cols();
    rec = rec || recording({&p});
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(parts[k].data().data() + i * w, w, out.data() + i * n + off);
    }
    off += w;
  }
  Tensor result({m, n}, std::move(out), rec);
  if (rec) {
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    NodePtr on = result.node();
    g_tape->record([nodes = std::move(nodes), on, widths = std::move(widths), m, n] {
      if (on->grad.empty()) return;
      std::size_t off = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const std::size_t w = widths[k];
        if (double* g = grad_of(nodes[k])) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += on->grad[i * n + off + j];
          }
        }
        off += w;
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor t = unary(a, [](double x) { return x; }, [](double, double) { return 1.0; });
  t.node()->shape = std::move(shape);
  return t;
}

// ---------------------------------------------------------------- fused ops

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const bool rec = recording({&a});
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double* y = out.data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), on = result.node();
    g_tape->record([an, on, m, n] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      if (!ga) return;
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = on->data.data() + i * n;
        const double* g = on->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(a, "layer_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (n < 2) throw ShapeError("layer_norm: need at least two features");
  if (gamma.size() != n || beta.size() != n) throw ShapeError("layer_norm: affine size mismatch");
  const bool rec = recording({&a, &gamma, &beta});
  std::vector<double> xhat(m * n), rstd(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[j] - mu) * rstd[i];
      out[i * n + j] = gamma.at(j) * xhat[i * n + j] + beta.at(j);
    }
  }
  Tensor result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
    g_tape->record([an, gn, bn, on, xhat = std::move(xhat), rstd = std::move(rstd), m, n] {
      if (on->grad.empty()) return;
      const double* g = on->grad.data();
      if (double* gg = grad_of(gn)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
      }
      if (double* gb = grad_of(bn)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      }
      if (double* ga = grad_of(an)) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gn->data[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gn->data[j];
            ga[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.rows(), k = logits.cols();
  if (labels.size() != m) throw ShapeError("cross_entropy: one label per row required");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                          std::to_string(k) + ")");
    }
  }
  const bool rec = recording({&logits});
  std::vector<double> probs(m * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = logits.data().data() + i * k;
    const double mx = *std::max_element(x, x + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    loss += lse - x[labels[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(x[j] - lse);
  }
  loss /= static_cast<double>(m);
  Tensor result({}, {loss}, rec);
  if (rec) {
    NodePtr ln = logits.node(), on = result.node();
    std::vector<int> ys(labels.begin(), labels.end());
    g_tape->record([ln, on, probs = std::move(probs), ys = std::move(ys), m, k] {
      if (on->grad.empty()) return;
      double* gl = grad_of(ln);
      if (!gl) return;
      const double s = on->grad[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          gl[i * k + j] += s * (probs[i * k + j] - (static_cast<int>(j) == ys[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return result;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const Segments& segs, std::vector<std::vector<double>>* probs_out) {
  require_rank2(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t rows = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (segs.total() != rows) throw ShapeError("attention: segments do not cover the rows");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool rec = recording({&q, &k, &v});

  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  std::vector<double> out(rows * d, 0.0);
  auto probs = std::make_shared<std::vector<std::vector<double>>>();
  probs->reserve(segs.count() * heads);
  for (std::size_t s = 0; s < segs.count(); ++s) {
    const std::size_t b = segs.begin(s), n = segs.length(s);
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> p(n * n);
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = Q + (b + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = K + (b + j) * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          p[i * n + j] = acc * sc;
          mx = std::max(mx, p[i * n + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          p[i * n + j] = std::exp(p[i * n + j] - mx);
          z += p[i * n + j];
        }
        double* oi = out.data() + (b + i) * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          p[i * n + j] /= z;
          const double* vj = V + (b + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * n + j] * vj[c];
        }
      }
      probs->push_back(std::move(p));
    }
  }
  if (probs_out) *probs_out = *probs;
  Tensor result({rows, d}, std::move(out), rec);
  if (rec) {
    NodePtr qn = q.node(), kn = k.node(), vn = v.node(), on = result.node();
    g_tape->record([qn, kn, vn, on, probs, segs, heads, d, dh, sc] {
      if (on->grad.empty()) return;
      const double* G = on->grad.data();
      const double* Q = qn->data.data();
      const double* K = kn->data.data();
      const double* V = vn->data.data();
      double* gQ = grad_of(qn);
      double* gK = grad_of(kn);
      double* gV = grad_of(vn);
      std::size_t slot = 0;
      for (std::size_t s = 0; s < segs.count(); ++s) {
        const std::size_t b = segs.begin(s), n = segs.length(s);
        for (std::size_t h = 0; h < heads; ++h, ++slot) {
          const std::vector<double>& p = (*probs)[slot];
          std::vector<double> ds(n * n);
          for (std::size_t i = 0; i < n; ++i) {
            const double* gi = G + (b + i) * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double* vj = V + (b + j) * d + h * dh;
              double dp = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dp += gi[c] * vj[c];
              ds[i * n + j] = dp;
              dot += dp * p[i * n + j];
              if (gV) {
                double* gvj = gV + (b + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[i * n + j] * gi[c];
              }
            }
            for (std::size_t j = 0; j < n; ++j) ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - dot) * sc;
          }
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double w = ds[i * n + j];
              if (w == 0.0) continue;
              if (gQ) {
                const double* kj = K + (b + j) * d + h * dh;
                double* gqi = gQ + (b + i) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += w * kj[c];
              }
              if (gK) {
                const double* qi = Q + (b + i) * d + h * dh;
                double* gkj = gK + (b + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += w * qi[c];
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor lstm_recurrence(const Tensor& gates_x, const Tensor& w_h, const Segments& segs) {
  require_rank2(gates_x, "lstm_recurrence");
  require_rank2(w_h, "lstm_recurrence");
  const std::size_t rows = gates_x.rows(), hd = w_h.rows(), g4 = 4 * hd;
  if (gates_x.cols() != g4 || w_h.cols() != g4) throw ShapeError("lstm_recurrence: gate width must be 4H");
  if (segs.total() != rows) throw ShapeError("lstm_recurrence: segments do not cover the rows");
  const bool rec = recording({&gates_x, &w_h});

  const double* GX = gates_x.data().data();
  const double* WH = w_h.data().data();
  auto acts = std::make_shared<std::vector<double>>(rows * g4);
  auto cell = std::make_shared<std::vector<double>>(rows * hd);
  std::vector<double> out(rows * hd);
  std::vector<double> g(g4);
  for (std::size_t s = 0; s < segs.count(); ++s) {
    for (std::size_t r = segs.begin(s); r < segs.end(s); ++r) {
      const bool first = r == segs.begin(s);
      std::copy_n(GX + r * g4, g4, g.begin());
      if (!first) {
        const double* hp = out.data() + (r - 1) * hd;
        for (std::size_t i = 0; i < hd; ++i) {
          if (hp[i] == 0.0) continue;
          for (std::size_t j = 0; j < g4; ++j) g[j] += hp[i] * WH[i * g4 + j];
        }
      }
      double* act = acts->data() + r * g4;
      for (std::size_t j = 0; j < hd; ++j) {
        act[j] = sigmoid_value(g[j]);
        act[hd + j] = sigmoid_value(g[hd + j]);
        act[2 * hd + j] = std::tanh(g[2 * hd + j]);
        act[3 * hd + j] = sigmoid_value(g[3 * hd + j]);
        const double cp = first ? 0.0 : (*cell)[(r - 1) * hd + j];
        const double c = act[hd + j] * cp + act[j] * act[2 * hd + j];
        (*cell)[r * hd + j] = c;
        out[r * hd + j] = act[3 * hd + j] * std::tanh(c);
      }
    }
  }
  Tensor result({rows, hd}, std::move(out), rec);
  if (rec) {
    NodePtr gn = gates_x.node(), wn = w_h.node(), on = result.node();
    g_tape->record([gn, wn, on, acts, cell, segs, hd, g4] {
      if (on->grad.empty()) return;
      double* gGX = grad_of(gn);
      double* gWH = grad_of(wn);
      const double* WH = wn->data.data();
      const double* H = on->data.data();
      std::vector<double> dh_next(hd), dc_next(hd), dg(g4);
      for (std::size_t s = 0; s < segs.count(); ++s) {
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        std::fill(dc_next.begin(), dc_next.end(), 0.0);
        for (std::size_t r = segs.end(s); r-- > segs.begin(s);) {
          const bool first = r == segs.begin(s);
          const double* act = acts->data() + r * g4;
          for (std::size_t j = 0; j < hd; ++j) {
            const double i_g = act[j], f_g = act[hd + j], c_g = act[2 * hd + j], o_g = act[3 * hd + j];
            const double c = (*cell)[r * hd + j];
            const double tc = std::tanh(c);
            const double cp = first ? 0.0 : (*cell)[(r - 1) * hd + j];
            const double dh = on->grad[r * hd + j] + dh_next[j];
            const double d_o = dh * tc;
            const double dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
            dg[j] = dc * c_g * i_g * (1.0 - i_g);
            dg[hd + j] = dc * cp * f_g * (1.0 - f_g);
            dg[2 * hd + j] = dc * i_g * (1.0 - c_g * c_g);
            dg[3 * hd + j] = d_o * o_g * (1.0 - o_g);
            dc_next[j] = dc * f_g;
          }
          if (gGX) {
            for (std::size_t j = 0; j < g4; ++j) gGX[r * g4 + j] += dg[j];
          }
          std::fill(dh_next.begin(), dh_next.end(), 0.0);
          if (!first) {
            const double* hp = H + (r - 1) * hd;
            for (std::size_t i = 0; i < hd; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < g4; ++j) {
                acc += WH[i * g4 + j] * dg[j];
                if (gWH) gWH[i * g4 + j] += hp[i] * dg[j];
              }
              dh_next[i] = acc;
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor ssm_recurrence(const Tensor& x, const Tensor& dt, const Tensor& b, const Tensor& c,
                      const Tensor& a, const Segments& segs) {
  require_rank2(x, "ssm_recurrence");
  require_rank2(b, "ssm_recurrence");
  require_rank2(c, "ssm_recurrence");
  const std::size_t rows = x.rows(), p = x.cols(), st = a.size();
  if (dt.size() != rows) throw ShapeError("ssm_recurrence: one step size per row required");
  if (b.rows() != rows || c.rows() != rows || b.cols() != st || c.cols() != st) {
    throw ShapeError("ssm_recurrence: B and C must be [rows x state]");
  }
  if (segs.total() != rows) throw ShapeError("ssm_recurrence: segments do not cover the rows");
  const bool rec = recording({&x, &dt, &b, &c, &a});

  const double* X = x.data().data();
  const double* DT = dt.data().data();
  const double* Bm = b.data().data();
  const double* Cm = c.data().data();
  const double* A = a.data().data();
  const std::size_t sp = st * p;
  auto states = std::make_shared<std::vector<double>>(rows * sp);
  auto decay = std::make_shared<std::vector<double>>(rows * st);
  std::vector<double> out(rows * p, 0.0);
  for (std::size_t s = 0; s < segs.count(); ++s) {
    for (std::size_t r = segs.begin(s); r < segs.end(s); ++r) {
      const bool first = r == segs.begin(s);
      double* cur = states->data() + r * sp;
      const double* prev = first ? nullptr : states->data() + (r - 1) * sp;
      for (std::size_t k = 0; k < st; ++k) {
        const double dk = std::exp(DT[r] * A[k]);
        (*decay)[r * st + k] = dk;
        const double w = DT[r] * Bm[r * st + k];
        for (std::size_t j = 0; j < p; ++j) {
          cur[k * p + j] = (prev ? dk * prev[k * p + j] : 0.0) + w * X[r * p + j];
        }
        const double ck = Cm[r * st + k];
        for (std::size_t j = 0; j < p; ++j) out[r * p + j] += ck * cur[k * p + j];
      }
    }
  }
  Tensor result({rows, p}, std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node(), dn = dt.node(), bn = b.node(), cn = c.node(), an = a.node(), on = result.node();
    g_tape->record([xn, dn, bn, cn, an, on, states, decay, segs, st, p, sp] {
      if (on->grad.empty()) return;
      const double* X = xn->data.data();
      const double* DT = dn->data.data();
      const double* Bm = bn->data.data();
      const double* Cm = cn->data.data();
      const double* A = an->data.data();
      const double* G = on->grad.data();
      double* gX = grad_of(xn);
      double* gDT = grad_of(dn);
      double* gB = grad_of(bn);
      double* gC = grad_of(cn);
      double* gA = grad_of(an);
      std::vector<double> carry(sp), ds(sp);
      for (std::size_t s = 0; s < segs.count(); ++s) {
        std::fill(carry.begin(), carry.end(), 0.0);
        for (std::size_t r = segs.end(s); r-- > segs.begin(s);) {
          const bool first = r == segs.begin(s);
          const double* cur = states->data() + r * sp;
          const double* prev = first ? nullptr : states->data() + (r - 1) * sp;
          const double* gy = G + r * p;
          double gdt = 0.0;
          for (std::size_t k = 0; k < st; ++k) {
            const double ck = Cm[r * st + k];
            double gck = 0.0, gdecay = 0.0, gbk = 0.0;
            for (std::size_t j = 0; j < p; ++j) {
              const double d = carry[k * p + j] + ck * gy[j];
              ds[k * p + j] = d;
              gck += cur[k * p + j] * gy[j];
              if (prev) gdecay += d * prev[k * p + j];
              gbk += d * X[r * p + j];
            }
            const double dk = (*decay)[r * st + k];
            if (gC) gC[r * st + k] += gck;
            if (gA) gA[k] += gdecay * dk * DT[r];
            gdt += gdecay * dk * A[k] + gbk * Bm[r * st + k];
            if (gB) gB[r * st + k] += DT[r] * gbk;
            for (std::size_t j = 0; j < p; ++j) carry[k * p + j] = dk * ds[k * p + j];
          }
          if (gDT) gDT[r] += gdt;
          if (gX) {
            for (std::size_t j = 0; j < p; ++j) {
              double acc = 0.0;
              for (std::size_t k = 0; k < st; ++k) acc += ds[k * p + j] * Bm[r * st + k];
              gX[r * p + j] += DT[r] * acc;
            }
          }
        }
      }
    });
  }
  return result;
}

}  // namespace seqswap
