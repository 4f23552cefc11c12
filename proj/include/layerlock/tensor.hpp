#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every op treats its operands as matrices of shape rows x cols, where cols is
// the last dimension and rows is the product of the leading ones. That is all
// a per-clip ViT needs. Reductions run sequentially in row-major order, so
// results are bitwise reproducible for identical inputs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace layerlock {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime. Ops run
/// under it produce constants and retain no activations.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }

  std::size_t cols() const {
    return node_->shape.empty() ? 1 : node_->shape.back();
  }
  std::size_t rows() const {
    const auto c = cols();
    return c == 0 ? 0 : numel() / c;
  }

  std::span<const double> data() const { return node_->value; }
  /// Mutable access for leaves (parameters, optimizer updates). Never mutate a
  /// tensor that is part of a live graph.
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor");
    return node_->value[0];
  }

  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Deep copy of the value with no graph history.
  Tensor clone() const {
    return Tensor(node_->shape, node_->value, node_->requires_grad);
  }

  /// Same storage viewed with a different shape; gradient flows through.
  Tensor reshape(Shape shape) const;

  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Builds the output node; wires parents and the backward closure only when
// grad mode is on and some input requires grad.
inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward, const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_acc(const double* a, const double* b, double* out,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt_acc(const double* a, const double* b, double* out,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out[i * n + j] += s;
    }
  }
}

// out[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn_acc(const double* a, const double* b, double* out,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("reshape " + shape_str(this->shape()) + " -> " +
                         shape_str(shape));
  }
  return detail::make_result(
      std::move(shape), node_->value, {*this},
      [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          detail::gemm_nt_acc(self.grad.data(), pb.value.data(),
                              pa.grad_buffer().data(), m, n, k);
        }
        if (pb.requires_grad) {
          detail::gemm_tn_acc(pa.value.data(), self.grad.data(),
                              pb.grad_buffer().data(), m, k, n);
        }
      },
      "matmul");
}

/// a * b^T without materialising the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         "^T");
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // dA = G * B ; dB = G^T * A
        if (pa.requires_grad) {
          detail::gemm_acc(self.grad.data(), pb.value.data(),
                           pa.grad_buffer().data(), m, n, k);
        }
        if (pb.requires_grad) {
          detail::gemm_tn_acc(self.grad.data(), pa.value.data(),
                              pb.grad_buffer().data(), m, n, k);
        }
      },
      "matmul_nt");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        for (auto& p : self.parents) {
          if (!p->requires_grad) continue;
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        if (self.parents[0]->requires_grad) {
          auto& g = self.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
          auto& g = self.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = pa.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
      },
      "mul");
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [s](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
      },
      "scale");
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [](detail::Node& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.value[i] * self.grad[i];
      },
      "square");
}

/// Adds a length-cols vector to every row.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const auto r = a.rows(), c = a.cols();
  if (v.numel() != c) {
    throw DimensionError("add_rowvec: vector of length " +
                         std::to_string(v.numel()) + " for " + std::to_string(c) +
                         " columns");
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = a.data()[i * c + j] + v.data()[j];
  return detail::make_result(
      a.shape(), std::move(out), {a, v},
      [r, c](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pv = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = pa.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pv.requires_grad) {
          auto& g = pv.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
      },
      "add_rowvec");
}

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_rowvec(matmul(x, weight), bias);
}

/// Exact-erf GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [](detail::Node& self) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = p.value[i];
          const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                           x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
          g[i] += self.grad[i] * d;
        }
      },
      "gelu");
}

/// Normalises each row to zero mean and unit variance, then applies gain and
/// bias (both of length cols).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-6) {
  const auto r = x.rows(), c = x.cols();
  if (c == 0) throw DimensionError("layer_norm: zero-width rows");
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: affine parameters must have length " +
                         std::to_string(c));
  }
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(r);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = self.grad;
        if (pg.requires_grad) {
          auto& gg = pg.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        if (px.requires_grad) {
          auto& gx = px.grad_buffer();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g[i * c + j] * pg.value[j];
              sum_d += d;
              sum_dx += d * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g[i * c + j] * pg.value[j];
              gx[i * c + j] += inv_std[i] *
                               (d - sum_d * inv_c - xhat[i * c + j] * sum_dx * inv_c);
            }
          }
        }
      },
      "layer_norm");
}

inline Tensor softmax_rows(const Tensor& x) {
  const auto r = x.rows(), c = x.cols();
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      s += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  auto result = detail::make_result(x.shape(), std::move(out), {x}, nullptr,
                                    "softmax_rows");
  if (result.requires_grad()) {
    // Needs the output values; read them through the node itself.
    result.node()->backward = [r, c](detail::Node& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j)
          dot += self.grad[i * c + j] * self.value[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          g[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
      }
    };
  }
  return result;
}

/// Mean cross-entropy of row-wise logits against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const auto r = logits.rows(), c = logits.cols();
  if (labels.size() != r) throw DimensionError("cross_entropy: label count");
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  const auto lv = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = lv.data() + i * c;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DimensionError("cross_entropy: label out of range");
    }
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<double>(r);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(
      {}, {loss}, {logits},
      [r, c, probs = std::move(probs), lab = std::move(lab)](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double s = self.grad[0] / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += s * (probs[i * c + j] -
                                 (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
      },
      "cross_entropy");
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result(
      {}, {s}, {a},
      [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
      },
      "sum");
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  const auto r = a.rows(), c = a.cols();
  if (start + len > c) throw DimensionError("slice_cols out of range");
  std::vector<double> out(r * len);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a.data()[i * c + start + j];
  return detail::make_result(
      {r, len}, std::move(out), {a},
      [r, c, start, len](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < len; ++j) g[i * c + start + j] += self.grad[i * len + j];
      },
      "slice_cols");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const auto r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.data()[i * w + j];
    off += w;
  }
  return detail::make_result(
      {r, total}, std::move(out), parts,
      [r, total, widths = std::move(widths)](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          const auto w = widths[k];
          if (self.parents[k]->requires_grad) {
            auto& g = self.parents[k]->grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + off + j];
          }
          off += w;
        }
      },
      "concat_cols");
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len) {
  const auto c = a.cols();
  if (start + len > a.rows()) throw DimensionError("slice_rows out of range");
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(start * c),
                          a.data().begin() + static_cast<std::ptrdiff_t>((start + len) * c));
  return detail::make_result(
      {len, c}, std::move(out), {a},
      [start, c](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * c + i] += self.grad[i];
      },
      "slice_rows");
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const auto c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column count mismatch");
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    total += p.rows();
  }
  return detail::make_result(
      {total, c}, std::move(out), parts,
      [offsets = std::move(offsets)](detail::Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          if (!self.parents[k]->requires_grad) continue;
          auto& g = self.parents[k]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
        }
      },
      "concat_rows");
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const auto c = a.cols(), r = a.rows();
  std::vector<double> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw DimensionError("gather_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[index[i] * c + j];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::size_t n = idx.size();
  return detail::make_result(
      {n, c}, std::move(out), {a},
      [c, idx = std::move(idx)](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
      },
      "gather_rows");
}

/// Value identity that blocks gradient flow.
inline Tensor stop_gradient(const Tensor& a) {
  return Tensor(a.shape(), a.values(), false);
}

/// Mean of squared differences over all elements.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
  return mean(square(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Backward pass.

/// Gradients keyed by parameter node. Parameters that did not influence the
/// loss, or that were constant (frozen, stop-gradient), have no entry.
class Gradients {
 public:
  bool contains(const Tensor& p) const { return grads_.count(p.id()) != 0; }
  const std::vector<double>& of(const Tensor& p) const {
    auto it = grads_.find(p.id());
    if (it == grads_.end()) throw ContractError("no gradient for parameter");
    return it->second;
  }
  /// Gradient or an all-zero vector of the parameter's size.
  std::vector<double> or_zero(const Tensor& p) const {
    auto it = grads_.find(p.id());
    if (it == grads_.end()) return std::vector<double>(p.numel(), 0.0);
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }
  void set(const Tensor& p, std::vector<double> g) { grads_[p.id()] = std::move(g); }

 private:
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

inline Gradients backward(const Tensor& loss, std::span<const Tensor> params) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
  Gradients out;
  if (!loss.requires_grad()) return out;

  // Iterative post-order DFS gives a topological order; each node is visited
  // exactly once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.clear();
  loss.node()->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (const auto& p : params) {
    auto* n = p.node().get();
    if (seen.count(n) && n->requires_grad) {
      auto g = n->grad;
      if (g.empty()) g.assign(n->value.size(), 0.0);
      out.set(p, std::move(g));
    }
  }
  for (auto* n : order) {
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  return out;
}

}  // namespace layerlock
