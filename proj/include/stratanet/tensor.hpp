#pragma once

// Reverse-mode autodiff over dense row-major tensors. Rank 1 and 2 only;
// the only implicit broadcast is a trailing-dimension expansion (row vector
// added to every row of a matrix). Everything else is a hard shape error.
//
// Graphs are built eagerly: each op captures its parents and a backprop
// closure. backward() runs a topological walk from a scalar loss and
// accumulates into .grad buffers; grads persist until zero_grad, so a second
// backward without reset accumulates (used by the finite-difference checks).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "stratanet/rng.hpp"

namespace stratanet {

inline thread_local bool g_grad_enabled = true;

// Disables graph construction in scope; used for frozen-model forwards.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <typename T>
class Tensor {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized like value iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pushes this->grad into parents
  };

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(numel_of(n->shape), T(0));
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), T(0));
    return Tensor(n);
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), T(0));
    return Tensor(n);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad = true) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  int rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
  int cols() const { return node_->shape.back(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }

  T item() const {
    if (node_->value.size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return node_->value[0];
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Reverse-mode pass from a scalar loss. Grads accumulate across calls.
  void backward() const {
    if (node_->value.size() != 1)
      throw std::invalid_argument("backward(): loss must be scalar");
    if (!std::isfinite(static_cast<double>(node_->value[0])))
      throw std::runtime_error("backward(): loss is not finite");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    topo(node_.get(), seen, order);
    if (node_->grad.empty()) node_->grad.assign(1, T(0));
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

 private:
  static void topo(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
    if (seen.count(n)) return;
    seen.insert(n);
    for (auto& p : n->parents) topo(p.get(), seen, order);
    order.push_back(n);
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<typename Tensor<T>::Node> make_result(
    std::vector<int> shape, std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents) {
  auto n = std::make_shared<typename Tensor<T>::Node>();
  n->shape = std::move(shape);
  n->value.assign(Tensor<T>::numel_of(n->shape), T(0));
  bool rg = false;
  if (g_grad_enabled)
    for (auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->grad.assign(n->value.size(), T(0));
    n->parents = std::move(parents);
  }
  return n;
}

template <typename T>
void ensure_grad(typename Tensor<T>::Node& n) {
  if (n.requires_grad && n.grad.empty()) n.grad.assign(n.value.size(), T(0));
}

inline void check_same_shape(const std::vector<int>& a, const std::vector<int>& b,
                             const char* op) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise ----

// b may equal a's shape, or be a rank-1 [C] row broadcast over a [R,C] matrix,
// or a scalar.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto an = a.node();
  auto bn = b.node();
  bool same = an->shape == bn->shape;
  bool row_bc = !same && an->shape.size() == 2 && bn->shape.size() == 1 &&
                bn->shape[0] == an->shape[1];
  bool scalar_bc = !same && !row_bc && bn->value.size() == 1;
  if (!same && !row_bc && !scalar_bc)
    throw std::invalid_argument("add: incompatible shapes");
  auto out = detail::make_result<T>(an->shape, {an, bn});
  const std::size_t n = an->value.size();
  const std::size_t bw = bn->value.size();
  for (std::size_t i = 0; i < n; ++i)
    out->value[i] = an->value[i] + (same ? bn->value[i] : bn->value[i % bw]);
  if (out->requires_grad) {
    out->backprop = [same, bw](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      if (A.requires_grad) {
        detail::ensure_grad<T>(A);
        for (std::size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += o.grad[i];
      }
      if (B.requires_grad) {
        detail::ensure_grad<T>(B);
        if (same)
          for (std::size_t i = 0; i < o.grad.size(); ++i) B.grad[i] += o.grad[i];
        else
          for (std::size_t i = 0; i < o.grad.size(); ++i) B.grad[i % bw] += o.grad[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  auto out = detail::make_result<T>(a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] - b.data()[i];
  if (out->requires_grad) {
    out->backprop = [](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      if (A.requires_grad) {
        detail::ensure_grad<T>(A);
        for (std::size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += o.grad[i];
      }
      if (B.requires_grad) {
        detail::ensure_grad<T>(B);
        for (std::size_t i = 0; i < o.grad.size(); ++i) B.grad[i] -= o.grad[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto an = a.node();
  auto bn = b.node();
  bool same = an->shape == bn->shape;
  bool scalar_bc = !same && bn->value.size() == 1;
  if (!same && !scalar_bc) throw std::invalid_argument("mul: incompatible shapes");
  auto out = detail::make_result<T>(an->shape, {an, bn});
  const std::size_t n = an->value.size();
  for (std::size_t i = 0; i < n; ++i)
    out->value[i] = an->value[i] * (same ? bn->value[i] : bn->value[0]);
  if (out->requires_grad) {
    out->backprop = [same](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      if (A.requires_grad) {
        detail::ensure_grad<T>(A);
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          A.grad[i] += o.grad[i] * (same ? B.value[i] : B.value[0]);
      }
      if (B.requires_grad) {
        detail::ensure_grad<T>(B);
        if (same)
          for (std::size_t i = 0; i < o.grad.size(); ++i) B.grad[i] += o.grad[i] * A.value[i];
        else
          for (std::size_t i = 0; i < o.grad.size(); ++i) B.grad[0] += o.grad[i] * A.value[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  auto out = detail::make_result<T>(a.shape(), {a.node()});
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] * static_cast<T>(c);
  if (out->requires_grad) {
    out->backprop = [c](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        A.grad[i] += o.grad[i] * static_cast<T>(c);
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto out = detail::make_result<T>(a.shape(), {a.node()});
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    double x = static_cast<double>(a.data()[i]);
    out->value[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (out->requires_grad) {
    out->backprop = [](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      constexpr double inv_sqrt2 = 0.70710678118654752440;
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        double x = static_cast<double>(A.value[i]);
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        A.grad[i] += o.grad[i] * static_cast<T>(cdf + x * pdf);
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
  auto out = detail::make_result<T>(a.shape(), {a.node()});
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    if (!(a.data()[i] > T(0))) throw std::runtime_error("log: nonpositive input");
    out->value[i] = std::log(a.data()[i]);
  }
  if (out->requires_grad) {
    out->backprop = [](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (std::size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += o.grad[i] / A.value[i];
    };
  }
  return Tensor<T>(out);
}

// ---- linear algebra ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw std::invalid_argument("matmul: rank-2 operands required");
  const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) throw std::invalid_argument("matmul: inner dimension mismatch");
  auto out = detail::make_result<T>({m, n}, {a.node(), b.node()});
  const T* A = a.data().data();
  const T* B = b.data().data();
  T* C = out->value.data();
  for (int i = 0; i < m; ++i) {
    T* ci = C + static_cast<std::size_t>(i) * n;
    const T* ai = A + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  if (out->requires_grad) {
    out->backprop = [m, k, n](typename Tensor<T>::Node& o) {
      auto& A_ = *o.parents[0];
      auto& B_ = *o.parents[1];
      if (A_.requires_grad) {
        detail::ensure_grad<T>(A_);
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T g = o.grad[static_cast<std::size_t>(i) * n + j];
            if (g == T(0)) continue;
            const T* bj = B_.value.data();
            T* ai = A_.grad.data() + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) ai[p] += g * bj[static_cast<std::size_t>(p) * n + j];
          }
      }
      if (B_.requires_grad) {
        detail::ensure_grad<T>(B_);
        // dB = A^T * dC
        for (int i = 0; i < m; ++i) {
          const T* ai = A_.value.data() + static_cast<std::size_t>(i) * k;
          const T* gi = o.grad.data() + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const T av = ai[p];
            if (av == T(0)) continue;
            T* bp = B_.grad.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) bp[j] += av * gi[j];
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.shape().size() != 2) throw std::invalid_argument("transpose: rank-2 required");
  const int r = a.shape()[0], c = a.shape()[1];
  auto out = detail::make_result<T>({c, r}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->value[static_cast<std::size_t>(j) * r + i] = a.data()[static_cast<std::size_t>(i) * c + j];
  if (out->requires_grad) {
    out->backprop = [r, c](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          A.grad[static_cast<std::size_t>(i) * c + j] += o.grad[static_cast<std::size_t>(j) * r + i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int n) {
  if (a.shape().size() != 2) throw std::invalid_argument("slice_cols: rank-2 required");
  const int r = a.shape()[0], c = a.shape()[1];
  if (c0 < 0 || n <= 0 || c0 + n > c) throw std::invalid_argument("slice_cols: range out of bounds");
  auto out = detail::make_result<T>({r, n}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<std::size_t>(i) * n + j] =
          a.data()[static_cast<std::size_t>(i) * c + c0 + j];
  if (out->requires_grad) {
    out->backprop = [r, c, c0, n](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < n; ++j)
          A.grad[static_cast<std::size_t>(i) * c + c0 + j] +=
              o.grad[static_cast<std::size_t>(i) * n + j];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int r = parts[0].shape()[0];
  int total = 0;
  std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.shape()[0] != r)
      throw std::invalid_argument("concat_cols: row mismatch");
    total += p.shape()[1];
    parents.push_back(p.node());
  }
  auto out = detail::make_result<T>({r, total}, parents);
  int off = 0;
  for (const auto& p : parts) {
    const int c = p.shape()[1];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        out->value[static_cast<std::size_t>(i) * total + off + j] =
            p.data()[static_cast<std::size_t>(i) * c + j];
    off += c;
  }
  if (out->requires_grad) {
    out->backprop = [r, total](typename Tensor<T>::Node& o) {
      int off2 = 0;
      for (auto& pp : o.parents) {
        auto& P = *pp;
        const int c = P.shape[1];
        if (P.requires_grad) {
          detail::ensure_grad<T>(P);
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              P.grad[static_cast<std::size_t>(i) * c + j] +=
                  o.grad[static_cast<std::size_t>(i) * total + off2 + j];
        }
        off2 += c;
      }
    };
  }
  return Tensor<T>(out);
}

// Stack rank-1 vectors of equal length into a [K, d] matrix.
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
  const int d = static_cast<int>(rows[0].numel());
  std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents;
  for (const auto& v : rows) {
    if (static_cast<int>(v.numel()) != d) throw std::invalid_argument("stack_rows: length mismatch");
    parents.push_back(v.node());
  }
  const int k = static_cast<int>(rows.size());
  auto out = detail::make_result<T>({k, d}, parents);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j)
      out->value[static_cast<std::size_t>(i) * d + j] = rows[static_cast<std::size_t>(i)].data()[j];
  if (out->requires_grad) {
    out->backprop = [k, d](typename Tensor<T>::Node& o) {
      for (int i = 0; i < k; ++i) {
        auto& P = *o.parents[static_cast<std::size_t>(i)];
        if (!P.requires_grad) continue;
        detail::ensure_grad<T>(P);
        for (int j = 0; j < d; ++j) P.grad[j] += o.grad[static_cast<std::size_t>(i) * d + j];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> row(const Tensor<T>& a, int i) {
  if (a.shape().size() != 2) throw std::invalid_argument("row: rank-2 required");
  const int r = a.shape()[0], c = a.shape()[1];
  if (i < 0 || i >= r) throw std::invalid_argument("row: index out of range");
  auto out = detail::make_result<T>({c}, {a.node()});
  for (int j = 0; j < c; ++j) out->value[j] = a.data()[static_cast<std::size_t>(i) * c + j];
  if (out->requires_grad) {
    out->backprop = [i, c](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (int j = 0; j < c; ++j) A.grad[static_cast<std::size_t>(i) * c + j] += o.grad[j];
    };
  }
  return Tensor<T>(out);
}

// ---- reductions ----

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  if (a.shape().size() != 2) throw std::invalid_argument("mean_rows: rank-2 required");
  const int r = a.shape()[0], c = a.shape()[1];
  auto out = detail::make_result<T>({c}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out->value[j] += a.data()[static_cast<std::size_t>(i) * c + j];
  for (int j = 0; j < c; ++j) out->value[j] /= static_cast<T>(r);
  if (out->requires_grad) {
    out->backprop = [r, c](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          A.grad[static_cast<std::size_t>(i) * c + j] += o.grad[j] / static_cast<T>(r);
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  auto out = detail::make_result<T>({1}, {a.node()});
  T s = T(0);
  for (T v : a.data()) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->backprop = [](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (auto& g : A.grad) g += o.grad[0];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Sum of squared entries; the workhorse for L2 objectives.
template <typename T>
Tensor<T> squared_norm(const Tensor<T>& a) {
  auto out = detail::make_result<T>({1}, {a.node()});
  T s = T(0);
  for (T v : a.data()) s += v * v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->backprop = [](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (std::size_t i = 0; i < A.grad.size(); ++i)
        A.grad[i] += o.grad[0] * T(2) * A.value[i];
    };
  }
  return Tensor<T>(out);
}

// ---- normalization / activations over rows ----

// Row-wise softmax of logits / temperature. With causal=true on a square
// matrix, entries j > i are masked out (zero probability).
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, double temperature = 1.0, bool causal = false) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  std::vector<int> shape = a.shape();
  if (shape.size() == 1) shape = {1, shape[0]};
  const int r = shape[0], c = shape[1];
  if (causal && r != c) throw std::invalid_argument("softmax: causal mask requires square input");
  for (T v : a.data())
    if (!std::isfinite(static_cast<double>(v))) throw std::runtime_error("softmax: non-finite input");
  auto out = detail::make_result<T>(a.shape(), {a.node()});
  const T inv_tau = static_cast<T>(1.0 / temperature);
  for (int i = 0; i < r; ++i) {
    const T* x = a.data().data() + static_cast<std::size_t>(i) * c;
    T* y = out->value.data() + static_cast<std::size_t>(i) * c;
    const int lim = causal ? i + 1 : c;
    T mx = x[0] * inv_tau;
    for (int j = 1; j < lim; ++j) mx = std::max(mx, x[j] * inv_tau);
    T z = T(0);
    for (int j = 0; j < lim; ++j) {
      y[j] = std::exp(x[j] * inv_tau - mx);
      z += y[j];
    }
    for (int j = 0; j < lim; ++j) y[j] /= z;
    for (int j = lim; j < c; ++j) y[j] = T(0);
  }
  if (out->requires_grad) {
    out->backprop = [r, c, causal, inv_tau](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      detail::ensure_grad<T>(A);
      for (int i = 0; i < r; ++i) {
        const T* y = o.value.data() + static_cast<std::size_t>(i) * c;
        const T* g = o.grad.data() + static_cast<std::size_t>(i) * c;
        T* ga = A.grad.data() + static_cast<std::size_t>(i) * c;
        const int lim = causal ? i + 1 : c;
        T dot = T(0);
        for (int j = 0; j < lim; ++j) dot += g[j] * y[j];
        for (int j = 0; j < lim; ++j) ga[j] += inv_tau * y[j] * (g[j] - dot);
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
  std::vector<int> shape = a.shape();
  if (shape.size() == 1) shape = {1, shape[0]};
  const int r = shape[0], c = shape[1];
  if (static_cast<int>(gain.numel()) != c || static_cast<int>(bias.numel()) != c)
    throw std::invalid_argument("layer_norm: gain/bias size mismatch");
  auto out = detail::make_result<T>(a.shape(), {a.node(), gain.node(), bias.node()});
  std::vector<T> inv_std(r), means(r);
  for (int i = 0; i < r; ++i) {
    const T* x = a.data().data() + static_cast<std::size_t>(i) * c;
    T m = T(0);
    for (int j = 0; j < c; ++j) m += x[j];
    m /= static_cast<T>(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) var += (x[j] - m) * (x[j] - m);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    means[i] = m;
    inv_std[i] = is;
    T* y = out->value.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) y[j] = (x[j] - m) * is * gain.data()[j] + bias.data()[j];
  }
  if (out->requires_grad) {
    out->backprop = [r, c, means, inv_std](typename Tensor<T>::Node& o) {
      auto& A = *o.parents[0];
      auto& G = *o.parents[1];
      auto& B = *o.parents[2];
      for (int i = 0; i < r; ++i) {
        const T* x = A.value.data() + static_cast<std::size_t>(i) * c;
        const T* g = o.grad.data() + static_cast<std::size_t>(i) * c;
        const T m = means[i], is = inv_std[i];
        if (G.requires_grad) {
          detail::ensure_grad<T>(G);
          for (int j = 0; j < c; ++j) G.grad[j] += g[j] * (x[j] - m) * is;
        }
        if (B.requires_grad) {
          detail::ensure_grad<T>(B);
          for (int j = 0; j < c; ++j) B.grad[j] += g[j];
        }
        if (A.requires_grad) {
          detail::ensure_grad<T>(A);
          // dL/dxhat_j = g_j * gain_j ; standard layer-norm backward
          T sum_gh = T(0), sum_ghx = T(0);
          for (int j = 0; j < c; ++j) {
            const T gh = g[j] * G.value[j];
            sum_gh += gh;
            sum_ghx += gh * (x[j] - m) * is;
          }
          T* ga = A.grad.data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            const T gh = g[j] * G.value[j];
            const T xh = (x[j] - m) * is;
            ga[j] += is * (gh - sum_gh / static_cast<T>(c) - xh * sum_ghx / static_cast<T>(c));
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---- lookup ----

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2) throw std::invalid_argument("embedding: table must be rank-2");
  const int v = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw std::invalid_argument("embedding: empty id sequence");
  for (int id : ids)
    if (id < 0 || id >= v) throw std::invalid_argument("embedding: id out of range");
  const int s = static_cast<int>(ids.size());
  auto out = detail::make_result<T>({s, d}, {table.node()});
  for (int i = 0; i < s; ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d, d,
                out->value.data() + static_cast<std::size_t>(i) * d);
  if (out->requires_grad) {
    out->backprop = [ids, d](typename Tensor<T>::Node& o) {
      auto& Tb = *o.parents[0];
      detail::ensure_grad<T>(Tb);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          Tb.grad[static_cast<std::size_t>(ids[i]) * d + j] += o.grad[i * static_cast<std::size_t>(d) + j];
    };
  }
  return Tensor<T>(out);
}

// ---- losses ----

// Row-mean of sum_j p_j log(p_j / q_j). Rows of p and q must be normalized
// within tol; q must be strictly positive where p is.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q, double tol = 1e-6) {
  detail::check_same_shape(p.shape(), q.shape(), "kl_divergence");
  std::vector<int> shape = p.shape();
  if (shape.size() == 1) shape = {1, shape[0]};
  const int r = shape[0], c = shape[1];
  for (int i = 0; i < r; ++i) {
    double sp = 0, sq = 0;
    for (int j = 0; j < c; ++j) {
      sp += static_cast<double>(p.data()[static_cast<std::size_t>(i) * c + j]);
      sq += static_cast<double>(q.data()[static_cast<std::size_t>(i) * c + j]);
    }
    if (std::abs(sp - 1.0) > tol || std::abs(sq - 1.0) > tol)
      throw std::invalid_argument("kl_divergence: row not normalized");
  }
  auto out = detail::make_result<T>({1}, {p.node(), q.node()});
  double acc = 0.0;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      const double pv = static_cast<double>(p.data()[static_cast<std::size_t>(i) * c + j]);
      const double qv = static_cast<double>(q.data()[static_cast<std::size_t>(i) * c + j]);
      if (pv > 0.0) {
        if (!(qv > 0.0)) throw std::runtime_error("kl_divergence: q has zero mass where p > 0");
        acc += pv * std::log(pv / qv);
      }
    }
  out->value[0] = static_cast<T>(acc / r);
  if (out->requires_grad) {
    out->backprop = [r, c](typename Tensor<T>::Node& o) {
      auto& P = *o.parents[0];
      auto& Q = *o.parents[1];
      const T g = o.grad[0] / static_cast<T>(r);
      if (P.requires_grad) {
        detail::ensure_grad<T>(P);
        for (std::size_t i = 0; i < P.value.size(); ++i)
          if (P.value[i] > T(0)) P.grad[i] += g * (std::log(P.value[i] / Q.value[i]) + T(1));
      }
      if (Q.requires_grad) {
        detail::ensure_grad<T>(Q);
        for (std::size_t i = 0; i < Q.value.size(); ++i)
          if (P.value[i] > T(0)) Q.grad[i] -= g * P.value[i] / Q.value[i];
      }
    };
  }
  return Tensor<T>(out);
}

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& targets) {
  std::vector<int> shape = logits.shape();
  if (shape.size() == 1) shape = {1, shape[0]};
  const int r = shape[0], c = shape[1];
  if (static_cast<int>(targets.size()) != r)
    throw std::invalid_argument("cross_entropy_logits: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= c) throw std::invalid_argument("cross_entropy_logits: target out of range");
  auto out = detail::make_result<T>({1}, {logits.node()});
  double acc = 0.0;
  for (int i = 0; i < r; ++i) {
    const T* x = logits.data().data() + static_cast<std::size_t>(i) * c;
    T mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(x[j] - mx));
    acc += std::log(z) + static_cast<double>(mx) - static_cast<double>(x[targets[static_cast<std::size_t>(i)]]);
  }
  out->value[0] = static_cast<T>(acc / r);
  if (out->requires_grad) {
    out->backprop = [r, c, targets](typename Tensor<T>::Node& o) {
      auto& L = *o.parents[0];
      detail::ensure_grad<T>(L);
      const T g = o.grad[0] / static_cast<T>(r);
      for (int i = 0; i < r; ++i) {
        const T* x = L.value.data() + static_cast<std::size_t>(i) * c;
        T* gl = L.grad.data() + static_cast<std::size_t>(i) * c;
        T mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        T z = T(0);
        for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
        for (int j = 0; j < c; ++j) {
          T p = std::exp(x[j] - mx) / z;
          gl[j] += g * (p - (j == targets[static_cast<std::size_t>(i)] ? T(1) : T(0)));
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---- optimizer ----

// Decoupled weight-decay Adam; deterministic given state and inputs.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double lr, double weight_decay = 0.01,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      if (!p.requires_grad()) throw std::invalid_argument("AdamW: parameter without grad");
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

  // Returns the pre-clip global grad norm.
  double clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& p : params_)
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
      const T s = static_cast<T>(max_norm / norm);
      for (auto& p : params_)
        for (auto& g : p.grad()) g *= s;
    }
    return norm;
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& val = params_[k].data();
      auto& grd = params_[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double g = static_cast<double>(grd[i]);
        m[i] = static_cast<T>(b1_ * m[i] + (1.0 - b1_) * g);
        v[i] = static_cast<T>(b2_ * v[i] + (1.0 - b2_) * g * g);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double x = static_cast<double>(val[i]);
        x -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * x);
        val[i] = static_cast<T>(x);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace stratanet
