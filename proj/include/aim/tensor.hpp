#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aim/common.hpp"

namespace aim {

// Reverse-mode autodiff over a dynamically recorded graph. Each op that sees
// a grad-requiring input stores its parents and an adjoint callback; backward()
// replays the callbacks in reverse topological order, visiting each recorded
// op exactly once.

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() : n_(std::make_shared<TensorNode<T>>()) {}

  Tensor(Shape shape, std::vector<T> value, bool requires_grad = false)
      : n_(std::make_shared<TensorNode<T>>()) {
    if (numel(shape) != value.size())
      throw shape_error("tensor data length " + std::to_string(value.size()) +
                        " does not match shape " + shape_str(shape));
    n_->shape = std::move(shape);
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(numel(shape), fill);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::size_t rank() const { return n_->shape.size(); }

  std::span<const T> value() const { return n_->value; }
  // In-place update path for leaves (optimizer, loaders). Must not be used on
  // tensors that sit inside a live graph.
  std::span<T> mutable_value() { return n_->value; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const T> grad() const { return n_->grad; }
  std::span<T> mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  T item() const {
    if (size() != 1) throw contract_error("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    Shape st = strides_of(n_->shape);
    std::size_t off = 0, d = 0;
    for (std::size_t i : idx) off += i * st[d++];
    return n_->value[off];
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}
  std::shared_ptr<TensorNode<T>> n_;

  template <class U>
  friend Tensor<U> from_node(std::shared_ptr<TensorNode<U>> n);
};

template <class T>
Tensor<T> from_node(std::shared_ptr<TensorNode<T>> n) {
  return Tensor<T>(std::move(n));
}

namespace detail {

template <class T>
std::shared_ptr<TensorNode<T>> make_node(Shape shape, std::vector<T> value) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

template <class T, class... Parents>
bool any_grad(const Parents&... p) {
  return (... || p.node()->requires_grad);
}

template <class T>
void attach(std::shared_ptr<TensorNode<T>>& n,
            std::vector<std::shared_ptr<TensorNode<T>>> parents,
            std::function<void(TensorNode<T>&)> backprop) {
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backprop = std::move(backprop);
}

}  // namespace detail

// Backpropagate from a scalar loss through every recorded op.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw contract_error("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad) return;

  // iterative DFS post-order -> topological order
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (std::size_t i = order.size(); i-- > 0;) {
    TensorNode<T>* n = order[i];
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto n = detail::make_node(a.shape(), std::move(out));
  if (detail::any_grad<T>(a, b)) {
    detail::attach<T>(n, {a.node(), b.node()}, [](TensorNode<T>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    });
  }
  return from_node(std::move(n));
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto n = detail::make_node(a.shape(), std::move(out));
  if (detail::any_grad<T>(a, b)) {
    detail::attach<T>(n, {a.node(), b.node()}, [](TensorNode<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
      }
    });
  }
  return from_node(std::move(n));
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto n = detail::make_node(a.shape(), std::move(out));
  if (detail::any_grad<T>(a, b)) {
    detail::attach<T>(n, {a.node(), b.node()}, [](TensorNode<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
      }
    });
  }
  return from_node(std::move(n));
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto n = detail::make_node(a.shape(), std::move(out));
  if (a.requires_grad()) {
    detail::attach<T>(n, {a.node()}, [c](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * c;
    });
  }
  return from_node(std::move(n));
}

// c[i,j] = sum_k a[i,k] * b[k,j]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], nc = b.shape()[1];
  std::vector<T> out(m * nc, T(0));
  auto av = a.value(), bv = b.value();
  parallel_for(m, [&](std::size_t i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      T aik = av[i * k + kk];
      const T* brow = &bv[kk * nc];
      T* crow = &out[i * nc];
      for (std::size_t j = 0; j < nc; ++j) crow[j] += aik * brow[j];
    }
  }, std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, k * nc)));
  auto n = detail::make_node({m, nc}, std::move(out));
  if (detail::any_grad<T>(a, b)) {
    detail::attach<T>(n, {a.node(), b.node()}, [m, k, nc](TensorNode<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nc; ++j) {
            T g = self.grad[i * nc + j];
            for (std::size_t kk = 0; kk < k; ++kk) pa->grad[i * k + kk] += g * pb->value[kk * nc + j];
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            T aik = pa->value[i * k + kk];
            for (std::size_t j = 0; j < nc; ++j) pb->grad[kk * nc + j] += aik * self.grad[i * nc + j];
          }
      }
    });
  }
  return from_node(std::move(n));
}

// Batched matmul: a[B,m,k] x b[B,k,n] -> [B,m,n]
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1])
    throw shape_error("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2], nc = b.shape()[2];
  std::vector<T> out(B * m * nc, T(0));
  auto av = a.value(), bv = b.value();
  parallel_for(B * m, [&](std::size_t bi) {
    std::size_t batch = bi / m, i = bi % m;
    const T* arow = &av[batch * m * k + i * k];
    const T* bmat = &bv[batch * k * nc];
    T* crow = &out[batch * m * nc + i * nc];
    for (std::size_t kk = 0; kk < k; ++kk) {
      T aik = arow[kk];
      const T* brow = &bmat[kk * nc];
      for (std::size_t j = 0; j < nc; ++j) crow[j] += aik * brow[j];
    }
  }, std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, k * nc)));
  auto n = detail::make_node({B, m, nc}, std::move(out));
  if (detail::any_grad<T>(a, b)) {
    detail::attach<T>(n, {a.node(), b.node()}, [B, m, k, nc](TensorNode<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t batch = 0; batch < B; ++batch) {
        const T* gmat = &self.grad[batch * m * nc];
        const T* amat = &pa->value[batch * m * k];
        const T* bmat = &pb->value[batch * k * nc];
        if (pa->requires_grad) {
          T* ga = &pa->grad[batch * m * k];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nc; ++j) {
              T g = gmat[i * nc + j];
              for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * bmat[kk * nc + j];
            }
        }
        if (pb->requires_grad) {
          T* gb = &pb->grad[batch * k * nc];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              T aik = amat[i * k + kk];
              for (std::size_t j = 0; j < nc; ++j) gb[kk * nc + j] += aik * gmat[i * nc + j];
            }
        }
      }
    });
  }
  return from_node(std::move(n));
}

// y[..., out] = x[..., in] @ w[in, out] + b[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.shape().back() != w.shape()[0])
    throw shape_error("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t in = w.shape()[0], out_dim = w.shape()[1];
  if (b.size() != out_dim)
    throw shape_error("linear: bias " + shape_str(b.shape()) + " vs out dim " + std::to_string(out_dim));
  const std::size_t rows = x.size() / in;
  std::vector<T> out(rows * out_dim);
  auto xv = x.value(), wv = w.value(), bv = b.value();
  parallel_for(rows, [&](std::size_t i) {
    T* yrow = &out[i * out_dim];
    for (std::size_t j = 0; j < out_dim; ++j) yrow[j] = bv[j];
    const T* xrow = &xv[i * in];
    for (std::size_t kk = 0; kk < in; ++kk) {
      T xk = xrow[kk];
      const T* wrow = &wv[kk * out_dim];
      for (std::size_t j = 0; j < out_dim; ++j) yrow[j] += xk * wrow[j];
    }
  }, std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, in * out_dim)));
  Shape oshape = x.shape();
  oshape.back() = out_dim;
  auto n = detail::make_node(std::move(oshape), std::move(out));
  if (detail::any_grad<T>(x, w, b)) {
    detail::attach<T>(n, {x.node(), w.node(), b.node()}, [rows, in, out_dim](TensorNode<T>& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto& pb = self.parents[2];
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          const T* grow = &self.grad[i * out_dim];
          T* gx = &px->grad[i * in];
          for (std::size_t kk = 0; kk < in; ++kk) {
            const T* wrow = &pw->value[kk * out_dim];
            T acc = T(0);
            for (std::size_t j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
            gx[kk] += acc;
          }
        }
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          const T* grow = &self.grad[i * out_dim];
          const T* xrow = &px->value[i * in];
          for (std::size_t kk = 0; kk < in; ++kk) {
            T xk = xrow[kk];
            T* gw = &pw->grad[kk * out_dim];
            for (std::size_t j = 0; j < out_dim; ++j) gw[j] += xk * grow[j];
          }
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          const T* grow = &self.grad[i * out_dim];
          for (std::size_t j = 0; j < out_dim; ++j) pb->grad[j] += grow[j];
        }
      }
    });
  }
  return from_node(std::move(n));
}

// x[S, ...tail] + p[...tail], p broadcast over the leading axis
template <class T>
Tensor<T> add_broadcast_rows(const Tensor<T>& x, const Tensor<T>& p) {
  if (p.rank() + 1 != x.rank() ||
      !std::equal(p.shape().begin(), p.shape().end(), x.shape().begin() + 1))
    throw shape_error("add_broadcast_rows: " + shape_str(x.shape()) + " vs " + shape_str(p.shape()));
  const std::size_t S = x.shape()[0], tail = p.size();
  std::vector<T> out(x.size());
  auto xv = x.value(), pv = p.value();
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t i = 0; i < tail; ++i) out[s * tail + i] = xv[s * tail + i] + pv[i];
  auto n = detail::make_node(x.shape(), std::move(out));
  if (detail::any_grad<T>(x, p)) {
    detail::attach<T>(n, {x.node(), p.node()}, [S, tail](TensorNode<T>& self) {
      auto& px = self.parents[0];
      auto& pp = self.parents[1];
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
      }
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t i = 0; i < tail; ++i) pp->grad[i] += self.grad[s * tail + i];
      }
    });
  }
  return from_node(std::move(n));
}

// x[A, M, D] + p[A, D], p[a,:] added to every x[a, m, :]
template <class T>
Tensor<T> add_broadcast_mid(const Tensor<T>& x, const Tensor<T>& p) {
  if (x.rank() != 3 || p.rank() != 2 || x.shape()[0] != p.shape()[0] || x.shape()[2] != p.shape()[1])
    throw shape_error("add_broadcast_mid: " + shape_str(x.shape()) + " vs " + shape_str(p.shape()));
  const std::size_t A = x.shape()[0], M = x.shape()[1], D = x.shape()[2];
  std::vector<T> out(x.size());
  auto xv = x.value(), pv = p.value();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t d = 0; d < D; ++d)
        out[(a * M + m) * D + d] = xv[(a * M + m) * D + d] + pv[a * D + d];
  auto n = detail::make_node(x.shape(), std::move(out));
  if (detail::any_grad<T>(x, p)) {
    detail::attach<T>(n, {x.node(), p.node()}, [A, M, D](TensorNode<T>& self) {
      auto& px = self.parents[0];
      auto& pp = self.parents[1];
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
      }
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (std::size_t a = 0; a < A; ++a)
          for (std::size_t m = 0; m < M; ++m)
            for (std::size_t d = 0; d < D; ++d) pp->grad[a * D + d] += self.grad[(a * M + m) * D + d];
      }
    });
  }
  return from_node(std::move(n));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw shape_error("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.value().begin(), x.value().end());
  auto n = detail::make_node(std::move(shape), std::move(out));
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
  }
  return from_node(std::move(n));
}

// Materializing permute; out index (i_perm[0], ..., i_perm[r-1]) = in index i.
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw shape_error("permute: rank mismatch");
  Shape oshape(r);
  for (std::size_t i = 0; i < r; ++i) oshape[i] = x.shape()[perm[i]];
  Shape istr = strides_of(x.shape()), ostr = strides_of(oshape);
  std::vector<T> out(x.size());
  auto xv = x.value();
  // walk output positions; gather from input
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < r; ++d) src += idx[d] * istr[perm[d]];
    out[o] = xv[src];
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < oshape[d]) break;
      idx[d] = 0;
    }
  }
  auto n = detail::make_node(std::move(oshape), std::move(out));
  if (x.requires_grad()) {
    std::vector<std::size_t> p = perm;
    detail::attach<T>(n, {x.node()}, [p, istr](TensorNode<T>& self) {
      auto& par = self.parents[0];
      par->ensure_grad();
      const std::size_t r2 = self.shape.size();
      std::vector<std::size_t> idx2(r2, 0);
      for (std::size_t o = 0; o < self.grad.size(); ++o) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < r2; ++d) src += idx2[d] * istr[p[d]];
        par->grad[src] += self.grad[o];
        for (std::size_t d = r2; d-- > 0;) {
          if (++idx2[d] < self.shape[d]) break;
          idx2[d] = 0;
        }
      }
    });
  }
  return from_node(std::move(n));
}

// Slice [start, start+len) along the last axis.
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
  const std::size_t D = x.shape().back();
  if (start + len > D) throw shape_error("slice_last: out of range");
  const std::size_t rows = x.size() / D;
  std::vector<T> out(rows * len);
  auto xv = x.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = xv[i * D + start + j];
  Shape oshape = x.shape();
  oshape.back() = len;
  auto n = detail::make_node(std::move(oshape), std::move(out));
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [rows, D, start, len](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < len; ++j) p->grad[i * D + start + j] += self.grad[i * len + j];
    });
  }
  return from_node(std::move(n));
}

// x[S, L, D] -> x[:, index, :] as [S, D]
template <class T>
Tensor<T> take_token(const Tensor<T>& x, std::size_t index) {
  if (x.rank() != 3 || index >= x.shape()[1])
    throw shape_error("take_token: bad index for " + shape_str(x.shape()));
  const std::size_t S = x.shape()[0], L = x.shape()[1], D = x.shape()[2];
  std::vector<T> out(S * D);
  auto xv = x.value();
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t d = 0; d < D; ++d) out[s * D + d] = xv[(s * L + index) * D + d];
  auto n = detail::make_node({S, D}, std::move(out));
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [S, L, D, index](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t d = 0; d < D; ++d) p->grad[(s * L + index) * D + d] += self.grad[s * D + d];
    });
  }
  return from_node(std::move(n));
}

// concat(tok broadcast to [S,1,D], xp[S,N,D]) -> [S,N+1,D]; tok is [1,D]
template <class T>
Tensor<T> prepend_token(const Tensor<T>& xp, const Tensor<T>& tok) {
  if (xp.rank() != 3 || tok.rank() != 2 || tok.shape()[0] != 1 || tok.shape()[1] != xp.shape()[2])
    throw shape_error("prepend_token: " + shape_str(xp.shape()) + " vs " + shape_str(tok.shape()));
  const std::size_t S = xp.shape()[0], N = xp.shape()[1], D = xp.shape()[2];
  std::vector<T> out(S * (N + 1) * D);
  auto xv = xp.value(), tv = tok.value();
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t d = 0; d < D; ++d) out[s * (N + 1) * D + d] = tv[d];
    for (std::size_t i = 0; i < N * D; ++i) out[s * (N + 1) * D + D + i] = xv[s * N * D + i];
  }
  auto n = detail::make_node({S, N + 1, D}, std::move(out));
  if (detail::any_grad<T>(xp, tok)) {
    detail::attach<T>(n, {xp.node(), tok.node()}, [S, N, D](TensorNode<T>& self) {
      auto& px = self.parents[0];
      auto& pt = self.parents[1];
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t i = 0; i < N * D; ++i)
            px->grad[s * N * D + i] += self.grad[s * (N + 1) * D + D + i];
      }
      if (pt->requires_grad) {
        pt->ensure_grad();
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t d = 0; d < D; ++d) pt->grad[d] += self.grad[s * (N + 1) * D + d];
      }
    });
  }
  return from_node(std::move(n));
}

// Mean over axis 1 of x[B, Tmid, D] -> [B, D]
template <class T>
Tensor<T> mean_axis1(const Tensor<T>& x) {
  if (x.rank() != 3) throw shape_error("mean_axis1 expects rank 3, got " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0], M = x.shape()[1], D = x.shape()[2];
  std::vector<T> out(B * D, T(0));
  auto xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t d = 0; d < D; ++d) out[b * D + d] += xv[(b * M + m) * D + d];
  const T inv = T(1) / T(M);
  for (auto& v : out) v *= inv;
  auto n = detail::make_node({B, D}, std::move(out));
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [B, M, D, inv](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t d = 0; d < D; ++d)
            p->grad[(b * M + m) * D + d] += self.grad[b * D + d] * inv;
    });
  }
  return from_node(std::move(n));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.value()) acc += v;
  auto n = detail::make_node<T>({1}, {acc});
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (auto& g : p->grad) g += self.grad[0];
    });
  }
  return from_node(std::move(n));
}

// Softmax along the last axis, max-subtracted.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t D = x.shape().back();
  if (D < 1) throw shape_error("softmax: empty last axis");
  const std::size_t rows = x.size() / D;
  std::vector<T> out(x.size());
  auto xv = x.value();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = &xv[i * D];
    T mx = row[0];
    for (std::size_t j = 0; j < D; ++j) {
      if (std::isnan(double(row[j]))) throw numeric_error("softmax: NaN input");
      mx = std::max(mx, row[j]);
    }
    T sum = T(0);
    for (std::size_t j = 0; j < D; ++j) {
      T e = std::exp(row[j] - mx);
      out[i * D + j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (std::size_t j = 0; j < D; ++j) out[i * D + j] *= inv;
  }
  auto n = detail::make_node(x.shape(), std::move(out));
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [rows, D](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i) {
        const T* y = &self.value[i * D];
        const T* gy = &self.grad[i * D];
        T dot = T(0);
        for (std::size_t j = 0; j < D; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < D; ++j) p->grad[i * D + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return from_node(std::move(n));
}

// LayerNorm over the last axis: gamma * (x - mean) / sqrt(var + eps) + beta
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t D = x.shape().back();
  if (gamma.size() != D || beta.size() != D)
    throw shape_error("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                      shape_str(beta.shape()) + " vs feature dim " + std::to_string(D));
  const std::size_t rows = x.size() / D;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  auto xv = x.value(), gv = gamma.value(), bv = beta.value();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = &xv[i * D];
    T mean = T(0);
    for (std::size_t j = 0; j < D; ++j) mean += row[j];
    mean /= T(D);
    T var = T(0);
    for (std::size_t j = 0; j < D; ++j) {
      T c = row[j] - mean;
      var += c * c;
    }
    var /= T(D);
    T rs = T(1) / std::sqrt(var + eps);
    rstd[i] = rs;
    for (std::size_t j = 0; j < D; ++j) {
      T h = (row[j] - mean) * rs;
      xhat[i * D + j] = h;
      out[i * D + j] = gv[j] * h + bv[j];
    }
  }
  auto n = detail::make_node(x.shape(), std::move(out));
  if (detail::any_grad<T>(x, gamma, beta)) {
    detail::attach<T>(n, {x.node(), gamma.node(), beta.node()},
                      [rows, D, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      if (px->requires_grad) px->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i) {
        const T* gy = &self.grad[i * D];
        const T* h = &xhat[i * D];
        if (pg->requires_grad)
          for (std::size_t j = 0; j < D; ++j) pg->grad[j] += gy[j] * h[j];
        if (pb->requires_grad)
          for (std::size_t j = 0; j < D; ++j) pb->grad[j] += gy[j];
        if (px->requires_grad) {
          T sum_g = T(0), sum_gh = T(0);
          for (std::size_t j = 0; j < D; ++j) {
            T gj = gy[j] * pg->value[j];
            sum_g += gj;
            sum_gh += gj * h[j];
          }
          T invD = T(1) / T(D);
          for (std::size_t j = 0; j < D; ++j) {
            T gj = gy[j] * pg->value[j];
            px->grad[i * D + j] += rstd[i] * (gj - invD * sum_g - h[j] * invD * sum_gh);
          }
        }
      }
    });
  }
  return from_node(std::move(n));
}

// Exact erf-based GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.value();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = double(xv[i]);
    out[i] = T(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  auto n = detail::make_node(x.shape(), std::move(out));
  if (x.requires_grad()) {
    detail::attach<T>(n, {x.node()}, [](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      constexpr double inv_sqrt2 = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        double v = double(p->value[i]);
        double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        p->grad[i] += self.grad[i] * T(cdf + v * pdf);
      }
    });
  }
  return from_node(std::move(n));
}

// Mean softmax cross entropy over the batch, with optional label smoothing.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                        T smoothing = T(0)) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size())
    throw shape_error("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  auto lv = logits.value();
  std::vector<T> probs(B * C);
  double loss = 0.0;
  const double off = double(smoothing) / double(C);
  const double on = 1.0 - double(smoothing) + off;
  for (std::size_t i = 0; i < B; ++i) {
    const T* row = &lv[i * C];
    T mx = row[0];
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < C; ++j) sum += std::exp(double(row[j] - mx));
    double lse = std::log(sum) + double(mx);
    for (std::size_t j = 0; j < C; ++j) {
      double logp = double(row[j]) - lse;
      probs[i * C + j] = T(std::exp(logp));
      double target = (int(j) == labels[i]) ? on : off;
      loss -= target * logp;
    }
  }
  loss /= double(B);
  auto n = detail::make_node<T>({1}, {T(loss)});
  if (logits.requires_grad()) {
    std::vector<int> lab = labels;
    detail::attach<T>(n, {logits.node()},
                      [B, C, probs = std::move(probs), lab = std::move(lab), on, off](TensorNode<T>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      T g = self.grad[0] / T(B);
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < C; ++j) {
          double target = (int(j) == lab[i]) ? on : off;
          p->grad[i * C + j] += g * (probs[i * C + j] - T(target));
        }
    });
  }
  return from_node(std::move(n));
}

}  // namespace aim
