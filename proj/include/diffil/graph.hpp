#pragma once

// Reverse-mode autodiff on Tensor<T>. Nodes form a DAG of shared_ptrs
// (children own parents, never the reverse). Each op's backward emits new
// graph nodes, so gradients are themselves differentiable — the WGAN
// gradient penalty trains critic parameters through the critics' input
// gradients, which needs exactly this.
//
// Convolution ops are the one exception: their backwards produce first-order
// gradient nodes whose own backward throws. Nothing in the losses
// differentiates twice through a convolution.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffil/kernels.hpp"
#include "diffil/tensor.hpp"

namespace diffil::ag {

template <typename T>
class Var;

template <typename T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  // Returns grads aligned with parents; an empty Var means "no gradient".
  std::function<std::vector<Var<T>>(const Var<T>& self, const Var<T>& gout)> backward;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool empty() const { return node_ == nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int64_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

template <typename T>
Var<T> constant(T value) {
  return leaf(scalar<T>(value), false);
}

// Shares the value, drops the history.
template <typename T>
Var<T> detach(const Var<T>& a) {
  return constant(a.value());
}

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<std::vector<Var<T>>(const Var<T>&, const Var<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  return Var<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

}  // namespace detail

// --- elementwise arithmetic ------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] + b.value()[i]; });
  return detail::make_op<T>(std::move(out), {a, b}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{g, g};
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = -a.value()[i]; });
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{neg(g)};
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] - b.value()[i]; });
  return detail::make_op<T>(std::move(out), {a, b}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{g, neg(g)};
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] * b.value()[i]; });
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul(g, b), mul(g, a)};
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] / b.value()[i]; });
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](const Var<T>& self, const Var<T>& g) {
    Var<T> ga = div(g, b);
    Var<T> gb = neg(div(mul(g, self), b));  // -g*a/b^2 = -g*(a/b)/b
    return std::vector<Var<T>>{ga, gb};
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] * s; });
  return detail::make_op<T>(std::move(out), {a}, [s](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{scale(g, s)};
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] + s; });
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{g};
  });
}

// Multiply by a fixed mask/tensor that is treated as a constant.
template <typename T>
Var<T> mul_const(const Var<T>& a, Tensor<T> mask) {
  if (a.shape() != mask.shape) throw shape_error("mul_const: mask shape mismatch");
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] * mask[i]; });
  return detail::make_op<T>(std::move(out), {a}, [mask](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_const(g, mask)};
  });
}

// --- transcendental / nonlinear --------------------------------------------

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = a.value()[i] * a.value()[i]; });
  return detail::make_op<T>(std::move(out), {a}, [a](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul(g, scale(a, T{2}))};
  });
}

template <typename T>
Var<T> sqrt_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = std::sqrt(a.value()[i]); });
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>& self, const Var<T>& g) {
    return std::vector<Var<T>>{div(g, scale(self, T{2}))};
  });
}

template <typename T>
Var<T> exp_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = std::exp(a.value()[i]); });
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>& self, const Var<T>& g) {
    return std::vector<Var<T>>{mul(g, self)};
  });
}

template <typename T>
Var<T> log_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = std::log(a.value()[i]); });
  return detail::make_op<T>(std::move(out), {a}, [a](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{div(g, a)};
  });
}

template <typename T>
Var<T> tanh_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = std::tanh(a.value()[i]); });
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>& self, const Var<T>& g) {
    Var<T> one_minus = add_scalar(neg(square(self)), T{1});
    return std::vector<Var<T>>{mul(g, one_minus)};
  });
}

template <typename T>
Var<T> sigmoid_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) { out[i] = T{1} / (T{1} + std::exp(-a.value()[i])); });
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>& self, const Var<T>& g) {
    Var<T> d = mul(self, add_scalar(neg(self), T{1}));
    return std::vector<Var<T>>{mul(g, d)};
  });
}

template <typename T>
Var<T> relu_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  if (!a.requires_grad()) {
    kernels::parallel_for(out.size(), [&](int64_t i) {
      out[i] = a.value()[i] > T{0} ? a.value()[i] : T{0};
    });
    return constant(std::move(out));
  }
  Tensor<T> mask(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) {
    const bool pos = a.value()[i] > T{0};
    out[i] = pos ? a.value()[i] : T{0};
    mask[i] = pos ? T{1} : T{0};
  });
  return detail::make_op<T>(std::move(out), {a}, [mask](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_const(g, mask)};
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out(a.shape());
  if (!a.requires_grad()) {
    kernels::parallel_for(out.size(), [&](int64_t i) {
      out[i] = a.value()[i] > T{0} ? a.value()[i] : slope * a.value()[i];
    });
    return constant(std::move(out));
  }
  Tensor<T> mask(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) {
    const bool pos = a.value()[i] > T{0};
    out[i] = pos ? a.value()[i] : slope * a.value()[i];
    mask[i] = pos ? T{1} : slope;
  });
  return detail::make_op<T>(std::move(out), {a}, [mask](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_const(g, mask)};
  });
}

// Clamp with zero gradient outside [lo, hi].
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out(a.shape());
  Tensor<T> mask(a.shape());
  kernels::parallel_for(out.size(), [&](int64_t i) {
    const T x = a.value()[i];
    out[i] = x < lo ? lo : (x > hi ? hi : x);
    mask[i] = (x < lo || x > hi) ? T{0} : T{1};
  });
  return detail::make_op<T>(std::move(out), {a}, [mask](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_const(g, mask)};
  });
}

// Elementwise minimum; ties route the gradient to the first argument.
template <typename T>
Var<T> min_elem(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "min_elem");
  Tensor<T> out(a.shape());
  Tensor<T> ma(a.shape()), mb(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    const bool first = a.value()[i] <= b.value()[i];
    out[i] = first ? a.value()[i] : b.value()[i];
    ma[i] = first ? T{1} : T{0};
    mb[i] = first ? T{0} : T{1};
  }
  return detail::make_op<T>(std::move(out), {a, b}, [ma, mb](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_const(g, ma), mul_const(g, mb)};
  });
}

// --- shape ops ---------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  Shape orig = a.shape();
  return detail::make_op<T>(std::move(out), {a}, [orig](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{reshape(g, orig)};
  });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  check_rank(a.value(), 2, "concat_cols lhs");
  check_rank(b.value(), 2, "concat_cols rhs");
  const int64_t B = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
  if (b.shape()[0] != B) throw shape_error("concat_cols: row count mismatch");
  Tensor<T> out({B, na + nb});
  for (int64_t i = 0; i < B; ++i) {
    for (int64_t j = 0; j < na; ++j) out.at(i, j) = a.value().at(i, j);
    for (int64_t j = 0; j < nb; ++j) out.at(i, na + j) = b.value().at(i, j);
  }
  return detail::make_op<T>(std::move(out), {a, b}, [na, nb](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{slice_cols(g, 0, na), slice_cols(g, na, na + nb)};
  });
}

template <typename T>
Var<T> embed_cols(const Var<T>& a, int64_t total, int64_t c0);

template <typename T>
Var<T> slice_cols(const Var<T>& a, int64_t c0, int64_t c1) {
  check_rank(a.value(), 2, "slice_cols");
  const int64_t B = a.shape()[0], N = a.shape()[1];
  if (c0 < 0 || c1 > N || c0 >= c1) throw shape_error("slice_cols: bad column range");
  Tensor<T> out({B, c1 - c0});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = a.value().at(i, j);
  return detail::make_op<T>(std::move(out), {a}, [N, c0](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{embed_cols(g, N, c0)};
  });
}

// Places a into columns [c0, c0+cols(a)) of a zero [B, total] matrix.
template <typename T>
Var<T> embed_cols(const Var<T>& a, int64_t total, int64_t c0) {
  check_rank(a.value(), 2, "embed_cols");
  const int64_t B = a.shape()[0], n = a.shape()[1];
  if (c0 < 0 || c0 + n > total) throw shape_error("embed_cols: range outside target width");
  Tensor<T> out({B, total});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, c0 + j) = a.value().at(i, j);
  return detail::make_op<T>(std::move(out), {a}, [c0, n](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{slice_cols(g, c0, c0 + n)};
  });
}

// Selects rows of a [B, N] matrix by index; used to gather frame latents.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<int64_t> idx) {
  check_rank(a.value(), 2, "gather_rows");
  const int64_t B = a.shape()[0], N = a.shape()[1];
  Tensor<T> out({static_cast<int64_t>(idx.size()), N});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= B) throw shape_error("gather_rows: index out of range");
    for (int64_t j = 0; j < N; ++j) out.at(static_cast<int64_t>(r), j) = a.value().at(idx[r], j);
  }
  return detail::make_op<T>(std::move(out), {a}, [B, idx](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{scatter_rows_of(g, idx, B)};
  });
}

// Inverse of gather_rows: out[idx[r], :] += a[r, :].
template <typename T>
Var<T> scatter_rows_of(const Var<T>& a, std::vector<int64_t> idx, int64_t rows) {
  check_rank(a.value(), 2, "scatter_rows_of");
  const int64_t N = a.shape()[1];
  Tensor<T> out({rows, N});
  for (size_t r = 0; r < idx.size(); ++r)
    for (int64_t j = 0; j < N; ++j) out.at(idx[r], j) += a.value().at(static_cast<int64_t>(r), j);
  return detail::make_op<T>(std::move(out), {a}, [idx](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{gather_rows(g, idx)};
  });
}

// --- reductions / broadcasts -------------------------------------------------

template <typename T>
Var<T> spread_scalar(const Var<T>& a, Shape s);

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T acc{0};
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.value()[i];
  Shape orig = a.shape();
  return detail::make_op<T>(scalar<T>(acc), {a}, [orig](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{spread_scalar(g, orig)};
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T{1} / static_cast<T>(a.numel()));
}

// Broadcast a [1] scalar to an arbitrary shape.
template <typename T>
Var<T> spread_scalar(const Var<T>& a, Shape s) {
  if (a.numel() != 1) throw shape_error("spread_scalar: input must be scalar");
  Tensor<T> out = full<T>(s, a.value()[0]);
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{sum_all(g)};
  });
}

template <typename T>
Var<T> repeat_rows(const Var<T>& v, int64_t rows);

// Sum over axis 0 of [B, N] -> [N].
template <typename T>
Var<T> sum_rows(const Var<T>& a) {
  check_rank(a.value(), 2, "sum_rows");
  const int64_t B = a.shape()[0], N = a.shape()[1];
  Tensor<T> out({N});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j) out[j] += a.value().at(i, j);
  return detail::make_op<T>(std::move(out), {a}, [B](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{repeat_rows(g, B)};
  });
}

// Tile a [N] vector into [rows, N].
template <typename T>
Var<T> repeat_rows(const Var<T>& v, int64_t rows) {
  check_rank(v.value(), 1, "repeat_rows");
  const int64_t N = v.shape()[0];
  Tensor<T> out({rows, N});
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(i, j) = v.value()[j];
  return detail::make_op<T>(std::move(out), {v}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{sum_rows(g)};
  });
}

template <typename T>
Var<T> repeat_cols(const Var<T>& c, int64_t cols);

// Sum over axis 1 of [B, N] -> [B].
template <typename T>
Var<T> sum_cols(const Var<T>& a) {
  check_rank(a.value(), 2, "sum_cols");
  const int64_t B = a.shape()[0], N = a.shape()[1];
  Tensor<T> out({B});
  for (int64_t i = 0; i < B; ++i) {
    T acc{0};
    for (int64_t j = 0; j < N; ++j) acc += a.value().at(i, j);
    out[i] = acc;
  }
  return detail::make_op<T>(std::move(out), {a}, [N](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{repeat_cols(g, N)};
  });
}

// Tile a [B] vector into [B, cols].
template <typename T>
Var<T> repeat_cols(const Var<T>& c, int64_t cols) {
  check_rank(c.value(), 1, "repeat_cols");
  const int64_t B = c.shape()[0];
  Tensor<T> out({B, cols});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) = c.value()[i];
  return detail::make_op<T>(std::move(out), {c}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{sum_cols(g)};
  });
}

template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  return scale(sum_rows(a), T{1} / static_cast<T>(a.shape()[0]));
}

// --- row/column broadcasting arithmetic --------------------------------------

// m[B,N] + v[N]
template <typename T>
Var<T> add_rowvec(const Var<T>& m, const Var<T>& v) {
  check_rank(m.value(), 2, "add_rowvec matrix");
  check_rank(v.value(), 1, "add_rowvec vector");
  const int64_t B = m.shape()[0], N = m.shape()[1];
  if (v.shape()[0] != N) throw shape_error("add_rowvec: width mismatch");
  Tensor<T> out({B, N});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(i, j) = m.value().at(i, j) + v.value()[j];
  return detail::make_op<T>(std::move(out), {m, v}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{g, sum_rows(g)};
  });
}

// m[B,N] * v[N]
template <typename T>
Var<T> mul_rowvec(const Var<T>& m, const Var<T>& v) {
  check_rank(m.value(), 2, "mul_rowvec matrix");
  check_rank(v.value(), 1, "mul_rowvec vector");
  const int64_t B = m.shape()[0], N = m.shape()[1];
  if (v.shape()[0] != N) throw shape_error("mul_rowvec: width mismatch");
  Tensor<T> out({B, N});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(i, j) = m.value().at(i, j) * v.value()[j];
  return detail::make_op<T>(std::move(out), {m, v}, [m, v](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_rowvec(g, v), sum_rows(mul(g, m))};
  });
}

// m[B,N] rows scaled by c[B]
template <typename T>
Var<T> mul_colvec(const Var<T>& m, const Var<T>& c) {
  check_rank(m.value(), 2, "mul_colvec matrix");
  check_rank(c.value(), 1, "mul_colvec vector");
  const int64_t B = m.shape()[0], N = m.shape()[1];
  if (c.shape()[0] != B) throw shape_error("mul_colvec: height mismatch");
  Tensor<T> out({B, N});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(i, j) = m.value().at(i, j) * c.value()[i];
  return detail::make_op<T>(std::move(out), {m, c}, [m, c](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{mul_colvec(g, c), sum_cols(mul(g, m))};
  });
}

// --- matmul -------------------------------------------------------------------

template <typename T>
Var<T> transpose(const Var<T>& a) {
  check_rank(a.value(), 2, "transpose");
  const int64_t M = a.shape()[0], N = a.shape()[1];
  Tensor<T> out({N, M});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(j, i) = a.value().at(i, j);
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{transpose(g)};
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check_rank(a.value(), 2, "matmul lhs");
  check_rank(b.value(), 2, "matmul rhs");
  const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  if (b.shape()[0] != K) throw shape_error("matmul: inner dimension mismatch");
  Tensor<T> out({M, N});
  kernels::gemm<T>(false, false, M, N, K, T{1}, a.value().data(), b.value().data(), T{0}, out.data());
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{matmul_nt(g, b), matmul_tn(a, g)};
  });
}

// a . b^T without materializing the transpose; the three matmul variants are
// closed under differentiation, which the gradient penalty relies on.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  check_rank(a.value(), 2, "matmul_nt lhs");
  check_rank(b.value(), 2, "matmul_nt rhs");
  const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[0];
  if (b.shape()[1] != K) throw shape_error("matmul_nt: inner dimension mismatch");
  Tensor<T> out({M, N});
  kernels::gemm<T>(false, true, M, N, K, T{1}, a.value().data(), b.value().data(), T{0}, out.data());
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{matmul(g, b), matmul_tn(g, a)};
  });
}

// a^T . b
template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  check_rank(a.value(), 2, "matmul_tn lhs");
  check_rank(b.value(), 2, "matmul_tn rhs");
  const int64_t K = a.shape()[0], M = a.shape()[1], N = b.shape()[1];
  if (b.shape()[0] != K) throw shape_error("matmul_tn: inner dimension mismatch");
  Tensor<T> out({M, N});
  kernels::gemm<T>(true, false, M, N, K, T{1}, a.value().data(), b.value().data(), T{0}, out.data());
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{matmul_nt(b, g), matmul(a, g)};
  });
}

// --- convolution ----------------------------------------------------------------

template <typename T>
Var<T> channel_sum_nhwc(const Var<T>& g);

// x [B,H,W,C] + bias [C], fused to avoid reshape copies on conv activations.
template <typename T>
Var<T> add_bias_nhwc(const Var<T>& x, const Var<T>& b) {
  check_rank(x.value(), 4, "add_bias_nhwc input");
  check_rank(b.value(), 1, "add_bias_nhwc bias");
  const int64_t C = x.shape()[3];
  if (b.shape()[0] != C) throw shape_error("add_bias_nhwc: channel mismatch");
  Tensor<T> out(x.shape());
  const T* bv = b.value().data();
  const T* xv = x.value().data();
  T* ov = out.data();
  kernels::parallel_for(out.size() / C, [&](int64_t p) {
    for (int64_t c = 0; c < C; ++c) ov[p * C + c] = xv[p * C + c] + bv[c];
  });
  return detail::make_op<T>(std::move(out), {x, b}, [](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{g, channel_sum_nhwc(g)};
  });
}

template <typename T>
Var<T> broadcast_channels_nhwc(const Var<T>& v, Shape target);

template <typename T>
Var<T> channel_sum_nhwc(const Var<T>& g) {
  check_rank(g.value(), 4, "channel_sum_nhwc");
  const int64_t C = g.shape()[3], P = g.numel() / C;
  Tensor<T> out({C});
  const T* gv = g.value().data();
  for (int64_t p = 0; p < P; ++p)
    for (int64_t c = 0; c < C; ++c) out[c] += gv[p * C + c];
  Shape gshape = g.shape();
  return detail::make_op<T>(std::move(out), {g}, [gshape](const Var<T>&, const Var<T>& gg) {
    return std::vector<Var<T>>{broadcast_channels_nhwc(gg, gshape)};
  });
}

template <typename T>
Var<T> broadcast_channels_nhwc(const Var<T>& v, Shape target) {
  check_rank(v.value(), 1, "broadcast_channels_nhwc");
  const int64_t C = target[3], P = shape_numel(target) / C;
  if (v.shape()[0] != C) throw shape_error("broadcast_channels_nhwc: channel mismatch");
  Tensor<T> out(target);
  T* ov = out.data();
  const T* vv = v.value().data();
  kernels::parallel_for(P, [&](int64_t p) {
    for (int64_t c = 0; c < C; ++c) ov[p * C + c] = vv[c];
  });
  return detail::make_op<T>(std::move(out), {v}, [](const Var<T>&, const Var<T>& gg) {
    return std::vector<Var<T>>{channel_sum_nhwc(gg)};
  });
}

template <typename T>
Var<T> conv2d_dinput_op(const Var<T>& gy, const Var<T>& w, const kernels::ConvGeom& g, int64_t B);
template <typename T>
Var<T> conv2d_dweight_op(const Var<T>& x, const Var<T>& gy, const kernels::ConvGeom& g);

// x: [B, H, W, IC], w: [k, k, IC, OC], SAME padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const kernels::ConvGeom& geom) {
  check_rank(x.value(), 4, "conv2d input");
  check_rank(w.value(), 4, "conv2d weight");
  const int64_t B = x.shape()[0];
  check_shape(x.value(), {B, geom.in_h, geom.in_w, geom.in_c}, "conv2d input");
  check_shape(w.value(), {geom.k, geom.k, geom.in_c, geom.out_c}, "conv2d weight");
  Tensor<T> out({B, geom.out_h, geom.out_w, geom.out_c});
  kernels::conv2d_forward(geom, x.value(), w.value(), out);
  return detail::make_op<T>(std::move(out), {x, w}, [x, w, geom, B](const Var<T>&, const Var<T>& g) {
    return std::vector<Var<T>>{conv2d_dinput_op(g, w, geom, B), conv2d_dweight_op(x, g, geom)};
  });
}

template <typename T>
[[noreturn]] inline std::vector<Var<T>> conv_second_order_unsupported(const Var<T>&, const Var<T>&) {
  throw shape_error("second-order gradients through convolutions are not supported");
}

template <typename T>
Var<T> conv2d_dinput_op(const Var<T>& gy, const Var<T>& w, const kernels::ConvGeom& g, int64_t B) {
  Tensor<T> out({B, g.in_h, g.in_w, g.in_c});
  kernels::conv2d_dinput(g, gy.value(), w.value(), out);
  return detail::make_op<T>(std::move(out), {gy, w}, &conv_second_order_unsupported<T>);
}

template <typename T>
Var<T> conv2d_dweight_op(const Var<T>& x, const Var<T>& gy, const kernels::ConvGeom& g) {
  Tensor<T> out({g.k, g.k, g.in_c, g.out_c});
  kernels::conv2d_dweight(g, x.value(), gy.value(), out);
  return detail::make_op<T>(std::move(out), {x, gy}, &conv_second_order_unsupported<T>);
}

// Fused conv2d + channel bias + LeakyReLU (slope = 1 gives a linear layer).
// One output tensor per layer; the activation mask is recovered from the
// output sign during backward, so nothing extra is stored.
template <typename T>
Var<T> conv2d_bias_act(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                       const kernels::ConvGeom& geom, T slope) {
  check_rank(x.value(), 4, "conv2d_bias_act input");
  const int64_t B = x.shape()[0];
  check_shape(x.value(), {B, geom.in_h, geom.in_w, geom.in_c}, "conv2d_bias_act input");
  check_shape(w.value(), {geom.k, geom.k, geom.in_c, geom.out_c}, "conv2d_bias_act weight");
  check_shape(b.value(), {geom.out_c}, "conv2d_bias_act bias");
  Tensor<T> out({B, geom.out_h, geom.out_w, geom.out_c});
  kernels::conv2d_forward(geom, x.value(), w.value(), out);
  const int64_t C = geom.out_c;
  T* ov = out.data();
  const T* bv = b.value().data();
  kernels::parallel_for(out.size() / C, [&](int64_t p) {
    for (int64_t c = 0; c < C; ++c) {
      const T v = ov[p * C + c] + bv[c];
      ov[p * C + c] = v > T{0} ? v : slope * v;
    }
  });
  return detail::make_op<T>(
      std::move(out), {x, w, b}, [x, w, geom, B, slope](const Var<T>& self, const Var<T>& g) {
        Var<T> gpre = g;
        if (slope != T{1}) {
          Tensor<T> mask(self.shape());
          kernels::parallel_for(mask.size(), [&](int64_t i) {
            mask[i] = self.value()[i] > T{0} ? T{1} : slope;
          });
          gpre = mul_const(g, std::move(mask));
        }
        return std::vector<Var<T>>{conv2d_dinput_op(gpre, w, geom, B),
                                   conv2d_dweight_op(x, gpre, geom), channel_sum_nhwc(gpre)};
      });
}

// Transposed-convolution counterpart of conv2d_bias_act.
template <typename T>
Var<T> conv_transpose2d_bias_act(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                                 const kernels::ConvGeom& geom, T slope) {
  check_rank(x.value(), 4, "conv_transpose2d_bias_act input");
  const int64_t B = x.shape()[0];
  check_shape(x.value(), {B, geom.out_h, geom.out_w, geom.out_c}, "conv_transpose2d_bias_act input");
  check_shape(w.value(), {geom.k, geom.k, geom.in_c, geom.out_c}, "conv_transpose2d_bias_act weight");
  check_shape(b.value(), {geom.in_c}, "conv_transpose2d_bias_act bias");
  Tensor<T> out({B, geom.in_h, geom.in_w, geom.in_c});
  kernels::conv2d_dinput(geom, x.value(), w.value(), out);
  const int64_t C = geom.in_c;
  T* ov = out.data();
  const T* bv = b.value().data();
  kernels::parallel_for(out.size() / C, [&](int64_t p) {
    for (int64_t c = 0; c < C; ++c) {
      const T v = ov[p * C + c] + bv[c];
      ov[p * C + c] = v > T{0} ? v : slope * v;
    }
  });
  return detail::make_op<T>(
      std::move(out), {x, w, b}, [x, w, geom, slope](const Var<T>& self, const Var<T>& g) {
        Var<T> gpre = g;
        if (slope != T{1}) {
          Tensor<T> mask(self.shape());
          kernels::parallel_for(mask.size(), [&](int64_t i) {
            mask[i] = self.value()[i] > T{0} ? T{1} : slope;
          });
          gpre = mul_const(g, std::move(mask));
        }
        const int64_t B = x.shape()[0];
        Tensor<T> gx({B, geom.out_h, geom.out_w, geom.out_c});
        kernels::conv2d_forward(geom, gpre.value(), w.value(), gx);
        Var<T> gx_var = detail::make_op<T>(std::move(gx), {gpre, w}, &conv_second_order_unsupported<T>);
        Tensor<T> gw({geom.k, geom.k, geom.in_c, geom.out_c});
        kernels::conv2d_dweight(geom, gpre.value(), x.value(), gw);
        Var<T> gw_var = detail::make_op<T>(std::move(gw), {gpre, x}, &conv_second_order_unsupported<T>);
        return std::vector<Var<T>>{gx_var, gw_var, channel_sum_nhwc(gpre)};
      });
}

// Transposed convolution: x [B, h, w, IC] -> y [B, h*s, w*s, OC] with
// w [k, k, OC, IC]. Realized as the input-gradient of the matching forward
// convolution from [h*s, w*s, OC] down to [h, w, IC].
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const kernels::ConvGeom& geom) {
  check_rank(x.value(), 4, "conv_transpose2d input");
  check_rank(w.value(), 4, "conv_transpose2d weight");
  const int64_t B = x.shape()[0];
  check_shape(x.value(), {B, geom.out_h, geom.out_w, geom.out_c}, "conv_transpose2d input");
  check_shape(w.value(), {geom.k, geom.k, geom.in_c, geom.out_c}, "conv_transpose2d weight");
  Tensor<T> out({B, geom.in_h, geom.in_w, geom.in_c});
  kernels::conv2d_dinput(geom, x.value(), w.value(), out);
  return detail::make_op<T>(std::move(out), {x, w}, [x, w, geom](const Var<T>&, const Var<T>& g) {
    // d/dx: the forward convolution applied to g; d/dw: weight-grad with the
    // roles of image and output swapped.
    const int64_t B = x.shape()[0];
    Tensor<T> gx({B, geom.out_h, geom.out_w, geom.out_c});
    kernels::conv2d_forward(geom, g.value(), w.value(), gx);
    Var<T> gx_var = detail::make_op<T>(std::move(gx), {g, w}, &conv_second_order_unsupported<T>);
    Tensor<T> gw({geom.k, geom.k, geom.in_c, geom.out_c});
    kernels::conv2d_dweight(geom, g.value(), x.value(), gw);
    Var<T> gw_var = detail::make_op<T>(std::move(gw), {g, x}, &conv_second_order_unsupported<T>);
    return std::vector<Var<T>>{gx_var, gw_var};
  });
}

// --- gradient computation ---------------------------------------------------

// Gradients of a scalar loss with respect to `wrt`. The returned Vars are
// ordinary graph nodes, so expressions of them can be differentiated again.
// Vars in `wrt` that the loss does not depend on yield zeros.
template <typename T>
std::vector<Var<T>> gradients(const Var<T>& loss, const std::vector<Var<T>>& wrt) {
  if (loss.numel() != 1) throw shape_error("gradients: loss must be scalar");

  // Topological order over the requires_grad subgraph (iterative post-order).
  std::vector<Var<T>> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Var<T>, size_t>> stack;
  if (loss.requires_grad()) stack.push_back({loss, 0});
  while (!stack.empty()) {
    auto& [v, next] = stack.back();
    if (next == 0 && seen.count(v.node())) {
      stack.pop_back();
      continue;
    }
    seen.insert(v.node());
    bool descended = false;
    while (next < v.node()->parents.size()) {
      const Var<T>& p = v.node()->parents[next++];
      if (p.requires_grad() && !seen.count(p.node())) {
        stack.push_back({p, 0});
        descended = true;
        break;
      }
    }
    if (!descended && next >= v.node()->parents.size()) {
      order.push_back(v);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node<T>*, Var<T>> grad;
  if (loss.requires_grad()) grad[loss.node()] = constant(full<T>(loss.shape(), T{1}));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Var<T>& v = *it;
    auto git = grad.find(v.node());
    if (git == grad.end() || !v.node()->backward) continue;
    std::vector<Var<T>> pg = v.node()->backward(v, git->second);
    if (pg.size() != v.node()->parents.size())
      throw shape_error("gradients: backward arity mismatch");
    for (size_t i = 0; i < pg.size(); ++i) {
      const Var<T>& p = v.node()->parents[i];
      if (!p.requires_grad() || pg[i].empty()) continue;
      auto pit = grad.find(p.node());
      if (pit == grad.end())
        grad[p.node()] = pg[i];
      else
        pit->second = add(pit->second, pg[i]);
    }
  }

  std::vector<Var<T>> out;
  out.reserve(wrt.size());
  for (const Var<T>& w : wrt) {
    auto it = grad.find(w.node());
    out.push_back(it != grad.end() ? it->second : constant(zeros<T>(w.shape())));
  }
  return out;
}

// Convenience: plain tensors.
template <typename T>
std::vector<Tensor<T>> grad_tensors(const Var<T>& loss, const std::vector<Var<T>>& wrt) {
  std::vector<Var<T>> g = gradients(loss, wrt);
  std::vector<Tensor<T>> out;
  out.reserve(g.size());
  for (auto& v : g) out.push_back(v.value());
  return out;
}

// Operator sugar for elementwise work in loss code.
template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a) {
  return neg(a);
}

}  // namespace diffil::ag
