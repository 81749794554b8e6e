#pragma once

// Layer primitives and the per-graph parameter binding context. Networks are
// plain structs of layers; a forward pass binds each parameter tensor to a
// graph leaf exactly once per Ctx, so several losses built on one Ctx share
// parameter nodes and their gradients accumulate naturally.

#include <string>
#include <unordered_map>
#include <vector>

#include "diffil/graph.hpp"
#include "diffil/rng.hpp"
#include "diffil/tensor.hpp"

namespace diffil::nn {

// How a network participates in a forward pass.
//  trainable  — parameters become differentiable leaves
//  bn_train   — BatchNorm uses batch statistics (else running statistics)
//  bn_update  — BatchNorm running statistics are refreshed from this pass
struct Mode {
  bool trainable = true;
  bool bn_train = true;
  bool bn_update = true;

  static Mode train() { return {true, true, true}; }
  static Mode train_no_stats() { return {true, true, false}; }
  static Mode frozen() { return {false, true, false}; }
  static Mode eval() { return {false, false, false}; }
};

template <typename T>
class Ctx {
 public:
  ag::Var<T> bind(Tensor<T>& t, bool trainable) {
    auto it = bound_.find(&t);
    if (it != bound_.end()) {
      if (it->second.requires_grad() != trainable)
        throw shape_error("Ctx::bind: a parameter cannot be both trainable and frozen in one graph");
      return it->second;
    }
    ag::Var<T> v = ag::leaf(t, trainable);
    bound_.emplace(&t, v);
    return v;
  }

  bool is_bound(const Tensor<T>* t) const { return bound_.count(t) > 0; }

  ag::Var<T> var_of(const Tensor<T>* t) const {
    auto it = bound_.find(t);
    if (it == bound_.end()) throw shape_error("Ctx::var_of: tensor was not bound in this graph");
    return it->second;
  }

 private:
  std::unordered_map<const Tensor<T>*, ag::Var<T>> bound_;
};

// Named view of a network's persistent tensors. Parameters get optimizer
// updates; buffers (BatchNorm statistics) are serialized but not trained.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
  bool is_param;
};

template <typename T>
void init_dense(Tensor<T>& w, Rng& rng) {
  const T std = static_cast<T>(std::sqrt(1.0 / static_cast<double>(w.shape[0])));
  for (auto& x : w.v) x = static_cast<T>(rng.trunc_normal()) * std;
}

template <typename T>
void init_conv(Tensor<T>& w, int64_t fan_in, Rng& rng) {
  const T std = static_cast<T>(std::sqrt(1.0 / static_cast<double>(fan_in)));
  for (auto& x : w.v) x = static_cast<T>(rng.trunc_normal()) * std;
}

// --- Dense -------------------------------------------------------------------

template <typename T>
struct Dense {
  Tensor<T> W;  // [in, out]
  Tensor<T> b;  // [out]

  Dense() = default;
  Dense(int64_t in, int64_t out, Rng& rng) : W({in, out}), b({out}) { init_dense(W, rng); }

  ag::Var<T> forward(Ctx<T>& g, const ag::Var<T>& x, const Mode& m) {
    return ag::add_rowvec(ag::matmul(x, g.bind(W, m.trainable)), g.bind(b, m.trainable));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".W", &W, true});
    out.push_back({prefix + ".b", &b, true});
  }
};

// --- BatchNorm over features of a [B, N] matrix --------------------------------

template <typename T>
struct BatchNorm1d {
  Tensor<T> gamma, beta;
  Tensor<T> run_mean, run_var;
  T momentum = static_cast<T>(0.99);
  T eps = static_cast<T>(1e-5);

  BatchNorm1d() = default;
  explicit BatchNorm1d(int64_t n)
      : gamma(full<T>({n}, T{1})), beta({n}), run_mean({n}), run_var(full<T>({n}, T{1})) {}

  ag::Var<T> forward(Ctx<T>& g, const ag::Var<T>& x, const Mode& m) {
    const int64_t B = x.shape()[0];
    ag::Var<T> xhat;
    if (m.bn_train) {
      ag::Var<T> mu = ag::mean_rows(x);
      ag::Var<T> xc = ag::sub(x, ag::repeat_rows(mu, B));
      ag::Var<T> var = ag::mean_rows(ag::square(xc));
      if (m.bn_update) {
        for (int64_t j = 0; j < gamma.size(); ++j) {
          run_mean[j] = momentum * run_mean[j] + (T{1} - momentum) * mu.value()[j];
          run_var[j] = momentum * run_var[j] + (T{1} - momentum) * var.value()[j];
        }
      }
      xhat = ag::div(xc, ag::repeat_rows(ag::sqrt_op(ag::add_scalar(var, eps)), B));
    } else {
      Tensor<T> inv({gamma.size()});
      for (int64_t j = 0; j < gamma.size(); ++j) inv[j] = T{1} / std::sqrt(run_var[j] + eps);
      ag::Var<T> xc = ag::sub(x, ag::repeat_rows(ag::constant(run_mean), B));
      xhat = ag::mul_rowvec(xc, ag::constant(std::move(inv)));
    }
    return ag::add_rowvec(ag::mul_rowvec(xhat, g.bind(gamma, m.trainable)), g.bind(beta, m.trainable));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".gamma", &gamma, true});
    out.push_back({prefix + ".beta", &beta, true});
    out.push_back({prefix + ".run_mean", &run_mean, false});
    out.push_back({prefix + ".run_var", &run_var, false});
  }
};

// --- Conv layers (NHWC, 3x3, SAME padding) -------------------------------------

template <typename T>
struct Conv2d {
  Tensor<T> W;  // [k, k, in_c, out_c]
  Tensor<T> b;  // [out_c]
  int64_t in_c = 0, out_c = 0, k = 3, stride = 1;

  Conv2d() = default;
  Conv2d(int64_t in_channels, int64_t out_channels, int64_t stride_, Rng& rng)
      : W({3, 3, in_channels, out_channels}),
        b({out_channels}),
        in_c(in_channels),
        out_c(out_channels),
        stride(stride_) {
    init_conv(W, 3 * 3 * in_channels, rng);
  }

  ag::Var<T> forward(Ctx<T>& g, const ag::Var<T>& x, const Mode& m) {
    const auto geom = kernels::conv_geom_same(x.shape()[1], x.shape()[2], in_c, out_c, k, stride);
    return ag::add_bias_nhwc(ag::conv2d(x, g.bind(W, m.trainable), geom), g.bind(b, m.trainable));
  }

  // conv + bias + LeakyReLU in one graph node (slope = 1 for linear)
  ag::Var<T> forward_act(Ctx<T>& g, const ag::Var<T>& x, const Mode& m, T slope) {
    const auto geom = kernels::conv_geom_same(x.shape()[1], x.shape()[2], in_c, out_c, k, stride);
    return ag::conv2d_bias_act(x, g.bind(W, m.trainable), g.bind(b, m.trainable), geom, slope);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".W", &W, true});
    out.push_back({prefix + ".b", &b, true});
  }
};

template <typename T>
struct ConvTranspose2d {
  Tensor<T> W;  // [k, k, out_c, in_c]
  Tensor<T> b;  // [out_c]
  int64_t in_c = 0, out_c = 0, k = 3, stride = 1;

  ConvTranspose2d() = default;
  ConvTranspose2d(int64_t in_channels, int64_t out_channels, int64_t stride_, Rng& rng)
      : W({3, 3, out_channels, in_channels}),
        b({out_channels}),
        in_c(in_channels),
        out_c(out_channels),
        stride(stride_) {
    init_conv(W, 3 * 3 * in_channels, rng);
  }

  ag::Var<T> forward(Ctx<T>& g, const ag::Var<T>& x, const Mode& m) {
    const int64_t h = x.shape()[1], w = x.shape()[2];
    // Geometry of the conv this layer is the transpose of.
    const auto geom = kernels::conv_geom_same(h * stride, w * stride, out_c, in_c, k, stride);
    return ag::add_bias_nhwc(ag::conv_transpose2d(x, g.bind(W, m.trainable), geom),
                             g.bind(b, m.trainable));
  }

  ag::Var<T> forward_act(Ctx<T>& g, const ag::Var<T>& x, const Mode& m, T slope) {
    const int64_t h = x.shape()[1], w = x.shape()[2];
    const auto geom = kernels::conv_geom_same(h * stride, w * stride, out_c, in_c, k, stride);
    return ag::conv_transpose2d_bias_act(x, g.bind(W, m.trainable), g.bind(b, m.trainable), geom,
                                         slope);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".W", &W, true});
    out.push_back({prefix + ".b", &b, true});
  }
};

// --- helpers --------------------------------------------------------------------

template <typename T>
std::vector<Tensor<T>*> params_of(std::vector<NamedTensor<T>>& named) {
  std::vector<Tensor<T>*> out;
  for (auto& nt : named)
    if (nt.is_param) out.push_back(nt.tensor);
  return out;
}

}  // namespace diffil::nn
