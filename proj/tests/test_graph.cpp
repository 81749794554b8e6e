#include <doctest.h>

#include "diffil/adam.hpp"
#include "diffil/graph.hpp"
#include "diffil/nn.hpp"
#include "test_util.hpp"

using namespace diffil;
using namespace diffil::ag;
namespace T = diffil::testing;

TEST_CASE("elementwise and reduction ops match finite differences") {
  Rng rng(42);
  Tensor<double> a = T::random_tensor({3, 4}, rng);
  Tensor<double> b = T::random_tensor({3, 4}, rng, 0.5);
  // keep b away from 0 for div
  for (auto& x : b.v) x += (x >= 0 ? 1.0 : -1.0);

  auto build = [&]() {
    Var<double> va = leaf(a), vb = leaf(b);
    Var<double> t1 = mul(add(va, vb), sub(va, vb));
    Var<double> t2 = div(square(va), vb);
    Var<double> t3 = exp_op(scale(vb, 0.3));
    Var<double> t4 = log_op(add_scalar(square(vb), 1.0));
    Var<double> t5 = tanh_op(va) + sigmoid_op(vb);
    Var<double> t6 = sqrt_op(add_scalar(square(t1), 1.0));
    Var<double> s = mean_all(t2 + t3 + t4) + sum_all(t5) + mean_all(t6);
    return std::pair{s, std::vector<Var<double>>{va, vb}};
  };

  auto [loss, wrt] = build();
  auto grads = grad_tensors(loss, wrt);
  auto f = [&]() { return build().first.value()[0]; };
  CHECK(T::fd_max_rel_err(f, {&a, &b}, grads) < 1e-6);
}

TEST_CASE("matmul, transpose and broadcast ops match finite differences") {
  Rng rng(1);
  Tensor<double> m = T::random_tensor({4, 3}, rng);
  Tensor<double> w = T::random_tensor({3, 5}, rng);
  Tensor<double> v = T::random_tensor({5}, rng);
  Tensor<double> c = T::random_tensor({4}, rng);

  auto build = [&]() {
    Var<double> vm = leaf(m), vw = leaf(w), vv = leaf(v), vc = leaf(c);
    Var<double> y = matmul(vm, vw);                  // [4,5]
    y = add_rowvec(y, vv);
    y = mul_rowvec(y, vv);
    y = mul_colvec(y, vc);
    Var<double> z = matmul(transpose(y), vm);        // [5,3]
    Var<double> s = mean_all(square(z)) + mean_all(sum_cols(y)) + sum_all(sum_rows(y));
    return std::pair{s, std::vector<Var<double>>{vm, vw, vv, vc}};
  };

  auto [loss, wrt] = build();
  auto grads = grad_tensors(loss, wrt);
  auto f = [&]() { return build().first.value()[0]; };
  CHECK(T::fd_max_rel_err(f, {&m, &w, &v, &c}, grads) < 1e-6);
}

TEST_CASE("shape ops match finite differences") {
  Rng rng(2);
  Tensor<double> a = T::random_tensor({3, 4}, rng);
  Tensor<double> b = T::random_tensor({3, 2}, rng);

  auto build = [&]() {
    Var<double> va = leaf(a), vb = leaf(b);
    Var<double> cat = concat_cols(va, vb);                       // [3,6]
    Var<double> sl = slice_cols(cat, 1, 5);                      // [3,4]
    Var<double> em = embed_cols(sl, 7, 2);                       // [3,7]
    Var<double> gt = gather_rows(em, {2, 0, 0, 1});              // [4,7]
    Var<double> sc = scatter_rows_of(gt, {0, 2, 1, 2}, 3);       // [3,7]
    Var<double> rs = reshape(sc, {7, 3});
    Var<double> s = mean_all(square(rs)) + sum_all(min_elem(va, scale(vb.numel() == va.numel() ? vb : va, 1.0)));
    return std::pair{s, std::vector<Var<double>>{va, vb}};
  };

  auto [loss, wrt] = build();
  auto grads = grad_tensors(loss, wrt);
  auto f = [&]() { return build().first.value()[0]; };
  CHECK(T::fd_max_rel_err(f, {&a, &b}, grads) < 1e-6);
}

TEST_CASE("min_elem and clamp route gradients through the active branch") {
  Tensor<double> a({2}, {1.0, 5.0});
  Tensor<double> b({2}, {3.0, 2.0});
  Var<double> va = leaf(a), vb = leaf(b);
  Var<double> s = sum_all(min_elem(va, vb));
  auto g = grad_tensors(s, {va, vb});
  CHECK(g[0][0] == 1.0);
  CHECK(g[0][1] == 0.0);
  CHECK(g[1][0] == 0.0);
  CHECK(g[1][1] == 1.0);

  Tensor<double> x({3}, {-2.0, 0.5, 4.0});
  Var<double> vx = leaf(x);
  auto gc = grad_tensors(sum_all(clamp(vx, -1.0, 1.0)), {vx});
  CHECK(gc[0][0] == 0.0);
  CHECK(gc[0][1] == 1.0);
  CHECK(gc[0][2] == 0.0);
}

TEST_CASE("detach blocks gradients") {
  Tensor<double> x({2}, {2.0, 3.0});
  Var<double> vx = leaf(x);
  Var<double> held = mul(vx, detach(vx));  // d/dx (x * const(x)) = const(x)
  auto g = grad_tensors(sum_all(held), {vx});
  CHECK(g[0][0] == 2.0);
  CHECK(g[0][1] == 3.0);
}

TEST_CASE("gradients w.r.t. an unused variable are zero") {
  Tensor<double> x({2}, {1.0, 2.0});
  Tensor<double> y({3}, {1.0, 2.0, 3.0});
  Var<double> vx = leaf(x), vy = leaf(y);
  auto g = grad_tensors(sum_all(square(vx)), {vy});
  CHECK(g[0].shape == Shape{3});
  for (int64_t i = 0; i < 3; ++i) CHECK(g[0][i] == 0.0);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(9);
  const int64_t B = 2, H = 5, W = 4, IC = 2, OC = 3;
  for (int64_t stride : {int64_t{1}, int64_t{2}}) {
    auto geom = kernels::conv_geom_same(H, W, IC, OC, 3, stride);
    Tensor<double> x = T::random_tensor({B, H, W, IC}, rng);
    Tensor<double> w = T::random_tensor({3, 3, IC, OC}, rng);

    auto build = [&]() {
      Var<double> vx = leaf(x), vw = leaf(w);
      return std::pair{mean_all(square(conv2d(vx, vw, geom))), std::vector<Var<double>>{vx, vw}};
    };
    auto [loss, wrt] = build();
    auto grads = grad_tensors(loss, wrt);
    auto f = [&]() { return build().first.value()[0]; };
    CHECK(T::fd_max_rel_err(f, {&x, &w}, grads) < 1e-6);
  }
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
  Rng rng(10);
  const int64_t B = 2, h = 3, w_ = 3, IC = 3, OC = 2, S = 2;
  auto geom = kernels::conv_geom_same(h * S, w_ * S, OC, IC, 3, S);
  Tensor<double> x = T::random_tensor({B, h, w_, IC}, rng);
  Tensor<double> w = T::random_tensor({3, 3, OC, IC}, rng);

  auto build = [&]() {
    Var<double> vx = leaf(x), vw = leaf(w);
    Var<double> y = conv_transpose2d(vx, vw, geom);
    return std::pair{mean_all(square(y)), std::vector<Var<double>>{vx, vw}};
  };
  auto [loss, wrt] = build();
  CHECK(loss.shape() == Shape{1});
  auto grads = grad_tensors(loss, wrt);
  auto f = [&]() { return build().first.value()[0]; };
  CHECK(T::fd_max_rel_err(f, {&x, &w}, grads) < 1e-6);
}

TEST_CASE("conv_transpose2d upsamples to stride times the input size") {
  Rng rng(12);
  nn::Ctx<double> g;
  nn::ConvTranspose2d<double> ct(4, 2, 2, rng);
  Var<double> x = constant(T::random_tensor({1, 4, 4, 4}, rng));
  Var<double> y = ct.forward(g, x, nn::Mode::train());
  CHECK(y.shape() == Shape{1, 8, 8, 2});
}

TEST_CASE("dense/batchnorm network gradients match finite differences") {
  Rng rng(21);
  nn::Dense<double> l1(4, 6, rng), l2(6, 1, rng);
  nn::BatchNorm1d<double> bn(4);
  // make BN affine parameters non-trivial
  for (auto& v : bn.gamma.v) v = 1.0 + 0.3 * rng.normal();
  for (auto& v : bn.beta.v) v = 0.2 * rng.normal();
  Tensor<double> x = T::random_tensor({5, 4}, rng);

  auto build = [&](nn::Ctx<double>& g) {
    Var<double> h = bn.forward(g, constant(x), nn::Mode::train_no_stats());
    h = leaky_relu(l1.forward(g, h, nn::Mode::train()), 0.2);
    return mean_all(square(l2.forward(g, h, nn::Mode::train())));
  };

  nn::Ctx<double> g;
  Var<double> loss = build(g);
  std::vector<Tensor<double>*> params{&bn.gamma, &bn.beta, &l1.W, &l1.b, &l2.W, &l2.b};
  std::vector<Var<double>> wrt;
  for (auto* p : params) wrt.push_back(g.var_of(p));
  auto grads = grad_tensors(loss, wrt);

  auto f = [&]() {
    nn::Ctx<double> g2;
    return build(g2).value()[0];
  };
  CHECK(T::fd_max_rel_err(f, params, grads) < 1e-6);
}

// Double backprop: differentiate a function of the input-gradient of a small
// MLP with respect to the MLP parameters. This is the mechanism the WGAN
// gradient penalty relies on.
TEST_CASE("second-order gradients (grad-of-grad) match finite differences") {
  Rng rng(33);
  nn::BatchNorm1d<double> bn(3);
  nn::Dense<double> l1(3, 5, rng), l2(5, 1, rng);
  for (auto& v : bn.gamma.v) v = 1.0 + 0.2 * rng.normal();
  Tensor<double> x = T::random_tensor({4, 3}, rng);

  auto build = [&](nn::Ctx<double>& g) {
    Var<double> vx = leaf(x);  // differentiable input
    Var<double> h = bn.forward(g, vx, nn::Mode::train_no_stats());
    h = leaky_relu(l1.forward(g, h, nn::Mode::train()), 0.2);
    Var<double> out = l2.forward(g, h, nn::Mode::train());
    Var<double> gx = gradients(sum_all(out), {vx})[0];  // [4,3], still in-graph
    // penalty-like scalar: mean over batch of (||gx||_2 - 1)^2
    Var<double> norms = sqrt_op(add_scalar(sum_cols(square(gx)), 1e-12));
    return mean_all(square(add_scalar(norms, -1.0)));
  };

  nn::Ctx<double> g;
  Var<double> loss = build(g);
  std::vector<Tensor<double>*> params{&bn.gamma, &bn.beta, &l1.W, &l1.b, &l2.W, &l2.b};
  std::vector<Var<double>> wrt;
  for (auto* p : params) wrt.push_back(g.var_of(p));
  auto grads = grad_tensors(loss, wrt);

  auto f = [&]() {
    nn::Ctx<double> g2;
    return build(g2).value()[0];
  };
  CHECK(T::fd_max_rel_err(f, params, grads, 1e-5) < 1e-5);
}

TEST_CASE("Adam first step matches the closed form") {
  Tensor<double> p({2}, {1.0, -2.0});
  nn::Adam<double> opt({&p}, 1e-3);
  Tensor<double> g({2}, {0.5, -0.25});
  opt.step({g});
  // first step: mhat = g, vhat = g^2  =>  p -= lr * g / (|g| + eps)
  CHECK(p[0] == doctest::Approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(-2.0 + 1e-3 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("ema_update blends parameters") {
  Tensor<double> online({2}, {1.0, 1.0});
  Tensor<double> target({2}, {0.0, 0.0});
  nn::ema_update<double>({&online}, {&target}, 0.005);
  CHECK(target[0] == doctest::Approx(0.005));
  nn::ema_update<double>({&online}, {&target}, 1.0);
  CHECK(target[0] == 1.0);
  CHECK_THROWS_AS(nn::ema_update<double>({&online}, {&target}, 0.0), config_error);
  // idempotent when equal
  Tensor<double> t2 = online;
  nn::ema_update<double>({&online}, {&t2}, 0.37);
  CHECK(t2[0] == 1.0);
}

TEST_CASE("batchnorm eval mode uses running statistics") {
  Rng rng(4);
  nn::BatchNorm1d<double> bn(2);
  bn.run_mean[0] = 1.0;
  bn.run_mean[1] = -1.0;
  bn.run_var[0] = 4.0;
  bn.run_var[1] = 0.25;
  nn::Ctx<double> g;
  Tensor<double> x({1, 2}, {3.0, 0.0});
  Var<double> y = bn.forward(g, constant(x), nn::Mode::eval());
  CHECK(y.value()[0] == doctest::Approx((3.0 - 1.0) / std::sqrt(4.0 + 1e-5)));
  CHECK(y.value()[1] == doctest::Approx(1.0 / std::sqrt(0.25 + 1e-5)));
}

TEST_CASE("batchnorm running statistics update only when asked") {
  Rng rng(4);
  nn::BatchNorm1d<double> bn(2);
  Tensor<double> x({8, 2});
  for (auto& v : x.v) v = rng.normal() + 2.0;
  nn::Ctx<double> g;
  (void)bn.forward(g, constant(x), nn::Mode::frozen());
  CHECK(bn.run_mean[0] == 0.0);
  nn::Ctx<double> g2;
  (void)bn.forward(g2, constant(x), nn::Mode::train());
  CHECK(bn.run_mean[0] != 0.0);
}
