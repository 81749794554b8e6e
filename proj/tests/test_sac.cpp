#include <doctest.h>

#include "diffil/sac.hpp"
#include "test_util.hpp"

using namespace diffil;
using namespace diffil::ag;
namespace T = diffil::testing;

namespace {

// Q callable with a constant value.
struct ConstQ {
  double v;
  Var<double> operator()(nn::Ctx<double>&, const Var<double>& s, const Var<double>&, const nn::Mode&) {
    return constant(full<double>({s.shape()[0]}, v));
  }
};

}  // namespace

TEST_CASE("critic loss closed forms") {
  SUBCASE("Q equal to the target gives zero loss") {
    ConstQ q{1.688};
    Tensor<double> s({3, 1}), a({3, 1});
    Tensor<double> y = full<double>({3}, 1.688);
    nn::Ctx<double> g;
    Var<double> loss = sac_critic_loss<double>(g, q, q, s, a, y, nn::Mode::train());
    CHECK(loss.value()[0] == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("gamma = 0, lambda = 0 reduces to half the squared reward error") {
    ConstQ q1{0.3}, q2{0.4};
    Tensor<double> s({2, 1}), a({2, 1});
    Tensor<double> r({2}, {1.0, -0.5});
    // gamma = 0 target is just the reward
    nn::Ctx<double> g;
    Var<double> loss = sac_critic_loss<double>(g, q1, q2, s, a, r, nn::Mode::train());
    double want = 0;
    for (double ri : {1.0, -0.5}) want += 0.5 * ((0.3 - ri) * (0.3 - ri) + (0.4 - ri) * (0.4 - ri)) / 2.0;
    CHECK(loss.value()[0] == doctest::Approx(want).epsilon(1e-12));
  }

  SUBCASE("hand-set scalar target: 1/2 (1 - (0.5 + 0.99*(1 + 0.2)))^2") {
    // Q = 1, R = 0.5, gamma = 0.99, Q' = 1, logpi = -1, lambda_ent = 0.2
    const double y = 0.5 + 0.99 * (1.0 - 0.2 * (-1.0));
    ConstQ q{1.0};
    Tensor<double> s({1, 1}), a({1, 1});
    nn::Ctx<double> g;
    Var<double> loss = sac_critic_loss<double>(g, q, q, s, a, scalar<double>(y), nn::Mode::train());
    const double one_critic = 0.5 * (1.0 - y) * (1.0 - y);
    CHECK(loss.value()[0] == doctest::Approx(2.0 * one_critic).epsilon(1e-12));
    CHECK(one_critic == doctest::Approx(0.5 * std::pow(1.0 - (0.5 + 0.99 * 1.2), 2)).epsilon(1e-12));
  }

  SUBCASE("empty batch is rejected") {
    ConstQ q{0.0};
    Tensor<double> s({0, 1}), a({0, 1}), y({0});
    nn::Ctx<double> g;
    CHECK_THROWS_AS(sac_critic_loss<double>(g, q, q, s, a, y, nn::Mode::train()), shape_error);
  }
}

TEST_CASE("sac_target composes reward, discount, double-Q minimum and entropy") {
  Rng rng(1);
  ConstQ q1{2.0}, q2{1.5};  // min is 1.5
  auto policy = [&](nn::Ctx<double>& g, const Var<double>& s, const nn::Mode&) {
    PolicyHead<double> h;
    h.mean = constant(full<double>({s.shape()[0], 1}, 0.3));
    h.log_std = constant(full<double>({s.shape()[0], 1}, -0.5));
    return h;
  };
  Tensor<double> ns = T::random_tensor({4, 1}, rng);
  Tensor<double> r({4}, {0.1, 0.2, 0.3, 0.4});
  Tensor<double> done({4}, {0, 0, 1, 0});
  Tensor<double> eps({4, 1});
  for (auto& v : eps.v) v = rng.normal();

  Tensor<double> y =
      sac_target<double>(q1, q2, policy, ns, r, done, eps, 0.99, 0.2);

  for (int64_t b = 0; b < 4; ++b) {
    // independent scalar recomputation of the squashed log-density
    const double sigma = std::exp(-0.5);
    const double u = 0.3 + sigma * eps.at(b, 0);
    const double a = std::tanh(u);
    const double logp = -0.5 * eps.at(b, 0) * eps.at(b, 0) - (-0.5) - 0.5 * std::log(2.0 * M_PI) -
                        std::log(1.0 - a * a + 1e-6);
    const double want = r[b] + 0.99 * (1.0 - done[b]) * (1.5 - 0.2 * logp);
    CHECK(y[b] == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("squashed actions stay inside (-1,1) and log-std is clamped") {
  Rng rng(2);
  Tensor<double> s = T::random_tensor({16, 3}, rng, 2.0);

  // clamping: a head bias far outside the range must come back clamped
  {
    PolicyNet<double> pi(3, 2, rng);
    for (int64_t j = 2; j < 4; ++j) pi.head.b[j] = 5.0;
    pi.head.b[2] = -30.0;
    nn::Ctx<double> g;
    PolicyHead<double> head = pi.forward(g, constant(s), nn::Mode::eval());
    for (int64_t i = 0; i < head.log_std.numel(); ++i) {
      CHECK(head.log_std.value()[i] >= kLogStdMin);
      CHECK(head.log_std.value()[i] <= kLogStdMax);
    }
  }

  // bounds: freshly initialized policy, wide noise, actions strictly inside
  {
    PolicyNet<double> pi(3, 2, rng);
    nn::Ctx<double> g;
    PolicyHead<double> head = pi.forward(g, constant(s), nn::Mode::eval());
    Tensor<double> eps({16, 2});
    for (auto& v : eps.v) v = rng.normal() * 3.0;
    PolicySample<double> samp = squash_gaussian(head, eps);
    for (int64_t i = 0; i < samp.action.numel(); ++i) {
      CHECK(samp.action.value()[i] > -1.0);
      CHECK(samp.action.value()[i] < 1.0);
    }
  }
}

TEST_CASE("squashed log-density integrates to 1 on a 1-dim toy") {
  // evaluate exp(logp) over a dense grid of u and integrate over a = tanh(u)
  const double mu = 0.3, log_std = -0.5, sigma = std::exp(log_std);
  const int64_t N = 4001;
  Tensor<double> mean({N, 1}), ls({N, 1}), eps({N, 1});
  std::vector<double> a_grid(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    const double u = mu + (-6.0 + 12.0 * static_cast<double>(i) / static_cast<double>(N - 1)) * sigma;
    mean[i] = mu;
    ls[i] = log_std;
    eps[i] = (u - mu) / sigma;
    a_grid[static_cast<size_t>(i)] = std::tanh(u);
  }
  PolicyHead<double> head{constant(mean), constant(ls)};
  PolicySample<double> samp = squash_gaussian(head, eps);
  double integral = 0;
  for (int64_t i = 0; i + 1 < N; ++i) {
    const double da = a_grid[static_cast<size_t>(i + 1)] - a_grid[static_cast<size_t>(i)];
    integral += 0.5 * (std::exp(samp.logp.value()[i]) + std::exp(samp.logp.value()[i + 1])) * da;
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("actor loss closed forms") {
  SUBCASE("lambda = 0 gives minus the expected min-Q") {
    ConstQ q1{2.0}, q2{3.0};
    auto policy = [&](nn::Ctx<double>& g, const Var<double>& s, const nn::Mode&) {
      PolicyHead<double> h;
      h.mean = constant(zeros<double>({s.shape()[0], 1}));
      h.log_std = constant(zeros<double>({s.shape()[0], 1}));
      return h;
    };
    Tensor<double> s({3, 1}), eps({3, 1});
    nn::Ctx<double> g;
    auto [loss, logp] = sac_actor_loss<double>(g, policy, q1, q2, s, eps, 0.0, nn::Mode::train(),
                                               nn::Mode::frozen());
    CHECK(loss.value()[0] == doctest::Approx(-2.0).epsilon(1e-12));
  }

  SUBCASE("near-delta policy at the argmax of a toy Q") {
    // Q(s,a) = 2 - (a - 0.4)^2, maximized at a = 0.4
    auto q = [](nn::Ctx<double>&, const Var<double>&, const Var<double>& a, const nn::Mode&) {
      Var<double> d = add_scalar(a, -0.4);
      return reshape(add_scalar(neg(square(d)), 2.0), {a.shape()[0]});
    };
    const double target_a = 0.4, log_std = -12.0;
    auto policy = [&](nn::Ctx<double>& g, const Var<double>& s, const nn::Mode&) {
      PolicyHead<double> h;
      h.mean = constant(full<double>({s.shape()[0], 1}, std::atanh(target_a)));
      h.log_std = constant(full<double>({s.shape()[0], 1}, log_std));
      return h;
    };
    Tensor<double> s({2, 1}), eps({2, 1});  // eps = 0: a = tanh(mean) = 0.4 exactly
    const double lambda = 0.1;
    nn::Ctx<double> g;
    auto [loss, logp] = sac_actor_loss<double>(g, policy, q, q, s, eps, lambda, nn::Mode::train(),
                                               nn::Mode::frozen());
    const double logp_want =
        -(-12.0) - 0.5 * std::log(2.0 * M_PI) - std::log(1.0 - 0.16 + 1e-6);
    CHECK(logp.value()[0] == doctest::Approx(logp_want).epsilon(1e-10));
    CHECK(loss.value()[0] == doctest::Approx(lambda * logp_want - 2.0).epsilon(1e-9));
  }
}

TEST_CASE("actor loss gradients match finite differences on a miniature policy") {
  Rng rng(3);
  nn::Dense<double> d1(2, 4, rng), head(4, 2, rng);  // 1-dim action: mean and log-std
  auto policy = [&](nn::Ctx<double>& g, const Var<double>& s, const nn::Mode& m) {
    Var<double> h = relu_op(d1.forward(g, s, m));
    Var<double> o = head.forward(g, h, m);
    PolicyHead<double> ph;
    ph.mean = slice_cols(o, 0, 1);
    ph.log_std = clamp(slice_cols(o, 1, 2), kLogStdMin, kLogStdMax);
    return ph;
  };
  // frozen miniature critics
  nn::Dense<double> qd(3, 1, rng);
  auto q = [&](nn::Ctx<double>& g, const Var<double>& s, const Var<double>& a, const nn::Mode&) {
    Var<double> x = concat_cols(s, a);
    return reshape(tanh_op(qd.forward(g, x, nn::Mode::frozen())), {s.shape()[0]});
  };
  Tensor<double> s = T::random_tensor({5, 2}, rng);
  Tensor<double> eps({5, 1});
  for (auto& v : eps.v) v = rng.normal();

  auto build = [&](nn::Ctx<double>& g) {
    return sac_actor_loss<double>(g, policy, q, q, s, eps, 0.2, nn::Mode::train(), nn::Mode::frozen())
        .first;
  };
  std::vector<Tensor<double>*> params{&d1.W, &d1.b, &head.W, &head.b};
  REQUIRE(T::count_params(params) <= 200);
  nn::Ctx<double> g;
  Var<double> loss = build(g);
  std::vector<Var<double>> wrt;
  for (auto* p : params) wrt.push_back(g.var_of(p));
  auto grads = grad_tensors(loss, wrt);
  auto f = [&]() {
    nn::Ctx<double> g2;
    return build(g2).value()[0];
  };
  CHECK(T::fd_max_rel_err(f, params, grads) < 1e-3);
}

TEST_CASE("entropy coefficient updates") {
  SUBCASE("zero gradient when log-probs sit at minus the target entropy") {
    Tensor<double> log_lambda({1}, {std::log(0.7)});
    Tensor<double> logp = full<double>({8}, 1.0);  // target_entropy = -1
    nn::Ctx<double> g;
    Var<double> loss = entropy_coef_loss<double>(g, log_lambda, logp, -1.0);
    auto grad = grad_tensors(loss, {g.var_of(&log_lambda)});
    CHECK(grad[0][0] == doctest::Approx(0.0).epsilon(1e-15));
    nn::Adam<double> opt({&log_lambda}, 1e-3);
    opt.step({grad[0]});
    CHECK(log_lambda[0] == std::log(0.7));  // unchanged
  }

  SUBCASE("entropy below target raises lambda") {
    Tensor<double> log_lambda({1}, {0.0});
    // logp = 2 -> entropy -2 < target 1 -> coefficient must grow
    Tensor<double> logp = full<double>({4}, 2.0);
    nn::Ctx<double> g;
    Var<double> loss = entropy_coef_loss<double>(g, log_lambda, logp, 1.0);
    auto grad = grad_tensors(loss, {g.var_of(&log_lambda)});
    nn::Adam<double> opt({&log_lambda}, 1e-3);
    opt.step({grad[0]});
    CHECK(log_lambda[0] > 0.0);
  }

  SUBCASE("hand-computed single Adam step in log space") {
    const double l0 = std::log(0.5), mean_term = -0.4;  // E[logp + H0]
    Tensor<double> log_lambda({1}, {l0});
    Tensor<double> logp = full<double>({2}, mean_term);  // target_entropy = 0
    nn::Ctx<double> g;
    Var<double> loss = entropy_coef_loss<double>(g, log_lambda, logp, 0.0);
    auto grad = grad_tensors(loss, {g.var_of(&log_lambda)});
    const double g0 = -std::exp(l0) * mean_term;  // analytic dL/dlog_lambda
    CHECK(grad[0][0] == doctest::Approx(g0).epsilon(1e-12));
    nn::Adam<double> opt({&log_lambda}, 1e-3);
    opt.step({grad[0]});
    const double want = l0 - 1e-3 * g0 / (std::fabs(g0) + 1e-8);
    CHECK(log_lambda[0] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("critic target branch is outside the gradient graph") {
  Rng rng(4);
  SacLearner<double> learner(1, 1, 1e-3, 0.99, 0.005, rng);
  SacBatch<double> batch;
  batch.states = T::random_tensor({4, 1}, rng);
  batch.actions = T::random_tensor({4, 1}, rng, 0.5);
  batch.next_states = T::random_tensor({4, 1}, rng);
  batch.rewards = T::random_tensor({4}, rng);
  batch.done = zeros<double>({4});

  // build the critic loss graph exactly as the learner does and confirm the
  // target networks were never bound
  Rng noise(5);
  auto metrics = learner.update(batch, noise);
  CHECK(std::isfinite(metrics.critic_loss));
  CHECK(std::isfinite(metrics.actor_loss));
  CHECK(metrics.lambda_ent > 0.0);

  nn::Ctx<double> g;
  auto q1f = [&](nn::Ctx<double>& gc, const Var<double>& s, const Var<double>& a, const nn::Mode& m) {
    return learner.q1().forward(gc, s, a, m);
  };
  auto q2f = [&](nn::Ctx<double>& gc, const Var<double>& s, const Var<double>& a, const nn::Mode& m) {
    return learner.q2().forward(gc, s, a, m);
  };
  Tensor<double> y = full<double>({4}, 0.5);
  Var<double> loss = sac_critic_loss<double>(g, q1f, q2f, batch.states, batch.actions, y,
                                             nn::Mode::train());
  (void)loss;
  CHECK_FALSE(g.is_bound(&learner.q1_target().d1.W));
  CHECK_FALSE(g.is_bound(&learner.q2_target().d3.W));
  CHECK(g.is_bound(&learner.q1().d1.W));
}

TEST_CASE("with lambda=0 and gamma=0 the critic converges to the mean reward") {
  Rng rng(6);
  SacLearner<double> learner(1, 1, 1e-3, /*gamma=*/0.0, 0.005, rng);
  // pin the entropy coefficient near zero
  learner.log_ent()[0] = -40.0;

  SacBatch<double> batch;
  batch.states = zeros<double>({8, 1});
  batch.actions = full<double>({8, 1}, 0.25);
  batch.next_states = zeros<double>({8, 1});
  batch.rewards = full<double>({8}, 0.7);
  batch.done = zeros<double>({8});

  Rng noise(7);
  for (int i = 0; i < 3000; ++i) (void)learner.update(batch, noise);

  nn::Ctx<double> g;
  Var<double> q = learner.q1().forward(g, constant(batch.states), constant(batch.actions),
                                       nn::Mode::eval());
  CHECK(std::fabs(q.value()[0] - 0.7) < 1e-3);
}

TEST_CASE("EMA targets trail the online critics") {
  Rng rng(8);
  SacLearner<double> learner(2, 1, 1e-3, 0.99, 0.5, rng);
  const double before = learner.q1_target().d1.W[0];
  // push the online critic away
  learner.q1().d1.W[0] += 1.0;
  nn::ema_update<double>({&learner.q1().d1.W}, {&learner.q1_target().d1.W}, 0.5);
  CHECK(learner.q1_target().d1.W[0] == doctest::Approx(before + 0.5).epsilon(1e-12));
}
