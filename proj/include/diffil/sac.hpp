#pragma once

// Soft actor-critic for the target learner: tanh-squashed diagonal Gaussian
// policy, double Q critics with EMA targets, and automatic entropy
// coefficient adjustment. Loss builders are free functions generic over the
// networks so the gradient oracles can run them on miniature nets.

#include <cmath>
#include <utility>
#include <vector>

#include "diffil/adam.hpp"
#include "diffil/nn.hpp"
#include "diffil/rng.hpp"

namespace diffil {

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kTanhEps = 1e-6;

template <typename T>
struct PolicyHead {
  ag::Var<T> mean;     // [B, A]
  ag::Var<T> log_std;  // [B, A], clamped to [kLogStdMin, kLogStdMax]
};

template <typename T>
struct PolicySample {
  ag::Var<T> action;  // [B, A] in (-1, 1)
  ag::Var<T> logp;    // [B]
};

// Reparameterized sample a = tanh(mu + sigma * eps) with the tanh
// change-of-variables correction on the log-density.
template <typename T>
PolicySample<T> squash_gaussian(const PolicyHead<T>& head, const Tensor<T>& eps) {
  const int64_t B = head.mean.shape()[0], A = head.mean.shape()[1];
  check_shape(eps, {B, A}, "policy noise");
  ag::Var<T> eps_c = ag::constant(eps);
  ag::Var<T> sigma = ag::exp_op(head.log_std);
  ag::Var<T> u = ag::add(head.mean, ag::mul(sigma, eps_c));
  ag::Var<T> a = ag::tanh_op(u);

  // log N(u; mu, sigma) = -eps^2/2 - log sigma - log sqrt(2*pi), per dim
  const T half_log_2pi = static_cast<T>(0.5 * std::log(2.0 * M_PI));
  ag::Var<T> gauss = ag::neg(ag::add(ag::add_scalar(ag::scale(ag::square(eps_c), static_cast<T>(0.5)),
                                                    half_log_2pi),
                                     head.log_std));
  // minus log(1 - tanh(u)^2 + eps) per dim
  ag::Var<T> jac = ag::log_op(ag::add_scalar(ag::neg(ag::square(a)), T{1} + static_cast<T>(kTanhEps)));
  return {a, ag::sum_cols(ag::sub(gauss, jac))};
}

// Dense(256, ReLU) x2 -> Dense(2*A): mean and log-std.
template <typename T>
struct PolicyNet {
  int64_t s_dim = 0, a_dim = 0;
  nn::Dense<T> d1, d2, head;

  PolicyNet() = default;
  PolicyNet(int64_t s, int64_t a, Rng& rng)
      : s_dim(s), a_dim(a), d1(s, 256, rng), d2(256, 256, rng), head(256, 2 * a, rng) {}

  PolicyHead<T> forward(nn::Ctx<T>& g, const ag::Var<T>& states, const nn::Mode& m) {
    ag::Var<T> h = ag::relu_op(d1.forward(g, states, m));
    h = ag::relu_op(d2.forward(g, h, m));
    ag::Var<T> o = head.forward(g, h, m);
    ag::Var<T> mean = ag::slice_cols(o, 0, a_dim);
    ag::Var<T> log_std =
        ag::clamp(ag::slice_cols(o, a_dim, 2 * a_dim), static_cast<T>(kLogStdMin), static_cast<T>(kLogStdMax));
    return {mean, log_std};
  }

  void collect(const std::string& prefix, std::vector<nn::NamedTensor<T>>& out) {
    d1.collect(prefix + ".d1", out);
    d2.collect(prefix + ".d2", out);
    head.collect(prefix + ".head", out);
  }
};

// Dense(256, ReLU) x2 -> Dense(1) on concatenated [state, action].
template <typename T>
struct QNet {
  nn::Dense<T> d1, d2, d3;

  QNet() = default;
  QNet(int64_t s, int64_t a, Rng& rng) : d1(s + a, 256, rng), d2(256, 256, rng), d3(256, 1, rng) {}

  // -> [B]
  ag::Var<T> forward(nn::Ctx<T>& g, const ag::Var<T>& states, const ag::Var<T>& actions,
                     const nn::Mode& m) {
    ag::Var<T> x = ag::concat_cols(states, actions);
    ag::Var<T> h = ag::relu_op(d1.forward(g, x, m));
    h = ag::relu_op(d2.forward(g, h, m));
    ag::Var<T> q = d3.forward(g, h, m);
    return ag::reshape(q, {q.shape()[0]});
  }

  void collect(const std::string& prefix, std::vector<nn::NamedTensor<T>>& out) {
    d1.collect(prefix + ".d1", out);
    d2.collect(prefix + ".d2", out);
    d3.collect(prefix + ".d3", out);
  }
};

// Soft Bellman target: R + gamma * (1-done) * (min(Q'_1,Q'_2)(s',a') -
// lambda_ent * log pi(a'|s')), with a' freshly sampled. Pulled out so the
// critic-loss oracle can drive it with scalar networks.
template <typename T, typename Q1, typename Q2, typename Policy>
Tensor<T> sac_target(Q1&& q1_target, Q2&& q2_target, Policy&& policy, const Tensor<T>& next_states,
                     const Tensor<T>& rewards, const Tensor<T>& done, const Tensor<T>& eps, T gamma,
                     T lambda_ent) {
  nn::Ctx<T> g;
  const nn::Mode m = nn::Mode::eval();
  ag::Var<T> ns = ag::constant(next_states);
  PolicyHead<T> head = policy(g, ns, m);
  PolicySample<T> samp = squash_gaussian(head, eps);
  ag::Var<T> q1v = q1_target(g, ns, samp.action, m);
  ag::Var<T> q2v = q2_target(g, ns, samp.action, m);
  ag::Var<T> soft = ag::sub(ag::min_elem(q1v, q2v), ag::scale(samp.logp, lambda_ent));
  const int64_t B = rewards.shape[0];
  Tensor<T> y({B});
  for (int64_t i = 0; i < B; ++i)
    y[i] = rewards[i] + gamma * (T{1} - done[i]) * soft.value()[i];
  return y;
}

// 1/2 E[(Q(s,a) - y)^2] summed over both online critics; y is already
// detached (a plain tensor).
template <typename T, typename Q1, typename Q2>
ag::Var<T> sac_critic_loss(nn::Ctx<T>& g, Q1&& q1, Q2&& q2, const Tensor<T>& states,
                           const Tensor<T>& actions, const Tensor<T>& target_y, const nn::Mode& m) {
  if (states.shape[0] == 0) throw shape_error("sac_critic_loss: empty batch");
  ag::Var<T> s = ag::constant(states), a = ag::constant(actions), y = ag::constant(target_y);
  ag::Var<T> l1 = ag::mean_all(ag::square(ag::sub(q1(g, s, a, m), y)));
  ag::Var<T> l2 = ag::mean_all(ag::square(ag::sub(q2(g, s, a, m), y)));
  return ag::scale(ag::add(l1, l2), static_cast<T>(0.5));
}

// E[lambda_ent * log pi(a|s) - min(Q1,Q2)(s,a)] with reparameterized actions.
// Call with a trainable policy and frozen critics.
template <typename T, typename Policy, typename Q1, typename Q2>
std::pair<ag::Var<T>, ag::Var<T>> sac_actor_loss(nn::Ctx<T>& g, Policy&& policy, Q1&& q1, Q2&& q2,
                                                 const Tensor<T>& states, const Tensor<T>& eps,
                                                 T lambda_ent, const nn::Mode& policy_mode,
                                                 const nn::Mode& critic_mode) {
  ag::Var<T> s = ag::constant(states);
  PolicyHead<T> head = policy(g, s, policy_mode);
  PolicySample<T> samp = squash_gaussian(head, eps);
  ag::Var<T> qmin = ag::min_elem(q1(g, s, samp.action, critic_mode), q2(g, s, samp.action, critic_mode));
  ag::Var<T> loss = ag::mean_all(ag::sub(ag::scale(samp.logp, lambda_ent), qmin));
  return {loss, samp.logp};
}

// Entropy coefficient objective in log space: E[-exp(log_l) * (logp + H0)].
template <typename T>
ag::Var<T> entropy_coef_loss(nn::Ctx<T>& g, Tensor<T>& log_lambda, const Tensor<T>& logp,
                             T target_entropy) {
  ag::Var<T> ll = g.bind(log_lambda, true);
  Tensor<T> shifted = logp;
  for (auto& v : shifted.v) v += target_entropy;
  T mean{0};
  for (auto v : shifted.v) mean += v;
  mean /= static_cast<T>(shifted.size());
  return ag::neg(ag::mul(ag::exp_op(ll), ag::constant(scalar<T>(mean))));
}

template <typename T>
struct SacBatch {
  Tensor<T> states, actions, next_states;  // [B,S], [B,A], [B,S]
  Tensor<T> rewards, done;                 // [B]
};

template <typename T>
struct SacMetrics {
  T critic_loss{}, actor_loss{}, lambda_ent{}, mean_logp{};
};

// Owns the SAC networks and optimizer state; one per training run. The Adam
// instances hold pointers into this object's tensors, so it is pinned in
// place (no copies or moves).
template <typename T>
class SacLearner {
 public:
  SacLearner(const SacLearner&) = delete;
  SacLearner& operator=(const SacLearner&) = delete;
  SacLearner(SacLearner&&) = delete;
  SacLearner& operator=(SacLearner&&) = delete;

  SacLearner(int64_t s_dim, int64_t a_dim, T lr, T gamma, T tau, Rng& rng)
      : policy_(s_dim, a_dim, rng),
        q1_(s_dim, a_dim, rng),
        q2_(s_dim, a_dim, rng),
        q1_target_(q1_),
        q2_target_(q2_),
        log_ent_({1}),
        gamma_(gamma),
        tau_(tau),
        target_entropy_(static_cast<T>(-a_dim)) {
    policy_opt_ = nn::Adam<T>(params_of_net(policy_, "policy"), lr);
    q_opt_ = nn::Adam<T>(q_params(), lr);
    ent_opt_ = nn::Adam<T>({&log_ent_}, lr);
  }

  PolicyNet<T>& policy() { return policy_; }
  QNet<T>& q1() { return q1_; }
  QNet<T>& q2() { return q2_; }
  QNet<T>& q1_target() { return q1_target_; }
  QNet<T>& q2_target() { return q2_target_; }
  T lambda_ent() const { return static_cast<T>(std::exp(static_cast<double>(log_ent_[0]))); }
  T gamma() const { return gamma_; }
  T tau() const { return tau_; }
  T target_entropy() const { return target_entropy_; }
  Tensor<T>& log_ent() { return log_ent_; }
  nn::Adam<T>& policy_opt() { return policy_opt_; }
  nn::Adam<T>& q_opt() { return q_opt_; }
  nn::Adam<T>& ent_opt() { return ent_opt_; }

  // One full SAC update on a reward-annotated batch.
  SacMetrics<T> update(const SacBatch<T>& batch, Rng& rng) {
    const int64_t B = batch.states.shape[0], A = policy_.a_dim;
    SacMetrics<T> metrics;
    const T lam = lambda_ent();

    // critic step
    {
      Tensor<T> eps = noise(B, A, rng);
      auto pol = [&](nn::Ctx<T>& g, const ag::Var<T>& s, const nn::Mode& m) {
        return policy_.forward(g, s, m);
      };
      auto q1t = [&](nn::Ctx<T>& g, const ag::Var<T>& s, const ag::Var<T>& a, const nn::Mode& m) {
        return q1_target_.forward(g, s, a, m);
      };
      auto q2t = [&](nn::Ctx<T>& g, const ag::Var<T>& s, const ag::Var<T>& a, const nn::Mode& m) {
        return q2_target_.forward(g, s, a, m);
      };
      Tensor<T> y = sac_target<T>(q1t, q2t, pol, batch.next_states, batch.rewards, batch.done, eps,
                                  gamma_, lam);
      nn::Ctx<T> g;
      auto q1f = [&](nn::Ctx<T>& gc, const ag::Var<T>& s, const ag::Var<T>& a, const nn::Mode& m) {
        return q1_.forward(gc, s, a, m);
      };
      auto q2f = [&](nn::Ctx<T>& gc, const ag::Var<T>& s, const ag::Var<T>& a, const nn::Mode& m) {
        return q2_.forward(gc, s, a, m);
      };
      ag::Var<T> loss = sac_critic_loss<T>(g, q1f, q2f, batch.states, batch.actions, y, nn::Mode::train());
      metrics.critic_loss = loss.value()[0];
      apply(g, loss, q_opt_);
    }

    // actor step
    Tensor<T> logp_vals;
    {
      Tensor<T> eps = noise(B, A, rng);
      nn::Ctx<T> g;
      auto pol = [&](nn::Ctx<T>& gc, const ag::Var<T>& s, const nn::Mode& m) {
        return policy_.forward(gc, s, m);
      };
      auto q1f = [&](nn::Ctx<T>& gc, const ag::Var<T>& s, const ag::Var<T>& a, const nn::Mode&) {
        return q1_.forward(gc, s, a, nn::Mode::frozen());
      };
      auto q2f = [&](nn::Ctx<T>& gc, const ag::Var<T>& s, const ag::Var<T>& a, const nn::Mode&) {
        return q2_.forward(gc, s, a, nn::Mode::frozen());
      };
      auto [loss, logp] = sac_actor_loss<T>(g, pol, q1f, q2f, batch.states, eps, lam,
                                            nn::Mode::train(), nn::Mode::frozen());
      metrics.actor_loss = loss.value()[0];
      logp_vals = logp.value();
      apply(g, loss, policy_opt_);
    }

    // entropy coefficient step
    {
      nn::Ctx<T> g;
      ag::Var<T> loss = entropy_coef_loss(g, log_ent_, logp_vals, target_entropy_);
      apply(g, loss, ent_opt_);
      T acc{0};
      for (auto v : logp_vals.v) acc += v;
      metrics.mean_logp = acc / static_cast<T>(logp_vals.size());
    }

    // EMA targets
    nn::ema_update(q_params_online(), q_params_target(), tau_);
    metrics.lambda_ent = lambda_ent();
    return metrics;
  }

  // Action for environment interaction; deterministic uses tanh(mean).
  std::vector<float> act(const std::vector<float>& state, Rng& rng, bool deterministic) {
    nn::Ctx<T> g;
    Tensor<T> s({1, policy_.s_dim});
    for (int64_t i = 0; i < policy_.s_dim; ++i) s[i] = static_cast<T>(state[static_cast<size_t>(i)]);
    PolicyHead<T> head = policy_.forward(g, ag::constant(std::move(s)), nn::Mode::eval());
    std::vector<float> a(static_cast<size_t>(policy_.a_dim));
    if (deterministic) {
      for (int64_t i = 0; i < policy_.a_dim; ++i)
        a[static_cast<size_t>(i)] = static_cast<float>(std::tanh(static_cast<double>(head.mean.value()[i])));
    } else {
      for (int64_t i = 0; i < policy_.a_dim; ++i) {
        const double u = static_cast<double>(head.mean.value()[i]) +
                         std::exp(static_cast<double>(head.log_std.value()[i])) * rng.normal();
        a[static_cast<size_t>(i)] = static_cast<float>(std::tanh(u));
      }
    }
    return a;
  }

  void collect(std::vector<nn::NamedTensor<T>>& out) {
    policy_.collect("policy", out);
    q1_.collect("q1", out);
    q2_.collect("q2", out);
    q1_target_.collect("q1_target", out);
    q2_target_.collect("q2_target", out);
    out.push_back({"entropy.log_lambda", &log_ent_, true});
  }

  std::vector<nn::Adam<T>*> optimizers() { return {&policy_opt_, &q_opt_, &ent_opt_}; }

 private:
  static Tensor<T> noise(int64_t B, int64_t A, Rng& rng) {
    Tensor<T> eps({B, A});
    for (auto& v : eps.v) v = static_cast<T>(rng.normal());
    return eps;
  }

  template <typename Net>
  static std::vector<Tensor<T>*> params_of_net(Net& net, const std::string& name) {
    std::vector<nn::NamedTensor<T>> named;
    net.collect(name, named);
    return nn::params_of(named);
  }

  std::vector<Tensor<T>*> q_params() {
    auto p = params_of_net(q1_, "q1");
    auto p2 = params_of_net(q2_, "q2");
    p.insert(p.end(), p2.begin(), p2.end());
    return p;
  }
  std::vector<Tensor<T>*> q_params_online() { return q_params(); }
  std::vector<Tensor<T>*> q_params_target() {
    auto p = params_of_net(q1_target_, "q1t");
    auto p2 = params_of_net(q2_target_, "q2t");
    p.insert(p.end(), p2.begin(), p2.end());
    return p;
  }

  void apply(nn::Ctx<T>& g, const ag::Var<T>& loss, nn::Adam<T>& opt) {
    std::vector<ag::Var<T>> wrt;
    wrt.reserve(opt.params().size());
    for (Tensor<T>* p : opt.params()) wrt.push_back(g.var_of(p));
    opt.step(ag::grad_tensors(loss, wrt));
  }

  PolicyNet<T> policy_;
  QNet<T> q1_, q2_, q1_target_, q2_target_;
  Tensor<T> log_ent_;
  nn::Adam<T> policy_opt_, q_opt_, ent_opt_;
  T gamma_ = static_cast<T>(0.99), tau_ = static_cast<T>(0.005), target_entropy_ = -1;
};

}  // namespace diffil
