#pragma once

// Frame and sequence WGAN critics, the alpha-weighted unified discriminator /
// generator losses, the gradient penalty, and the critic:generator update
// schedule.
//
// Loss builders are generic over the critic callables (Ctx&, Var, Mode) ->
// [B,1] so that tests can substitute hand-built linear critics with known
// closed forms.

#include <utility>
#include <vector>

#include "diffil/nn.hpp"
#include "diffil/rng.hpp"

namespace diffil {

// BatchNorm -> Dense(400, LeakyReLU) -> Dense(300, LeakyReLU) -> Dense(1).
template <typename T>
struct CriticNet {
  nn::BatchNorm1d<T> bn;
  nn::Dense<T> d1, d2, d3;

  CriticNet() = default;
  CriticNet(int64_t in, Rng& rng) : bn(in), d1(in, 400, rng), d2(400, 300, rng), d3(300, 1, rng) {}

  ag::Var<T> forward(nn::Ctx<T>& g, const ag::Var<T>& x, const nn::Mode& m) {
    const T slope = static_cast<T>(0.2);
    ag::Var<T> h = bn.forward(g, x, m);
    h = ag::leaky_relu(d1.forward(g, h, m), slope);
    h = ag::leaky_relu(d2.forward(g, h, m), slope);
    return d3.forward(g, h, m);
  }

  void collect(const std::string& prefix, std::vector<nn::NamedTensor<T>>& out) {
    bn.collect(prefix + ".bn", out);
    d1.collect(prefix + ".d1", out);
    d2.collect(prefix + ".d2", out);
    d3.collect(prefix + ".d3", out);
  }
};

template <typename T>
struct WganWeights {
  T lambda_disc = 1;
  T lambda_gen = 1;
  T lambda_gp = 10;
  T alpha = static_cast<T>(0.5);
  bool sequence_only = false;  // ablation: drop the per-frame WGAN stream
};

// Scalar graph nodes for each term. unified_* are the training objectives.
template <typename T>
struct WganLossTerms {
  ag::Var<T> disc_f, disc_s, gen_f, gen_s, gp;
  ag::Var<T> unified_disc, unified_gen;
};

namespace detail {

template <typename T>
ag::Var<T> alpha_combine(const WganWeights<T>& w, const ag::Var<T>& frame_term,
                         const ag::Var<T>& seq_term) {
  if (w.sequence_only) return seq_term;
  return ag::add(ag::scale(frame_term, w.alpha), ag::scale(seq_term, T{1} - w.alpha));
}

}  // namespace detail

// Interpolates per-sample: delta * a + (1 - delta) * b. Returned as a fresh
// differentiable leaf so the critic's gradient at the interpolate can be
// requested; nothing upstream of it needs gradients (a and b are detached
// latents).
template <typename T>
ag::Var<T> interpolate_rows(const ag::Var<T>& a, const ag::Var<T>& b, const Tensor<T>& delta) {
  check_rank(delta, 1, "interpolation factor");
  const int64_t B = a.shape()[0], N = a.shape()[1];
  if (delta.size() != B) throw shape_error("interpolation factor count does not match batch");
  for (int64_t i = 0; i < delta.size(); ++i)
    if (delta[i] < T{0} || delta[i] > T{1})
      throw shape_error("interpolation factor outside [0,1]");
  Tensor<T> out({B, N});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j)
      out.at(i, j) = delta[i] * a.value().at(i, j) + (T{1} - delta[i]) * b.value().at(i, j);
  return ag::leaf(std::move(out));
}

// Gradient penalty at interpolated latents: the frame-critic gradient
// (weighted alpha) and the sequence-critic gradient (weighted 1-alpha) are
// concatenated per sample, reduced by one Euclidean norm, and penalized by
// the squared distance to 1.
template <typename T, typename CriticF, typename CriticS>
ag::Var<T> gradient_penalty(nn::Ctx<T>& g, CriticF&& critic_f, CriticS&& critic_s,
                            const ag::Var<T>& zS, const ag::Var<T>& zT, const ag::Var<T>& zSeqS,
                            const ag::Var<T>& zSeqT, const WganWeights<T>& w, const Tensor<T>& delta,
                            const nn::Mode& m) {
  const int64_t B = zS.shape()[0];
  ag::Var<T> grad_f, grad_s;
  if (!w.sequence_only) {
    ag::Var<T> df = interpolate_rows(zS, zT, delta);
    ag::Var<T> out_f = critic_f(g, df, m);
    grad_f = ag::gradients(ag::sum_all(out_f), {df})[0];  // [B, F]
  }
  {
    ag::Var<T> ds = interpolate_rows(zSeqS, zSeqT, delta);
    ag::Var<T> out_s = critic_s(g, ds, m);
    grad_s = ag::gradients(ag::sum_all(out_s), {ds})[0];  // [B, L*F]
  }
  ag::Var<T> combined;
  if (w.sequence_only) {
    combined = grad_s;
  } else {
    combined = ag::concat_cols(ag::scale(grad_f, w.alpha), ag::scale(grad_s, T{1} - w.alpha));
  }
  ag::Var<T> norms = ag::sqrt_op(ag::sum_cols(ag::square(combined)));  // [B]
  (void)B;
  return ag::mean_all(ag::square(ag::add_scalar(norms, T{-1})));
}

// Discriminator objective. Latents are detached internally: only the critics
// receive gradients. Pass critic modes with trainable parameters; the
// gradient-penalty pass should not refresh BatchNorm statistics.
template <typename T, typename CriticF, typename CriticS>
WganLossTerms<T> disc_loss(nn::Ctx<T>& g, CriticF&& critic_f, CriticS&& critic_s, const ag::Var<T>& zS,
                           const ag::Var<T>& zT, const ag::Var<T>& zSeqS, const ag::Var<T>& zSeqT,
                           const WganWeights<T>& w, const Tensor<T>& delta, const nn::Mode& real_mode,
                           const nn::Mode& gp_mode) {
  if (zS.shape()[0] != zT.shape()[0] || zSeqS.shape()[0] != zSeqT.shape()[0] ||
      zS.shape()[0] != zSeqS.shape()[0])
    throw shape_error("disc_loss: batch sizes of the four latent batches must match");
  ag::Var<T> s = ag::detach(zS), t = ag::detach(zT);
  ag::Var<T> ss = ag::detach(zSeqS), st = ag::detach(zSeqT);

  WganLossTerms<T> out;
  // Passes are sequenced source-then-target so BatchNorm statistic updates
  // happen in a fixed order.
  if (w.sequence_only) {
    out.disc_f = ag::constant(T{0});
  } else {
    ag::Var<T> on_s = critic_f(g, s, real_mode);
    ag::Var<T> on_t = critic_f(g, t, real_mode);
    out.disc_f = ag::mean_all(ag::sub(on_t, on_s));
  }
  {
    ag::Var<T> on_s = critic_s(g, ss, real_mode);
    ag::Var<T> on_t = critic_s(g, st, real_mode);
    out.disc_s = ag::mean_all(ag::sub(on_t, on_s));
  }
  out.gp = gradient_penalty(g, critic_f, critic_s, s, t, ss, st, w, delta, gp_mode);
  out.unified_disc = ag::add(ag::scale(detail::alpha_combine(w, out.disc_f, out.disc_s), w.lambda_disc),
                             ag::scale(out.gp, w.lambda_gp));
  out.gen_f = ag::neg(out.disc_f);
  out.gen_s = ag::neg(out.disc_s);
  out.unified_gen = ag::scale(detail::alpha_combine(w, out.gen_f, out.gen_s), w.lambda_gen);
  return out;
}

// Generator objective. Latents stay attached (the encoder is the generator);
// call with frozen critics so their parameters receive no gradient.
template <typename T, typename CriticF, typename CriticS>
WganLossTerms<T> gen_loss(nn::Ctx<T>& g, CriticF&& critic_f, CriticS&& critic_s, const ag::Var<T>& zS,
                          const ag::Var<T>& zT, const ag::Var<T>& zSeqS, const ag::Var<T>& zSeqT,
                          const WganWeights<T>& w, const nn::Mode& critic_mode) {
  if (zS.shape()[0] != zT.shape()[0] || zSeqS.shape()[0] != zSeqT.shape()[0])
    throw shape_error("gen_loss: batch sizes of the four latent batches must match");
  WganLossTerms<T> out;
  if (w.sequence_only) {
    out.gen_f = ag::constant(T{0});
  } else {
    ag::Var<T> on_s = critic_f(g, zS, critic_mode);
    ag::Var<T> on_t = critic_f(g, zT, critic_mode);
    out.gen_f = ag::mean_all(ag::sub(on_s, on_t));
  }
  {
    ag::Var<T> on_s = critic_s(g, zSeqS, critic_mode);
    ag::Var<T> on_t = critic_s(g, zSeqT, critic_mode);
    out.gen_s = ag::mean_all(ag::sub(on_s, on_t));
  }
  out.disc_f = ag::neg(out.gen_f);
  out.disc_s = ag::neg(out.gen_s);
  out.gp = ag::constant(T{0});
  out.unified_gen = ag::scale(detail::alpha_combine(w, out.gen_f, out.gen_s), w.lambda_gen);
  out.unified_disc = ag::scale(detail::alpha_combine(w, out.disc_f, out.disc_s), w.lambda_disc);
  return out;
}

// Critic updates run every step; encoder/decoder/label updates run on steps
// where k mod n == 0 (k is 1-based), giving the n:1 training ratio.
class UpdateSchedule {
 public:
  explicit UpdateSchedule(int64_t n) : n_(n) {
    if (n < 1) throw config_error("generator period n must be >= 1");
  }

  int64_t n() const { return n_; }
  bool critic_step(int64_t) const { return true; }
  bool generator_step(int64_t k) const { return k % n_ == 0; }

  int64_t critic_updates(int64_t steps) const { return steps; }
  int64_t generator_updates(int64_t steps) const { return steps / n_; }

 private:
  int64_t n_;
};

}  // namespace diffil
