#pragma once

// Sequence and frame label discriminators, frame-wise time labels, the BCE
// label losses, and the reward derived from the two label scores.

#include <vector>

#include "diffil/data_model.hpp"
#include "diffil/nn.hpp"
#include "diffil/rng.hpp"

namespace diffil {

inline constexpr double kRewardEps = 1e-12;
inline constexpr double kBceClip = 1e-7;

// BatchNorm -> Dense(400, LeakyReLU) -> Dense(300, LeakyReLU) -> Dense(1, Sigmoid).
template <typename T>
struct LabelNet {
  nn::BatchNorm1d<T> bn;
  nn::Dense<T> d1, d2, d3;

  LabelNet() = default;
  LabelNet(int64_t in, Rng& rng) : bn(in), d1(in, 400, rng), d2(400, 300, rng), d3(300, 1, rng) {}

  // -> [B, 1] in (0, 1)
  ag::Var<T> forward(nn::Ctx<T>& g, const ag::Var<T>& x, const nn::Mode& m) {
    const T slope = static_cast<T>(0.2);
    ag::Var<T> h = bn.forward(g, x, m);
    h = ag::leaky_relu(d1.forward(g, h, m), slope);
    h = ag::leaky_relu(d2.forward(g, h, m), slope);
    return ag::sigmoid_op(d3.forward(g, h, m));
  }

  void collect(const std::string& prefix, std::vector<nn::NamedTensor<T>>& out) {
    bn.collect(prefix + ".bn", out);
    d1.collect(prefix + ".d1", out);
    d2.collect(prefix + ".d2", out);
    d3.collect(prefix + ".d3", out);
  }
};

// y_t = ((t / H_tau) + 1) / 2 for expert frames, 0 otherwise.
inline double time_label(int64_t t, int64_t h_tau, bool is_expert) {
  if (h_tau < 1) throw shape_error("time_label: episode length must be >= 1");
  if (t < 0 || t > h_tau)
    throw shape_error("time_label: t=" + std::to_string(t) + " outside [0, " + std::to_string(h_tau) +
                      "]");
  if (!is_expert) return 0.0;
  return (static_cast<double>(t) / static_cast<double>(h_tau) + 1.0) / 2.0;
}

inline double time_label(const Frame& f) {
  return time_label(f.t, f.episode_len(), f.provenance() == ProvenanceTag::SOURCE_EXPERT);
}

// Soft-target binary cross entropy with probability clipping; p, y are [B,1]
// and [B]; returns per-sample values [B].
template <typename T>
ag::Var<T> bce(const ag::Var<T>& p, const ag::Var<T>& y) {
  const int64_t B = y.shape()[0];
  ag::Var<T> pc = ag::clamp(ag::reshape(p, {B}), static_cast<T>(kBceClip), T{1} - static_cast<T>(kBceClip));
  ag::Var<T> one_minus_y = ag::add_scalar(ag::neg(y), T{1});
  ag::Var<T> one_minus_p = ag::add_scalar(ag::neg(pc), T{1});
  return ag::neg(ag::add(ag::mul(y, ag::log_op(pc)), ag::mul(one_minus_y, ag::log_op(one_minus_p))));
}

template <typename T>
struct LabelLossWeights {
  T seq_source = 10;            // lambda_label,s^S
  T seq_target = static_cast<T>(1e-3);  // lambda_label,s^T
  T frame = 10;                 // lambda_label,f
};

// Sequence label loss over both domains. Targets are 1 for SOURCE_EXPERT
// sequences, 0 otherwise. Gradients flow into the label net and the encoder
// (pass attached latents).
template <typename T, typename Net>
ag::Var<T> seq_label_loss(nn::Ctx<T>& g, Net&& label_s, const ag::Var<T>& zSeqS,
                          const std::vector<ProvenanceTag>& provS, const ag::Var<T>& zSeqT,
                          const std::vector<ProvenanceTag>& provT, const LabelLossWeights<T>& w,
                          const nn::Mode& m) {
  if (static_cast<int64_t>(provS.size()) != zSeqS.shape()[0] ||
      static_cast<int64_t>(provT.size()) != zSeqT.shape()[0])
    throw shape_error("seq_label_loss: provenance count does not match batch");
  Tensor<T> yS({static_cast<int64_t>(provS.size())});
  for (size_t i = 0; i < provS.size(); ++i)
    yS[static_cast<int64_t>(i)] = provS[i] == ProvenanceTag::SOURCE_EXPERT ? T{1} : T{0};
  Tensor<T> yT({static_cast<int64_t>(provT.size())});  // target domain has no expert data

  ag::Var<T> ps = label_s(g, zSeqS, m);
  ag::Var<T> ls = ag::mean_all(bce(ps, ag::constant(std::move(yS))));
  ag::Var<T> pt = label_s(g, zSeqT, m);
  ag::Var<T> lt = ag::mean_all(bce(pt, ag::constant(std::move(yT))));
  return ag::add(ag::scale(ls, w.seq_source), ag::scale(lt, w.seq_target));
}

// Frame label loss, source domain only; targets are time labels. Gradients
// reach the label net alone — latents are detached here.
template <typename T, typename Net>
ag::Var<T> frame_label_loss(nn::Ctx<T>& g, Net&& label_f, const ag::Var<T>& zS,
                            const std::vector<ProvenanceTag>& prov, const Tensor<T>& y,
                            const LabelLossWeights<T>& w, const nn::Mode& m) {
  if (static_cast<int64_t>(prov.size()) != zS.shape()[0] || y.size() != zS.shape()[0])
    throw shape_error("frame_label_loss: batch size mismatch");
  for (ProvenanceTag p : prov)
    if (domain_of(p) != DomainTag::SOURCE)
      throw shape_error("frame_label_loss: target-domain frame in a source-only loss");
  ag::Var<T> pf = label_f(g, ag::detach(zS), m);
  return ag::scale(ag::mean_all(bce(pf, ag::constant(y))), w.frame);
}

// R = -log(1 - F_s(zseq) * F_f(z) + eps); label nets run in eval mode against
// frozen snapshots, so this is a plain tensor computation.
template <typename T, typename NetS, typename NetF>
Tensor<T> reward_batch(NetS&& label_s, NetF&& label_f, const Tensor<T>& zseq_next,
                       const Tensor<T>& z_next, bool use_frame_labels = true) {
  nn::Ctx<T> g;
  const nn::Mode m = nn::Mode::eval();
  ag::Var<T> fs = label_s(g, ag::constant(zseq_next), m);
  const int64_t B = zseq_next.shape[0];
  Tensor<T> out({B});
  if (use_frame_labels) {
    ag::Var<T> ff = label_f(g, ag::constant(z_next), m);
    for (int64_t i = 0; i < B; ++i) {
      const double prod = static_cast<double>(fs.value()[i]) * static_cast<double>(ff.value()[i]);
      out[i] = static_cast<T>(-std::log(1.0 - prod + kRewardEps));
    }
  } else {
    for (int64_t i = 0; i < B; ++i)
      out[i] = static_cast<T>(-std::log(1.0 - static_cast<double>(fs.value()[i]) + kRewardEps));
  }
  return out;
}

// Scalar form of the reward for fixed label scores.
inline double reward_value(double f_s, double f_f) {
  return -std::log(1.0 - f_s * f_f + kRewardEps);
}

}  // namespace diffil
