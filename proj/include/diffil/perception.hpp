#pragma once

// Shared encoder p, domain decoders q^S / q^T, and the encoder-decoder loss
// (reconstruction + feature consistency with a stop-gradient target).

#include <vector>

#include "diffil/data_model.hpp"
#include "diffil/nn.hpp"

namespace diffil {

// Per-sample L2 norm of [B, D] rows, averaged over the batch.
template <typename T>
ag::Var<T> mean_row_norm(const ag::Var<T>& diff) {
  return ag::mean_all(ag::sqrt_op(ag::sum_cols(ag::square(diff))));
}

// Conv stack 16,16,32,32,64,64 (strides 1,2,1,2,1,2), flatten, dense to F.
template <typename T>
struct Encoder {
  int64_t H = 32, W = 32, F = 32;
  nn::Conv2d<T> c1, c2, c3, c4, c5, c6;
  nn::Dense<T> head;

  Encoder() = default;
  Encoder(int64_t h, int64_t w, int64_t f, Rng& rng)
      : H(h),
        W(w),
        F(f),
        c1(3, 16, 1, rng),
        c2(16, 16, 2, rng),
        c3(16, 32, 1, rng),
        c4(32, 32, 2, rng),
        c5(32, 64, 1, rng),
        c6(64, 64, 2, rng),
        head(flat_dim(h, w), f, rng) {}

  static int64_t flat_dim(int64_t h, int64_t w) {
    const int64_t oh = (((h + 1) / 2 + 1) / 2 + 1) / 2;
    const int64_t ow = (((w + 1) / 2 + 1) / 2 + 1) / 2;
    return oh * ow * 64;
  }

  // x: [B, H, W, 3] floats in [0,1] -> [B, F]
  ag::Var<T> forward(nn::Ctx<T>& g, const ag::Var<T>& x, const nn::Mode& m) {
    if (x.shape().size() != 4 || x.shape()[1] != H || x.shape()[2] != W || x.shape()[3] != 3)
      throw shape_error("encoder input must be [B," + std::to_string(H) + "," + std::to_string(W) +
                        ",3], got " + shape_str(x.shape()));
    const T slope = static_cast<T>(0.2);
    ag::Var<T> h = c1.forward_act(g, x, m, slope);
    h = c2.forward_act(g, h, m, slope);
    h = c3.forward_act(g, h, m, slope);
    h = c4.forward_act(g, h, m, slope);
    h = c5.forward_act(g, h, m, slope);
    h = c6.forward_act(g, h, m, slope);
    const int64_t B = h.shape()[0];
    h = ag::reshape(h, {B, h.shape()[1] * h.shape()[2] * h.shape()[3]});
    return head.forward(g, h, m);
  }

  void collect(const std::string& prefix, std::vector<nn::NamedTensor<T>>& out) {
    c1.collect(prefix + ".c1", out);
    c2.collect(prefix + ".c2", out);
    c3.collect(prefix + ".c3", out);
    c4.collect(prefix + ".c4", out);
    c5.collect(prefix + ".c5", out);
    c6.collect(prefix + ".c6", out);
    head.collect(prefix + ".head", out);
  }
};

// Dense projection to the smallest spatial grid, then transposed convs
// 64,64,32,32,16,16 and a linear 3-channel output layer.
template <typename T>
struct Decoder {
  int64_t H = 32, W = 32, F = 32;
  int64_t h0 = 4, w0 = 4;
  nn::Dense<T> proj;
  nn::ConvTranspose2d<T> t1, t2, t3, t4, t5, t6, out;

  Decoder() = default;
  Decoder(int64_t h, int64_t w, int64_t f, Rng& rng)
      : H(h),
        W(w),
        F(f),
        h0((((h + 1) / 2 + 1) / 2 + 1) / 2),
        w0((((w + 1) / 2 + 1) / 2 + 1) / 2),
        proj(f, h0 * w0 * 64, rng),
        t1(64, 64, 1, rng),
        t2(64, 64, 2, rng),
        t3(64, 32, 1, rng),
        t4(32, 32, 2, rng),
        t5(32, 16, 1, rng),
        t6(16, 16, 2, rng),
        out(16, 3, 1, rng) {}

  // z: [B, F] -> [B, H, W, 3], linear output (unclamped)
  ag::Var<T> forward(nn::Ctx<T>& g, const ag::Var<T>& z, const nn::Mode& m) {
    const T slope = static_cast<T>(0.2);
    const int64_t B = z.shape()[0];
    ag::Var<T> h = ag::leaky_relu(proj.forward(g, z, m), slope);
    h = ag::reshape(h, {B, h0, w0, 64});
    h = t1.forward_act(g, h, m, slope);
    h = t2.forward_act(g, h, m, slope);
    h = t3.forward_act(g, h, m, slope);
    h = t4.forward_act(g, h, m, slope);
    h = t5.forward_act(g, h, m, slope);
    h = t6.forward_act(g, h, m, slope);
    return out.forward_act(g, h, m, T{1});
  }

  void collect(const std::string& prefix, std::vector<nn::NamedTensor<T>>& out_v) {
    proj.collect(prefix + ".proj", out_v);
    t1.collect(prefix + ".t1", out_v);
    t2.collect(prefix + ".t2", out_v);
    t3.collect(prefix + ".t3", out_v);
    t4.collect(prefix + ".t4", out_v);
    t5.collect(prefix + ".t5", out_v);
    t6.collect(prefix + ".t6", out_v);
    out.collect(prefix + ".out", out_v);
  }
};

template <typename T>
struct EncDecLossTerms {
  ag::Var<T> recon;  // sum over domains of E||o - q^d(z)||_2
  ag::Var<T> fcon;   // sum over domains of E||stopgrad(z) - p(q^{d'}(z))||_2
  ag::Var<T> total;  // lambda_recon * recon + lambda_fcon * fcon
};

// Encoder-decoder objective over generic callables (Ctx&, Var, Mode) so the
// closed-form oracles can instantiate it with hand-built linear networks.
// Gradients flow everywhere except through the stopped consistency target.
template <typename T, typename Enc, typename Dec>
EncDecLossTerms<T> enc_dec_loss_fn(nn::Ctx<T>& g, Enc&& encode_fn, Dec&& decode_fn,
                                   const ag::Var<T>& xS, const ag::Var<T>& xT, T lambda_recon,
                                   T lambda_fcon, const nn::Mode& m) {
  if (xS.shape()[0] == 0 || xT.shape()[0] == 0) throw shape_error("enc_dec_loss: empty batch");
  auto per_domain = [&](const ag::Var<T>& x, DomainTag d) {
    const int64_t B = x.shape()[0];
    ag::Var<T> z = encode_fn(g, x, m);
    ag::Var<T> ohat = decode_fn(g, z, d, m);
    ag::Var<T> recon = mean_row_norm(ag::reshape(ag::sub(x, ohat), {B, x.numel() / B}));
    const DomainTag opposite = d == DomainTag::SOURCE ? DomainTag::TARGET : DomainTag::SOURCE;
    ag::Var<T> cross = decode_fn(g, z, opposite, m);
    ag::Var<T> zhat = encode_fn(g, cross, m);
    ag::Var<T> fcon = mean_row_norm(ag::sub(ag::detach(z), zhat));
    return std::pair{recon, fcon};
  };
  auto [recon_s, fcon_s] = per_domain(xS, DomainTag::SOURCE);
  auto [recon_t, fcon_t] = per_domain(xT, DomainTag::TARGET);
  EncDecLossTerms<T> out;
  out.recon = ag::add(recon_s, recon_t);
  out.fcon = ag::add(fcon_s, fcon_t);
  out.total = ag::add(ag::scale(out.recon, lambda_recon), ag::scale(out.fcon, lambda_fcon));
  return out;
}

template <typename T>
struct Perception {
  Encoder<T> encoder;
  Decoder<T> dec_source, dec_target;

  Perception() = default;
  Perception(int64_t h, int64_t w, int64_t f, Rng& rng)
      : encoder(h, w, f, rng), dec_source(h, w, f, rng), dec_target(h, w, f, rng) {}

  ag::Var<T> encode(nn::Ctx<T>& g, const ag::Var<T>& x, const nn::Mode& m) {
    return encoder.forward(g, x, m);
  }

  // Frame-major [B*L, H, W, 3] -> [B, L*F]; row-block i of sequence b is the
  // latent of frame i, so this is exactly the ordered concatenation.
  ag::Var<T> encode_sequence(nn::Ctx<T>& g, const ag::Var<T>& x, int64_t L, const nn::Mode& m) {
    const int64_t BL = x.shape()[0];
    if (BL % L != 0) throw shape_error("encode_sequence: batch not a multiple of L");
    ag::Var<T> z = encode(g, x, m);  // [B*L, F]
    return ag::reshape(z, {BL / L, L * encoder.F});
  }

  ag::Var<T> decode(nn::Ctx<T>& g, const ag::Var<T>& z, DomainTag d, const nn::Mode& m) {
    return d == DomainTag::SOURCE ? dec_source.forward(g, z, m) : dec_target.forward(g, z, m);
  }

  // Encoder-decoder objective on this module's networks; xS/xT are
  // [B, H, W, 3] in [0,1].
  EncDecLossTerms<T> enc_dec_loss(nn::Ctx<T>& g, const ag::Var<T>& xS, const ag::Var<T>& xT,
                                  T lambda_recon, T lambda_fcon, const nn::Mode& m) {
    auto enc = [this](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& mm) {
      return encode(gc, x, mm);
    };
    auto dec = [this](nn::Ctx<T>& gc, const ag::Var<T>& z, DomainTag d, const nn::Mode& mm) {
      return decode(gc, z, d, mm);
    };
    return enc_dec_loss_fn(g, enc, dec, xS, xT, lambda_recon, lambda_fcon, m);
  }

  void collect(std::vector<nn::NamedTensor<T>>& out) {
    encoder.collect("encoder", out);
    dec_source.collect("decoder_source", out);
    dec_target.collect("decoder_target", out);
  }
};

}  // namespace diffil
