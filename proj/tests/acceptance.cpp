// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line. Criteria 5-8 share six trained runs (three full, three ablated) that
// are cached on disk and reused across invocations when complete.

#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>

#include "diffil/analysis.hpp"
#include "diffil/orchestrator.hpp"
#include "test_util.hpp"

using namespace diffil;
using namespace diffil::ag;
namespace fs = std::filesystem;
namespace T = diffil::testing;

namespace {

bool g_all_pass = true;

void report(int id, const char* name, bool pass) {
  std::printf("[ACCEPTANCE] criterion %d (%s): %s\n", id, name, pass ? "PASS" : "FAIL");
  std::fflush(stdout);
  if (!pass) g_all_pass = false;
  CHECK_MESSAGE(pass, "criterion ", id, " (", name, ")");
}

// ---------------------------------------------------------------------------
// miniature networks for the gradient oracles (all well under 200 params)
// ---------------------------------------------------------------------------

struct MiniCritic {
  nn::BatchNorm1d<double> bn;
  nn::Dense<double> d1, d2;
  MiniCritic(int64_t in, int64_t hidden, Rng& rng) : bn(in), d1(in, hidden, rng), d2(hidden, 1, rng) {
    for (auto& v : bn.gamma.v) v = 1.0 + 0.2 * rng.normal();
  }
  Var<double> operator()(nn::Ctx<double>& g, const Var<double>& z, const nn::Mode& m) {
    Var<double> h = bn.forward(g, z, m);
    h = leaky_relu(d1.forward(g, h, m), 0.2);
    return d2.forward(g, h, m);
  }
  std::vector<Tensor<double>*> params() { return {&bn.gamma, &bn.beta, &d1.W, &d1.b, &d2.W, &d2.b}; }
};

struct MiniLabelNet : MiniCritic {
  using MiniCritic::MiniCritic;
  Var<double> operator()(nn::Ctx<double>& g, const Var<double>& z, const nn::Mode& m) {
    return sigmoid_op(MiniCritic::operator()(g, z, m));
  }
};

double fd_check(const std::function<Var<double>(nn::Ctx<double>&)>& build,
                std::vector<Tensor<double>*> params) {
  nn::Ctx<double> g;
  Var<double> loss = build(g);
  std::vector<Var<double>> wrt;
  for (auto* p : params) wrt.push_back(g.var_of(p));
  auto grads = grad_tensors(loss, wrt);
  auto f = [&]() {
    nn::Ctx<double> g2;
    return build(g2).value()[0];
  };
  return T::fd_max_rel_err(f, params, grads);
}

// ---------------------------------------------------------------------------
// shared trained runs for criteria 5-8
// ---------------------------------------------------------------------------

struct TrainedRun {
  fs::path dir;
  ExperimentConfig cfg;
  double final_return = 0;  // mean eval return over the final 10 episodes
};

fs::path accept_root() {
  if (const char* e = std::getenv("DIFFIL_ACCEPT_DIR")) return e;
  return fs::temp_directory_path() / "diffil_acceptance";
}

ExperimentConfig accept_config(uint64_t seed, bool seq_only) {
  ExperimentConfig cfg;
  apply_profile(cfg, "toy");
  cfg.seed = seed;
  cfg.kernels = kernels::blas_available() ? "blas" : "openmp";
  if (seq_only) cfg.ablation = "seq_only";
  return cfg;
}

fs::path corpora_dir() {
  const fs::path dir = accept_root() / "data";
  if (!fs::exists(dir / "se" / "manifest")) {
    ExperimentConfig cfg = accept_config(1, false);
    Corpora c = generate_corpora(cfg.profile, cfg.buffer_capacity, 2024);
    save_dataset(c.se, dir / "se");
    save_dataset(c.sr, dir / "sr");
    save_dataset(c.tr, dir / "tr");
  }
  return dir;
}

TrainedRun train_run(uint64_t seed, bool seq_only) {
  ExperimentConfig cfg = accept_config(seed, seq_only);
  kernels::set_mode(kernels::parse_mode(cfg.kernels));
  const fs::path dir = accept_root() / ((seq_only ? "ablated-s" : "full-s") + std::to_string(seed) +
                                        "-i" + std::to_string(cfg.n_iter));
  TrainedRun run{dir, cfg, 0};

  bool complete = false;
  if (fs::exists(dir / "metrics.csv")) {
    auto rows = load_metrics(dir / "metrics.csv");
    complete = !rows.empty() && rows.back().iteration == cfg.n_iter &&
               fs::exists(dir / "checkpoints" / "encoder.net") &&
               fs::exists(dir / "learner_corpus" / "manifest") && fs::exists(dir / "final_eval.txt");
  }
  if (!complete) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path data = corpora_dir();
    Corpora corpora{load_dataset(data / "se"), load_dataset(data / "sr"), load_dataset(data / "tr")};
    cfg.data_dir = data.string();
    save_config(cfg, dir / "config.json");
    Trainer<float> trainer(cfg, std::move(corpora));
    trainer.init_buffer();
    MetricsWriter metrics(dir / "metrics.csv");
    while (trainer.iteration() < cfg.n_iter) {
      MetricsRow row = trainer.run_iteration();
      metrics.write(row);
      std::printf("  [%s seed %llu] iter %lld/%lld eval %.3f reward %.3f\n",
                  seq_only ? "ablated" : "full", static_cast<unsigned long long>(seed),
                  static_cast<long long>(row.iteration), static_cast<long long>(cfg.n_iter),
                  row.eval_return_mean, row.reward_mean);
      std::fflush(stdout);
    }
    trainer.write_checkpoints(dir / "checkpoints");
    auto [mean, sd] = trainer.eval_policy(10);
    std::ofstream f(dir / "final_eval.txt");
    f << mean << " " << sd << "\n";
    TrajectoryDataset corpus = trainer.export_learner_corpus(20 * 51);
    save_dataset(corpus, dir / "learner_corpus");
  }
  std::ifstream f(dir / "final_eval.txt");
  double sd = 0;
  f >> run.final_return >> sd;
  return run;
}

const std::vector<TrainedRun>& full_runs() {
  static std::vector<TrainedRun> runs = [] {
    std::vector<TrainedRun> r;
    for (uint64_t seed : {11, 22, 33}) r.push_back(train_run(seed, false));
    return r;
  }();
  return runs;
}

const std::vector<TrainedRun>& ablated_runs() {
  static std::vector<TrainedRun> runs = [] {
    std::vector<TrainedRun> r;
    for (uint64_t seed : {11, 22, 33}) r.push_back(train_run(seed, true));
    return r;
  }();
  return runs;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("criterion 1: gradient oracle suite") {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0;

  // unified discriminator loss with gradient penalty (Eqs. A.1 + A.7)
  {
    MiniCritic cf(3, 4, rng), cs(6, 4, rng);
    Tensor<double> zS = T::random_tensor({4, 3}, rng), zT = T::random_tensor({4, 3}, rng);
    Tensor<double> sS = T::random_tensor({4, 6}, rng), sT = T::random_tensor({4, 6}, rng);
    Tensor<double> delta({4});
    for (auto& v : delta.v) v = rng.uniform();
    WganWeights<double> w;
    w.alpha = 0.4;
    w.lambda_disc = 1.2;
    w.lambda_gp = 3.0;
    auto params = cf.params();
    for (auto* p : cs.params()) params.push_back(p);
    REQUIRE(T::count_params(params) <= 200);
    worst = std::max(worst, fd_check(
                                [&](nn::Ctx<double>& g) {
                                  return disc_loss<double>(g, cf, cs, constant(zS), constant(zT),
                                                           constant(sS), constant(sT), w, delta,
                                                           nn::Mode::train_no_stats(),
                                                           nn::Mode::train_no_stats())
                                      .unified_disc;
                                },
                                params));
    // standalone gradient penalty
    worst = std::max(worst, fd_check(
                                [&](nn::Ctx<double>& g) {
                                  return gradient_penalty<double>(g, cf, cs, constant(zS), constant(zT),
                                                                  constant(sS), constant(sT), w, delta,
                                                                  nn::Mode::train_no_stats());
                                },
                                params));
  }

  // generator loss through a linear encoder (Eq. A.2)
  {
    MiniCritic cf(3, 4, rng), cs(6, 4, rng);
    Tensor<double> We = T::random_tensor({5, 3}, rng), Ws = T::random_tensor({5, 6}, rng);
    Tensor<double> xS = T::random_tensor({4, 5}, rng), xT = T::random_tensor({4, 5}, rng);
    WganWeights<double> w;
    w.alpha = 0.6;
    w.lambda_gen = 0.7;
    worst = std::max(worst, fd_check(
                                [&](nn::Ctx<double>& g) {
                                  Var<double> we = g.bind(We, true), ws = g.bind(Ws, true);
                                  return gen_loss<double>(g, cf, cs, matmul(constant(xS), we),
                                                          matmul(constant(xT), we),
                                                          matmul(constant(xS), ws),
                                                          matmul(constant(xT), ws), w,
                                                          nn::Mode::frozen())
                                      .unified_gen;
                                },
                                {&We, &Ws}));
  }

  // encoder-decoder loss (Eq. A.3), miniature conv autoencoder, frozen target
  {
    nn::Conv2d<double> ec(3, 2, 2, rng);
    nn::Dense<double> eh(8, 3, rng), dpS(3, 8, rng), dpT(3, 8, rng);
    nn::ConvTranspose2d<double> doS(2, 3, 2, rng), doT(2, 3, 2, rng);
    Tensor<double> xS = T::random_tensor({2, 4, 4, 3}, rng, 0.4);
    Tensor<double> xT = T::random_tensor({2, 4, 4, 3}, rng, 0.4);
    auto enc = [&](nn::Ctx<double>& g, const Var<double>& x, const nn::Mode& m) {
      Var<double> h = ec.forward_act(g, x, m, 0.2);
      return eh.forward(g, reshape(h, {x.shape()[0], 8}), m);
    };
    auto dec = [&](nn::Ctx<double>& g, const Var<double>& z, DomainTag d, const nn::Mode& m) {
      auto& dp = d == DomainTag::SOURCE ? dpS : dpT;
      auto& dn = d == DomainTag::SOURCE ? doS : doT;
      Var<double> h = leaky_relu(dp.forward(g, z, m), 0.2);
      return dn.forward_act(g, reshape(h, {z.shape()[0], 2, 2, 2}), m, 1.0);
    };
    // freeze the stop-gradient targets at the base point (the function the
    // analytic gradient differentiates)
    Tensor<double> zbarS, zbarT;
    {
      nn::Ctx<double> g;
      zbarS = enc(g, constant(xS), nn::Mode::eval()).value();
      zbarT = enc(g, constant(xT), nn::Mode::eval()).value();
    }
    auto frozen_loss = [&](nn::Ctx<double>& g) {
      auto dom = [&](const Tensor<double>& x, const Tensor<double>& zbar, DomainTag d) {
        Var<double> vx = constant(x);
        Var<double> z = enc(g, vx, nn::Mode::train());
        Var<double> recon = mean_row_norm(reshape(sub(vx, dec(g, z, d, nn::Mode::train())),
                                                  {x.shape[0], 48}));
        const DomainTag opp = d == DomainTag::SOURCE ? DomainTag::TARGET : DomainTag::SOURCE;
        Var<double> zhat = enc(g, dec(g, z, opp, nn::Mode::train()), nn::Mode::train());
        Var<double> fcon = mean_row_norm(sub(constant(zbar), zhat));
        return add(scale(recon, 0.8), scale(fcon, 1.1));
      };
      return add(dom(xS, zbarS, DomainTag::SOURCE), dom(xT, zbarT, DomainTag::TARGET));
    };
    std::vector<Tensor<double>*> params{&ec.W, &ec.b, &eh.W, &eh.b, &dpS.W, &dpS.b,
                                        &dpT.W, &dpT.b, &doS.W, &doS.b, &doT.W, &doT.b};
    worst = std::max(worst, fd_check(frozen_loss, params));
    // and the production loss agrees with the frozen-target form at the base
    nn::Ctx<double> g;
    auto terms = enc_dec_loss_fn<double>(g, enc, dec, constant(xS), constant(xT), 0.8, 1.1,
                                         nn::Mode::train());
    nn::Ctx<double> g2;
    const double frozen_val = frozen_loss(g2).value()[0];
    if (std::fabs(terms.total.value()[0] - frozen_val) > 1e-9) worst = 1.0;
  }

  // label losses (Eqs. A.4, A.5)
  {
    MiniLabelNet ns(6, 4, rng), nf(3, 4, rng);
    Tensor<double> zS = T::random_tensor({4, 6}, rng), zT = T::random_tensor({4, 6}, rng);
    Tensor<double> zf = T::random_tensor({4, 3}, rng);
    Tensor<double> y({4}, {0.5, 0.75, 0.0, 1.0});
    std::vector<ProvenanceTag> provS{ProvenanceTag::SOURCE_EXPERT, ProvenanceTag::SOURCE_RANDOM,
                                     ProvenanceTag::SOURCE_EXPERT, ProvenanceTag::SOURCE_EXPERT};
    std::vector<ProvenanceTag> provT(4, ProvenanceTag::TARGET_RANDOM);
    std::vector<ProvenanceTag> provF{ProvenanceTag::SOURCE_EXPERT, ProvenanceTag::SOURCE_RANDOM,
                                     ProvenanceTag::SOURCE_RANDOM, ProvenanceTag::SOURCE_EXPERT};
    LabelLossWeights<double> w;
    auto params = ns.params();
    for (auto* p : nf.params()) params.push_back(p);
    worst = std::max(worst, fd_check(
                                [&](nn::Ctx<double>& g) {
                                  Var<double> ls = seq_label_loss<double>(
                                      g, ns, constant(zS), provS, constant(zT), provT, w,
                                      nn::Mode::train_no_stats());
                                  Var<double> lf = frame_label_loss<double>(
                                      g, nf, constant(zf), provF, y, w, nn::Mode::train_no_stats());
                                  return add(ls, lf);
                                },
                                params));
  }

  // SAC critic loss (Eq. A.10) on miniature Q networks
  {
    nn::Dense<double> q1a(3, 4, rng), q1b(4, 1, rng), q2a(3, 4, rng), q2b(4, 1, rng);
    auto q = [&](nn::Dense<double>& a, nn::Dense<double>& b) {
      return [&](nn::Ctx<double>& g, const Var<double>& s, const Var<double>& act,
                 const nn::Mode& m) {
        Var<double> h = relu_op(a.forward(g, concat_cols(s, act), m));
        return reshape(b.forward(g, h, m), {s.shape()[0]});
      };
    };
    Tensor<double> st = T::random_tensor({5, 2}, rng), ac = T::random_tensor({5, 1}, rng);
    Tensor<double> y = T::random_tensor({5}, rng);
    worst = std::max(worst, fd_check(
                                [&](nn::Ctx<double>& g) {
                                  return sac_critic_loss<double>(g, q(q1a, q1b), q(q2a, q2b), st, ac,
                                                                 y, nn::Mode::train());
                                },
                                {&q1a.W, &q1a.b, &q1b.W, &q1b.b, &q2a.W, &q2a.b, &q2b.W, &q2b.b}));
  }

  // SAC actor loss (Eq. A.11) on a miniature policy, frozen critics
  {
    nn::Dense<double> d1(2, 4, rng), head(4, 2, rng), qd(3, 1, rng);
    auto policy = [&](nn::Ctx<double>& g, const Var<double>& s, const nn::Mode& m) {
      Var<double> h = relu_op(d1.forward(g, s, m));
      Var<double> o = head.forward(g, h, m);
      PolicyHead<double> ph;
      ph.mean = slice_cols(o, 0, 1);
      ph.log_std = clamp(slice_cols(o, 1, 2), kLogStdMin, kLogStdMax);
      return ph;
    };
    auto qf = [&](nn::Ctx<double>& g, const Var<double>& s, const Var<double>& a, const nn::Mode&) {
      return reshape(tanh_op(qd.forward(g, concat_cols(s, a), nn::Mode::frozen())), {s.shape()[0]});
    };
    Tensor<double> s = T::random_tensor({5, 2}, rng);
    Tensor<double> eps({5, 1});
    for (auto& v : eps.v) v = rng.normal();
    worst = std::max(worst, fd_check(
                                [&](nn::Ctx<double>& g) {
                                  return sac_actor_loss<double>(g, policy, qf, qf, s, eps, 0.2,
                                                                nn::Mode::train(), nn::Mode::frozen())
                                      .first;
                                },
                                {&d1.W, &d1.b, &head.W, &head.b}));
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("  max relative error %.3g, runtime %.1f s\n", worst, secs);
  report(1, "gradient oracles vs central finite differences", worst < 1e-4 && secs < 120.0);
}

TEST_CASE("criterion 2: closed-form loss oracles") {
  bool ok = true;
  auto expect = [&](double got, double want) {
    if (std::fabs(got - want) > 1e-9) ok = false;
  };

  // linear-critic WGAN values: D(z) = z, zS = 2, zT = 1 -> disc = -1
  {
    struct IdCritic {
      Var<double> operator()(nn::Ctx<double>&, const Var<double>& z, const nn::Mode&) { return z; }
    } id;
    struct ZeroCritic {
      Var<double> operator()(nn::Ctx<double>&, const Var<double>& z, const nn::Mode&) {
        return constant(zeros<double>({z.shape()[0], 1}));
      }
    } zero;
    Tensor<double> zS({1, 1}, {2.0}), zT({1, 1}, {1.0}), sz({1, 1}, {0.0});
    nn::Ctx<double> g;
    WganWeights<double> w;
    auto terms = disc_loss<double>(g, id, zero, constant(zS), constant(zT), constant(sz),
                                   constant(sz), w, full<double>({1}, 0.5), nn::Mode::train(),
                                   nn::Mode::train());
    expect(terms.disc_f.value()[0], -1.0);
    expect(terms.gen_f.value()[0], 1.0);
  }

  // gradient penalty of linear critics: (|w| - 1)^2
  {
    struct ScaledCritic {
      double k;
      Var<double> operator()(nn::Ctx<double>&, const Var<double>& z, const nn::Mode&) {
        return scale(z, k);
      }
    };
    ScaledCritic two{2.0}, zero{0.0};
    Tensor<double> zS({3, 1}, {0.1, 0.5, -0.3}), zT({3, 1}, {0.7, -0.9, 0.4});
    WganWeights<double> w;
    w.alpha = 1.0;
    nn::Ctx<double> g;
    Var<double> gp = gradient_penalty<double>(g, two, zero, constant(zS), constant(zT), constant(zS),
                                              constant(zT), w, full<double>({3}, 0.25),
                                              nn::Mode::train());
    expect(gp.value()[0], 1.0);  // (2 - 1)^2

    ScaledCritic a{1.2}, b{1.6};  // alpha 0.5: ||[0.6, 0.8]|| = 1 -> gp = 0
    WganWeights<double> w2;
    nn::Ctx<double> g2;
    Var<double> gp0 = gradient_penalty<double>(g2, a, b, constant(zS), constant(zT), constant(zS),
                                               constant(zT), w2, full<double>({3}, 0.25),
                                               nn::Mode::train());
    expect(gp0.value()[0], 0.0);
  }

  // BCE at p = y
  {
    Tensor<double> y({2}, {0.5, 0.75});
    Tensor<double> p({2, 1}, {0.5, 0.75});
    Var<double> b = bce(constant(p), constant(y));
    expect(b.value()[0], std::log(2.0));
    expect(b.value()[1], -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)));
  }

  // reward bounds at the product extremes (Eq. A.6, eps = 1e-12)
  expect(reward_value(0.0, 0.0), -std::log(1.0 + 1e-12));
  expect(reward_value(1.0, 1.0), -std::log(1e-12));

  // time-label endpoints
  expect(time_label(0, 200, true), 0.5);
  expect(time_label(200, 200, true), 1.0);
  expect(time_label(137, 200, false), 0.0);

  report(2, "closed-form oracles exact to 1e-9", ok);
}

TEST_CASE("criterion 3: 100-step epoch shows exactly 100 critic and 20 generator updates") {
  ExperimentConfig cfg;
  apply_profile(cfg, "toy");
  cfg.seed = 5;
  cfg.n_iter = 1;
  cfg.n_model_train = 100;
  cfg.gen_period = 5;
  cfg.n_rl_train = 2;
  cfg.model_batch = 4;
  cfg.rl_batch = 4;
  cfg.refresh_count = 51;
  cfg.buffer_capacity = 153;
  cfg.eval_episodes = 1;
  Trainer<float> t(cfg, generate_corpora("toy", 300, 4));
  t.init_buffer();
  int64_t critics = 0, gens = 0;
  t.set_event_hook([&](TrainEvent e) {
    if (e == TrainEvent::CriticUpdate) ++critics;
    if (e == TrainEvent::GeneratorUpdate) ++gens;
  });
  (void)t.run_iteration();
  report(3, "5:1 critic/generator schedule", critics == 100 && gens == 20);
}

TEST_CASE("criterion 4: 50k-capacity FIFO with 1000-sample refresh") {
  bool ok = true;
  auto ep = std::make_shared<EpisodeFrames>();
  ep->H = 2;
  ep->W = 2;
  ep->steps = 9;
  ep->provenance = ProvenanceTag::TARGET_LEARNER;
  ep->pixels.resize(static_cast<size_t>(10 * 2 * 2 * 3));
  EpisodePtr cep = ep;
  auto make = [&](int64_t i) {
    Transition tr;
    tr.state = {static_cast<float>(i)};
    tr.obs_seq = pad_sequence(cep, i % 10, 4);
    return tr;
  };

  // paper-scale case: full 50k buffer, 1000 new samples evict exactly the
  // oldest 1000
  {
    LearnerBuffer buf(50000);
    std::vector<Transition> fill;
    fill.reserve(50000);
    for (int64_t i = 0; i < 50000; ++i) fill.push_back(make(i));
    buf.insert(std::move(fill));
    std::vector<Transition> refresh;
    for (int64_t i = 50000; i < 51000; ++i) refresh.push_back(make(i));
    buffer_refresh(buf, std::move(refresh));
    ok = ok && buf.size() == 50000 && buf.at(0).state[0] == 1000.0f &&
         buf.at(49999).state[0] == 50999.0f;
  }

  // property: over random traces the buffer equals the last `capacity` items
  Rng rng(99);
  for (int trial = 0; trial < 40 && ok; ++trial) {
    const int64_t cap = 1 + rng.randint(60);
    LearnerBuffer buf(cap);
    std::deque<int64_t> model;
    int64_t counter = 0;
    for (int64_t round = 0; round < 1 + rng.randint(10); ++round) {
      const int64_t k = rng.randint(cap + 1);
      std::vector<Transition> batch;
      for (int64_t i = 0; i < k; ++i) {
        batch.push_back(make(counter));
        model.push_back(counter);
        ++counter;
      }
      buf.insert(std::move(batch));
      while (static_cast<int64_t>(model.size()) > cap) model.pop_front();
    }
    ok = ok && buf.size() == static_cast<int64_t>(model.size());
    for (int64_t i = 0; ok && i < buf.size(); ++i)
      ok = buf.at(i).state[0] == static_cast<float>(model[static_cast<size_t>(i)]);
  }
  report(4, "B^TL FIFO protocol", ok);
}

TEST_CASE("criterion 5: end-to-end toy imitation reaches 80% of the oracle expert return") {
  double mean = 0;
  for (const TrainedRun& r : full_runs()) {
    std::printf("  full run seed dir %s: final return %.3f\n", r.dir.string().c_str(),
                r.final_return);
    mean += r.final_return / 3.0;
  }
  std::printf("  mean over 3 seeds: %.3f (threshold 1.2 = 80%% of 1.5)\n", mean);
  report(5, "toy imitation >= 1.2 mean return", mean >= 1.2);
}

TEST_CASE("criterion 6: sequence-only ablation scores strictly lower") {
  double full = 0, ablated = 0;
  for (const TrainedRun& r : full_runs()) full += r.final_return / 3.0;
  for (const TrainedRun& r : ablated_runs()) {
    std::printf("  ablated run %s: final return %.3f\n", r.dir.string().c_str(), r.final_return);
    ablated += r.final_return / 3.0;
  }
  std::printf("  full %.3f vs ablated %.3f\n", full, ablated);
  report(6, "ablation direction (full > seq-only)", ablated < full);
}

TEST_CASE("criterion 7: domain probe <= 0.65 on features, >= 0.95 on pixels") {
  const TrainedRun& r = full_runs().front();
  ExperimentConfig cfg = load_config(r.dir / "config.json");
  Rng rng(0);
  Encoder<float> enc(cfg.frame_hw, cfg.frame_hw, cfg.feature_dim, rng);
  std::vector<nn::NamedTensor<float>> named;
  enc.collect("encoder", named);
  load_network(r.dir / "checkpoints" / "encoder.net", named);

  const fs::path data = corpora_dir();
  TrajectoryDataset se = load_dataset(data / "se");
  TrajectoryDataset sr = load_dataset(data / "sr");
  TrajectoryDataset tr = load_dataset(data / "tr");
  TrajectoryDataset tl = load_dataset(r.dir / "learner_corpus");
  analysis::ProbeResult res = analysis::probe_domain(enc, {&se, &sr}, {&tr, &tl}, 5);
  std::printf("  probe accuracy: features %.3f, pixels %.3f, shuffled %.3f\n", res.feature_accuracy,
              res.pixel_accuracy, res.shuffled_accuracy);
  report(7, "domain invariance probe", res.feature_accuracy <= 0.65 && res.pixel_accuracy >= 0.95);
}

TEST_CASE("criterion 8: 80% of learner frames map within 0.1 position error") {
  double frac = 0;
  const fs::path data = corpora_dir();
  TrajectoryDataset se = load_dataset(data / "se");
  for (const TrainedRun& r : full_runs()) {
    ExperimentConfig cfg = load_config(r.dir / "config.json");
    Rng rng(0);
    Encoder<float> enc(cfg.frame_hw, cfg.frame_hw, cfg.feature_dim, rng);
    std::vector<nn::NamedTensor<float>> named;
    enc.collect("encoder", named);
    load_network(r.dir / "checkpoints" / "encoder.net", named);
    TrajectoryDataset tl = load_dataset(r.dir / "learner_corpus");
    analysis::MappingReport rep = analysis::map_features(enc, tl, se);
    std::printf("  run %s: within 0.1 = %.1f%%, median %.4f\n", r.dir.string().c_str(),
                rep.fraction_within(0.1) * 100, rep.median_position_error);
    frac += rep.fraction_within(0.1) / 3.0;
  }
  std::printf("  mean fraction within 0.1: %.3f\n", frac);
  report(8, "cross-domain mapping fidelity", frac >= 0.8);
}

TEST_CASE("criterion 9: reward is non-decreasing in the label product") {
  bool ok = true;
  double prev_by_product = -1e300;
  // 100x100 grid ordered by product via sorted flat scan
  std::vector<std::pair<double, double>> cells;
  for (int i = 0; i <= 99; ++i)
    for (int j = 0; j <= 99; ++j) {
      const double fs = i / 99.0, ff = j / 99.0;
      cells.push_back({fs * ff, reward_value(fs, ff)});
    }
  std::sort(cells.begin(), cells.end());
  for (const auto& [prod, r] : cells) {
    if (r < prev_by_product - 1e-15) ok = false;
    prev_by_product = r;
  }
  report(9, "reward monotone in F_s * F_f", ok);
}

int main(int argc, char** argv) {
  diffil::kernels::tune_allocator();
  doctest::Context ctx(argc, argv);
  const int rc = ctx.run();
  std::printf("[ACCEPTANCE] overall: %s\n", g_all_pass ? "PASS" : "FAIL");
  return rc;
}
