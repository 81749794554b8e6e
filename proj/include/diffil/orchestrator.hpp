#pragma once

// The outer training loop: interleaved model training (critics every step,
// encoder/decoders/label nets every n-th) and SAC training with rewards from
// the current label networks, followed by a FIFO refresh of the learner
// buffer. Holds every piece of run state needed to resume a run exactly.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>

#include <json.hpp>

#include "diffil/adversary.hpp"
#include "diffil/checkpoint.hpp"
#include "diffil/config.hpp"
#include "diffil/data_model.hpp"
#include "diffil/labeling.hpp"
#include "diffil/metrics.hpp"
#include "diffil/perception.hpp"
#include "diffil/sac.hpp"
#include "diffil/toyenv.hpp"

namespace diffil {

enum class TrainEvent { CriticUpdate, GeneratorUpdate, RlUpdate, Collect };

inline char train_event_code(TrainEvent e) {
  switch (e) {
    case TrainEvent::CriticUpdate: return 'C';
    case TrainEvent::GeneratorUpdate: return 'G';
    case TrainEvent::RlUpdate: return 'R';
    case TrainEvent::Collect: return 'c';
  }
  return '?';
}

template <typename T>
class Trainer {
 public:
  using EventHook = std::function<void(TrainEvent)>;

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  Trainer(ExperimentConfig cfg, Corpora corpora)
      : cfg_(std::move(cfg)),
        corpora_(std::move(corpora)),
        btl_(cfg_.buffer_capacity),
        rng_(cfg_.seed),
        schedule_(cfg_.gen_period) {
    kernels::tune_allocator();
    cfg_.validate();
    if (corpora_.se.total_frames() == 0 || corpora_.sr.total_frames() == 0 ||
        corpora_.tr.total_frames() == 0)
      throw config_error("all three static corpora must be non-empty before training");

    env_ = make_env(cfg_.profile, DomainTag::TARGET);
    eval_env_ = make_env(cfg_.profile, DomainTag::TARGET);

    const int64_t hw = cfg_.frame_hw;
    perception_ = Perception<T>(hw, hw, cfg_.feature_dim, rng_);
    const int64_t F = cfg_.feature_dim, LF = cfg_.seq_len * F;
    critic_f_ = CriticNet<T>(F, rng_);
    critic_s_ = CriticNet<T>(LF, rng_);
    label_f_ = LabelNet<T>(F, rng_);
    label_s_ = LabelNet<T>(LF, rng_);
    learner_ = std::make_unique<SacLearner<T>>(env_->state_dim(), env_->action_dim(),
                                               static_cast<T>(cfg_.lr), static_cast<T>(cfg_.gamma),
                                               static_cast<T>(cfg_.tau), rng_);

    opt_perception_ = nn::Adam<T>(params_of(perception_named()), static_cast<T>(cfg_.lr));
    opt_critics_ = nn::Adam<T>(params_of(critics_named()), static_cast<T>(cfg_.lr));
    opt_label_f_ = nn::Adam<T>(params_of(label_f_named()), static_cast<T>(cfg_.lr));
    opt_label_s_ = nn::Adam<T>(params_of(label_s_named()), static_cast<T>(cfg_.lr));

    wgan_.lambda_disc = static_cast<T>(cfg_.lambda_disc);
    wgan_.lambda_gen = static_cast<T>(cfg_.lambda_gen);
    wgan_.lambda_gp = static_cast<T>(cfg_.lambda_gp);
    wgan_.alpha = static_cast<T>(cfg_.alpha);
    wgan_.sequence_only = cfg_.seq_only();
    label_w_.seq_source = static_cast<T>(cfg_.lambda_label_s_source);
    label_w_.seq_target = static_cast<T>(cfg_.lambda_label_s_target);
    label_w_.frame = cfg_.seq_only() ? T{0} : static_cast<T>(cfg_.lambda_label_f);

    start_time_ = std::chrono::steady_clock::now();
  }

  const ExperimentConfig& config() const { return cfg_; }
  int64_t iteration() const { return iteration_; }
  int64_t env_steps() const { return env_steps_; }
  LearnerBuffer& buffer() { return btl_; }
  Perception<T>& perception() { return perception_; }
  LabelNet<T>& label_f() { return label_f_; }
  LabelNet<T>& label_s() { return label_s_; }
  SacLearner<T>& learner() { return *learner_; }
  Rng& rng() { return rng_; }

  void set_event_hook(EventHook h) { hook_ = std::move(h); }

  // Pre-fills B^TL with random-policy transitions up to capacity.
  void init_buffer() {
    if (btl_.size() > 0) return;
    int64_t remaining = btl_.capacity();
    while (remaining > 0) {
      const int64_t n = std::min<int64_t>(remaining, env_->episode_len() * 20);
      btl_.insert(collect_transitions(n, true));
      remaining -= n;
    }
  }

  MetricsRow run_iteration() {
    if (btl_.size() == 0)
      throw config_error("learner buffer is empty; call init_buffer() before training");
    MetricsRow row;
    row.iteration = iteration_ + 1;

    // ---- model training ----
    int64_t gen_updates = 0;
    for (int64_t k = 1; k <= cfg_.n_model_train; ++k) {
      critic_step(row);
      emit(TrainEvent::CriticUpdate);
      if (schedule_.generator_step(k)) {
        generator_step(row);
        emit(TrainEvent::GeneratorUpdate);
        ++gen_updates;
      }
    }
    const double cs = static_cast<double>(cfg_.n_model_train);
    row.disc_f /= cs;
    row.disc_s /= cs;
    row.gp /= cs;
    row.unified_disc /= cs;
    if (gen_updates > 0) {
      const double gs = static_cast<double>(gen_updates);
      row.gen_f /= gs;
      row.gen_s /= gs;
      row.unified_gen /= gs;
      row.recon /= gs;
      row.fcon /= gs;
      row.label_seq /= gs;
      row.label_frame /= gs;
    }

    // ---- RL training ----
    RewardCache cache = precompute_rewards();
    row.reward_mean = static_cast<double>(cache.mean);
    for (int64_t l = 1; l <= cfg_.n_rl_train; ++l) {
      SacBatch<T> batch = sample_rl_batch(cache);
      SacMetrics<T> m = learner_->update(batch, rng_);
      row.sac_critic += static_cast<double>(m.critic_loss) / static_cast<double>(cfg_.n_rl_train);
      row.sac_actor += static_cast<double>(m.actor_loss) / static_cast<double>(cfg_.n_rl_train);
      row.lambda_ent = static_cast<double>(m.lambda_ent);
      emit(TrainEvent::RlUpdate);
    }

    // ---- collect into B^TL ----
    btl_.insert(collect_transitions(cfg_.refresh_count, false));
    emit(TrainEvent::Collect);

    // ---- ground-truth evaluation (never shown to the learner) ----
    auto [em, es] = eval_policy(cfg_.eval_episodes);
    row.eval_return_mean = em;
    row.eval_return_std = es;
    row.env_steps = env_steps_;
    row.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time_).count();
    check_finite(row);
    ++iteration_;
    return row;
  }

  // Deterministic-policy evaluation on the ground-truth reward.
  std::pair<double, double> eval_policy(int64_t episodes) {
    std::vector<double> returns;
    for (int64_t e = 0; e < episodes; ++e) {
      std::vector<float> s = eval_env_->reset(rng_);
      double ep = 0;
      for (int64_t t = 0; t < eval_env_->episode_len(); ++t) {
        StepResult r = eval_env_->step(learner_->act(s, rng_, true));
        ep += r.eval_reward;
        s = r.state;
      }
      returns.push_back(ep);
    }
    double mean = std::accumulate(returns.begin(), returns.end(), 0.0) / returns.size();
    double var = 0;
    for (double r : returns) var += (r - mean) * (r - mean) / returns.size();
    return {mean, std::sqrt(var)};
  }

  // ---- persistence ----------------------------------------------------------

  void write_checkpoints(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto save_one = [&](const char* name, std::vector<nn::NamedTensor<T>> named) {
      save_network(dir / name, named);
    };
    std::vector<nn::NamedTensor<T>> enc, dec_s, dec_t;
    perception_.encoder.collect("encoder", enc);
    perception_.dec_source.collect("decoder_source", dec_s);
    perception_.dec_target.collect("decoder_target", dec_t);
    save_one("encoder.net", enc);
    save_one("decoder_source.net", dec_s);
    save_one("decoder_target.net", dec_t);
    save_one("critic_f.net", critics_f_only_named());
    save_one("critic_s.net", critics_s_only_named());
    save_one("label_f.net", label_f_named());
    save_one("label_s.net", label_s_named());
    std::vector<nn::NamedTensor<T>> pol, q1, q2, q1t, q2t;
    learner_->policy().collect("policy", pol);
    learner_->q1().collect("q1", q1);
    learner_->q2().collect("q2", q2);
    learner_->q1_target().collect("q1_target", q1t);
    learner_->q2_target().collect("q2_target", q2t);
    save_one("policy.net", pol);
    save_one("q1.net", q1);
    save_one("q2.net", q2);
    save_one("q1_target.net", q1t);
    save_one("q2_target.net", q2t);
  }

  void save_state(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_network(dir / "model.net", all_model_named());
    std::vector<nn::NamedTensor<T>> sac;
    learner_->collect(sac);
    save_network(dir / "sac.net", sac);
    save_adam(dir / "adam_perception.net", opt_perception_);
    save_adam(dir / "adam_critics.net", opt_critics_);
    save_adam(dir / "adam_label_f.net", opt_label_f_);
    save_adam(dir / "adam_label_s.net", opt_label_s_);
    save_adam(dir / "adam_policy.net", learner_->policy_opt());
    save_adam(dir / "adam_q.net", learner_->q_opt());
    save_adam(dir / "adam_ent.net", learner_->ent_opt());
    save_buffer(dir / "btl");

    nlohmann::json meta;
    meta["iteration"] = iteration_;
    meta["env_steps"] = env_steps_;
    meta["rng"] = rng_.serialize();
    meta["adam_steps"] = {opt_perception_.steps(),       opt_critics_.steps(),
                          opt_label_f_.steps(),          opt_label_s_.steps(),
                          learner_->policy_opt().steps(), learner_->q_opt().steps(),
                          learner_->ent_opt().steps()};
    std::ofstream f(dir / "meta.json");
    if (!f) throw data_error("cannot write trainer state meta");
    f << meta.dump(2) << "\n";
  }

  void load_state(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    load_network(dir / "model.net", all_model_named());
    std::vector<nn::NamedTensor<T>> sac;
    learner_->collect(sac);
    load_network(dir / "sac.net", sac);
    load_adam(dir / "adam_perception.net", opt_perception_);
    load_adam(dir / "adam_critics.net", opt_critics_);
    load_adam(dir / "adam_label_f.net", opt_label_f_);
    load_adam(dir / "adam_label_s.net", opt_label_s_);
    load_adam(dir / "adam_policy.net", learner_->policy_opt());
    load_adam(dir / "adam_q.net", learner_->q_opt());
    load_adam(dir / "adam_ent.net", learner_->ent_opt());
    load_buffer(dir / "btl");

    std::ifstream f(dir / "meta.json");
    if (!f) throw data_error("missing trainer state meta in " + dir.string());
    nlohmann::json meta;
    f >> meta;
    iteration_ = meta["iteration"].get<int64_t>();
    env_steps_ = meta["env_steps"].get<int64_t>();
    rng_.deserialize(meta["rng"].get<std::string>());
    const auto steps = meta["adam_steps"];
    opt_perception_.set_steps(steps[0].get<int64_t>());
    opt_critics_.set_steps(steps[1].get<int64_t>());
    opt_label_f_.set_steps(steps[2].get<int64_t>());
    opt_label_s_.set_steps(steps[3].get<int64_t>());
    learner_->policy_opt().set_steps(steps[4].get<int64_t>());
    learner_->q_opt().set_steps(steps[5].get<int64_t>());
    learner_->ent_opt().set_steps(steps[6].get<int64_t>());
  }

  // Final learner episodes with states, for the analysis commands.
  TrajectoryDataset export_learner_corpus(int64_t frames) {
    TrajectoryDataset ds(ProvenanceTag::TARGET_LEARNER, frames, cfg_.frame_hw, cfg_.frame_hw);
    auto policy = [&](const std::vector<float>& s, Rng& r) { return learner_->act(s, r, true); };
    while (ds.would_fit(env_->episode_len() + 1)) {
      auto ep = rollout_episode(policy);
      ds.add_episode(std::move(ep));
    }
    return ds;
  }

  // ---- batches ---------------------------------------------------------------

  struct ModelBatch {
    std::vector<FrameSequence> seqs_s, seqs_t;
    std::vector<ProvenanceTag> prov_s, prov_t;
  };

  // Paired model-training batch: source sequences drawn uniformly over
  // B^SE u B^SR frames, target over B^TR u B^TL, provenance retained.
  ModelBatch sample_model_batch() {
    ModelBatch b;
    const int64_t src_total = corpora_.se.total_frames() + corpora_.sr.total_frames();
    const int64_t tgt_total = corpora_.tr.total_frames() + btl_.size();
    for (int64_t i = 0; i < cfg_.model_batch; ++i) {
      const int64_t s = rng_.randint(src_total);
      Frame f = s < corpora_.se.total_frames() ? corpora_.se.frame_at(s)
                                               : corpora_.sr.frame_at(s - corpora_.se.total_frames());
      b.seqs_s.push_back(pad_sequence(f.ep, f.t, cfg_.seq_len));
      b.prov_s.push_back(f.provenance());

      const int64_t t = rng_.randint(tgt_total);
      if (t < corpora_.tr.total_frames()) {
        Frame g = corpora_.tr.frame_at(t);
        b.seqs_t.push_back(pad_sequence(g.ep, g.t, cfg_.seq_len));
        b.prov_t.push_back(g.provenance());
      } else {
        const Transition& tr = btl_.at(t - corpora_.tr.total_frames());
        FrameSequence fs = tr.obs_seq;
        fs.L = cfg_.seq_len;
        b.seqs_t.push_back(fs);
        b.prov_t.push_back(ProvenanceTag::TARGET_LEARNER);
      }
    }
    return b;
  }

 private:
  struct RewardCache {
    std::vector<T> reward;
    T mean{};
  };

  void emit(TrainEvent e) {
    if (hook_) hook_(e);
  }

  // Encodes a sequence batch; returns {zseq [B, L*F], z_last [B, F]}.
  std::pair<ag::Var<T>, ag::Var<T>> encode_seq_batch(nn::Ctx<T>& g,
                                                     const std::vector<FrameSequence>& seqs,
                                                     const nn::Mode& m) {
    Tensor<T> x = sequences_to_batch<T>(seqs);
    ag::Var<T> zseq = perception_.encode_sequence(g, ag::constant(std::move(x)), cfg_.seq_len, m);
    const int64_t F = cfg_.feature_dim;
    ag::Var<T> z = ag::slice_cols(zseq, (cfg_.seq_len - 1) * F, cfg_.seq_len * F);
    return {zseq, z};
  }

  void critic_step(MetricsRow& row) {
    ModelBatch b = sample_model_batch();
    nn::Ctx<T> g;
    auto [zseq_s, z_s] = encode_seq_batch(g, b.seqs_s, nn::Mode::frozen());
    auto [zseq_t, z_t] = encode_seq_batch(g, b.seqs_t, nn::Mode::frozen());
    Tensor<T> delta({cfg_.model_batch});
    for (auto& v : delta.v) v = static_cast<T>(rng_.uniform());

    auto cf = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& m) {
      return critic_f_.forward(gc, x, m);
    };
    auto cs = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& m) {
      return critic_s_.forward(gc, x, m);
    };
    WganLossTerms<T> terms = disc_loss<T>(g, cf, cs, z_s, z_t, zseq_s, zseq_t, wgan_, delta,
                                          nn::Mode::train(), nn::Mode::train_no_stats());
    apply_adam(g, terms.unified_disc, opt_critics_);

    row.disc_f += value_of(terms.disc_f, "disc_f");
    row.disc_s += value_of(terms.disc_s, "disc_s");
    row.gp += value_of(terms.gp, "gradient_penalty");
    row.unified_disc += value_of(terms.unified_disc, "unified_disc");
  }

  void generator_step(MetricsRow& row) {
    ModelBatch b = sample_model_batch();
    nn::Ctx<T> g;
    auto [zseq_s, z_s] = encode_seq_batch(g, b.seqs_s, nn::Mode::train());
    auto [zseq_t, z_t] = encode_seq_batch(g, b.seqs_t, nn::Mode::train());

    auto cf = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode&) {
      return critic_f_.forward(gc, x, nn::Mode::frozen());
    };
    auto cs = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode&) {
      return critic_s_.forward(gc, x, nn::Mode::frozen());
    };
    WganLossTerms<T> wt = gen_loss<T>(g, cf, cs, z_s, z_t, zseq_s, zseq_t, wgan_, nn::Mode::frozen());

    // Per-frame losses run on the final frame of each sequence. The latents
    // are shared with the sequence pass (same encoder forward), saving a
    // redundant encode; values equal Perception::enc_dec_loss on the same
    // frames.
    std::vector<Frame> frames_s, frames_t;
    for (const auto& s : b.seqs_s) frames_s.push_back(s.last());
    for (const auto& s : b.seqs_t) frames_t.push_back(s.last());
    EncDecLossTerms<T> ed;
    {
      auto per_domain = [&](const std::vector<Frame>& frames, const ag::Var<T>& z, DomainTag d) {
        const int64_t B = cfg_.model_batch;
        ag::Var<T> x = ag::constant(frames_to_batch<T>(frames));
        ag::Var<T> ohat = perception_.decode(g, z, d, nn::Mode::train());
        ag::Var<T> recon = mean_row_norm(ag::reshape(ag::sub(x, ohat), {B, x.numel() / B}));
        const DomainTag opp = d == DomainTag::SOURCE ? DomainTag::TARGET : DomainTag::SOURCE;
        ag::Var<T> cross = perception_.decode(g, z, opp, nn::Mode::train());
        ag::Var<T> zhat = perception_.encode(g, cross, nn::Mode::train());
        ag::Var<T> fcon = mean_row_norm(ag::sub(ag::detach(z), zhat));
        return std::pair{recon, fcon};
      };
      auto [recon_s, fcon_s] = per_domain(frames_s, z_s, DomainTag::SOURCE);
      auto [recon_t, fcon_t] = per_domain(frames_t, z_t, DomainTag::TARGET);
      ed.recon = ag::add(recon_s, recon_t);
      ed.fcon = ag::add(fcon_s, fcon_t);
      ed.total = ag::add(ag::scale(ed.recon, static_cast<T>(cfg_.lambda_recon)),
                         ag::scale(ed.fcon, static_cast<T>(cfg_.lambda_fcon)));
    }

    auto ls_fn = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& m) {
      return label_s_.forward(gc, x, m);
    };
    ag::Var<T> lseq =
        seq_label_loss<T>(g, ls_fn, zseq_s, b.prov_s, zseq_t, b.prov_t, label_w_, nn::Mode::train());

    ag::Var<T> total = ag::add(ag::add(wt.unified_gen, ed.total), lseq);

    ag::Var<T> lframe;
    if (!cfg_.seq_only()) {
      Tensor<T> y({cfg_.model_batch});
      for (int64_t i = 0; i < cfg_.model_batch; ++i)
        y[i] = static_cast<T>(time_label(frames_s[static_cast<size_t>(i)]));
      auto lf_fn = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& m) {
        return label_f_.forward(gc, x, m);
      };
      lframe = frame_label_loss<T>(g, lf_fn, z_s, b.prov_s, y, label_w_, nn::Mode::train());
      total = ag::add(total, lframe);
    }

    // one backward pass, split across the optimizers
    std::vector<Tensor<T>*> wrt_params = opt_perception_.params();
    const size_t n_perc = wrt_params.size();
    for (auto* p : opt_label_s_.params()) wrt_params.push_back(p);
    size_t n_ls = wrt_params.size();
    if (!cfg_.seq_only())
      for (auto* p : opt_label_f_.params()) wrt_params.push_back(p);
    std::vector<ag::Var<T>> wrt;
    wrt.reserve(wrt_params.size());
    for (auto* p : wrt_params) wrt.push_back(g.var_of(p));
    std::vector<Tensor<T>> grads = ag::grad_tensors(total, wrt);

    opt_perception_.step({grads.begin(), grads.begin() + n_perc});
    opt_label_s_.step({grads.begin() + n_perc, grads.begin() + n_ls});
    if (!cfg_.seq_only()) opt_label_f_.step({grads.begin() + n_ls, grads.end()});

    row.gen_f += value_of(wt.gen_f, "gen_f");
    row.gen_s += value_of(wt.gen_s, "gen_s");
    row.unified_gen += value_of(wt.unified_gen, "unified_gen");
    row.recon += value_of(ed.recon, "reconstruction");
    row.fcon += value_of(ed.fcon, "feature_consistency");
    row.label_seq += value_of(lseq, "label_seq");
    if (!lframe.empty()) row.label_frame += value_of(lframe, "label_frame");
  }

  // ---- RL phase ----------------------------------------------------------------

  // Encoder and label nets are frozen for the whole RL phase, so per-
  // transition rewards are constants; computing them once up front is
  // value-identical to recomputation at sampling time.
  RewardCache precompute_rewards() {
    const int64_t n = btl_.size(), L = cfg_.seq_len, F = cfg_.feature_dim;
    std::map<std::pair<const EpisodeFrames*, int64_t>, int64_t> row_of;
    std::vector<Frame> frames;
    for (int64_t i = 0; i < n; ++i) {
      const FrameSequence& seq = btl_.at(i).obs_seq;
      for (int64_t j = 0; j < L; ++j) {
        Frame f = seq.frame(j);
        auto key = std::make_pair(f.ep.get(), f.t);
        if (!row_of.count(key)) {
          row_of.emplace(key, static_cast<int64_t>(frames.size()));
          frames.push_back(f);
        }
      }
    }

    Tensor<T> lat({static_cast<int64_t>(frames.size()), F});
    const int64_t chunk = 256;
    for (int64_t c0 = 0; c0 < static_cast<int64_t>(frames.size()); c0 += chunk) {
      const int64_t c1 = std::min<int64_t>(frames.size(), c0 + chunk);
      std::vector<Frame> part(frames.begin() + c0, frames.begin() + c1);
      nn::Ctx<T> g;
      ag::Var<T> z =
          perception_.encode(g, ag::constant(frames_to_batch<T>(part)), nn::Mode::eval());
      for (int64_t i = 0; i < c1 - c0; ++i)
        for (int64_t j = 0; j < F; ++j) lat.at(c0 + i, j) = z.value().at(i, j);
    }

    RewardCache cache;
    cache.reward.resize(static_cast<size_t>(n));
    auto ls_fn = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& m) {
      return label_s_.forward(gc, x, m);
    };
    auto lf_fn = [&](nn::Ctx<T>& gc, const ag::Var<T>& x, const nn::Mode& m) {
      return label_f_.forward(gc, x, m);
    };
    T sum{0};
    for (int64_t c0 = 0; c0 < n; c0 += chunk) {
      const int64_t c1 = std::min(n, c0 + chunk);
      Tensor<T> zseq({c1 - c0, L * F}), z({c1 - c0, F});
      for (int64_t i = c0; i < c1; ++i) {
        const FrameSequence& seq = btl_.at(i).obs_seq;
        for (int64_t j = 0; j < L; ++j) {
          Frame f = seq.frame(j);
          const int64_t r = row_of.at(std::make_pair(f.ep.get(), f.t));
          for (int64_t k = 0; k < F; ++k) zseq.at(i - c0, j * F + k) = lat.at(r, k);
        }
        for (int64_t k = 0; k < F; ++k) z.at(i - c0, k) = zseq.at(i - c0, (L - 1) * F + k);
      }
      Tensor<T> r = reward_batch<T>(ls_fn, lf_fn, zseq, z, !cfg_.seq_only());
      for (int64_t i = c0; i < c1; ++i) {
        if (!std::isfinite(static_cast<double>(r[i - c0])))
          throw numeric_error("non-finite value in reward");
        cache.reward[static_cast<size_t>(i)] = r[i - c0];
        sum += r[i - c0];
      }
    }
    cache.mean = sum / static_cast<T>(n);
    return cache;
  }

  SacBatch<T> sample_rl_batch(const RewardCache& cache) {
    const int64_t B = cfg_.rl_batch;
    const int64_t S = env_->state_dim(), A = env_->action_dim();
    SacBatch<T> batch;
    batch.states = Tensor<T>({B, S});
    batch.actions = Tensor<T>({B, A});
    batch.next_states = Tensor<T>({B, S});
    batch.rewards = Tensor<T>({B});
    batch.done = Tensor<T>({B});
    for (int64_t i = 0; i < B; ++i) {
      const int64_t idx = rng_.randint(btl_.size());
      const Transition& tr = btl_.at(idx);
      for (int64_t j = 0; j < S; ++j) {
        batch.states.at(i, j) = static_cast<T>(tr.state[static_cast<size_t>(j)]);
        batch.next_states.at(i, j) = static_cast<T>(tr.next_state[static_cast<size_t>(j)]);
      }
      for (int64_t j = 0; j < A; ++j)
        batch.actions.at(i, j) = static_cast<T>(tr.action[static_cast<size_t>(j)]);
      batch.rewards[i] = cache.reward[static_cast<size_t>(idx)];
      batch.done[i] = tr.done ? T{1} : T{0};
    }
    return batch;
  }

  // ---- environment interaction ----------------------------------------------

  template <typename Policy>
  std::shared_ptr<EpisodeFrames> rollout_episode(Policy&& policy) {
    const int64_t H = env_->episode_len();
    auto ep = std::make_shared<EpisodeFrames>();
    ep->H = env_->frame_h();
    ep->W = env_->frame_w();
    ep->steps = H;
    ep->provenance = ProvenanceTag::TARGET_LEARNER;
    ep->s_dim = env_->state_dim();
    ep->a_dim = env_->action_dim();
    ep->pixels.resize(static_cast<size_t>((H + 1) * ep->frame_bytes()));
    std::vector<float> s = env_->reset(rng_);
    ep->states.insert(ep->states.end(), s.begin(), s.end());
    env_->render(ep->pixels.data());
    for (int64_t t = 0; t < H; ++t) {
      std::vector<float> a = policy(s, rng_);
      ep->actions.insert(ep->actions.end(), a.begin(), a.end());
      StepResult r = env_->step(a);
      ep->states.insert(ep->states.end(), r.state.begin(), r.state.end());
      env_->render(ep->pixels.data() + (t + 1) * ep->frame_bytes());
      s = r.state;
    }
    env_steps_ += H;
    return ep;
  }

  std::vector<Transition> collect_transitions(int64_t n, bool random_policy) {
    std::vector<Transition> out;
    auto policy = [&](const std::vector<float>& s, Rng& r) -> std::vector<float> {
      if (random_policy) {
        std::vector<float> a(static_cast<size_t>(env_->action_dim()));
        for (auto& v : a) v = static_cast<float>(r.uniform(-1.0, 1.0));
        return a;
      }
      return learner_->act(s, r, false);
    };
    while (static_cast<int64_t>(out.size()) < n) {
      std::shared_ptr<EpisodeFrames> ep = rollout_episode(policy);
      const int64_t H = ep->steps;
      EpisodePtr cep = ep;
      for (int64_t t = 0; t < H && static_cast<int64_t>(out.size()) < n; ++t) {
        Transition tr;
        tr.state.assign(ep->states.begin() + t * ep->s_dim, ep->states.begin() + (t + 1) * ep->s_dim);
        tr.next_state.assign(ep->states.begin() + (t + 1) * ep->s_dim,
                             ep->states.begin() + (t + 2) * ep->s_dim);
        tr.action.assign(ep->actions.begin() + t * ep->a_dim, ep->actions.begin() + (t + 1) * ep->a_dim);
        tr.obs_seq = pad_sequence(cep, t + 1, cfg_.seq_len);
        tr.done = (t == H - 1);
        out.push_back(std::move(tr));
      }
    }
    return out;
  }

  // ---- bookkeeping -------------------------------------------------------------

  double value_of(const ag::Var<T>& v, const char* term) {
    const double x = static_cast<double>(v.value()[0]);
    if (!std::isfinite(x)) throw numeric_error(std::string("non-finite value in ") + term);
    return x;
  }

  void check_finite(const MetricsRow& r) {
    for (double v : {r.disc_f, r.disc_s, r.gp, r.gen_f, r.gen_s, r.recon, r.fcon, r.label_seq,
                     r.label_frame, r.sac_critic, r.sac_actor, r.lambda_ent, r.reward_mean})
      if (!std::isfinite(v)) throw numeric_error("non-finite value in metrics row");
  }

  void apply_adam(nn::Ctx<T>& g, const ag::Var<T>& loss, nn::Adam<T>& opt) {
    std::vector<ag::Var<T>> wrt;
    wrt.reserve(opt.params().size());
    for (Tensor<T>* p : opt.params()) wrt.push_back(g.var_of(p));
    opt.step(ag::grad_tensors(loss, wrt));
  }

  std::vector<Tensor<T>*> params_of(std::vector<nn::NamedTensor<T>> named) {
    return nn::params_of(named);
  }

  std::vector<nn::NamedTensor<T>> perception_named() {
    std::vector<nn::NamedTensor<T>> v;
    perception_.collect(v);
    return v;
  }
  std::vector<nn::NamedTensor<T>> critics_named() {
    std::vector<nn::NamedTensor<T>> v;
    critic_f_.collect("critic_f", v);
    critic_s_.collect("critic_s", v);
    return v;
  }
  std::vector<nn::NamedTensor<T>> critics_f_only_named() {
    std::vector<nn::NamedTensor<T>> v;
    critic_f_.collect("critic_f", v);
    return v;
  }
  std::vector<nn::NamedTensor<T>> critics_s_only_named() {
    std::vector<nn::NamedTensor<T>> v;
    critic_s_.collect("critic_s", v);
    return v;
  }
  std::vector<nn::NamedTensor<T>> label_f_named() {
    std::vector<nn::NamedTensor<T>> v;
    label_f_.collect("label_f", v);
    return v;
  }
  std::vector<nn::NamedTensor<T>> label_s_named() {
    std::vector<nn::NamedTensor<T>> v;
    label_s_.collect("label_s", v);
    return v;
  }
  std::vector<nn::NamedTensor<T>> all_model_named() {
    std::vector<nn::NamedTensor<T>> v = perception_named();
    critic_f_.collect("critic_f", v);
    critic_s_.collect("critic_s", v);
    label_f_.collect("label_f", v);
    label_s_.collect("label_s", v);
    return v;
  }

  void save_adam(const std::filesystem::path& p, nn::Adam<T>& opt) {
    std::vector<nn::NamedTensor<T>> named;
    auto& m = opt.moment1();
    auto& v = opt.moment2();
    for (size_t i = 0; i < m.size(); ++i) {
      named.push_back({"m." + std::to_string(i), &m[i], false});
      named.push_back({"v." + std::to_string(i), &v[i], false});
    }
    save_network(p, named);
  }

  void load_adam(const std::filesystem::path& p, nn::Adam<T>& opt) {
    std::vector<nn::NamedTensor<T>> named;
    auto& m = opt.moment1();
    auto& v = opt.moment2();
    for (size_t i = 0; i < m.size(); ++i) {
      named.push_back({"m." + std::to_string(i), &m[i], false});
      named.push_back({"v." + std::to_string(i), &v[i], false});
    }
    load_network(p, named);
  }

  void save_buffer(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    // unique episodes referenced by the buffer, in first-use order
    std::map<const EpisodeFrames*, int64_t> ep_index;
    TrajectoryDataset eps(ProvenanceTag::TARGET_LEARNER,
                          btl_.size() * (env_->episode_len() + 1) + 1, cfg_.frame_hw, cfg_.frame_hw);
    for (int64_t i = 0; i < btl_.size(); ++i) {
      const EpisodePtr& ep = btl_.at(i).obs_seq.ep;
      if (!ep_index.count(ep.get())) {
        ep_index.emplace(ep.get(), eps.episode_count());
        eps.add_episode(ep);
      }
    }
    save_dataset(eps, dir / "episodes");

    std::ofstream f(dir / "transitions.bin", std::ios::binary);
    if (!f) throw data_error("cannot write buffer transitions");
    const int64_t n = btl_.size();
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (int64_t i = 0; i < n; ++i) {
      const Transition& tr = btl_.at(i);
      const int64_t ep = ep_index.at(tr.obs_seq.ep.get());
      const int64_t end = tr.obs_seq.end;
      const uint8_t done = tr.done ? 1 : 0;
      f.write(reinterpret_cast<const char*>(&ep), sizeof(ep));
      f.write(reinterpret_cast<const char*>(&end), sizeof(end));
      f.write(reinterpret_cast<const char*>(&done), sizeof(done));
      auto wvec = [&](const std::vector<float>& v) {
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
      };
      wvec(tr.state);
      wvec(tr.action);
      wvec(tr.next_state);
    }
  }

  void load_buffer(const std::filesystem::path& dir) {
    TrajectoryDataset eps = load_dataset(dir / "episodes");
    std::ifstream f(dir / "transitions.bin", std::ios::binary);
    if (!f) throw data_error("missing buffer transitions in " + dir.string());
    int64_t n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    std::vector<Transition> items;
    items.reserve(static_cast<size_t>(n));
    const int64_t S = env_->state_dim(), A = env_->action_dim();
    for (int64_t i = 0; i < n; ++i) {
      int64_t ep = 0, end = 0;
      uint8_t done = 0;
      f.read(reinterpret_cast<char*>(&ep), sizeof(ep));
      f.read(reinterpret_cast<char*>(&end), sizeof(end));
      f.read(reinterpret_cast<char*>(&done), sizeof(done));
      Transition tr;
      auto rvec = [&](std::vector<float>& v, int64_t len) {
        v.resize(static_cast<size_t>(len));
        f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(float)));
      };
      rvec(tr.state, S);
      rvec(tr.action, A);
      rvec(tr.next_state, S);
      tr.obs_seq = pad_sequence(eps.episode(ep), end, cfg_.seq_len);
      tr.done = done != 0;
      items.push_back(std::move(tr));
    }
    if (!f) throw data_error("truncated buffer transitions in " + dir.string());
    btl_ = LearnerBuffer(cfg_.buffer_capacity);
    btl_.insert(std::move(items));
  }

  ExperimentConfig cfg_;
  Corpora corpora_;
  LearnerBuffer btl_;
  Rng rng_;
  UpdateSchedule schedule_;
  std::unique_ptr<ToyEnv> env_, eval_env_;

  Perception<T> perception_;
  CriticNet<T> critic_f_, critic_s_;
  LabelNet<T> label_f_, label_s_;
  std::unique_ptr<SacLearner<T>> learner_;
  nn::Adam<T> opt_perception_, opt_critics_, opt_label_f_, opt_label_s_;

  WganWeights<T> wgan_;
  LabelLossWeights<T> label_w_;

  int64_t iteration_ = 0;
  int64_t env_steps_ = 0;
  EventHook hook_;
  std::chrono::steady_clock::time_point start_time_;
};

}  // namespace diffil
