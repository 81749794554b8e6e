// diffil: cross-domain imitation learning from pixels at desk scale.
//
// Subcommands: generate-data, train, evaluate, map-features, probe-domain,
// export-curves. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
// failure during training.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffil/analysis.hpp"
#include "diffil/config.hpp"
#include "diffil/orchestrator.hpp"

using namespace diffil;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string profile;
  int64_t seed = -1;
  bool force = false;
};

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    cfg = load_config(o.config_path, o.profile);
  } else {
    apply_profile(cfg, o.profile.empty() ? "toy" : o.profile);
  }
  if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
  cfg.validate();
  return cfg;
}

void setup_kernels(const ExperimentConfig& cfg) {
  kernels::set_mode(kernels::parse_mode(cfg.kernels));
  kernels::set_mode_from_env();  // DIFFIL_KERNELS wins if set
}

void ensure_fresh_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw data_error(dir.string() + " exists and is not empty (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

Corpora load_corpora(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty())
    throw config_error("no data_dir configured; run generate-data and set data_dir");
  const fs::path base = cfg.data_dir;
  Corpora c{load_dataset(base / "se"), load_dataset(base / "sr"), load_dataset(base / "tr")};
  for (const TrajectoryDataset* ds : {&c.se, &c.sr, &c.tr})
    if (ds->H() != cfg.frame_hw || ds->W() != cfg.frame_hw)
      throw config_error("corpus frame size " + std::to_string(ds->H()) +
                         " does not match configured frame_hw " + std::to_string(cfg.frame_hw));
  return c;
}

Encoder<float> load_encoder(const fs::path& run_dir, ExperimentConfig& cfg_out) {
  cfg_out = load_config(run_dir / "config.json");
  Rng rng(0);
  Encoder<float> enc(cfg_out.frame_hw, cfg_out.frame_hw, cfg_out.feature_dim, rng);
  std::vector<nn::NamedTensor<float>> named;
  enc.collect("encoder", named);
  load_network(run_dir / "checkpoints" / "encoder.net", named);
  return enc;
}

int cmd_generate_data(const CommonOpts& o, const std::string& out_dir) {
  ExperimentConfig cfg = resolve_config(o);
  setup_kernels(cfg);
  const fs::path out = out_dir.empty()
                           ? fs::path(cfg.resolved_output_dir()) / ("data-" + cfg.profile)
                           : fs::path(out_dir);
  ensure_fresh_dir(out, o.force);
  Corpora c = generate_corpora(cfg.profile, cfg.buffer_capacity, cfg.seed);
  save_dataset(c.se, out / "se");
  save_dataset(c.sr, out / "sr");
  save_dataset(c.tr, out / "tr");
  std::cout << "wrote " << c.se.total_frames() << " expert, " << c.sr.total_frames()
            << " source-random, " << c.tr.total_frames() << " target-random frames to " << out
            << "\n";
  return 0;
}

int cmd_train(const CommonOpts& o, const std::string& data_dir, const std::string& run_dir_opt,
              bool resume) {
  ExperimentConfig cfg;
  fs::path run_dir;
  if (resume) {
    run_dir = run_dir_opt.empty() ? fs::path() : fs::path(run_dir_opt);
    if (run_dir.empty() || !fs::exists(run_dir / "config.json"))
      throw config_error("--resume needs --run-dir pointing at an existing run");
    cfg = load_config(run_dir / "config.json");
  } else {
    cfg = resolve_config(o);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    run_dir = run_dir_opt.empty()
                  ? fs::path(cfg.resolved_output_dir()) /
                        ("run-" + cfg.profile + "-seed" + std::to_string(cfg.seed))
                  : fs::path(run_dir_opt);
    ensure_fresh_dir(run_dir, o.force);
    save_config(cfg, run_dir / "config.json");
  }
  setup_kernels(cfg);

  Corpora corpora = load_corpora(cfg);
  Trainer<float> trainer(cfg, std::move(corpora));

  std::vector<MetricsRow> kept_rows;
  if (resume) {
    trainer.load_state(run_dir / "state");
    for (const MetricsRow& r : load_metrics(run_dir / "metrics.csv"))
      if (r.iteration <= trainer.iteration()) kept_rows.push_back(r);
  } else {
    trainer.init_buffer();
  }
  MetricsWriter metrics(run_dir / "metrics.csv");
  for (const MetricsRow& r : kept_rows) metrics.write(r);

  while (trainer.iteration() < cfg.n_iter) {
    MetricsRow row = trainer.run_iteration();
    metrics.write(row);
    std::cout << "iter " << row.iteration << "/" << cfg.n_iter << "  eval_return "
              << row.eval_return_mean << " ± " << row.eval_return_std << "  reward "
              << row.reward_mean << "  disc " << row.unified_disc << "  recon " << row.recon
              << "\n"
              << std::flush;
    if (row.iteration % cfg.checkpoint_every == 0 || trainer.iteration() >= cfg.n_iter) {
      trainer.write_checkpoints(run_dir / "checkpoints");
      trainer.save_state(run_dir / "state");
    }
  }
  TrajectoryDataset corpus = trainer.export_learner_corpus(
      std::min<int64_t>(cfg.buffer_capacity, 20 * (make_env(cfg.profile, DomainTag::TARGET)->episode_len() + 1)));
  save_dataset(corpus, run_dir / "learner_corpus");
  std::cout << "run complete: " << run_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& run_dir_s, int64_t episodes, int64_t seed) {
  const fs::path run_dir = run_dir_s;
  ExperimentConfig cfg = load_config(run_dir / "config.json");
  setup_kernels(cfg);
  Rng rng(seed >= 0 ? static_cast<uint64_t>(seed) : cfg.seed + 999);
  auto env = make_env(cfg.profile, DomainTag::TARGET);
  SacLearner<float> learner(env->state_dim(), env->action_dim(), 1e-3f, 0.99f, 0.005f, rng);
  std::vector<nn::NamedTensor<float>> named;
  learner.policy().collect("policy", named);
  load_network(run_dir / "checkpoints" / "policy.net", named);

  std::vector<double> returns;
  for (int64_t e = 0; e < episodes; ++e) {
    std::vector<float> s = env->reset(rng);
    double ep = 0;
    for (int64_t t = 0; t < env->episode_len(); ++t) {
      StepResult r = env->step(learner.act(s, rng, true));
      ep += r.eval_reward;
      s = r.state;
    }
    returns.push_back(ep);
  }
  double mean = 0, var = 0;
  for (double r : returns) mean += r / returns.size();
  for (double r : returns) var += (r - mean) * (r - mean) / returns.size();
  std::cout << "eval return over " << episodes << " episodes: " << mean << " ± " << std::sqrt(var)
            << "\n";
  nlohmann::json j;
  j["episodes"] = episodes;
  j["mean"] = mean;
  j["std"] = std::sqrt(var);
  std::ofstream f(run_dir / "eval.json");
  f << j.dump(2) << "\n";
  return 0;
}

int cmd_map_features(const std::string& run_dir_s, const std::string& reference_dir,
                     const std::string& queries_dir, const std::string& out_csv) {
  const fs::path run_dir = run_dir_s;
  ExperimentConfig cfg;
  Encoder<float> enc = load_encoder(run_dir, cfg);
  setup_kernels(cfg);
  TrajectoryDataset reference = load_dataset(reference_dir);
  TrajectoryDataset queries =
      load_dataset(queries_dir.empty() ? (run_dir / "learner_corpus").string() : queries_dir);
  analysis::MappingReport report = analysis::map_features(enc, queries, reference);
  const fs::path out = out_csv.empty() ? run_dir / "mapping.csv" : fs::path(out_csv);
  analysis::write_mapping_csv(report, out);
  std::cout << "mapped " << report.rows.size() << " frames; median position error "
            << report.median_position_error << "; within 0.1: " << report.fraction_within(0.1) * 100
            << "%\n";
  return 0;
}

int cmd_probe_domain(const std::string& run_dir_s, const std::string& data_dir, int64_t seed) {
  const fs::path run_dir = run_dir_s;
  ExperimentConfig cfg;
  Encoder<float> enc = load_encoder(run_dir, cfg);
  setup_kernels(cfg);
  const fs::path base = data_dir.empty() ? fs::path(cfg.data_dir) : fs::path(data_dir);
  TrajectoryDataset se = load_dataset(base / "se");
  TrajectoryDataset sr = load_dataset(base / "sr");
  TrajectoryDataset tr = load_dataset(base / "tr");
  TrajectoryDataset tl = load_dataset(run_dir / "learner_corpus");
  analysis::ProbeResult res =
      analysis::probe_domain(enc, {&se, &sr}, {&tr, &tl},
                             seed >= 0 ? static_cast<uint64_t>(seed) : cfg.seed + 7);
  std::cout << "domain probe accuracy  features: " << res.feature_accuracy
            << "  raw pixels: " << res.pixel_accuracy << "  shuffled control: " << res.shuffled_accuracy
            << "\n";
  nlohmann::json j;
  j["feature_accuracy"] = res.feature_accuracy;
  j["pixel_accuracy"] = res.pixel_accuracy;
  j["shuffled_accuracy"] = res.shuffled_accuracy;
  j["train_count"] = res.train_count;
  j["test_count"] = res.test_count;
  std::ofstream f(run_dir / "probe.json");
  f << j.dump(2) << "\n";
  return 0;
}

// Per-timestep (t, F_f, F_s, R) label/reward trace of fresh learner episodes.
int cmd_trace_labels(const std::string& run_dir_s, int64_t episodes, const std::string& out_csv) {
  const fs::path run_dir = run_dir_s;
  ExperimentConfig cfg = load_config(run_dir / "config.json");
  setup_kernels(cfg);
  Rng rng(cfg.seed + 31);
  auto env = make_env(cfg.profile, DomainTag::TARGET);

  Encoder<float> enc(cfg.frame_hw, cfg.frame_hw, cfg.feature_dim, rng);
  std::vector<nn::NamedTensor<float>> enc_named;
  enc.collect("encoder", enc_named);
  load_network(run_dir / "checkpoints" / "encoder.net", enc_named);
  LabelNet<float> label_f(cfg.feature_dim, rng), label_s(cfg.seq_len * cfg.feature_dim, rng);
  std::vector<nn::NamedTensor<float>> lf_named, ls_named;
  label_f.collect("label_f", lf_named);
  label_s.collect("label_s", ls_named);
  load_network(run_dir / "checkpoints" / "label_f.net", lf_named);
  load_network(run_dir / "checkpoints" / "label_s.net", ls_named);
  SacLearner<float> learner(env->state_dim(), env->action_dim(), 1e-3f, 0.99f, 0.005f, rng);
  std::vector<nn::NamedTensor<float>> pol_named;
  learner.policy().collect("policy", pol_named);
  load_network(run_dir / "checkpoints" / "policy.net", pol_named);

  const fs::path out = out_csv.empty() ? run_dir / "label_trace.csv" : fs::path(out_csv);
  std::ofstream f(out);
  if (!f) throw data_error("cannot write " + out.string());
  f << "episode,t,position,F_f,F_s,reward\n";
  for (int64_t e = 0; e < episodes; ++e) {
    // roll one episode, collecting frames
    auto ep = std::make_shared<EpisodeFrames>();
    ep->H = env->frame_h();
    ep->W = env->frame_w();
    ep->steps = env->episode_len();
    ep->provenance = ProvenanceTag::TARGET_LEARNER;
    ep->s_dim = env->state_dim();
    ep->pixels.resize(static_cast<size_t>((ep->steps + 1) * ep->frame_bytes()));
    std::vector<float> s = env->reset(rng);
    ep->states.insert(ep->states.end(), s.begin(), s.end());
    env->render(ep->pixels.data());
    for (int64_t t = 0; t < ep->steps; ++t) {
      StepResult r = env->step(learner.act(s, rng, true));
      s = r.state;
      ep->states.insert(ep->states.end(), s.begin(), s.end());
      env->render(ep->pixels.data() + (t + 1) * ep->frame_bytes());
    }
    EpisodePtr cep = ep;
    // encode all frames once
    std::vector<Frame> frames;
    for (int64_t t = 0; t <= ep->steps; ++t) frames.push_back(Frame{cep, t});
    nn::Ctx<float> g;
    ag::Var<float> z = enc.forward(g, ag::constant(frames_to_batch<float>(frames)), nn::Mode::eval());
    const int64_t F = cfg.feature_dim, L = cfg.seq_len;
    for (int64_t t = 0; t <= ep->steps; ++t) {
      FrameSequence seq = pad_sequence(cep, t, L);
      Tensor<float> zseq({1, L * F}), zt({1, F});
      for (int64_t j = 0; j < L; ++j)
        for (int64_t k = 0; k < F; ++k) zseq.at(0, j * F + k) = z.value().at(seq.frame_index(j), k);
      for (int64_t k = 0; k < F; ++k) zt.at(0, k) = z.value().at(t, k);
      nn::Ctx<float> gl;
      const float fs = label_s.forward(gl, ag::constant(zseq), nn::Mode::eval()).value()[0];
      const float ff = label_f.forward(gl, ag::constant(zt), nn::Mode::eval()).value()[0];
      f << e << "," << t << "," << analysis::ground_truth_position(*cep, t) << "," << ff << ","
        << fs << "," << reward_value(fs, ff) << "\n";
    }
  }
  std::cout << "wrote label trace to " << out << "\n";
  return 0;
}

int cmd_export_curves(const std::vector<std::string>& run_dirs, const std::string& out_csv,
                      const std::string& out_svg) {
  std::vector<fs::path> logs;
  for (const auto& r : run_dirs) logs.push_back(fs::path(r) / "metrics.csv");
  auto points = analysis::aggregate_curves(logs);
  const fs::path out =
      out_csv.empty() ? fs::path(run_dirs.front()) / "curves.csv" : fs::path(out_csv);
  analysis::write_curves_csv(points, out);
  if (!out_svg.empty()) analysis::write_curves_svg(points, out_svg);
  std::cout << "wrote " << points.size() << " curve points to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::tune_allocator();
  CLI::App app{"DIFF-IL: domain-invariant per-frame features for cross-domain imitation learning"};
  app.require_subcommand(1);

  CommonOpts common;
  std::string out_dir, data_dir, run_dir, queries_dir, reference_dir, out_csv, out_svg;
  std::vector<std::string> run_dirs;
  int64_t episodes = 10, eval_seed = -1;
  bool resume = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file");
    sub->add_option("--seed", common.seed, "override the config seed");
    sub->add_option("--profile", common.profile, "toy|pendulum|mujoco");
    sub->add_flag("--force", common.force, "overwrite existing output");
  };

  CLI::App* gen = app.add_subcommand("generate-data", "write the three offline corpora");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory (default <run root>/data-<profile>)");

  CLI::App* train = app.add_subcommand("train", "run the full training loop");
  add_common(train);
  train->add_option("--data", data_dir, "corpora directory from generate-data");
  train->add_option("--run-dir", run_dir, "run directory (default <run root>/run-<profile>-seed<seed>)");
  train->add_flag("--resume", resume, "continue from the run directory's saved state");

  CLI::App* eval = app.add_subcommand("evaluate", "roll the trained policy and report eval return");
  eval->add_option("--run", run_dir, "run directory")->required();
  eval->add_option("--episodes", episodes, "episode count");
  eval->add_option("--seed", eval_seed, "evaluation seed");

  CLI::App* mapf = app.add_subcommand("map-features", "nearest source-expert frame per learner frame");
  mapf->add_option("--run", run_dir, "run directory")->required();
  mapf->add_option("--reference", reference_dir, "reference corpus (the SE dataset)")->required();
  mapf->add_option("--queries", queries_dir, "frames to map (default run/learner_corpus)");
  mapf->add_option("--out", out_csv, "mapping CSV path");

  CLI::App* probe = app.add_subcommand("probe-domain", "domain classifier on frozen features");
  probe->add_option("--run", run_dir, "run directory")->required();
  probe->add_option("--data", data_dir, "corpora directory (default config data_dir)");
  probe->add_option("--seed", eval_seed, "probe seed");

  CLI::App* trace = app.add_subcommand("trace-labels", "per-timestep label and reward trace");
  trace->add_option("--run", run_dir, "run directory")->required();
  trace->add_option("--episodes", episodes, "episode count");
  trace->add_option("--out", out_csv, "trace CSV path");

  CLI::App* curves = app.add_subcommand("export-curves", "tidy CSV and optional SVG learning curve");
  curves->add_option("--run", run_dirs, "run directories (repeat for multi-seed aggregation)")
      ->required();
  curves->add_option("--out", out_csv, "output CSV");
  curves->add_option("--svg", out_svg, "optional SVG plot");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_generate_data(common, out_dir);
    if (train->parsed()) return cmd_train(common, data_dir, run_dir, resume);
    if (eval->parsed()) return cmd_evaluate(run_dir, episodes, eval_seed);
    if (mapf->parsed()) return cmd_map_features(run_dir, reference_dir, queries_dir, out_csv);
    if (probe->parsed()) return cmd_probe_domain(run_dir, data_dir, eval_seed);
    if (trace->parsed()) return cmd_trace_labels(run_dir, episodes, out_csv);
    if (curves->parsed()) return cmd_export_curves(run_dirs, out_csv, out_svg);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
