#pragma once

// Validated experiment configuration: every loss scale, schedule count and
// architecture knob in one record. Config files are JSON with a version
// field; unknown keys are rejected so hyperparameter typos cannot pass
// silently.

#include <cstdint>
#include <filesystem>
#include <string>

namespace diffil {

struct ExperimentConfig {
  int64_t version = 1;
  std::string profile = "toy";  // toy | pendulum | mujoco
  uint64_t seed = 1;
  std::string output_dir;  // empty -> $DIFFIL_RUN_DIR or ./runs
  std::string data_dir;    // where generate-data wrote the corpora
  std::string kernels = "auto";
  std::string ablation = "none";  // none | seq_only

  // loss scales (shared hyperparameters)
  double lambda_recon = 1.0;
  double lambda_fcon = 1.0;
  double lambda_gp = 10.0;
  double alpha = 0.5;
  double lambda_disc = 1.0;
  double lambda_gen = 1.0;
  double lambda_label_s_source = 10.0;
  double lambda_label_s_target = 1e-3;
  double lambda_label_f = 10.0;
  double lr = 1e-3;

  // schedule
  int64_t n_iter = 200;
  int64_t n_model_train = 50;
  int64_t n_rl_train = 500;
  int64_t gen_period = 5;  // n in Algorithm 1
  int64_t model_batch = 64;
  int64_t rl_batch = 64;
  int64_t refresh_count = 500;
  int64_t buffer_capacity = 10000;
  int64_t eval_episodes = 5;
  int64_t checkpoint_every = 20;

  // perception / sequence
  int64_t frame_hw = 32;
  int64_t feature_dim = 32;
  int64_t seq_len = 4;

  // SAC
  double gamma = 0.99;
  double tau = 0.005;

  bool seq_only() const { return ablation == "seq_only"; }

  void validate() const;  // throws config_error
  std::string resolved_output_dir() const;
};

// Fills profile-dependent schedule defaults.
void apply_profile(ExperimentConfig& cfg, const std::string& profile);

ExperimentConfig config_from_json_text(const std::string& text, const std::string& cli_profile = "");
ExperimentConfig load_config(const std::filesystem::path& path, const std::string& cli_profile = "");
std::string config_to_json_text(const ExperimentConfig& cfg);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

}  // namespace diffil
