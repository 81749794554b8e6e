#include "diffil/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "diffil/errors.hpp"

namespace diffil {

using nlohmann::json;

void apply_profile(ExperimentConfig& cfg, const std::string& profile) {
  cfg.profile = profile;
  if (profile == "toy") {
    cfg.n_iter = 200;
    cfg.n_model_train = 50;
    cfg.n_rl_train = 500;
    cfg.model_batch = 64;
    cfg.rl_batch = 64;
    cfg.refresh_count = 500;
    cfg.buffer_capacity = 10000;
    cfg.lambda_recon = 1.0;
    cfg.lambda_disc = 1.0;
    cfg.lambda_gen = 1.0;
  } else if (profile == "pendulum") {
    cfg.n_iter = 200;
    cfg.n_model_train = 100;
    cfg.n_rl_train = 1000;
    cfg.model_batch = 128;
    cfg.rl_batch = 128;
    cfg.refresh_count = 1000;
    cfg.buffer_capacity = 20000;
    cfg.lambda_recon = 0.5;
    cfg.lambda_disc = 1.0;
    cfg.lambda_gen = 0.5;
  } else if (profile == "mujoco") {
    cfg.n_iter = 1000;
    cfg.n_model_train = 100;
    cfg.n_rl_train = 1000;
    cfg.model_batch = 64;
    cfg.rl_batch = 256;
    cfg.refresh_count = 1000;
    cfg.buffer_capacity = 50000;
    cfg.lambda_recon = 1.0;
    cfg.lambda_disc = 0.5;
    cfg.lambda_gen = 1.0;
  } else {
    throw config_error("unknown profile '" + profile + "' (toy|pendulum|mujoco)");
  }
}

void ExperimentConfig::validate() const {
  if (version != 1) throw config_error("unsupported config version " + std::to_string(version));
  if (profile != "toy" && profile != "pendulum" && profile != "mujoco")
    throw config_error("unknown profile '" + profile + "'");
  if (ablation != "none" && ablation != "seq_only")
    throw config_error("unknown ablation '" + ablation + "' (none|seq_only)");
  if (!(alpha > 0.0 && alpha < 1.0)) throw config_error("alpha must lie strictly inside (0,1)");
  auto nonneg = [](double v, const char* name) {
    if (v < 0.0) throw config_error(std::string(name) + " must be >= 0");
  };
  nonneg(lambda_recon, "lambda_recon");
  nonneg(lambda_fcon, "lambda_fcon");
  nonneg(lambda_gp, "lambda_gp");
  nonneg(lambda_disc, "lambda_disc");
  nonneg(lambda_gen, "lambda_gen");
  nonneg(lambda_label_s_source, "lambda_label_s_source");
  nonneg(lambda_label_s_target, "lambda_label_s_target");
  nonneg(lambda_label_f, "lambda_label_f");
  if (lr <= 0.0) throw config_error("lr must be > 0");
  auto positive = [](int64_t v, const char* name) {
    if (v < 1) throw config_error(std::string(name) + " must be >= 1");
  };
  positive(n_iter, "n_iter");
  positive(n_model_train, "n_model_train");
  positive(n_rl_train, "n_rl_train");
  positive(gen_period, "gen_period");
  positive(model_batch, "model_batch");
  positive(rl_batch, "rl_batch");
  positive(refresh_count, "refresh_count");
  positive(buffer_capacity, "buffer_capacity");
  positive(eval_episodes, "eval_episodes");
  positive(checkpoint_every, "checkpoint_every");
  positive(frame_hw, "frame_hw");
  positive(feature_dim, "feature_dim");
  positive(seq_len, "seq_len");
  if (refresh_count > buffer_capacity) throw config_error("refresh_count exceeds buffer_capacity");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw config_error("gamma must lie in [0,1)");
  if (!(tau > 0.0 && tau <= 1.0)) throw config_error("tau must lie in (0,1]");
}

std::string ExperimentConfig::resolved_output_dir() const {
  if (!output_dir.empty()) return output_dir;
  if (const char* e = std::getenv("DIFFIL_RUN_DIR")) return e;
  return "runs";
}

namespace {

#define DIFFIL_CONFIG_FIELDS(X)          \
  X(version)                             \
  X(profile)                             \
  X(seed)                                \
  X(output_dir)                          \
  X(data_dir)                            \
  X(kernels)                             \
  X(ablation)                            \
  X(lambda_recon)                        \
  X(lambda_fcon)                         \
  X(lambda_gp)                           \
  X(alpha)                               \
  X(lambda_disc)                         \
  X(lambda_gen)                          \
  X(lambda_label_s_source)               \
  X(lambda_label_s_target)               \
  X(lambda_label_f)                      \
  X(lr)                                  \
  X(n_iter)                              \
  X(n_model_train)                       \
  X(n_rl_train)                          \
  X(gen_period)                          \
  X(model_batch)                         \
  X(rl_batch)                            \
  X(refresh_count)                       \
  X(buffer_capacity)                     \
  X(eval_episodes)                       \
  X(checkpoint_every)                    \
  X(frame_hw)                            \
  X(feature_dim)                         \
  X(seq_len)                             \
  X(gamma)                               \
  X(tau)

template <typename T>
void read_field(const json& j, const char* name, T& into) {
  if (!j.contains(name)) return;
  try {
    into = j.at(name).get<T>();
  } catch (const json::exception&) {
    throw config_error(std::string("config field '") + name + "' has the wrong type");
  }
}

}  // namespace

ExperimentConfig config_from_json_text(const std::string& text, const std::string& cli_profile) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error("config is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw config_error("config root must be a JSON object");

  static const std::set<std::string> known = {
#define DIFFIL_NAME(f) #f,
      DIFFIL_CONFIG_FIELDS(DIFFIL_NAME)
#undef DIFFIL_NAME
  };
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw config_error("unknown config key '" + key + "'");

  ExperimentConfig cfg;
  // profile presets first (CLI flag beats the file's field), then explicit
  // file keys override individual values.
  std::string profile = cfg.profile;
  if (j.contains("profile")) profile = j.at("profile").get<std::string>();
  if (!cli_profile.empty()) profile = cli_profile;
  apply_profile(cfg, profile);
#define DIFFIL_READ(f) read_field(j, #f, cfg.f);
  DIFFIL_CONFIG_FIELDS(DIFFIL_READ)
#undef DIFFIL_READ
  cfg.profile = profile;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::string& cli_profile) {
  std::ifstream f(path);
  if (!f) throw config_error("cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_json_text(text, cli_profile);
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  json j;
#define DIFFIL_WRITE(f) j[#f] = cfg.f;
  DIFFIL_CONFIG_FIELDS(DIFFIL_WRITE)
#undef DIFFIL_WRITE
  return j.dump(2);
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write config to " + path.string());
  f << config_to_json_text(cfg) << "\n";
}

}  // namespace diffil
