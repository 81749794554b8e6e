#pragma once

// Desk-scale paired cross-domain pixel environments with scripted experts
// and ground-truth evaluation rewards. The eval reward is never shown to the
// learner; it only feeds the metrics log and the acceptance suite.

#include <memory>
#include <vector>

#include "diffil/data_model.hpp"
#include "diffil/rng.hpp"

namespace diffil {

struct StepResult {
  std::vector<float> state;
  double eval_reward = 0;
  bool done = false;
};

class ToyEnv {
 public:
  virtual ~ToyEnv() = default;

  virtual int64_t state_dim() const = 0;
  virtual int64_t action_dim() const = 0;
  virtual int64_t frame_h() const = 0;
  virtual int64_t frame_w() const = 0;
  virtual int64_t episode_len() const = 0;
  virtual DomainTag domain() const = 0;

  virtual std::vector<float> reset(Rng& rng) = 0;
  // Deterministic given (state, action); out-of-bounds actions are clamped
  // and counted.
  virtual StepResult step(const std::vector<float>& action) = 0;
  virtual std::vector<float> state() const = 0;
  virtual void render(uint8_t* rgb) const = 0;
  virtual std::vector<float> expert_action(Rng& rng) const = 0;

  int64_t clamped_action_count() const { return clamped_actions_; }

 protected:
  float clamp_action(float a) {
    if (a < -1.0f || a > 1.0f) {
      ++clamped_actions_;
      return a < -1.0f ? -1.0f : 1.0f;
    }
    return a;
  }

  int64_t clamped_actions_ = 0;
};

// Point agent on a line: x' = clamp(x + g*a), eval reward g*a. Source renders
// a white square on gray, target a white circle on a checkerboard.
class DotWorld : public ToyEnv {
 public:
  static constexpr double kSourceGain = 0.05;
  static constexpr double kTargetGain = 0.03;
  static constexpr int64_t kEpisodeLen = 50;

  explicit DotWorld(DomainTag d) : domain_(d), gain_(d == DomainTag::SOURCE ? kSourceGain : kTargetGain) {}

  int64_t state_dim() const override { return 1; }
  int64_t action_dim() const override { return 1; }
  int64_t frame_h() const override { return 32; }
  int64_t frame_w() const override { return 32; }
  int64_t episode_len() const override { return kEpisodeLen; }
  DomainTag domain() const override { return domain_; }
  double gain() const { return gain_; }

  std::vector<float> reset(Rng& rng) override;
  StepResult step(const std::vector<float>& action) override;
  std::vector<float> state() const override { return {static_cast<float>(x_)}; }
  void render(uint8_t* rgb) const override;
  std::vector<float> expert_action(Rng&) const override { return {1.0f}; }

  void set_position(double x) { x_ = x; }  // test hook

 private:
  DomainTag domain_;
  double gain_;
  double x_ = 0;
  int64_t t_ = 0;
};

// Pendulum swing-up; domains differ in torque gain and rendering (pole
// length, palette). State is [cos th, sin th, omega], th = 0 upright.
class PoleWorld : public ToyEnv {
 public:
  static constexpr int64_t kEpisodeLen = 100;

  explicit PoleWorld(DomainTag d)
      : domain_(d),
        torque_gain_(d == DomainTag::SOURCE ? 2.0 : 1.4),
        render_len_(d == DomainTag::SOURCE ? 11.0 : 7.0) {}

  int64_t state_dim() const override { return 3; }
  int64_t action_dim() const override { return 1; }
  int64_t frame_h() const override { return 32; }
  int64_t frame_w() const override { return 32; }
  int64_t episode_len() const override { return kEpisodeLen; }
  DomainTag domain() const override { return domain_; }

  std::vector<float> reset(Rng& rng) override;
  StepResult step(const std::vector<float>& action) override;
  std::vector<float> state() const override;
  void render(uint8_t* rgb) const override;
  std::vector<float> expert_action(Rng&) const override;

 private:
  DomainTag domain_;
  double torque_gain_;
  double render_len_;
  double theta_ = M_PI;  // from upright
  double omega_ = 0;
  int64_t t_ = 0;
};

// toy -> DotWorld, pendulum -> PoleWorld; mujoco has no desk-scale adapter.
std::unique_ptr<ToyEnv> make_env(const std::string& profile, DomainTag domain);

enum class RolloutPolicy { RANDOM, EXPERT };

// Appends full episodes until the dataset cannot fit another one; stores
// pixels, states and actions, with frames tagged by timestep for time labels.
void fill_dataset(TrajectoryDataset& ds, ToyEnv& env, RolloutPolicy policy, Rng& rng);

struct Corpora {
  TrajectoryDataset se, sr, tr;
};

Corpora generate_corpora(const std::string& profile, int64_t frames_per_buffer, uint64_t seed);

// Mean ground-truth return of a policy over n episodes.
template <typename Policy>
double mean_eval_return(ToyEnv& env, Policy&& policy, int64_t episodes, Rng& rng) {
  double total = 0;
  for (int64_t e = 0; e < episodes; ++e) {
    std::vector<float> s = env.reset(rng);
    double ep = 0;
    for (int64_t t = 0; t < env.episode_len(); ++t) {
      StepResult r = env.step(policy(s, rng));
      ep += r.eval_reward;
      s = r.state;
    }
    total += ep;
  }
  return total / static_cast<double>(episodes);
}

}  // namespace diffil
