#include "diffil/toyenv.hpp"

#include <algorithm>
#include <cmath>

namespace diffil {

namespace {

inline double soft_cov(double d) { return std::clamp(d, 0.0, 1.0); }

inline uint8_t to_u8(double v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void put_gray(uint8_t* rgb, int64_t w, int64_t px, int64_t py, double v) {
  uint8_t* p = rgb + (py * w + px) * 3;
  p[0] = p[1] = p[2] = to_u8(v);
}

inline double wrap_pi(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a < -M_PI) a += 2.0 * M_PI;
  return a;
}

}  // namespace

// --- DotWorld -----------------------------------------------------------------

std::vector<float> DotWorld::reset(Rng& rng) {
  x_ = rng.uniform(0.0, 0.05);
  t_ = 0;
  return state();
}

StepResult DotWorld::step(const std::vector<float>& action) {
  if (action.size() != 1) throw shape_error("DotWorld expects a 1-dim action");
  const double a = clamp_action(action[0]);
  x_ = std::clamp(x_ + gain_ * a, 0.0, 1.0);
  ++t_;
  StepResult r;
  r.state = state();
  r.eval_reward = gain_ * a;  // forward velocity, not displacement
  r.done = t_ >= kEpisodeLen;
  return r;
}

void DotWorld::render(uint8_t* rgb) const {
  const int64_t H = frame_h(), W = frame_w();
  const double cx = 4.0 + x_ * 24.0;
  const double cy = H / 2.0;
  if (domain_ == DomainTag::SOURCE) {
    // white square, half-size 3px, on flat gray
    for (int64_t py = 0; py < H; ++py)
      for (int64_t px = 0; px < W; ++px) {
        const double covx = soft_cov(3.0 + 0.5 - std::fabs(px + 0.5 - cx));
        const double covy = soft_cov(3.0 + 0.5 - std::fabs(py + 0.5 - cy));
        const double cov = covx * covy;
        put_gray(rgb, W, px, py, 0.5 + cov * 0.5);
      }
  } else {
    // white circle, radius 3.2px, on a 4px checkerboard
    for (int64_t py = 0; py < H; ++py)
      for (int64_t px = 0; px < W; ++px) {
        const double bg = (((px / 4) + (py / 4)) % 2 == 0) ? 0.35 : 0.65;
        const double dx = px + 0.5 - cx, dy = py + 0.5 - cy;
        const double cov = soft_cov(3.2 + 0.5 - std::sqrt(dx * dx + dy * dy));
        put_gray(rgb, W, px, py, bg + cov * (1.0 - bg));
      }
  }
}

// --- PoleWorld ----------------------------------------------------------------

std::vector<float> PoleWorld::reset(Rng& rng) {
  theta_ = wrap_pi(M_PI + rng.uniform(-0.3, 0.3));
  omega_ = rng.uniform(-0.2, 0.2);
  t_ = 0;
  return state();
}

std::vector<float> PoleWorld::state() const {
  return {static_cast<float>(std::cos(theta_)), static_cast<float>(std::sin(theta_)),
          static_cast<float>(omega_)};
}

StepResult PoleWorld::step(const std::vector<float>& action) {
  if (action.size() != 1) throw shape_error("PoleWorld expects a 1-dim action");
  const double a = clamp_action(action[0]);
  const double g = 10.0, dt = 0.05;
  const double torque = torque_gain_ * a * 3.0;
  omega_ = std::clamp(omega_ + dt * (1.5 * g * std::sin(theta_) + torque), -8.0, 8.0);
  theta_ = wrap_pi(theta_ + dt * omega_);
  ++t_;
  StepResult r;
  r.state = state();
  r.eval_reward = (std::cos(theta_) + 1.0) / 2.0;
  r.done = t_ >= kEpisodeLen;
  return r;
}

std::vector<float> PoleWorld::expert_action(Rng&) const {
  // Energy-based swing-up with a PD hold near upright.
  const double g = 10.0;
  const double energy = 0.5 * omega_ * omega_ + 1.5 * g * std::cos(theta_);
  const double target = 1.5 * g;
  double a;
  if (std::fabs(theta_) < 0.9 && std::fabs(omega_) < 5.0) {
    a = (-10.0 * theta_ - 3.0 * omega_) / (3.0 * torque_gain_);
  } else {
    a = 0.6 * (target - energy) * omega_;
  }
  return {static_cast<float>(std::clamp(a, -1.0, 1.0))};
}

void PoleWorld::render(uint8_t* rgb) const {
  const int64_t H = frame_h(), W = frame_w();
  const bool src = domain_ == DomainTag::SOURCE;
  const double bg = src ? 0.25 : 0.75;
  const double fg = src ? 1.0 : 0.05;
  const double cx = W / 2.0, cy = H / 2.0;
  const double tipx = cx + render_len_ * std::sin(theta_);
  const double tipy = cy - render_len_ * std::cos(theta_);
  for (int64_t py = 0; py < H; ++py)
    for (int64_t px = 0; px < W; ++px) {
      const double x = px + 0.5, y = py + 0.5;
      // distance to the pole segment
      const double vx = tipx - cx, vy = tipy - cy;
      const double wx = x - cx, wy = y - cy;
      const double tproj = std::clamp((wx * vx + wy * vy) / (vx * vx + vy * vy), 0.0, 1.0);
      const double dx = wx - tproj * vx, dy = wy - tproj * vy;
      const double dist = std::sqrt(dx * dx + dy * dy);
      double cov = soft_cov(1.25 - dist);
      // bob at the tip
      const double bx = x - tipx, by = y - tipy;
      cov = std::max(cov, soft_cov(2.0 + 0.5 - std::sqrt(bx * bx + by * by)));
      put_gray(rgb, W, px, py, bg + cov * (fg - bg));
    }
}

// --- factory and corpus generation ----------------------------------------------

std::unique_ptr<ToyEnv> make_env(const std::string& profile, DomainTag domain) {
  if (profile == "toy") return std::make_unique<DotWorld>(domain);
  if (profile == "pendulum") return std::make_unique<PoleWorld>(domain);
  if (profile == "mujoco")
    throw config_error("profile 'mujoco' has no built-in environment adapter; provide one");
  throw config_error("unknown environment profile '" + profile + "'");
}

void fill_dataset(TrajectoryDataset& ds, ToyEnv& env, RolloutPolicy policy, Rng& rng) {
  const int64_t H = env.episode_len();
  while (ds.would_fit(H + 1)) {
    auto ep = std::make_shared<EpisodeFrames>();
    ep->H = env.frame_h();
    ep->W = env.frame_w();
    ep->steps = H;
    ep->provenance = ds.provenance();
    ep->s_dim = env.state_dim();
    ep->a_dim = env.action_dim();
    ep->pixels.resize(static_cast<size_t>((H + 1) * ep->frame_bytes()));
    ep->states.reserve(static_cast<size_t>((H + 1) * ep->s_dim));
    ep->actions.reserve(static_cast<size_t>(H * ep->a_dim));

    std::vector<float> s = env.reset(rng);
    ep->states.insert(ep->states.end(), s.begin(), s.end());
    env.render(ep->pixels.data());
    for (int64_t t = 0; t < H; ++t) {
      std::vector<float> a;
      if (policy == RolloutPolicy::EXPERT) {
        a = env.expert_action(rng);
      } else {
        a.resize(static_cast<size_t>(env.action_dim()));
        for (auto& v : a) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      }
      ep->actions.insert(ep->actions.end(), a.begin(), a.end());
      StepResult r = env.step(a);
      ep->states.insert(ep->states.end(), r.state.begin(), r.state.end());
      env.render(ep->pixels.data() + (t + 1) * ep->frame_bytes());
      s = r.state;
    }
    ds.add_episode(std::move(ep));
  }
}

Corpora generate_corpora(const std::string& profile, int64_t frames_per_buffer, uint64_t seed) {
  Rng rng(seed);
  Rng rng_se = rng.split(), rng_sr = rng.split(), rng_tr = rng.split();
  auto src = make_env(profile, DomainTag::SOURCE);
  auto tgt = make_env(profile, DomainTag::TARGET);

  Corpora c{
      TrajectoryDataset(ProvenanceTag::SOURCE_EXPERT, frames_per_buffer, src->frame_h(), src->frame_w()),
      TrajectoryDataset(ProvenanceTag::SOURCE_RANDOM, frames_per_buffer, src->frame_h(), src->frame_w()),
      TrajectoryDataset(ProvenanceTag::TARGET_RANDOM, frames_per_buffer, tgt->frame_h(), tgt->frame_w())};
  fill_dataset(c.se, *src, RolloutPolicy::EXPERT, rng_se);
  fill_dataset(c.sr, *src, RolloutPolicy::RANDOM, rng_sr);
  fill_dataset(c.tr, *tgt, RolloutPolicy::RANDOM, rng_tr);
  return c;
}

}  // namespace diffil
