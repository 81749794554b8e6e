#pragma once

// Core records shared by every module: domain/provenance tags, episode frame
// storage, padded frame sequences, trajectory datasets, the learner FIFO
// buffer, and the on-disk container format.
//
// Frames are stored per episode as contiguous uint8 [T+1, H, W, 3]; Frame and
// FrameSequence are light references into that storage, so adjacent
// transitions share pixels instead of copying them.

#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "diffil/errors.hpp"
#include "diffil/tensor.hpp"

namespace diffil {

enum class DomainTag { SOURCE, TARGET };

enum class ProvenanceTag { SOURCE_EXPERT, SOURCE_RANDOM, TARGET_RANDOM, TARGET_LEARNER };

inline DomainTag domain_of(ProvenanceTag p) {
  return (p == ProvenanceTag::SOURCE_EXPERT || p == ProvenanceTag::SOURCE_RANDOM) ? DomainTag::SOURCE
                                                                                  : DomainTag::TARGET;
}

std::string to_string(DomainTag d);
std::string to_string(ProvenanceTag p);
ProvenanceTag provenance_from_string(const std::string& s);

inline uint64_t next_episode_uid() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1);
}

// One episode's observations o_0..o_T plus optional proprioceptive states and
// actions (states have T+1 entries, actions T).
struct EpisodeFrames {
  int64_t H = 32, W = 32;
  int64_t steps = 0;  // H_tau
  ProvenanceTag provenance = ProvenanceTag::SOURCE_RANDOM;
  std::vector<uint8_t> pixels;  // [(steps+1) * H * W * 3]
  std::vector<float> states;    // optional, [(steps+1) * s_dim]
  std::vector<float> actions;   // optional, [steps * a_dim]
  int64_t s_dim = 0, a_dim = 0;
  uint64_t uid = next_episode_uid();

  int64_t frame_count() const { return steps + 1; }
  int64_t frame_bytes() const { return H * W * 3; }
  const uint8_t* frame_ptr(int64_t t) const { return pixels.data() + t * frame_bytes(); }
  void validate() const;
};

using EpisodePtr = std::shared_ptr<const EpisodeFrames>;

// A single tagged observation; a reference into its episode.
struct Frame {
  EpisodePtr ep;
  int64_t t = 0;

  DomainTag domain() const { return domain_of(ep->provenance); }
  ProvenanceTag provenance() const { return ep->provenance; }
  int64_t episode_len() const { return ep->steps; }
  const uint8_t* pixels() const { return ep->frame_ptr(t); }
};

// L consecutive observations from one episode ending at timestep `end`;
// timesteps before 0 are padded by repeating frame 0.
struct FrameSequence {
  EpisodePtr ep;
  int64_t end = 0;
  int64_t L = 4;

  int64_t frame_index(int64_t i) const { return std::max<int64_t>(0, end - L + 1 + i); }
  Frame frame(int64_t i) const { return Frame{ep, frame_index(i)}; }
  Frame last() const { return Frame{ep, end}; }
  DomainTag domain() const { return domain_of(ep->provenance); }
  ProvenanceTag provenance() const { return ep->provenance; }
};

// Frames end - L + 1 .. end with left padding by frame 0.
inline FrameSequence pad_sequence(const EpisodePtr& ep, int64_t t, int64_t L) {
  if (L < 1) throw shape_error("pad_sequence: L must be >= 1");
  if (t < 0 || t >= ep->frame_count())
    throw shape_error("pad_sequence: t=" + std::to_string(t) + " outside episode with " +
                      std::to_string(ep->frame_count()) + " frames");
  return FrameSequence{ep, t, L};
}

// Learner tuple feeding SAC. The reward is intentionally absent: it is
// recomputed from the current label networks when the transition is sampled.
struct Transition {
  std::vector<float> state;
  std::vector<float> action;
  std::vector<float> next_state;
  FrameSequence obs_seq;  // observations ending at t+1, TARGET_LEARNER
  bool done = false;
};

// Offline corpus of episodes with a fixed total-frame capacity.
class TrajectoryDataset {
 public:
  TrajectoryDataset() = default;
  TrajectoryDataset(ProvenanceTag prov, int64_t capacity, int64_t H = 32, int64_t W = 32)
      : provenance_(prov), capacity_(capacity), H_(H), W_(W) {}

  ProvenanceTag provenance() const { return provenance_; }
  int64_t capacity() const { return capacity_; }
  int64_t H() const { return H_; }
  int64_t W() const { return W_; }
  int64_t total_frames() const { return total_frames_; }
  int64_t episode_count() const { return static_cast<int64_t>(episodes_.size()); }
  const EpisodePtr& episode(int64_t i) const { return episodes_[static_cast<size_t>(i)]; }
  const std::vector<EpisodePtr>& episodes() const { return episodes_; }

  bool would_fit(int64_t frames) const { return total_frames_ + frames <= capacity_; }
  void add_episode(EpisodePtr ep);

  // Uniform frame addressing over the whole corpus.
  Frame frame_at(int64_t flat) const;

 private:
  ProvenanceTag provenance_ = ProvenanceTag::SOURCE_RANDOM;
  int64_t capacity_ = 50000;
  int64_t H_ = 32, W_ = 32;
  int64_t total_frames_ = 0;
  std::vector<EpisodePtr> episodes_;
  std::vector<int64_t> frame_offsets_;  // prefix sums for frame_at
};

// FIFO buffer of learner transitions (B^TL).
class LearnerBuffer {
 public:
  explicit LearnerBuffer(int64_t capacity = 50000) : capacity_(capacity) {
    if (capacity < 1) throw config_error("LearnerBuffer: capacity must be positive");
  }

  int64_t capacity() const { return capacity_; }
  int64_t size() const { return static_cast<int64_t>(items_.size()); }
  const Transition& at(int64_t i) const { return items_[static_cast<size_t>(i)]; }  // 0 = oldest

  // Appends new transitions, evicting exactly the oldest overflow.
  void insert(std::vector<Transition> items);

 private:
  int64_t capacity_;
  std::deque<Transition> items_;
};

inline void buffer_refresh(LearnerBuffer& buf, std::vector<Transition> items) {
  buf.insert(std::move(items));
}

// --- float conversion at the module boundary ---------------------------------

// uint8 pixels -> floats in [0,1], one row-major [B, H, W, 3] batch.
template <typename T>
Tensor<T> frames_to_batch(const std::vector<Frame>& frames) {
  if (frames.empty()) throw shape_error("frames_to_batch: empty batch");
  const int64_t H = frames[0].ep->H, W = frames[0].ep->W;
  Tensor<T> out({static_cast<int64_t>(frames.size()), H, W, 3});
  const T inv = T{1} / T{255};
  int64_t pos = 0;
  for (const Frame& f : frames) {
    if (f.ep->H != H || f.ep->W != W) throw shape_error("frames_to_batch: mixed frame sizes");
    const uint8_t* px = f.pixels();
    for (int64_t i = 0; i < H * W * 3; ++i) out[pos++] = static_cast<T>(px[i]) * inv;
  }
  return out;
}

// Sequences flattened frame-major: row b*L+i is frame i of sequence b.
template <typename T>
Tensor<T> sequences_to_batch(const std::vector<FrameSequence>& seqs) {
  if (seqs.empty()) throw shape_error("sequences_to_batch: empty batch");
  std::vector<Frame> frames;
  frames.reserve(seqs.size() * static_cast<size_t>(seqs[0].L));
  for (const FrameSequence& s : seqs) {
    if (s.L != seqs[0].L) throw shape_error("sequences_to_batch: mixed sequence lengths");
    for (int64_t i = 0; i < s.L; ++i) frames.push_back(s.frame(i));
  }
  return frames_to_batch<T>(frames);
}

// --- on-disk container (format "diffil-v1") -----------------------------------

void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir);
TrajectoryDataset load_dataset(const std::filesystem::path& dir);

}  // namespace diffil
