#include "diffil/data_model.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace diffil {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(DomainTag d) { return d == DomainTag::SOURCE ? "source" : "target"; }

std::string to_string(ProvenanceTag p) {
  switch (p) {
    case ProvenanceTag::SOURCE_EXPERT: return "source_expert";
    case ProvenanceTag::SOURCE_RANDOM: return "source_random";
    case ProvenanceTag::TARGET_RANDOM: return "target_random";
    case ProvenanceTag::TARGET_LEARNER: return "target_learner";
  }
  return "?";
}

ProvenanceTag provenance_from_string(const std::string& s) {
  if (s == "source_expert") return ProvenanceTag::SOURCE_EXPERT;
  if (s == "source_random") return ProvenanceTag::SOURCE_RANDOM;
  if (s == "target_random") return ProvenanceTag::TARGET_RANDOM;
  if (s == "target_learner") return ProvenanceTag::TARGET_LEARNER;
  throw data_error("unknown provenance tag '" + s + "'");
}

void EpisodeFrames::validate() const {
  if (steps < 1) throw data_error("episode must have at least one step");
  if (static_cast<int64_t>(pixels.size()) != frame_count() * frame_bytes())
    throw data_error("episode pixel payload has wrong size");
  if (!states.empty() && static_cast<int64_t>(states.size()) != frame_count() * s_dim)
    throw data_error("episode state payload has wrong size");
  if (!actions.empty() && static_cast<int64_t>(actions.size()) != steps * a_dim)
    throw data_error("episode action payload has wrong size");
}

void TrajectoryDataset::add_episode(EpisodePtr ep) {
  ep->validate();
  if (ep->H != H_ || ep->W != W_) throw data_error("episode frame size does not match dataset");
  if (ep->provenance != provenance_) throw data_error("episode provenance does not match dataset");
  if (!would_fit(ep->frame_count()))
    throw data_error("dataset capacity " + std::to_string(capacity_) + " frames exceeded");
  frame_offsets_.push_back(total_frames_);
  total_frames_ += ep->frame_count();
  episodes_.push_back(std::move(ep));
}

Frame TrajectoryDataset::frame_at(int64_t flat) const {
  if (flat < 0 || flat >= total_frames_) throw shape_error("frame_at: index out of range");
  auto it = std::upper_bound(frame_offsets_.begin(), frame_offsets_.end(), flat);
  const size_t e = static_cast<size_t>(std::distance(frame_offsets_.begin(), it)) - 1;
  return Frame{episodes_[e], flat - frame_offsets_[e]};
}

void LearnerBuffer::insert(std::vector<Transition> items) {
  if (static_cast<int64_t>(items.size()) > capacity_)
    throw data_error("refusing to insert " + std::to_string(items.size()) +
                     " transitions into a buffer of capacity " + std::to_string(capacity_));
  for (auto& t : items) items_.push_back(std::move(t));
  while (static_cast<int64_t>(items_.size()) > capacity_) items_.pop_front();
}

namespace {

constexpr const char* kMagic = "diffil";
constexpr const char* kVersion = "diffil-v1";

void write_blob(const fs::path& p, const void* data, size_t bytes) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw data_error("cannot write " + p.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw data_error("short write to " + p.string());
}

std::vector<char> read_blob(const fs::path& p, size_t expected_bytes, const std::string& what) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw data_error("missing payload for " + what + ": " + p.string());
  const auto actual = static_cast<size_t>(f.tellg());
  if (actual != expected_bytes)
    throw data_error(what + ": payload " + p.filename().string() + " has " + std::to_string(actual) +
                     " bytes, manifest implies " + std::to_string(expected_bytes));
  std::vector<char> buf(expected_bytes);
  f.seekg(0);
  f.read(buf.data(), static_cast<std::streamsize>(expected_bytes));
  if (!f) throw data_error("short read from " + p.string());
  return buf;
}

std::string episode_stem(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "episode_%04d", static_cast<int>(i));
  return buf;
}

}  // namespace

void save_dataset(const TrajectoryDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  json man;
  man["magic"] = kMagic;
  man["version"] = kVersion;
  man["provenance"] = to_string(ds.provenance());
  man["H"] = ds.H();
  man["W"] = ds.W();
  man["capacity"] = ds.capacity();
  man["frame_count"] = ds.total_frames();
  man["episodes"] = json::array();
  for (int64_t i = 0; i < ds.episode_count(); ++i) {
    const EpisodeFrames& ep = *ds.episode(i);
    const std::string stem = episode_stem(i);
    json e;
    e["steps"] = ep.steps;
    e["pixels"] = stem + ".u8";
    write_blob(dir / (stem + ".u8"), ep.pixels.data(), ep.pixels.size());
    if (!ep.states.empty()) {
      e["states"] = stem + ".states.f32";
      e["s_dim"] = ep.s_dim;
      write_blob(dir / (stem + ".states.f32"), ep.states.data(), ep.states.size() * sizeof(float));
    }
    if (!ep.actions.empty()) {
      e["actions"] = stem + ".actions.f32";
      e["a_dim"] = ep.a_dim;
      write_blob(dir / (stem + ".actions.f32"), ep.actions.data(), ep.actions.size() * sizeof(float));
    }
    man["episodes"].push_back(std::move(e));
  }
  std::ofstream f(dir / "manifest");
  if (!f) throw data_error("cannot write manifest in " + dir.string());
  f << man.dump(2) << "\n";
}

TrajectoryDataset load_dataset(const fs::path& dir) {
  std::ifstream f(dir / "manifest");
  if (!f) throw data_error("no manifest in " + dir.string());
  json man;
  try {
    f >> man;
  } catch (const json::exception& e) {
    throw data_error("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!man.contains("magic") || man["magic"] != kMagic)
    throw data_error("manifest magic string mismatch in " + dir.string());
  if (!man.contains("version") || man["version"] != kVersion)
    throw data_error("unsupported container version in " + dir.string());
  for (const char* key : {"provenance", "H", "W", "capacity", "frame_count", "episodes"})
    if (!man.contains(key)) throw data_error(std::string("manifest missing field '") + key + "'");

  TrajectoryDataset ds(provenance_from_string(man["provenance"]), man["capacity"].get<int64_t>(),
                       man["H"].get<int64_t>(), man["W"].get<int64_t>());
  int64_t idx = 0;
  for (const json& e : man["episodes"]) {
    const std::string what = "episode " + std::to_string(idx);
    if (!e.contains("steps") || !e.contains("pixels")) throw data_error(what + ": missing steps/pixels");
    auto ep = std::make_shared<EpisodeFrames>();
    ep->H = ds.H();
    ep->W = ds.W();
    ep->steps = e["steps"].get<int64_t>();
    ep->provenance = ds.provenance();
    const size_t px_bytes = static_cast<size_t>(ep->frame_count() * ep->frame_bytes());
    auto px = read_blob(dir / e["pixels"].get<std::string>(), px_bytes, what);
    ep->pixels.assign(px.begin(), px.end());
    if (e.contains("states")) {
      ep->s_dim = e["s_dim"].get<int64_t>();
      auto st = read_blob(dir / e["states"].get<std::string>(),
                          static_cast<size_t>(ep->frame_count() * ep->s_dim) * sizeof(float), what);
      ep->states.resize(static_cast<size_t>(ep->frame_count() * ep->s_dim));
      std::memcpy(ep->states.data(), st.data(), st.size());
    }
    if (e.contains("actions")) {
      ep->a_dim = e["a_dim"].get<int64_t>();
      auto ac = read_blob(dir / e["actions"].get<std::string>(),
                          static_cast<size_t>(ep->steps * ep->a_dim) * sizeof(float), what);
      ep->actions.resize(static_cast<size_t>(ep->steps * ep->a_dim));
      std::memcpy(ep->actions.data(), ac.data(), ac.size());
    }
    ds.add_episode(std::move(ep));
    ++idx;
  }
  if (ds.total_frames() != man["frame_count"].get<int64_t>())
    throw data_error("manifest frame_count does not match episode payloads");
  return ds;
}

}  // namespace diffil
