#pragma once

// Single-file network checkpoint: 8-byte magic, a JSON manifest of tensor
// names and shapes, then raw float32 payloads in manifest order.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "diffil/errors.hpp"
#include "diffil/nn.hpp"

namespace diffil {

inline constexpr char kNetMagic[8] = {'D', 'I', 'F', 'F', 'I', 'L', 'N', '1'};

template <typename T>
void save_network(const std::filesystem::path& path, const std::vector<nn::NamedTensor<T>>& tensors) {
  nlohmann::json man;
  man["version"] = "diffil-net-v1";
  man["tensors"] = nlohmann::json::array();
  for (const auto& nt : tensors) {
    nlohmann::json t;
    t["name"] = nt.name;
    t["shape"] = nt.tensor->shape;
    t["param"] = nt.is_param;
    man["tensors"].push_back(std::move(t));
  }
  const std::string ms = man.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write checkpoint " + path.string());
  f.write(kNetMagic, sizeof(kNetMagic));
  const uint64_t mlen = ms.size();
  f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  f.write(ms.data(), static_cast<std::streamsize>(ms.size()));
  std::vector<float> buf;
  for (const auto& nt : tensors) {
    buf.resize(static_cast<size_t>(nt.tensor->size()));
    for (int64_t i = 0; i < nt.tensor->size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>((*nt.tensor)[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!f) throw data_error("short write to checkpoint " + path.string());
}

template <typename T>
void load_network(const std::filesystem::path& path, const std::vector<nn::NamedTensor<T>>& tensors) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("missing checkpoint " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kNetMagic, sizeof(magic)) != 0)
    throw data_error("bad checkpoint magic in " + path.string());
  uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string ms(mlen, '\0');
  f.read(ms.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw data_error("truncated checkpoint manifest in " + path.string());

  nlohmann::json man;
  try {
    man = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (man.value("version", "") != "diffil-net-v1")
    throw data_error("unsupported checkpoint version in " + path.string());
  const auto& tl = man["tensors"];
  if (tl.size() != tensors.size())
    throw data_error("checkpoint tensor count mismatch in " + path.string());

  std::vector<float> buf;
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = tl[i];
    if (entry["name"].get<std::string>() != tensors[i].name)
      throw data_error("checkpoint tensor '" + entry["name"].get<std::string>() + "' does not match '" +
                       tensors[i].name + "'");
    const Shape shape = entry["shape"].get<Shape>();
    if (shape != tensors[i].tensor->shape)
      throw data_error("checkpoint shape mismatch for " + tensors[i].name);
    buf.resize(static_cast<size_t>(tensors[i].tensor->size()));
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw data_error("truncated payload for tensor " + tensors[i].name);
    for (int64_t j = 0; j < tensors[i].tensor->size(); ++j)
      (*tensors[i].tensor)[j] = static_cast<T>(buf[static_cast<size_t>(j)]);
  }
}

}  // namespace diffil
