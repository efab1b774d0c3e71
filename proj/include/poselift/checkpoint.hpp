#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poselift/config.hpp"
#include "poselift/errors.hpp"
#include "poselift/params.hpp"

namespace poselift::harness {

// Layout: magic line, u64 header length, JSON header (config map and the
// parameter index), then every tensor as little-endian f64 in index order.
inline constexpr char kCheckpointMagic[] = "POSELIFT-CKPT-1\n";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

struct Checkpoint {
  RunConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<double>> tensors;
};

template <class T>
Checkpoint make_checkpoint(const RunConfig& cfg, const numerics::ParamStore<T>& store) {
  Checkpoint ck;
  ck.config = cfg;
  for (const auto& p : store.params()) {
    ck.names.push_back(p.name);
    ck.tensors.push_back(p.value.template cast<double>());
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["config"] = to_map(ck.config);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.names.size(); ++i)
    index.push_back({{"name", ck.names[i]}, {"shape", ck.tensors[i].shape()}});
  header["params"] = index;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ck.tensors)
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  std::string magic(sizeof(kCheckpointMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw IoError(path + " is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 30)) throw IoError(path + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  Checkpoint ck;
  ck.config = default_config();
  for (const auto& [key, value] : header.at("config").items())
    set_value(ck.config, key, value.get<std::string>());
  for (const auto& entry : header.at("params")) {
    Tensor<double> t(entry.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw IoError(path + ": truncated tensor data");
    ck.names.push_back(entry.at("name").get<std::string>());
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

// Copies checkpoint tensors into a store with the same layout.
template <class T>
void restore_params(const Checkpoint& ck, numerics::ParamStore<T>& store) {
  if (ck.names.size() != store.params().size())
    throw ConfigError("checkpoint has " + std::to_string(ck.names.size()) +
                      " tensors, model expects " + std::to_string(store.params().size()));
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    auto& p = store.get(ck.names[i]);
    if (p.value.shape() != ck.tensors[i].shape())
      throw ConfigError("checkpoint tensor " + ck.names[i] + " has shape " +
                        shape_string(ck.tensors[i].shape()) + ", model expects " +
                        shape_string(p.value.shape()));
    p.value = ck.tensors[i].template cast<T>();
  }
}

}  // namespace poselift::harness
