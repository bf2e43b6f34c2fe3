#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dfam/layers.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

// Single-file binary checkpoint: 8-byte magic, little-endian u32 version,
// u64 manifest length, JSON manifest, then all tensor payloads as consecutive
// little-endian IEEE-754 doubles. Offsets in the manifest are relative to the
// start of the payload section.

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointExtra {
  std::string name;
  Tensor* tensor;
};

namespace detail {

template <typename T>
void write_le(std::ostream& o, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  // this codebase targets little-endian hosts; assert the layout once
  static_assert(sizeof(T) <= 8);
  o.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T read_le(std::istream& i) {
  T v;
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace detail

// extras: named tensors beyond the parameters (optimizer moments etc.)
inline void save_checkpoint(const std::string& path, const ParamList& params,
                            const std::vector<CheckpointExtra>& extras, int epoch, int step,
                            const std::string& config_snapshot) {
  nlohmann::json manifest;
  manifest["epoch"] = epoch;
  manifest["step"] = step;
  manifest["precision"] = precision_mode() == Precision::F64 ? "f64" : "f32";
  manifest["config"] = config_snapshot;
  manifest["tensors"] = nlohmann::json::array();
  int64_t offset = 0;
  auto add = [&](const std::string& name, const Tensor& t) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * static_cast<int64_t>(sizeof(double));
  };
  for (const auto& p : params) add(p.name, *p.value);
  for (const auto& e : extras) add(e.name, *e.tensor);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ShapeError("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<uint32_t>(f, kCheckpointVersion);
  const std::string m = manifest.dump();
  detail::write_le<uint64_t>(f, m.size());
  f.write(m.data(), static_cast<std::streamsize>(m.size()));
  auto payload = [&](const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) detail::write_le<double>(f, t[i]);
  };
  for (const auto& p : params) payload(*p.value);
  for (const auto& e : extras) payload(*e.tensor);
  if (!f) throw ShapeError("save_checkpoint: write failed for " + path);
}

struct CheckpointInfo {
  int epoch = 0;
  int step = 0;
  std::string precision;
  std::string config_snapshot;
};

// Loads into existing tensors by name; every destination must be present with
// a matching shape. Mismatches produce a named diff in the error message.
inline CheckpointInfo load_checkpoint(const std::string& path, const ParamList& params,
                                      const std::vector<CheckpointExtra>& extras) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ShapeError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ShapeError("load_checkpoint: bad magic in " + path);
  const auto version = detail::read_le<uint32_t>(f);
  if (version != kCheckpointVersion)
    throw ShapeError("load_checkpoint: unsupported version " + std::to_string(version));
  const auto mlen = detail::read_le<uint64_t>(f);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw ShapeError("load_checkpoint: truncated manifest");
  const nlohmann::json manifest = nlohmann::json::parse(mtext);
  const std::streampos payload_start = f.tellg();

  struct Entry {
    std::vector<int> shape;
    int64_t offset;
  };
  std::unordered_map<std::string, Entry> entries;
  for (const auto& t : manifest.at("tensors"))
    entries[t.at("name").get<std::string>()] = {t.at("shape").get<std::vector<int>>(),
                                                t.at("offset").get<int64_t>()};
  std::string diff;
  auto fetch = [&](const std::string& name, Tensor& dst) {
    auto it = entries.find(name);
    if (it == entries.end()) {
      diff += "  missing in file: " + name + "\n";
      return;
    }
    if (it->second.shape != dst.shape()) {
      diff += "  shape mismatch: " + name + " file " + Tensor::shape_str(it->second.shape) +
              " vs model " + Tensor::shape_str(dst.shape()) + "\n";
      return;
    }
    f.seekg(payload_start + static_cast<std::streamoff>(it->second.offset));
    for (int64_t i = 0; i < dst.numel(); ++i) dst[i] = detail::read_le<double>(f);
  };
  for (const auto& p : params) fetch(p.name, *p.value);
  for (const auto& e : extras) fetch(e.name, *e.tensor);
  if (!f) throw ShapeError("load_checkpoint: truncated payload in " + path);
  if (!diff.empty()) throw ShapeError("load_checkpoint: incompatible tensors:\n" + diff);

  CheckpointInfo info;
  info.epoch = manifest.value("epoch", 0);
  info.step = manifest.value("step", 0);
  info.precision = manifest.value("precision", "f64");
  info.config_snapshot = manifest.value("config", "");
  return info;
}

}  // namespace dfam
