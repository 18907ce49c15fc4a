#pragma once

// Single-file checkpoint:
//   "HSALAB1\n" | u64 header length | header JSON | blobs | u64 FNV-1a
// The header carries the canonical config JSON, free-form metadata and a
// manifest of blobs (name, shape, dtype f32 or f64, offset). The trailing checksum covers every
// preceding byte. All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hsa_lab/model/config.hpp"
#include "hsa_lab/numerics/parameter.hpp"

namespace hsa_lab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedBlob {
  std::string name;
  Shape shape;
  std::vector<double> data;
  bool f64 = false;  // stored as f64 rather than f32

  std::size_t bytes() const { return data.size() * (f64 ? 8 : 4); }
};

struct Checkpoint {
  ModelConfig config;
  json meta = json::object();
  std::vector<NamedBlob> blobs;

  const NamedBlob* find(const std::string& name) const {
    for (const auto& b : blobs) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[8] = {'H', 'S', 'A', 'L', 'A', 'B', '1', '\n'};

template <std::floating_point T>
std::vector<NamedBlob> blobs_from(const ParameterSet<T>& ps, const std::string& prefix = "") {
  std::vector<NamedBlob> out;
  for (const auto& p : ps.items()) {
    NamedBlob b{prefix + p.name, p.tensor.shape(), {}, sizeof(T) > sizeof(float)};
    b.data.assign(p.tensor.data().begin(), p.tensor.data().end());
    out.push_back(std::move(b));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& b : ck.blobs) {
    if (numel(b.shape) != b.data.size()) throw ShapeError("checkpoint blob " + b.name + " shape mismatch");
    manifest.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"dtype", b.f64 ? "f64" : "f32"}});
    offset += b.bytes();
  }
  json header{{"format", 1}, {"config", to_json(ck.config)}, {"meta", ck.meta}, {"tensors", manifest}};
  const std::string hs = header.dump();
  std::string bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t hl = hs.size();
  bytes.append(reinterpret_cast<const char*>(&hl), sizeof hl);
  bytes += hs;
  for (const auto& b : ck.blobs) {
    if (b.f64) {
      bytes.append(reinterpret_cast<const char*>(b.data.data()), b.bytes());
    } else {
      std::vector<float> f(b.data.begin(), b.data.end());
      bytes.append(reinterpret_cast<const char*>(f.data()), b.bytes());
    }
  }
  const std::uint64_t sum = fnv1a64(bytes);
  bytes.append(reinterpret_cast<const char*>(&sum), sizeof sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t min = sizeof kCheckpointMagic + 2 * sizeof(std::uint64_t);
  if (bytes.size() < min || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  if (fnv1a64(std::string_view(bytes).substr(0, bytes.size() - sizeof stored)) != stored) {
    throw IoError(path.string() + ": checksum mismatch");
  }
  std::uint64_t hl = 0;
  std::memcpy(&hl, bytes.data() + sizeof kCheckpointMagic, sizeof hl);
  const std::size_t hstart = sizeof kCheckpointMagic + sizeof hl;
  if (hstart + hl > bytes.size() - sizeof stored) throw IoError(path.string() + ": truncated header");
  const json header = json::parse(bytes.substr(hstart, hl));
  Checkpoint ck;
  ck.config = model_config_from_json(header.at("config"), "config");
  ck.meta = header.value("meta", json::object());
  const std::size_t data_start = hstart + hl;
  const std::size_t data_len = bytes.size() - sizeof stored - data_start;
  for (const auto& t : header.at("tensors")) {
    NamedBlob b{t.at("name").get<std::string>(), t.at("shape").get<Shape>(), {}, t.value("dtype", "f32") == "f64"};
    const auto off = t.at("offset").get<std::uint64_t>();
    b.data.resize(numel(b.shape));
    if (off + b.bytes() > data_len) throw IoError(path.string() + ": blob " + b.name + " out of bounds");
    const char* src = bytes.data() + data_start + off;
    if (b.f64) {
      std::memcpy(b.data.data(), src, b.bytes());
    } else {
      std::vector<float> f(b.data.size());
      std::memcpy(f.data(), src, b.bytes());
      b.data.assign(f.begin(), f.end());
    }
    ck.blobs.push_back(std::move(b));
  }
  return ck;
}

/// Copies blobs named `prefix + param` into `ps`; every parameter must exist.
template <std::floating_point T>
void restore_parameters(ParameterSet<T>& ps, const Checkpoint& ck, const std::string& prefix = "") {
  for (auto& p : ps.items()) {
    const NamedBlob* b = ck.find(prefix + p.name);
    if (!b) throw IoError("checkpoint lacks tensor " + prefix + p.name);
    if (b->shape != p.tensor.shape()) {
      throw IoError("checkpoint tensor " + p.name + " has shape " + shape_str(b->shape) + ", model expects " +
                    shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(b->data[i]);
  }
}

}  // namespace hsa_lab
