#pragma once

// Checkpoint container:
//   8 bytes   magic "DPCKPT01"
//   8 bytes   header length L, little-endian u64
//   L bytes   JSON header {config, config_hash, step, seed, params: [{name, shape}]}
//   payload   every parameter value as little-endian f64, in header order
// Round trips are bit-exact.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/io.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'P', 'C', 'K', 'P', 'T', '0', '1'};

struct CheckpointMeta {
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::string config_hash;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::string> names;  // file order
  std::map<std::string, Tensor> params;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointMeta& meta, std::span<ad::Param* const> params) {
  nlohmann::ordered_json header;
  header["config"] = meta.config;
  header["config_hash"] = meta.config_hash;
  header["step"] = meta.step;
  header["seed"] = meta.seed;
  header["params"] = nlohmann::ordered_json::array();
  std::size_t total = 0;
  for (const auto* p : params) {
    header["params"].push_back({{"name", p->name}, {"shape", p->value.shape()}});
    total += p->value.numel();
  }
  const std::string h = header.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + 8 * total);
  for (const auto* p : params) {
    for (double v : p->value.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0) {
    throw IoError("checkpoint: bad magic (not a diffprune checkpoint)");
  }
  const std::uint64_t hlen = detail::get_u64(p + 8);
  if (hlen > bytes.size() - 16) throw IoError("checkpoint: truncated header");

  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: corrupt header: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.meta.config = header.at("config");
    ck.meta.config_hash = header.at("config_hash").get<std::string>();
    ck.meta.step = header.at("step").get<std::uint64_t>();
    ck.meta.seed = header.at("seed").get<std::uint64_t>();
    std::size_t offset = 16 + hlen;
    for (const auto& entry : header.at("params")) {
      auto name = entry.at("name").get<std::string>();
      auto shape = entry.at("shape").get<Shape>();
      const std::size_t n = shape_numel(shape);
      if (n > (bytes.size() - offset) / 8) throw IoError("checkpoint: truncated payload at '" + name + "'");
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(detail::get_u64(p + offset + 8 * i));
      offset += 8 * n;
      if (!ck.params.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
        throw IoError("checkpoint: duplicate parameter '" + name + "'");
      }
      ck.names.push_back(std::move(name));
    }
    if (offset != bytes.size()) throw IoError("checkpoint: trailing bytes after payload");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                            std::span<ad::Param* const> params) {
  write_file_atomic(path, encode_checkpoint(meta, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

/// Copies checkpoint values into `params` by name. Every parameter must be
/// present with the same shape.
inline void restore_params(const Checkpoint& ck, std::span<ad::Param* const> params) {
  for (auto* p : params) {
    auto it = ck.params.find(p->name);
    if (it == ck.params.end()) throw IoError("checkpoint has no parameter '" + p->name + "'");
    if (it->second.shape() != p->value.shape()) {
      throw IoError("checkpoint parameter '" + p->name + "' has shape " + shape_str(it->second.shape()) +
                    ", model expects " + shape_str(p->value.shape()));
    }
    p->value = it->second;
  }
}

}  // namespace diffprune
