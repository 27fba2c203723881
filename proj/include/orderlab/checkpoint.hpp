#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orderlab/model.hpp"

namespace orderlab::model {

// Checkpoint layout, little-endian throughout:
//   bytes 0..3   magic "ORGC"
//   bytes 4..7   format version (u32)
//   bytes 8..15  header length in bytes (u64)
//   header       UTF-8 JSON: name -> {"shape": [...], "offset": <byte offset
//                into payload>, "dtype": "f32"}
//   payload      f32 values concatenated in sorted parameter-name order
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

template <typename Real>
std::string serialize_checkpoint(const Parameters<Real>& params) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.named) {
    header[name] = {{"shape", t.shape()}, {"offset", offset}, {"dtype", "f32"}};
    offset += static_cast<std::uint64_t>(t.numel()) * 4;
  }
  const std::string header_str = header.dump();
  std::string out;
  out.reserve(16 + header_str.size() + offset);
  out += "ORGC";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header_str.size());
  out += header_str;
  for (const auto& [name, t] : params.named) {
    for (Real v : t.values()) {
      const float f = static_cast<float>(v);
      char bytes[4];
      std::memcpy(bytes, &f, 4);
      out.append(bytes, 4);
    }
  }
  return out;
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Parameters<Real>& params) {
  const std::string blob = serialize_checkpoint(params);
  // Write then rename so an interrupted save never clobbers a valid file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + tmp.string() + "' for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Parameters<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "'");
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (blob.size() < 16 || blob.compare(0, 4, "ORGC") != 0) {
    throw std::runtime_error("checkpoint: '" + path.string() + "' is not an ORGC file");
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t version = detail::get_u32(bytes + 4);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint64_t header_len = detail::get_u64(bytes + 8);
  if (16 + header_len > blob.size()) throw std::runtime_error("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad header JSON: ") + e.what());
  }
  const std::size_t payload_base = 16 + header_len;
  Parameters<float> params;
  for (const auto& [name, meta] : header.items()) {
    const std::vector<int> shape = meta.at("shape").get<std::vector<int>>();
    const std::uint64_t offset = meta.at("offset").get<std::uint64_t>();
    if (meta.at("dtype").get<std::string>() != "f32") {
      throw std::runtime_error("checkpoint: tensor '" + name + "' has unsupported dtype");
    }
    const std::size_t n = ad::shape_numel(shape);
    if (payload_base + offset + n * 4 > blob.size()) {
      throw std::runtime_error("checkpoint: payload truncated for tensor '" + name + "'");
    }
    std::vector<float> values(n);
    std::memcpy(values.data(), blob.data() + payload_base + offset, n * 4);
    params.named.emplace(name, ad::Tensor<float>::from(shape, std::move(values)));
  }
  return params;
}

}  // namespace orderlab::model
