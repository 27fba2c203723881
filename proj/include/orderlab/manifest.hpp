#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "orderlab/sha256.hpp"

namespace orderlab::cli {

// Every subcommand writes one of these next to its artifacts. Volatile
// outputs (files that contain wall-clock timings) are listed without a
// digest so the manifest itself is reproducible byte-for-byte.
struct Manifest {
  std::string subcommand;
  std::string config_sha256;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // relative path -> sha256
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  std::vector<std::string> volatile_outputs;

  void add_input(const std::filesystem::path& base, const std::filesystem::path& path) {
    inputs[relative_key(base, path)] = sha256_file_hex(path);
  }
  void add_output(const std::filesystem::path& base, const std::filesystem::path& path) {
    outputs[relative_key(base, path)] = sha256_file_hex(path);
  }
  void add_volatile_output(const std::filesystem::path& base, const std::filesystem::path& path) {
    volatile_outputs.push_back(relative_key(base, path));
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"schema_version", 1},
                          {"subcommand", subcommand},
                          {"config_sha256", config_sha256},
                          {"seed", seed},
                          {"inputs", inputs},
                          {"outputs", outputs},
                          {"volatile_outputs", volatile_outputs}};
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("manifest: cannot open '" + path.string() + "' for writing");
    f << to_json().dump(2) << "\n";
  }

 private:
  static std::string relative_key(const std::filesystem::path& base, const std::filesystem::path& path) {
    std::error_code ec;
    const auto rel = std::filesystem::relative(path, base, ec);
    return ec || rel.empty() ? path.generic_string() : rel.generic_string();
  }
};

inline std::string config_digest(const nlohmann::json& doc) { return sha256_hex(doc.dump()); }

}  // namespace orderlab::cli
