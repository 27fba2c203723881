#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orderlab/sha256.hpp"

namespace orderlab::metrics {

struct ScorerRecord {
  std::string response;
  std::vector<std::string> persona;
};

// Plug-in point for a real NLI-based consistency scorer. Records go to the
// child process as JSONL {"response": ..., "persona": [...]} on stdin; the
// child answers one {"score": <number>} line per record on stdout.
class ExternalConsistencyScorer {
 public:
  explicit ExternalConsistencyScorer(std::string command) : command_(std::move(command)) {
    if (command_.empty()) throw std::invalid_argument("external scorer: empty command");
  }

  std::vector<double> score(const std::vector<ScorerRecord>& records) const {
    // Input goes through a temp file; reading the child's stdout via popen
    // then cannot deadlock on pipe buffers.
    std::string payload;
    for (const auto& r : records) {
      nlohmann::json j;
      j["persona"] = r.persona;
      j["response"] = r.response;
      payload += j.dump();
      payload += "\n";
    }
    const auto tmp = std::filesystem::temp_directory_path() /
                     ("orderlab_scorer_" + sha256_hex(payload).substr(0, 16) + ".jsonl");
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw std::runtime_error("external scorer: cannot write '" + tmp.string() + "'");
      f << payload;
    }
    const std::string cmd = command_ + " < '" + tmp.string() + "'";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
      std::filesystem::remove(tmp);
      throw std::runtime_error("external scorer: failed to launch '" + command_ + "'");
    }
    std::string output;
    char buf[4096];
    std::size_t got;
    while ((got = fread(buf, 1, sizeof(buf), pipe)) > 0) output.append(buf, got);
    const int status = pclose(pipe);
    std::filesystem::remove(tmp);
    if (status != 0) {
      throw std::runtime_error("external scorer: command exited with status " + std::to_string(status));
    }

    std::vector<double> scores;
    std::istringstream lines(output);
    std::string line;
    int line_no = 0;
    while (std::getline(lines, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("external scorer: protocol error at output line " +
                                 std::to_string(line_no) + ": not JSON: " + line);
      }
      if (!j.is_object() || !j.contains("score") || !j["score"].is_number()) {
        throw std::runtime_error("external scorer: protocol error at output line " +
                                 std::to_string(line_no) + ": expected {\"score\": <number>}, got: " + line);
      }
      scores.push_back(j["score"].get<double>());
    }
    if (scores.size() != records.size()) {
      throw std::runtime_error("external scorer: got " + std::to_string(scores.size()) + " scores for " +
                               std::to_string(records.size()) + " records");
    }
    return scores;
  }

 private:
  std::string command_;
};

}  // namespace orderlab::metrics
