// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace echoedm::cli {

/// Provenance of one artifact-producing invocation. Replaying `argv` with
/// --threads 1 reproduces the outputs bit for bit.
class RunRecord {
 public:
  RunRecord(std::vector<std::string> argv, std::string command);

  void set_seed(std::uint64_t seed) { seed_ = seed; }
  /// Resolved configuration; hashed into config_hash.
  void set_config(nlohmann::json config) { config_ = std::move(config); }
  void add_output(const std::filesystem::path& p) { outputs_.push_back(p.string()); }
  nlohmann::json& extra() { return extra_; }

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> argv_;
  std::string command_;
  std::uint64_t seed_ = 0;
  nlohmann::json config_ = nlohmann::json::object();
  nlohmann::json extra_ = nlohmann::json::object();
  std::vector<std::string> outputs_;
  std::chrono::system_clock::time_point started_;
};

std::string code_version();

}  // namespace echoedm::cli
