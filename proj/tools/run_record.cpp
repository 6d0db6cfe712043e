// SPDX-License-Identifier: Apache-2.0
#include "run_record.hpp"

#include <omp.h>

#include <ctime>

#include "echoedm/config.hpp"

#ifndef ECHOEDM_VERSION
#define ECHOEDM_VERSION "unknown"
#endif

namespace echoedm::cli {

namespace {

std::string iso_utc(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string code_version() { return ECHOEDM_VERSION; }

RunRecord::RunRecord(std::vector<std::string> argv, std::string command)
    : argv_(std::move(argv)), command_(std::move(command)), started_(std::chrono::system_clock::now()) {}

nlohmann::json RunRecord::to_json() const {
  char hash[9];
  std::snprintf(hash, sizeof hash, "%08x", text_hash(config_.dump()));
  nlohmann::json j = {{"record_version", 1},
                      {"command", command_},
                      {"command_line", argv_},
                      {"config", config_},
                      {"config_hash", hash},
                      {"seed", seed_},
                      {"code_version", code_version()},
                      {"threads", omp_get_max_threads()},
                      {"started_utc", iso_utc(started_)},
                      {"finished_utc", iso_utc(std::chrono::system_clock::now())},
                      {"outputs", outputs_}};
  for (const auto& [k, v] : extra_.items()) j[k] = v;
  return j;
}

void RunRecord::write(const std::filesystem::path& path) const {
  write_text_file(path, to_json().dump(2) + "\n");
}

}  // namespace echoedm::cli
