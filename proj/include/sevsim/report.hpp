#pragma once

#include <string>

#include <json.hpp>

#include "sevsim/attacks.hpp"

namespace sevsim {

/// One scenario: mode switches plus run parameters, fully defaulted and
/// recorded verbatim in every report.
struct ScenarioConfig {
  uint64_t seed = 1;
  bool sev = true;
  bool sevEs = false;
  bool writeOnceVmcb = false;
  bool decodeAssists = false;
  bool kaslr = false;
  size_t trials = 100;
  double noise = 0.0;
  double quorum = 0.5;
  size_t minLen = 3;
  uint64_t fuel = 1'000'000;
  size_t workers = 1;
  size_t guestRamBytes = 512ull << 20;
  std::optional<uint32_t> forcedOffset;
};

Mode scenarioMode(const ScenarioConfig& cfg);
SimConfig scenarioSimConfig(const ScenarioConfig& cfg);
nlohmann::json scenarioJson(const ScenarioConfig& cfg);
ScenarioConfig scenarioFromJson(const nlohmann::json& j, ScenarioConfig base = {});

/// Canonical 16-bytes-per-line dump with ascii gutter.
std::string hexdump(std::span<const uint8_t> bytes, uint64_t baseAddr);

struct CmdResult {
  nlohmann::json report;
  std::string table;  // human-readable summary
  int exitCode = 0;
};

CmdResult cmdRead(const ScenarioConfig& cfg, GuestVirtAddr gva, size_t len);
CmdResult cmdWrite(const ScenarioConfig& cfg, GuestVirtAddr gva,
                   const std::array<uint8_t, 4>& bytes);
CmdResult cmdDisableCbit(const ScenarioConfig& cfg, GuestVirtAddr gva, size_t pages);
CmdResult cmdKaslr(const ScenarioConfig& cfg);
CmdResult cmdTrace(const ScenarioConfig& cfg, size_t logins);
CmdResult cmdReplay(const ScenarioConfig& cfg);
CmdResult cmdMatrix(const ScenarioConfig& cfg);

}  // namespace sevsim
