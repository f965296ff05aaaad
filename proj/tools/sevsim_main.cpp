#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sevsim/report.hpp"

using nlohmann::json;
using namespace sevsim;

namespace {

int emit(const CmdResult& res, const std::string& outPath) {
  std::cout << res.table;
  std::string text = res.report.dump(2) + "\n";
  if (outPath.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(outPath, std::ios::binary);
    if (!f) {
      std::cerr << "error: cannot open " << outPath << " for writing\n";
      return 2;
    }
    f << text;
    std::cout << "report written to " << outPath << "\n";
  }
  return res.exitCode;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sevsim: encrypted-VM attack simulator"};
  app.require_subcommand(1);

  // --config is resolved before the regular flags so that explicit flags
  // override file-provided values.
  std::string configPath;
  for (int i = 1; i < argc - 1; ++i) {
    std::string a = argv[i];
    if (a == "--config") configPath = argv[i + 1];
  }
  ScenarioConfig cfg;
  if (!configPath.empty()) {
    std::ifstream f(configPath);
    if (!f) {
      std::cerr << "error: cannot read config file " << configPath << "\n";
      return 2;
    }
    json j;
    try {
      f >> j;
      cfg = scenarioFromJson(j, cfg);
    } catch (const std::exception& e) {
      std::cerr << "error: bad config file: " << e.what() << "\n";
      return 2;
    }
  }

  std::string outPath;
  std::string configDummy;
  app.add_option("--config", configDummy, "JSON file with scenario defaults");
  app.add_option("--out", outPath, "write the JSON report to this file");
  app.add_option("--seed", cfg.seed, "deterministic seed");
  app.add_flag("--sev-es,!--no-sev-es", cfg.sevEs, "seal register state");
  app.add_flag("--write-once-vmcb,!--no-write-once-vmcb", cfg.writeOnceVmcb,
               "control fields become write-once");
  app.add_flag("--decode-assists,!--no-decode-assists", cfg.decodeAssists,
               "hardware fills decoded fault info for shared pages");
  app.add_flag("--kaslr,!--no-kaslr", cfg.kaslr, "randomize guest layout");
  app.add_option("--trials", cfg.trials, "replay trial count");
  app.add_option("--noise", cfg.noise, "background activity rate [0,1]");
  app.add_option("--quorum", cfg.quorum, "trace-extraction quorum fraction");
  app.add_option("--min-len", cfg.minLen, "minimum reference sequence length");
  app.add_option("--workers", cfg.workers, "parallel trial workers");
  app.add_option("--ram", cfg.guestRamBytes, "guest RAM bytes");
  uint32_t forcedOffset = 0;
  auto* offOpt =
      app.add_option("--forced-offset", forcedOffset, "pin the buffer placement offset");

  uint64_t gva = GuestImage::kPayloadVirtBase;
  size_t len = 64;
  size_t pages = 1;
  size_t logins = 3;
  std::vector<std::string> writeBytes;

  auto* readCmd = app.add_subcommand("read", "read guest memory via a store gadget");
  readCmd->add_option("--gva", gva, "guest virtual address");
  readCmd->add_option("--len", len, "bytes to read");

  auto* writeCmd = app.add_subcommand("write", "write guest memory via a load gadget");
  writeCmd->add_option("--gva", gva, "guest virtual address");
  auto* bytesOpt = writeCmd->add_option("--bytes", writeBytes,
                                        "four byte values, e.g. 0xde 0xad 0xbe 0xef");
  bytesOpt->expected(4);

  auto* disableCmd =
      app.add_subcommand("disable-cbit", "clear page privacy bits and swap frames");
  disableCmd->add_option("--gva", gva, "guest virtual address of the first page");
  disableCmd->add_option("--pages", pages, "number of pages");

  auto* kaslrCmd = app.add_subcommand("kaslr", "recover randomized layout offsets");
  auto* traceCmd = app.add_subcommand("trace", "record per-page syscall write traces");
  traceCmd->add_option("--logins", logins, "login attempts to observe");
  app.add_subcommand("replay", "capture/replay attack over many trials");
  app.add_subcommand("matrix", "run every attack under every mitigation mode");

  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);
  if (offOpt->count() > 0) cfg.forcedOffset = forcedOffset;

  try {
    if (readCmd->parsed()) return emit(cmdRead(cfg, gva, len), outPath);
    if (writeCmd->parsed()) {
      std::array<uint8_t, 4> bytes{};
      for (size_t i = 0; i < 4; ++i)
        bytes[i] = static_cast<uint8_t>(std::stoul(writeBytes[i], nullptr, 0));
      return emit(cmdWrite(cfg, gva, bytes), outPath);
    }
    if (disableCmd->parsed()) return emit(cmdDisableCbit(cfg, gva, pages), outPath);
    if (kaslrCmd->parsed()) return emit(cmdKaslr(cfg), outPath);
    if (traceCmd->parsed()) return emit(cmdTrace(cfg, logins), outPath);
    if (app.got_subcommand("replay")) return emit(cmdReplay(cfg), outPath);
    if (app.got_subcommand("matrix")) return emit(cmdMatrix(cfg), outPath);
  } catch (const SimError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
