// End-to-end acceptance run: one pass/fail line per criterion, nonzero exit
// if any line fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "sevsim/report.hpp"

using namespace sevsim;
using Clock = std::chrono::steady_clock;

namespace {

constexpr size_t kRam = 16ull << 20;

bool gAllPass = true;

void verdict(int n, const std::string& name, bool pass, const std::string& detail) {
  std::printf("criterion %d (%s): %s%s%s\n", n, name.c_str(), pass ? "PASS" : "FAIL",
              detail.empty() ? "" : " - ", detail.c_str());
  std::fflush(stdout);
  gAllPass = gAllPass && pass;
}

double secondsSince(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

SimConfig smallCfg(uint64_t seed = 1) {
  SimConfig c;
  c.seed = seed;
  c.guestRamBytes = kRam;
  return c;
}

void criterion1() {
  auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  bool ok = true;
  for (int i = 0; i < 10000 && ok; ++i) {
    VmKey key = VmKey::derive(uint32_t(rng()), rng());
    Block p;
    for (auto& b : p) b = uint8_t(rng());
    HostPhysAddr tweak = (rng() % (1ull << 40)) & ~uint64_t(kBlockSize - 1);
    Block c1 = encryptBlock(key, p, tweak);
    Block c2 = encryptBlock(key, p, tweak);
    ok = ok && c1 == c2 && decryptBlock(key, c1, tweak) == p;
  }
  for (int i = 0; i < 1000 && ok; ++i) {
    VmKey key = VmKey::derive(uint32_t(rng()), rng());
    Block p;
    for (auto& b : p) b = uint8_t(rng());
    uint64_t t1 = (rng() % (1ull << 40)) & ~uint64_t(kBlockSize - 1);
    uint64_t t2 = t1 + kBlockSize * (1 + rng() % 1000);
    ok = ok && encryptBlock(key, p, t1) != encryptBlock(key, p, t2);
  }
  double dt = secondsSince(t0);
  verdict(1, "cipher properties", ok && dt < 5.0,
          "10000 triples + 1000 tweak pairs in " + std::to_string(dt) + "s");
}

void criterion2() {
  auto t0 = Clock::now();
  GuestMachine m(smallCfg(2));
  Hypervisor hv(m);
  Attacker atk(hv, referenceImage(kRam));

  // Plant a full page of secret material, then lift it with the gadget.
  GuestVirtAddr page = m.image().payloadVirt(0);
  std::vector<uint8_t> secret(kPageSize);
  std::mt19937_64 rng(99);
  for (auto& b : secret) b = uint8_t(rng());
  m.guestPoke(page, secret);

  atk.resetGadgetExits();
  auto got = atk.readRegion(page, kPageSize);
  auto oracle = m.guestView(page, kPageSize);
  double dt = secondsSince(t0);
  bool ok = got == secret && got == oracle && atk.gadgetExits() == 1024 && dt < 5.0;
  verdict(2, "read primitive exactness", ok,
          "4096 bytes in " + std::to_string(atk.gadgetExits()) + " hlt exits, " +
              std::to_string(dt) + "s");
}

void criterion3() {
  bool ok = true;
  std::string detail;
  for (uint64_t seed = 1; seed <= 100 && ok; ++seed) {
    SimConfig c = smallCfg(seed);
    c.kaslrEnabled = true;
    GuestMachine m(c);
    Hypervisor hv(m);
    Attacker atk(hv, referenceImage(kRam));
    const KaslrConfig& truth = *m.config().kaslr;

    auto [v, p] = atk.locateKaslrCtrlreg();
    if (v != truth.virtOffset || p != truth.physOffset) {
      ok = false;
      detail = "ctrlreg variant missed at seed " + std::to_string(seed);
      break;
    }

    GuestMachine m2(c);
    Hypervisor hv2(m2);
    Attacker atk2(hv2, referenceImage(kRam));
    if (atk2.locateKaslrInterrupt() != truth.physOffset) {
      ok = false;
      detail = "interrupt variant missed at seed " + std::to_string(seed);
      break;
    }
  }

  if (ok) {
    SimConfig c = smallCfg(7);
    c.kaslrEnabled = true;
    c.mode.sevEs = true;
    GuestMachine m(c);
    Hypervisor hv(m);
    Attacker atk(hv, referenceImage(kRam));
    if (atk.locateKaslrInterrupt() != m.config().kaslr->physOffset) {
      ok = false;
      detail = "interrupt variant failed under sealed state";
    } else {
      try {
        atk.locateKaslrCtrlreg();
        ok = false;
        detail = "ctrlreg variant did not error under sealed state";
      } catch (const StateSealed&) {
        detail = "100 seeded pairs exact, sealed-state behavior correct";
      }
    }
  }
  verdict(3, "layout offset recovery", ok, detail);
}

void criterion4() {
  GuestMachine m(smallCfg(4));
  Hypervisor hv(m);
  Attacker atk(hv, referenceImage(kRam));

  std::vector<GuestVirtAddr> pages;
  for (size_t i = 0; i < 16; ++i) pages.push_back(m.image().payloadVirt(i));

  // Baseline checksum pass on a machine nobody attacks.
  GuestMachine base(smallCfg(4));
  std::vector<uint32_t> baseline;
  for (auto p : pages) baseline.push_back(base.runChecksum(p));

  bool ok = true;
  for (size_t i = 0; i < pages.size() && ok; ++i) {
    HostPhysAddr frame = atk.disableProtection(pages[i]);
    ok = m.phys().rawRead(frame, kPageSize) == m.guestView(pages[i], kPageSize) &&
         m.runChecksum(pages[i]) == baseline[i];
  }
  verdict(4, "protection disable transparency", ok,
          "16 pages: raw == guest view, checksums == no-attack baseline");
}

void criterion5() {
  ReplayConfig rc;
  rc.seed = 5;
  rc.guestRamBytes = kRam;
  rc.workers = 8;
  rc.trainingLogins = 8;

  rc.trials = 100;
  rc.forcedOffset = 0x0a0;
  ReplayReport forced = evaluateReplay(rc);
  bool forcedOk = forced.successRate == 1.0 && forced.identificationAccuracy == 1.0;

  rc.trials = 400;
  rc.forcedOffset.reset();
  ReplayReport uniform = evaluateReplay(rc);
  auto ci = binomialCi99(size_t(std::lround(uniform.successRate * 400)), 400);
  bool uniformOk = ci[0] <= 0.25 && 0.25 <= ci[1];

  // A mismatched replay must kill only the login process.
  bool isolationOk = false;
  {
    SimConfig c = smallCfg(6);
    GuestMachine m(c);
    Hypervisor hv(m);
    Attacker atk(hv, referenceImage(kRam));
    // Pick an attempt pair with different placements.
    size_t victim = 0;
    while (m.offsetForAttempt(victim) == m.offsetForAttempt(victim + 1)) ++victim;
    for (size_t i = 0; i < victim; ++i) m.runLogin(hv, m.credential());

    atk.startTracing();
    ReferenceSequence ref{{kSysSpawn, kSysRead, kSysCopy}, 1.0, 3};
    m.queueLogin(m.credential());
    atk.capture(ref, 40000);
    ExitPolicy drain;
    drain.stop = [&](const VmExit&) { return !m.loginInFlight(); };
    hv.runUntil(drain, 40000);

    m.queueLogin({{1, 2, 3, 4, 5, 6, 7, 8}});
    atk.replay(ref, 40000);
    hv.runUntil(drain, 40000);
    const LoginRecord& attacker = m.logins()[victim + 1];
    isolationOk = attacker.completed && attacker.terminated && !attacker.authenticated &&
                  m.runLogin(hv, m.credential()).authenticated;
  }

  char buf[256];
  std::snprintf(buf, sizeof buf,
                "forced offset 100/100, uniform offsets %.3f over 400 trials "
                "(ci99 [%.3f, %.3f] covers 0.25), crash isolation holds; "
                "real-target context figures: identification 86%%, success 23%%",
                uniform.successRate, ci[0], ci[1]);
  verdict(5, "replay end to end", forcedOk && uniformOk && isolationOk, buf);
}

void criterion6() {
  auto t0 = Clock::now();
  std::mt19937_64 rng(6);
  bool ok = true;
  for (int round = 0; round < 200 && ok; ++round) {
    size_t n = 1 + rng() % 8;
    std::vector<std::vector<uint32_t>> traces(n);
    for (auto& t : traces) {
      t.resize(1 + rng() % 12);
      for (auto& v : t) v = uint32_t(rng() % 6);
    }
    double q = 0.25 + 0.25 * double(rng() % 3);
    size_t minLen = 1 + rng() % 3;
    size_t need = size_t(std::ceil(q * double(n)));

    // Brute force: every suffix of every trace, support counted, ordered by
    // length desc, support desc, lexicographic asc.
    std::vector<uint32_t> best;
    size_t bestCount = 0;
    for (const auto& t : traces) {
      for (size_t len = minLen; len <= t.size(); ++len) {
        std::vector<uint32_t> s(t.end() - ptrdiff_t(len), t.end());
        size_t count = 0;
        for (const auto& u : traces)
          if (u.size() >= len && std::equal(s.begin(), s.end(), u.end() - ptrdiff_t(len)))
            ++count;
        if (count < need) continue;
        bool better = s.size() > best.size() ||
                      (s.size() == best.size() && count > bestCount) ||
                      (s.size() == best.size() && count == bestCount && s < best);
        if (best.empty() || better) {
          best = s;
          bestCount = count;
        }
      }
    }

    try {
      ReferenceSequence ref = extractReference(traces, q, minLen);
      ok = !best.empty() && ref.ids == best &&
           ref.support == double(bestCount) / double(n);
    } catch (const NoStableSequence&) {
      ok = best.empty();
    }
  }
  double dt = secondsSince(t0);
  verdict(6, "extraction oracle equivalence", ok && dt < 10.0,
          "200 random trace sets in " + std::to_string(dt) + "s");
}

void criterion7() {
  struct Row {
    const char* name;
    bool sevEs, writeOnce;
  };
  bool ok = true;
  std::string detail = "sev / sev_es / write_once rows all as predicted";

  for (Row row : {Row{"sev", false, false}, Row{"sev_es", true, false},
                  Row{"write_once_vmcb", false, true}}) {
    SimConfig c = smallCfg(7);
    c.mode.sevEs = row.sevEs;
    c.mode.writeOnceVmcb = row.writeOnce;
    GuestMachine m(c);
    Hypervisor hv(m);
    Attacker atk(hv, referenceImage(kRam));
    GuestVirtAddr target = m.image().payloadVirt(0);

    bool readOk = true, writeOk = true, disableOk = true;
    bool readSealed = false, writeSealed = false, disableSealed = false;
    try {
      auto bytes = atk.read4(target);
      auto oracle = m.guestView(target, 4);
      readOk = std::equal(oracle.begin(), oracle.end(), bytes.begin());
    } catch (const StateSealed&) {
      readSealed = true;
    } catch (const WriteOnceViolation&) {
      readOk = false;
    }
    try {
      atk.write4(target + 8, {9, 9, 9, 9});
      writeOk = m.guestView(target + 8, 4) == std::vector<uint8_t>{9, 9, 9, 9};
    } catch (const StateSealed&) {
      writeSealed = true;
    } catch (const WriteOnceViolation&) {
      writeOk = false;
    }
    try {
      HostPhysAddr f = atk.disableProtection(m.image().payloadVirt(1));
      disableOk = m.phys().rawRead(f, kPageSize) ==
                  m.guestView(m.image().payloadVirt(1), kPageSize);
    } catch (const StateSealed&) {
      disableSealed = true;
    } catch (const WriteOnceViolation&) {
      disableOk = false;
    }

    ReplayConfig rc;
    rc.trials = 4;
    rc.seed = 7;
    rc.mode = c.mode;
    rc.kaslr = false;
    rc.guestRamBytes = kRam;
    rc.trainingLogins = 6;
    rc.forcedOffset = 0x0a0;
    bool replayOk = evaluateReplay(rc).successRate == 1.0;

    bool rowOk;
    if (!row.sevEs && !row.writeOnce) {
      rowOk = readOk && writeOk && disableOk && !readSealed && !writeSealed &&
              !disableSealed && replayOk;
    } else if (row.sevEs) {
      rowOk = readSealed && writeSealed && disableSealed && replayOk;
    } else {
      // Write-once: rip diversion rejected, injection still works, and the
      // nested-paging-only replay is untouched.
      bool ripRejected = false, injectWorks = false;
      try {
        vmcbWrite(m.vmcb(), m.mode(), VmcbField::Rip, 0x1000);
      } catch (const WriteOnceViolation&) {
        ripRejected = true;
      }
      try {
        injectInterrupt(m.vmcb(), m.mode(), kTimerVector);
        m.vmcb().eventInject.reset();
        injectWorks = true;
      } catch (const SimError&) {
      }
      rowOk = ripRejected && injectWorks && replayOk;
    }
    if (!rowOk) {
      ok = false;
      detail = std::string("row ") + row.name + " diverged from the prediction";
      break;
    }
  }
  verdict(7, "mitigation matrix", ok, detail);
}

void criterion8() {
  ScenarioConfig c;
  c.guestRamBytes = kRam;
  c.trials = 6;
  c.kaslr = true;
  c.workers = 2;
  c.seed = 8;

  bool ok = cmdReplay(c).report.dump() == cmdReplay(c).report.dump() &&
            cmdRead(c, GuestImage::kPayloadVirtBase, 64).report.dump() ==
                cmdRead(c, GuestImage::kPayloadVirtBase, 64).report.dump() &&
            cmdKaslr(c).report.dump() == cmdKaslr(c).report.dump() &&
            cmdMatrix(c).report.dump() == cmdMatrix(c).report.dump();
  verdict(8, "report determinism", ok, "reruns are byte-identical");
}

}  // namespace

int main() {
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7();
  criterion8();
  std::printf("acceptance: %s\n", gAllPass ? "ALL PASS" : "FAILURES PRESENT");
  return gAllPass ? 0 : 1;
}
