#include "sevsim/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <thread>

namespace sevsim {

ReferenceSequence extractReference(const std::vector<std::vector<uint32_t>>& traces,
                                   double quorum, size_t minLen) {
  if (traces.empty()) throw NoStableSequence("no traces to extract from");
  size_t need = size_t(std::ceil(quorum * double(traces.size())));
  if (need == 0) need = 1;
  size_t maxLen = 0;
  for (const auto& t : traces) maxLen = std::max(maxLen, t.size());
  size_t lowest = std::max<size_t>(minLen, 1);
  for (size_t len = maxLen; len >= lowest; --len) {
    std::map<std::vector<uint32_t>, size_t> support;
    for (const auto& t : traces) {
      if (t.size() < len) continue;
      ++support[std::vector<uint32_t>(t.end() - ptrdiff_t(len), t.end())];
    }
    const std::vector<uint32_t>* best = nullptr;
    size_t bestCount = 0;
    for (const auto& [suffix, count] : support) {
      if (count < need) continue;
      if (!best || count > bestCount || (count == bestCount && suffix < *best)) {
        best = &suffix;
        bestCount = count;
      }
    }
    if (best) {
      ReferenceSequence r;
      r.ids = *best;
      r.support = double(bestCount) / double(traces.size());
      r.minLen = minLen;
      return r;
    }
    if (len == lowest) break;
  }
  throw NoStableSequence("no suffix meets the quorum and length threshold");
}

Attacker::Attacker(Hypervisor& hv, const GuestImage& reference) : hv_(hv), ref_(reference) {}

void Attacker::setOffsets(uint64_t virtOffset, uint64_t physOffset) {
  virtOff_ = virtOffset;
  physOff_ = physOffset;
}

GuestVirtAddr Attacker::symVirt(const std::string& name) const {
  return ref_.sym(name).virt + virtOff_;
}

GuestPhysAddr Attacker::symPhys(const std::string& name) const {
  return ref_.sym(name).phys + physOff_;
}

std::pair<uint64_t, uint64_t> Attacker::locateKaslrCtrlreg() {
  GuestMachine& m = hv_.machine();
  Vmcb& v = m.vmcb();
  const Mode& mode = m.mode();
  uint64_t entryVirt = vmcbRead(v, mode, VmcbField::SyscallEntry);
  uint64_t virtOff = entryVirt - ref_.sym("entry_syscall").virt;
  RegSnapshot snap = snapshotRegs(v, mode);
  vmcbWrite(v, mode, VmcbField::Rip, entryVirt);
  auto perms = m.npt().snapshotPerms();
  m.npt().bulkSetExec(false, {});
  CpuContext ctx = m.cpuContext();
  VmExit e = vmrun(v, ctx, 10000, 0);
  m.npt().restorePerms(perms);
  restoreRegs(v, mode, snap);
  if (e.reason != ExitReason::Npf || e.fault.access != AccessType::Execute)
    throw SimError("entry-point probe did not raise an execute fault");
  uint64_t physOff = pageOf(e.fault.gpa) - ref_.sym("entry_syscall").phys;
  setOffsets(virtOff, physOff);
  return {virtOff, physOff};
}

uint64_t Attacker::locateKaslrInterrupt() {
  GuestMachine& m = hv_.machine();
  Vmcb& v = m.vmcb();
  const Mode& mode = m.mode();
  auto perms = m.npt().snapshotPerms();
  m.npt().bulkSetExec(false, {});
  VmExit e;
  try {
    injectInterrupt(v, mode, kSpuriousVector);
    CpuContext ctx = m.cpuContext();
    e = vmrun(v, ctx, 10000, 0);
  } catch (...) {
    m.npt().restorePerms(perms);
    throw;
  }
  m.npt().restorePerms(perms);
  if (e.reason != ExitReason::Npf || e.fault.access != AccessType::Execute)
    throw SimError("injected handler did not raise an execute fault");
  physOff_ = pageOf(e.fault.gpa) - ref_.sym("irq_spurious").phys;
  // Unwind transparently: the handler is a single return instruction, so one
  // more instruction restores the interrupted context without any register
  // access from this side.
  CpuContext ctx = m.cpuContext();
  vmrun(v, ctx, 10000, 1);
  return physOff_;
}

VmExit Attacker::runGadget(GuestVirtAddr gadgetVirt, uint64_t rbx, uint64_t rdi,
                           uint64_t* rdiOut) {
  GuestMachine& m = hv_.machine();
  Vmcb& v = m.vmcb();
  const Mode& mode = m.mode();
  RegSnapshot snap = snapshotRegs(v, mode);
  vmcbWrite(v, mode, VmcbField::Rbx, rbx);
  vmcbWrite(v, mode, VmcbField::Rdi, rdi);
  vmcbWrite(v, mode, VmcbField::Rip, gadgetVirt);
  for (int spin = 0; spin < 64; ++spin) {
    CpuContext ctx = m.cpuContext();
    VmExit e = vmrun(v, ctx, 10000, 0);
    if (e.reason == ExitReason::HltIntercept) {
      ++gadgetExits_;
      if (rdiOut) *rdiOut = vmcbRead(v, mode, VmcbField::Rdi);
      restoreRegs(v, mode, snap);
      return e;
    }
    if (e.reason == ExitReason::Npf) {
      hv_.handleNpfReexec(e.fault);
      continue;
    }
    if (e.reason == ExitReason::GuestFault) {
      restoreRegs(v, mode, snap);
      throw GadgetFault("gadget access faulted in the guest tables");
    }
    break;
  }
  restoreRegs(v, mode, snap);
  throw SimError("gadget run did not reach its intercept");
}

std::array<uint8_t, 4> Attacker::read4(GuestVirtAddr gva) {
  uint64_t rdi = 0;
  runGadget(symVirt("gadget_read"), gva, 0, &rdi);
  std::array<uint8_t, 4> out;
  uint32_t lo = uint32_t(rdi);
  std::memcpy(out.data(), &lo, 4);
  return out;
}

void Attacker::write4(GuestVirtAddr gva, std::array<uint8_t, 4> bytes) {
  uint32_t v;
  std::memcpy(&v, bytes.data(), 4);
  runGadget(symVirt("gadget_write"), gva, v, nullptr);
}

std::vector<uint8_t> Attacker::readRegion(GuestVirtAddr gva, size_t len) {
  std::vector<uint8_t> out;
  out.reserve(len);
  for (size_t done = 0; done < len; done += 4) {
    auto word = read4(gva + done);
    size_t take = std::min<size_t>(4, len - done);
    out.insert(out.end(), word.begin(), word.begin() + ptrdiff_t(take));
  }
  return out;
}

HostPhysAddr Attacker::disableProtection(GuestVirtAddr gvaPage) {
  GuestMachine& m = hv_.machine();
  const Mode& mode = m.mode();
  gvaPage = pageOf(gvaPage);
  uint64_t cr3 = vmcbRead(m.vmcb(), mode, VmcbField::Cr3);

  auto readU32At = [&](GuestVirtAddr v) {
    auto b = read4(v);
    uint32_t x;
    std::memcpy(&x, b.data(), 4);
    return x;
  };
  GuestVirtAddr pobVirt = symVirt("page_offset_base");
  uint64_t physmapBase =
      uint64_t(readU32At(pobVirt)) | (uint64_t(readU32At(pobVirt + 4)) << 32);

  GuestPhysAddr l1Gpa = cr3 + l1Index(gvaPage) * kPteSize;
  GuestPte l1 = GuestPte::unpack(readU32At(physmapBase + l1Gpa));
  if (!l1.present) throw DisableFailed("no level-1 entry covers the page");
  GuestPhysAddr pteGpa = l1.frame + l2Index(gvaPage) * kPteSize;
  GuestPte pte = GuestPte::unpack(readU32At(physmapBase + pteGpa));
  if (!pte.present) throw DisableFailed("page not mapped in the guest tables");

  std::vector<uint8_t> plain = readRegion(gvaPage, kPageSize);
  HostPhysAddr dummy = hv_.allocDummyFrame();
  m.phys().rawWrite(dummy, plain);

  pte.cBit = false;
  uint32_t packed = pte.pack();
  std::array<uint8_t, 4> bytes;
  std::memcpy(bytes.data(), &packed, 4);
  write4(physmapBase + pteGpa, bytes);
  m.npt().remap(pte.frame, dummy);
  return dummy;
}

void Attacker::startTracing() {
  std::map<GuestPhysAddr, uint32_t> handlers = {
      {symPhys("sys_spawn"), kSysSpawn}, {symPhys("sys_read"), kSysRead},
      {symPhys("sys_copy"), kSysCopy},   {symPhys("sys_auth"), kSysAuth},
      {symPhys("sys_zero"), kSysZero},   {symPhys("sys_write"), kSysWrite},
      {symPhys("sys_noise_a"), kSysNoiseA}, {symPhys("sys_noise_b"), kSysNoiseB},
  };
  hv_.enableSyscallTracking(symPhys("entry_syscall"), handlers);
  hv_.trackWrites(true);
  traces_.clear();
  consumed_ = hv_.writeEvents().size();
  tracing_ = true;
}

void Attacker::stopTracing() {
  hv_.trackWrites(false);
  hv_.disableSyscallTracking();
  tracing_ = false;
}

void Attacker::ingestEvents() {
  const auto& evs = hv_.writeEvents();
  for (; consumed_ < evs.size(); ++consumed_) {
    const WriteEvent& ev = evs[consumed_];
    PageTrace& t = traces_[ev.page];
    t.page = ev.page;
    t.events.emplace_back(ev.sysno, ev.asid);
    if (t.events.size() > traceDepth_) t.events.erase(t.events.begin());
  }
}

std::map<GuestPhysAddr, PageTrace> Attacker::traceSyscalls(uint64_t exits) {
  if (!tracing_) startTracing();
  for (uint64_t i = 0; i < exits; ++i) hv_.step();
  ingestEvents();
  return traces_;
}

bool Attacker::trailingMatches(GuestPhysAddr page, const ReferenceSequence& ref) const {
  auto it = traces_.find(page);
  if (it == traces_.end()) return false;
  const auto& ev = it->second.events;
  if (ref.ids.empty() || ev.size() < ref.ids.size()) return false;
  size_t base = ev.size() - ref.ids.size();
  for (size_t i = 0; i < ref.ids.size(); ++i)
    if (ev[base + i].first != ref.ids[i]) return false;
  return true;
}

CaptureRecord Attacker::capture(const ReferenceSequence& ref, uint64_t maxExits) {
  if (!tracing_) throw SimError("capture requires live tracing");
  std::optional<GuestPhysAddr> matched;
  std::optional<CaptureRecord> got;
  hv_.onWriteEvent = [&](Hypervisor& hv, const WriteEvent& ev) {
    ingestEvents();
    if (!matched) {
      if (trailingMatches(ev.page, ref)) matched = ev.page;
    } else if (!got && ev.page != *matched) {
      // First write elsewhere: the matched page's in-flight stores have
      // landed, swap it out now.
      HostPhysAddr dummy = hv.allocDummyFrame();
      HostPhysAddr old = hv.machine().npt().remap(*matched, dummy);
      got = CaptureRecord{*matched, old, dummy, ev.index};
    }
  };
  for (uint64_t i = 0; i < maxExits && !got; ++i) hv_.step();
  hv_.onWriteEvent = nullptr;
  if (!got) throw CaptureTimeout("no page matched the reference within the window");
  held_ = got;
  return *got;
}

void Attacker::replay(const ReferenceSequence& ref, uint64_t maxExits) {
  if (!held_) throw CaptureTimeout("replay requires a held capture");
  if (!tracing_) throw SimError("replay requires live tracing");
  CaptureRecord rec = *held_;
  std::optional<GuestPhysAddr> matched;
  bool swapped = false;
  hv_.onWriteEvent = [&](Hypervisor& hv, const WriteEvent& ev) {
    ingestEvents();
    if (!matched) {
      if (ev.page != rec.gpa && trailingMatches(ev.page, ref)) matched = ev.page;
    } else if (!swapped && ev.page != *matched) {
      hv.machine().npt().remap(*matched, rec.capturedHpa);
      swapped = true;
    }
  };
  for (uint64_t i = 0; i < maxExits && !swapped; ++i) hv_.step();
  hv_.onWriteEvent = nullptr;
  if (!swapped) throw MatchTimeout("no fresh login matched the reference");
  held_.reset();
}

std::array<double, 2> binomialCi99(size_t successes, size_t n) {
  if (n == 0) return {0.0, 1.0};
  const double z = 2.5758293035489004;
  double p = double(successes) / double(n);
  double z2n = z * z / double(n);
  double denom = 1.0 + z2n;
  double center = (p + z2n / 2.0) / denom;
  double half = z * std::sqrt(p * (1.0 - p) / double(n) + z2n / (4.0 * double(n))) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

namespace {

TrialResult runReplayTrial(const ReplayConfig& cfg, uint64_t trialSeed) {
  TrialResult res;
  std::mt19937_64 rng(trialSeed ^ 0x7261696eull);
  auto randomPw = [&](char base) {
    std::array<uint8_t, 16> pw;
    for (auto& b : pw) b = uint8_t(base + rng() % 26);
    return pw;
  };

  // Training on an attacker-owned instance: same build, no randomization,
  // ground truth available. Each trace is the buffer page's event history
  // up to the write that placed the password.
  std::vector<std::vector<uint32_t>> trainTraces;
  {
    SimConfig tc;
    tc.seed = trialSeed * 2 + 1;
    tc.mode = cfg.mode;
    tc.guestRamBytes = cfg.guestRamBytes;
    tc.noiseRate = cfg.noise;
    tc.forcedOffset = cfg.forcedOffset;
    GuestMachine m(tc);
    Hypervisor hv(m);
    Attacker atk(hv, referenceImage(cfg.guestRamBytes));
    atk.startTracing();
    for (size_t i = 0; i < cfg.trainingLogins; ++i) {
      LoginRecord rec = m.runLogin(hv, randomPw('a'));
      atk.ingestEvents();
      auto it = atk.traces().find(rec.bufferGpa);
      if (it == atk.traces().end()) continue;
      std::vector<uint32_t> ids;
      for (const auto& [sys, asid] : it->second.events) ids.push_back(sys);
      auto pos = std::find(ids.rbegin(), ids.rend(), uint32_t(kSysCopy));
      if (pos == ids.rend()) continue;
      ids.resize(size_t(ids.rend() - pos));
      trainTraces.push_back(std::move(ids));
    }
  }
  ReferenceSequence ref;
  try {
    ref = extractReference(trainTraces, cfg.quorum, cfg.minLen);
  } catch (const NoStableSequence&) {
    return res;
  }

  SimConfig sc;
  sc.seed = trialSeed;
  sc.mode = cfg.mode;
  sc.guestRamBytes = cfg.guestRamBytes;
  sc.kaslrEnabled = cfg.kaslr;
  sc.noiseRate = cfg.noise;
  sc.forcedOffset = cfg.forcedOffset;
  GuestMachine m(sc);
  Hypervisor hv(m);
  Attacker atk(hv, referenceImage(cfg.guestRamBytes));
  atk.locateKaslrInterrupt();
  atk.startTracing();

  m.queueLogin(m.credential());  // the victim's valid login
  CaptureRecord rec;
  try {
    rec = atk.capture(ref, cfg.maxExits);
  } catch (const CaptureTimeout&) {
    return res;
  }
  const LoginRecord& victim = m.logins()[0];
  if (rec.gpa == victim.bufferGpa) {
    auto inFrame = m.phys().guestRead(m.vmKey(), rec.capturedHpa + victim.offset, 16,
                                      m.mode().sev);
    res.identified =
        std::equal(inFrame.begin(), inFrame.end(), victim.password.begin());
  } else {
    res.falsePositive = true;
  }
  for (uint64_t i = 0; i < cfg.maxExits && !m.logins()[0].completed; ++i) hv.step();

  std::array<uint8_t, 16> wrong = randomPw('A');
  m.queueLogin(wrong);
  try {
    atk.replay(ref, cfg.maxExits);
    res.replayed = true;
  } catch (const MatchTimeout&) {
    return res;
  }
  for (uint64_t i = 0; i < cfg.maxExits && !m.logins()[1].completed; ++i) hv.step();
  res.success = m.logins()[1].completed && m.logins()[1].authenticated;
  return res;
}

}  // namespace

ReplayReport evaluateReplay(const ReplayConfig& cfg) {
  ReplayReport report;
  report.trials = cfg.trials;
  report.perTrial.resize(cfg.trials);

  auto worker = [&](size_t start, size_t stride) {
    for (size_t i = start; i < cfg.trials; i += stride) {
      uint64_t trialSeed = cfg.seed + i * 0x9E3779B97F4A7C15ull + 1;
      report.perTrial[i] = runReplayTrial(cfg, trialSeed);
    }
  };
  size_t workers = std::max<size_t>(1, cfg.workers);
  if (workers == 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(worker, w, workers);
    for (auto& t : pool) t.join();
  }

  size_t ident = 0, fp = 0, succ = 0;
  for (const auto& t : report.perTrial) {
    ident += t.identified;
    fp += t.falsePositive;
    succ += t.success;
  }
  size_t n = cfg.trials;
  report.identificationAccuracy = n ? double(ident) / double(n) : 0.0;
  report.falsePositiveRate = n ? double(fp) / double(n) : 0.0;
  report.successRate = n ? double(succ) / double(n) : 0.0;
  report.ciIdentification = binomialCi99(ident, n);
  report.ciFalsePositive = binomialCi99(fp, n);
  report.ciSuccess = binomialCi99(succ, n);
  return report;
}

}  // namespace sevsim
