#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sevsim/hypervisor.hpp"

namespace sevsim {

/// Per-page event history as seen from fault metadata: (syscall id, address
/// space id) pairs, bounded ring.
struct PageTrace {
  GuestPhysAddr page = 0;
  std::vector<std::pair<uint32_t, uint64_t>> events;
};

/// Longest trailing syscall sequence shared by a quorum of traces.
struct ReferenceSequence {
  std::vector<uint32_t> ids;
  double support = 0.0;  // fraction of traces ending with ids
  size_t minLen = 0;
};

struct CaptureRecord {
  GuestPhysAddr gpa = 0;
  HostPhysAddr capturedHpa = 0;
  HostPhysAddr dummyHpa = 0;
  uint64_t eventIndex = 0;
};

/// The longest suffix S with len(S) >= minLen carried by at least
/// ceil(quorum * N) traces. Ties: longer first, then higher support, then
/// lexicographically smaller ids.
ReferenceSequence extractReference(const std::vector<std::vector<uint32_t>>& traces,
                                   double quorum, size_t minLen);

/// Everything a compromised hypervisor can do in the active mode, built on
/// the gated interfaces only: register access where the mode allows it,
/// nested pagetable control and fault metadata always.
class Attacker {
 public:
  Attacker(Hypervisor& hv, const GuestImage& reference);

  void setOffsets(uint64_t virtOffset, uint64_t physOffset);
  uint64_t virtOffset() const { return virtOff_; }
  uint64_t physOffset() const { return physOff_; }
  GuestVirtAddr symVirt(const std::string& name) const;
  GuestPhysAddr symPhys(const std::string& name) const;

  /// Offset disclosure via exposed control state, then an execute fault on
  /// the now-known virtual entry point. Needs readable and writable guest
  /// state; errors under SEV-ES (StateSealed) and write-once (rip).
  std::pair<uint64_t, uint64_t> locateKaslrCtrlreg();

  /// Physical offset via interrupt injection onto a non-executable map; the
  /// handler return unwinds the probe without touching guest registers, so
  /// this works in every mode.
  uint64_t locateKaslrInterrupt();

  // Gadget-driven memory primitives (register access required).
  std::array<uint8_t, 4> read4(GuestVirtAddr gva);
  void write4(GuestVirtAddr gva, std::array<uint8_t, 4> bytes);
  std::vector<uint8_t> readRegion(GuestVirtAddr gva, size_t len);
  uint64_t gadgetExits() const { return gadgetExits_; }
  void resetGadgetExits() { gadgetExits_ = 0; }

  /// Duplicate a private page's plaintext into a fresh host frame, clear
  /// the privacy bit in the guest pagetable entry through the physmap, and
  /// remap the page onto the plaintext frame. Returns the new frame.
  HostPhysAddr disableProtection(GuestVirtAddr gvaPage);

  // Syscall-attributed write tracing.
  void startTracing();
  void stopTracing();
  bool tracingActive() const { return tracing_; }
  void setTraceDepth(size_t depth) { traceDepth_ = depth; }
  const std::map<GuestPhysAddr, PageTrace>& traces() const { return traces_; }
  std::map<GuestPhysAddr, PageTrace> traceSyscalls(uint64_t exits);
  void ingestEvents();

  /// Run until some page's trailing trace matches the reference, then remap
  /// it to a dummy frame once its in-flight stores have landed. The original
  /// frame keeps its ciphertext at its host physical address.
  CaptureRecord capture(const ReferenceSequence& ref, uint64_t maxExits);
  const std::optional<CaptureRecord>& heldCapture() const { return held_; }

  /// Match a fresh login with the same reference and remap its buffer onto
  /// the held captured frame before the comparison syscall runs. Consumes
  /// the held capture.
  void replay(const ReferenceSequence& ref, uint64_t maxExits);

 private:
  VmExit runGadget(GuestVirtAddr gadgetVirt, uint64_t rbx, uint64_t rdi, uint64_t* rdiOut);
  bool trailingMatches(GuestPhysAddr page, const ReferenceSequence& ref) const;

  Hypervisor& hv_;
  GuestImage ref_;
  uint64_t virtOff_ = 0;
  uint64_t physOff_ = 0;
  uint64_t gadgetExits_ = 0;
  bool tracing_ = false;
  size_t traceDepth_ = 16;
  size_t consumed_ = 0;
  std::map<GuestPhysAddr, PageTrace> traces_;
  std::optional<CaptureRecord> held_;
};

struct ReplayConfig {
  size_t trials = 100;
  uint64_t seed = 1;
  double noise = 0.0;
  double quorum = 0.5;
  size_t minLen = 3;
  size_t workers = 1;
  Mode mode;
  bool kaslr = true;
  size_t guestRamBytes = 16ull << 20;
  size_t trainingLogins = 10;
  std::optional<uint32_t> forcedOffset;
  uint64_t maxExits = 60000;
};

struct TrialResult {
  bool identified = false;     // captured the victim's buffer page, password inside
  bool falsePositive = false;  // captured some other page
  bool replayed = false;       // replay remap happened
  bool success = false;        // attacker authenticated with a wrong password
};

struct ReplayReport {
  size_t trials = 0;
  double identificationAccuracy = 0.0;
  double falsePositiveRate = 0.0;
  double successRate = 0.0;
  std::array<double, 2> ciIdentification{};
  std::array<double, 2> ciFalsePositive{};
  std::array<double, 2> ciSuccess{};
  std::vector<TrialResult> perTrial;
};

/// 99% Wilson score interval.
std::array<double, 2> binomialCi99(size_t successes, size_t n);

/// Independent end-to-end trials: train a reference sequence on an
/// attacker-controlled instance, then trace, capture and replay against a
/// fresh target. Trials are distributed across workers, one instance each.
ReplayReport evaluateReplay(const ReplayConfig& cfg);

}  // namespace sevsim
