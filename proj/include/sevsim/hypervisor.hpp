#pragma once

#include <functional>
#include <map>
#include <vector>

#include "sevsim/guest.hpp"

namespace sevsim {

struct DirtyRecord {
  GuestPhysAddr page = 0;
  uint64_t eventIndex = 0;
};

/// A write fault observed while tracking, tagged with the most recent
/// syscall handler execution and the faulting address space id. Everything
/// here is derived from fault metadata and control fields, nothing from
/// guest register or memory content.
struct WriteEvent {
  uint64_t index = 0;
  GuestPhysAddr page = 0;
  uint32_t sysno = 0;  // 0 = no handler execution seen yet
  uint64_t asid = 0;
};

/// Per-exit hooks. onExit returning true suppresses default handling for
/// that exit; stop ends the run after the exit is processed.
struct ExitPolicy {
  std::function<bool(class Hypervisor&, const VmExit&)> onExit;
  std::function<bool(const VmExit&)> stop;
};

/// Benign run loop: timer injection, HLT scheduling callbacks, NPF service
/// with re-execution, dirty/write tracking and the kernel-page execute flip
/// that attributes writes to syscalls.
class Hypervisor {
 public:
  explicit Hypervisor(GuestMachine& m, uint64_t timerSlice = 50);

  GuestMachine& machine() { return m_; }
  uint64_t timerSlice() const { return timerSlice_; }
  void setTimerSlice(uint64_t s) { timerSlice_ = s; }

  static constexpr uint64_t kDefaultFuel = 1'000'000;

  /// One vmrun plus default exit handling.
  VmExit step(uint64_t fuel = kDefaultFuel);
  std::vector<VmExit> runUntil(const ExitPolicy& policy, uint64_t maxExits,
                               uint64_t fuel = kDefaultFuel);

  /// Zero-filled host frame outside the guest's current map.
  HostPhysAddr allocDummyFrame();

  // Dirty-page write tracking.
  void trackWrites(bool on);
  bool writeTrackingActive() const { return writeTracking_; }
  const std::vector<DirtyRecord>& dirtyLog() const { return dirty_; }

  /// Execute-permission flip across the syscall entry page and the handler
  /// pages. Handler executions tag subsequent write faults and re-arm the
  /// write traps, giving one event per written page per syscall.
  void enableSyscallTracking(GuestPhysAddr entryPage,
                             const std::map<GuestPhysAddr, uint32_t>& handlerPages);
  void disableSyscallTracking();
  bool syscallTrackingActive() const { return syscallTracking_; }
  uint32_t lastSyscall() const { return lastSysno_; }

  const std::vector<WriteEvent>& writeEvents() const { return events_; }

  /// Called on each tracked write fault, before the guest resumes; the
  /// faulting store has not committed yet.
  std::function<void(Hypervisor&, const WriteEvent&)> onWriteEvent;

  /// Default NPF service: restore the minimal permission and let the same
  /// instruction re-execute; unmapped guest-physical pages get a frame on
  /// demand.
  void handleNpfReexec(const NptFault& fault);

 private:
  void handleDefault(const VmExit& e);

  GuestMachine& m_;
  uint64_t timerSlice_;
  HostPhysAddr nextSpare_;
  bool writeTracking_ = false;
  bool syscallTracking_ = false;
  GuestPhysAddr entryPage_ = 0;
  std::map<GuestPhysAddr, uint32_t> handlerPages_;
  uint32_t lastSysno_ = 0;
  std::vector<DirtyRecord> dirty_;
  std::vector<WriteEvent> events_;
};

}  // namespace sevsim
