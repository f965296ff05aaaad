#include "sevsim/hypervisor.hpp"

namespace sevsim {

Hypervisor::Hypervisor(GuestMachine& m, uint64_t timerSlice)
    : m_(m),
      timerSlice_(timerSlice),
      nextSpare_(m.guestRamPages() * kPageSize) {}

VmExit Hypervisor::step(uint64_t fuel) {
  CpuContext ctx = m_.cpuContext();
  VmExit e = vmrun(m_.vmcb(), ctx, fuel, timerSlice_);
  handleDefault(e);
  return e;
}

std::vector<VmExit> Hypervisor::runUntil(const ExitPolicy& policy, uint64_t maxExits,
                                         uint64_t fuel) {
  std::vector<VmExit> stream;
  for (uint64_t i = 0; i < maxExits; ++i) {
    CpuContext ctx = m_.cpuContext();
    VmExit e = vmrun(m_.vmcb(), ctx, fuel, timerSlice_);
    bool handled = policy.onExit && policy.onExit(*this, e);
    if (!handled) handleDefault(e);
    stream.push_back(e);
    if (policy.stop && policy.stop(e)) break;
  }
  return stream;
}

void Hypervisor::handleDefault(const VmExit& e) {
  switch (e.reason) {
    case ExitReason::Timer:
      injectInterrupt(m_.vmcb(), m_.mode(), kTimerVector);
      break;
    case ExitReason::HltIntercept:
      m_.onHltBoundary();
      break;
    case ExitReason::GuestFault:
      m_.onGuestFault(e.faultGva);
      break;
    case ExitReason::Npf:
      handleNpfReexec(e.fault);
      break;
    case ExitReason::TripleFault:
      throw SimError("guest triple fault");
  }
}

HostPhysAddr Hypervisor::allocDummyFrame() {
  if (nextSpare_ + kPageSize > m_.phys().sizeBytes())
    throw PhysRangeError("spare frame pool exhausted");
  HostPhysAddr f = nextSpare_;
  nextSpare_ += kPageSize;
  return f;
}

void Hypervisor::trackWrites(bool on) {
  writeTracking_ = on;
  if (on) {
    dirty_.clear();
    m_.npt().bulkClearWrite();
  } else {
    for (size_t i = 0; i < m_.npt().pageCount(); ++i) {
      NestedPte& e = m_.npt().entry(i * kPageSize);
      if (e.present) e.writable = true;
    }
  }
}

void Hypervisor::enableSyscallTracking(
    GuestPhysAddr entryPage, const std::map<GuestPhysAddr, uint32_t>& handlerPages) {
  entryPage_ = pageOf(entryPage);
  handlerPages_.clear();
  for (const auto& [gpa, sysno] : handlerPages) handlerPages_[pageOf(gpa)] = sysno;
  syscallTracking_ = true;
  lastSysno_ = 0;
  for (const auto& [gpa, sysno] : handlerPages_) m_.npt().entry(gpa).noExec = true;
  m_.npt().entry(entryPage_).noExec = false;
}

void Hypervisor::disableSyscallTracking() {
  syscallTracking_ = false;
  for (size_t i = 0; i < m_.npt().pageCount(); ++i) {
    NestedPte& e = m_.npt().entry(i * kPageSize);
    if (e.present) e.noExec = false;
  }
}

void Hypervisor::handleNpfReexec(const NptFault& fault) {
  GuestPhysAddr page = pageOf(fault.gpa);
  NestedPte& e = m_.npt().entry(page);
  if (!e.present) {
    m_.npt().map(page, allocDummyFrame());
    return;
  }
  switch (fault.access) {
    case AccessType::Execute: {
      if (syscallTracking_) {
        if (page == entryPage_) {
          e.noExec = false;
          for (const auto& [gpa, sysno] : handlerPages_)
            m_.npt().entry(gpa).noExec = true;
          return;
        }
        auto it = handlerPages_.find(page);
        if (it != handlerPages_.end()) {
          lastSysno_ = it->second;
          e.noExec = false;
          m_.npt().entry(entryPage_).noExec = true;
          if (writeTracking_) m_.npt().bulkClearWrite();
          return;
        }
      }
      e.noExec = false;
      return;
    }
    case AccessType::Write: {
      e.writable = true;
      if (writeTracking_) {
        WriteEvent ev;
        ev.index = events_.size();
        ev.page = page;
        ev.sysno = lastSysno_;
        ev.asid = vmcbRead(m_.vmcb(), m_.mode(), VmcbField::Asid);
        dirty_.push_back({page, ev.index});
        events_.push_back(ev);
        if (onWriteEvent) onWriteEvent(*this, ev);
      }
      return;
    }
    case AccessType::Read:
      throw SimError("unserviceable read fault on a present page");
  }
}

}  // namespace sevsim
