#include "sevsim/cpu.hpp"

#include <algorithm>
#include <cstring>

namespace sevsim {

std::array<uint8_t, 8> Instruction::encode() const {
  std::array<uint8_t, 8> b{};
  b[0] = static_cast<uint8_t>(op);
  b[1] = r1;
  b[2] = r2;
  std::memcpy(b.data() + 3, &imm, 4);
  b[7] = 0;
  return b;
}

Instruction Instruction::decode(std::span<const uint8_t> bytes) {
  Instruction i;
  i.op = static_cast<Opcode>(bytes[0]);
  i.r1 = bytes[1] & 7;
  i.r2 = bytes[2] & 7;
  std::memcpy(&i.imm, bytes.data() + 3, 4);
  return i;
}

const char* exitName(ExitReason r) {
  switch (r) {
    case ExitReason::HltIntercept: return "hlt-intercept";
    case ExitReason::Npf: return "npf";
    case ExitReason::GuestFault: return "guest-fault";
    case ExitReason::TripleFault: return "triple-fault";
    case ExitReason::Timer: return "timer";
  }
  return "?";
}

namespace {

bool isExitInfoField(VmcbField f) {
  return f == VmcbField::ExitCode || f == VmcbField::ExitInfoGpa ||
         f == VmcbField::ExitInfoGva || f == VmcbField::EventInject ||
         f == VmcbField::Asid;
}

uint64_t* gprSlot(Vmcb& v, VmcbField f) {
  switch (f) {
    case VmcbField::Rax: return &v.gpr[Rax];
    case VmcbField::Rbx: return &v.gpr[Rbx];
    case VmcbField::Rcx: return &v.gpr[Rcx];
    case VmcbField::Rdx: return &v.gpr[Rdx];
    case VmcbField::Rsi: return &v.gpr[Rsi];
    case VmcbField::Rdi: return &v.gpr[Rdi];
    case VmcbField::Rsp: return &v.gpr[Rsp];
    case VmcbField::Rbp: return &v.gpr[Rbp];
    default: return nullptr;
  }
}

}  // namespace

uint64_t vmcbRead(const Vmcb& vmcb, const Mode& mode, VmcbField field) {
  if (mode.sevEs && !isExitInfoField(field))
    throw StateSealed("vmcb state is encrypted under SEV-ES");
  Vmcb& v = const_cast<Vmcb&>(vmcb);
  if (uint64_t* g = gprSlot(v, field)) return *g;
  switch (field) {
    case VmcbField::Rip: return vmcb.rip;
    case VmcbField::Cr3: return vmcb.cr3;
    case VmcbField::SyscallEntry: return vmcb.syscallEntry;
    case VmcbField::InterceptHlt: return vmcb.interceptHlt ? 1 : 0;
    case VmcbField::CleanField: return vmcb.cleanField;
    case VmcbField::Asid: return vmcb.asid;
    case VmcbField::ExitCode: return static_cast<uint64_t>(vmcb.exitCode);
    case VmcbField::ExitInfoGpa: return vmcb.exitInfo.gpa;
    case VmcbField::ExitInfoGva: return vmcb.exitInfo.gva;
    case VmcbField::EventInject: return vmcb.eventInject ? *vmcb.eventInject : ~0ull;
    default: throw SimError("unknown vmcb field");
  }
}

void vmcbWrite(Vmcb& vmcb, const Mode& mode, VmcbField field, uint64_t value) {
  if (field == VmcbField::EventInject) {
    // Interrupt injection stays writable in every mode.
    vmcb.eventInject = static_cast<uint8_t>(value);
    return;
  }
  if (mode.sevEs) throw StateSealed("vmcb state is encrypted under SEV-ES");
  if (mode.writeOnceVmcb)
    throw WriteOnceViolation("vmcb is write-once; only interrupt fields are runtime-writable");
  if (uint64_t* g = gprSlot(vmcb, field)) {
    *g = value;
    return;
  }
  switch (field) {
    case VmcbField::Rip: vmcb.rip = value; break;
    case VmcbField::Cr3: vmcb.cr3 = value; break;
    case VmcbField::SyscallEntry: vmcb.syscallEntry = value; break;
    case VmcbField::InterceptHlt: vmcb.interceptHlt = value != 0; break;
    case VmcbField::CleanField: vmcb.cleanField = value; break;
    case VmcbField::Asid: vmcb.asid = value; break;
    default: throw SimError("vmcb field not writable");
  }
}

RegSnapshot snapshotRegs(const Vmcb& vmcb, const Mode& mode) {
  if (mode.sevEs) throw StateSealed("guest registers are encrypted under SEV-ES");
  return RegSnapshot{vmcb.rip, vmcb.gpr};
}

void restoreRegs(Vmcb& vmcb, const Mode& mode, const RegSnapshot& snap) {
  if (mode.sevEs) throw StateSealed("guest registers are encrypted under SEV-ES");
  if (mode.writeOnceVmcb)
    throw WriteOnceViolation("vmcb is write-once; register restore rejected");
  vmcb.rip = snap.rip;
  vmcb.gpr = snap.gpr;
}

void injectInterrupt(Vmcb& vmcb, const Mode& mode, uint8_t vector) {
  (void)mode;  // permitted in every mode (the interrupt-field carve-out)
  if (vector >= vmcb.idtCount) throw NoHandler("no guest handler registered for vector");
  vmcb.eventInject = vector;
}

void decodeAssistFill(Vmcb& vmcb, const Mode& mode, uint8_t srcReg, uint64_t value,
                      bool sharedPage) {
  vmcb.decodeAssist.reset();
  if (mode.decodeAssists && sharedPage)
    vmcb.decodeAssist = std::make_pair(srcReg, value);
}

namespace {

struct Segment {
  HostPhysAddr hpa;
  size_t len;
  bool isPrivate;
};

// Split a virtual range into per-page physical segments; every page is
// translated up front so a faulting instruction commits nothing.
std::vector<Segment> resolve(CpuContext& c, const Vmcb& v, GuestVirtAddr gva, size_t len,
                             AccessType access) {
  std::vector<Segment> segs;
  size_t done = 0;
  while (done < len) {
    GuestVirtAddr a = gva + done;
    size_t chunk = std::min(size_t(kPageSize - pageOffset(a)), len - done);
    Translation t = translate(c.mem, *c.npt, v.cr3, a, access, c.mode.sevEs);
    segs.push_back({t.hpa, chunk, t.isPrivate});
    done += chunk;
  }
  return segs;
}

std::vector<uint8_t> readVirt(CpuContext& c, const Vmcb& v, GuestVirtAddr gva, size_t len,
                              AccessType access) {
  std::vector<uint8_t> out;
  out.reserve(len);
  for (const Segment& s : resolve(c, v, gva, len, access)) {
    auto part = c.mem.read(s.hpa, s.len, s.isPrivate);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

void writeVirt(CpuContext& c, const Vmcb& v, GuestVirtAddr gva,
               std::span<const uint8_t> data) {
  size_t done = 0;
  for (const Segment& s : resolve(c, v, gva, data.size(), AccessType::Write)) {
    c.mem.write(s.hpa, data.subspan(done, s.len), s.isPrivate);
    done += s.len;
  }
}

uint32_t loadU32(std::span<const uint8_t> b) {
  uint32_t v;
  std::memcpy(&v, b.data(), 4);
  return v;
}

}  // namespace

VmExit vmrun(Vmcb& v, CpuContext& ctx, uint64_t fuel, uint64_t timerSlice) {
  uint64_t executed = 0;

  auto makeExit = [&](ExitReason r) {
    VmExit e;
    e.reason = r;
    e.instrRetired = executed;
    v.exitCode = r;
    return e;
  };

  // Returns an exit, or nothing when the fault was redirected to the guest's
  // registered handler. A fault inside the handler escalates to triple fault.
  auto guestFaultExit = [&](const GuestPageFault& gf) -> std::optional<VmExit> {
    if (v.inFaultHandler) return makeExit(ExitReason::TripleFault);
    if (v.faultHandler != 0) {
      v.inFaultHandler = true;
      v.intrReturnRip = v.rip;
      v.rip = v.faultHandler;
      return std::nullopt;
    }
    VmExit e = makeExit(ExitReason::GuestFault);
    e.faultGva = gf.gva;
    return e;
  };

  // Pending event injection redirects to the registered handler before the
  // first step. The handler address comes from the in-guest vector table.
  if (v.eventInject) {
    uint8_t vec = *v.eventInject;
    v.eventInject.reset();
    try {
      auto bytes = readVirt(ctx, v, v.idtBase + uint64_t(vec) * 8, 8, AccessType::Read);
      uint64_t handler;
      std::memcpy(&handler, bytes.data(), 8);
      v.intrReturnRip = v.rip;
      v.rip = handler;
    } catch (const NptFaultError& e) {
      v.exitInfo = e.fault;
      VmExit ex = makeExit(ExitReason::Npf);
      ex.fault = e.fault;
      return ex;
    } catch (const GuestPageFault& gf) {
      if (auto ex = guestFaultExit(gf)) return *ex;
    }
  }

  for (;;) {
    if (timerSlice != 0 && executed >= timerSlice) return makeExit(ExitReason::Timer);
    if (executed >= fuel)
      throw FuelExceeded("guest exceeded its instruction budget");

    v.decodeAssist.reset();
    Instruction ins;
    GuestVirtAddr faultAddr = 0;
    try {
      auto bytes = readVirt(ctx, v, v.rip, kInstrSize, AccessType::Execute);
      ins = Instruction::decode(bytes);

      switch (ins.op) {
        case Opcode::Nop:
          v.rip += kInstrSize;
          break;
        case Opcode::Load: {
          GuestVirtAddr a = v.gpr[ins.r2] + ins.imm;
          faultAddr = a;
          v.gpr[ins.r1] = loadU32(readVirt(ctx, v, a, 4, AccessType::Read));
          v.rip += kInstrSize;
          break;
        }
        case Opcode::Store: {
          GuestVirtAddr a = v.gpr[ins.r2] + ins.imm;
          faultAddr = a;
          uint32_t val = static_cast<uint32_t>(v.gpr[ins.r1]);
          uint8_t b[4];
          std::memcpy(b, &val, 4);
          try {
            writeVirt(ctx, v, a, std::span<const uint8_t>(b, 4));
          } catch (const NptFaultError& e) {
            decodeAssistFill(v, ctx.mode, ins.r1, v.gpr[ins.r1], !e.guestPrivate);
            throw;
          }
          v.rip += kInstrSize;
          break;
        }
        case Opcode::Movi:
          v.gpr[ins.r1] = ins.imm;
          v.rip += kInstrSize;
          break;
        case Opcode::Add:
          v.gpr[ins.r1] += v.gpr[ins.r2];
          v.rip += kInstrSize;
          break;
        case Opcode::Sub:
          v.gpr[ins.r1] -= v.gpr[ins.r2];
          v.rip += kInstrSize;
          break;
        case Opcode::CmpJne:
          v.rip = (v.gpr[ins.r1] != v.gpr[ins.r2]) ? ins.imm : v.rip + kInstrSize;
          break;
        case Opcode::Jmp:
          v.rip = ins.imm;
          break;
        case Opcode::Syscall:
          v.gpr[Rcx] = v.rip + kInstrSize;
          v.rip = v.syscallEntry;
          break;
        case Opcode::Sysret:
          v.rip = v.gpr[Rcx];
          break;
        case Opcode::Hlt:
          v.rip += kInstrSize;
          if (v.interceptHlt) {
            ++executed;
            return makeExit(ExitReason::HltIntercept);
          }
          break;
        case Opcode::Memsetz: {
          GuestVirtAddr a = v.gpr[ins.r1];
          faultAddr = a;
          size_t len = std::min<size_t>(ins.imm, kPageSize);
          std::vector<uint8_t> zeros(len, 0);
          writeVirt(ctx, v, a, zeros);
          v.rip += kInstrSize;
          break;
        }
        case Opcode::Iret:
          v.rip = v.intrReturnRip;
          v.inFaultHandler = false;
          break;
        default:
          throw GuestPageFault(v.rip, AccessType::Execute);  // undefined opcode
      }
    } catch (const NptFaultError& e) {
      v.exitInfo = e.fault;
      VmExit ex = makeExit(ExitReason::Npf);
      ex.fault = e.fault;
      return ex;
    } catch (const GuestPageFault& gf) {
      (void)faultAddr;
      if (auto ex = guestFaultExit(gf)) return *ex;
      // redirected to the in-guest handler; keep executing
    }
    ++executed;
  }
}

}  // namespace sevsim
