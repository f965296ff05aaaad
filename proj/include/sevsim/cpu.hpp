#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>

#include "sevsim/paging.hpp"

namespace sevsim {

/// Mitigation switches. sev_es implies sev.
struct Mode {
  bool sev = true;
  bool sevEs = false;
  bool writeOnceVmcb = false;
  bool decodeAssists = false;
};

enum Reg : uint8_t {
  Rax = 0,
  Rbx = 1,
  Rcx = 2,
  Rdx = 3,
  Rsi = 4,
  Rdi = 5,
  Rsp = 6,
  Rbp = 7,
};

enum class Opcode : uint8_t {
  Nop = 0,
  Load,     // r1 <- zext32 [r2 + imm]
  Store,    // [r2 + imm] <- low32(r1)
  Movi,     // r1 <- imm
  Add,      // r1 <- r1 + r2
  Sub,      // r1 <- r1 - r2
  CmpJne,   // if r1 != r2: rip <- imm
  Jmp,      // rip <- imm
  Syscall,  // rcx <- rip+8; rip <- lstar
  Sysret,   // rip <- rcx
  Hlt,      // exit when intercepted, else no-op
  Memsetz,  // zero imm bytes at [r1]
  Iret,     // rip <- saved interrupt return address
};

/// Fixed 8-byte encoding: opcode, r1, r2, imm32 (little endian), pad.
struct Instruction {
  Opcode op = Opcode::Nop;
  uint8_t r1 = 0;
  uint8_t r2 = 0;
  uint32_t imm = 0;

  std::array<uint8_t, 8> encode() const;
  static Instruction decode(std::span<const uint8_t> bytes);
};

constexpr size_t kInstrSize = 8;

enum class ExitReason {
  HltIntercept,
  Npf,
  GuestFault,
  TripleFault,
  Timer,  // asynchronous external interrupt slice (AE)
};

const char* exitName(ExitReason r);

struct VmExit {
  ExitReason reason = ExitReason::Timer;
  NptFault fault{};         // valid when reason == Npf
  GuestVirtAddr faultGva = 0;  // valid when reason == GuestFault
  uint64_t instrRetired = 0;
};

/// Architectural guest state plus controls. Fields are plain data; the
/// hypervisor-facing access path is vmcbRead/vmcbWrite below, which enforce
/// the SEV-ES sealing and write-once rules.
struct Vmcb {
  GuestVirtAddr rip = 0;
  std::array<uint64_t, 8> gpr{};
  GuestPhysAddr cr3 = 0;
  GuestVirtAddr syscallEntry = 0;  // LSTAR analog
  bool interceptHlt = true;
  std::optional<uint8_t> eventInject;
  uint64_t asid = 0;  // hypervisor-assigned address space id, control area
  uint64_t cleanField = 0;
  GuestVirtAddr idtBase = 0;
  uint32_t idtCount = 0;
  GuestVirtAddr faultHandler = 0;  // 0 = unregistered

  // Exit information (always hypervisor-visible).
  ExitReason exitCode = ExitReason::Timer;
  NptFault exitInfo{};
  std::optional<std::pair<uint8_t, uint64_t>> decodeAssist;

  // Hidden micro-architectural state.
  GuestVirtAddr intrReturnRip = 0;
  bool inFaultHandler = false;
};

enum class VmcbField {
  Rip,
  Rax,
  Rbx,
  Rcx,
  Rdx,
  Rsi,
  Rdi,
  Rsp,
  Rbp,
  Cr3,
  SyscallEntry,
  InterceptHlt,
  CleanField,
  Asid,
  ExitCode,
  ExitInfoGpa,
  ExitInfoGva,
  EventInject,
};

/// Hypervisor accessors. Under SEV-ES everything but exit info, EVENTINJ and
/// the ASID control field is sealed; under write-once only EVENTINJ stays
/// writable.
uint64_t vmcbRead(const Vmcb& vmcb, const Mode& mode, VmcbField field);
void vmcbWrite(Vmcb& vmcb, const Mode& mode, VmcbField field, uint64_t value);

struct RegSnapshot {
  GuestVirtAddr rip = 0;
  std::array<uint64_t, 8> gpr{};
};

RegSnapshot snapshotRegs(const Vmcb& vmcb, const Mode& mode);
void restoreRegs(Vmcb& vmcb, const Mode& mode, const RegSnapshot& snap);

/// Queue a vector for delivery on the next vmrun. Permitted in every mode:
/// interrupt injection is the carve-out from both sealing and write-once.
void injectInterrupt(Vmcb& vmcb, const Mode& mode, uint8_t vector);

/// Fill the decode-assist field for a write fault. Only faults on shared
/// pages are augmented; private-page faults never reveal register content.
void decodeAssistFill(Vmcb& vmcb, const Mode& mode, uint8_t srcReg, uint64_t value,
                      bool sharedPage);

struct CpuContext {
  MemView mem;
  NestedPageTable* npt = nullptr;
  Mode mode;
};

/// Run the guest until an intercept, a nested/guest fault, a timer slice
/// boundary, or fuel exhaustion. timerSlice == 0 disables timer exits.
VmExit vmrun(Vmcb& vmcb, CpuContext& ctx, uint64_t fuel, uint64_t timerSlice = 0);

}  // namespace sevsim
