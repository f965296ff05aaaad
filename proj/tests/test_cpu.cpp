#include <doctest.h>

#include "sevsim/cpu.hpp"

using namespace sevsim;

namespace {

// 64-frame machine, identity mappings, code at page 1, data at page 2,
// shared page at page 3. Guest L1 at 0x10, L2 at 0x11.
struct Fixture {
  PhysMemory mem{64};
  VmKey key = VmKey::derive(1, 7);
  NestedPageTable npt{64};
  MemView view{&mem, &key, true};
  Vmcb vmcb;
  Mode mode;

  static constexpr GuestVirtAddr kCode = 0x1000;
  static constexpr GuestVirtAddr kData = 0x2000;
  static constexpr GuestVirtAddr kShared = 0x3000;

  explicit Fixture(Mode m = {}) : mode(m) {
    view.encrypted = mode.sev;
    for (size_t i = 0; i < 64; ++i) npt.map(i * kPageSize, i * kPageSize);
    GuestPhysAddr root = 0x10 * kPageSize, l2 = 0x11 * kPageSize;
    // Encrypted wipe first: raw zeros in a private table decrypt to garbage.
    std::vector<uint8_t> zeros(kPageSize, 0);
    view.write(root, zeros, true);
    view.write(l2, zeros, true);
    view.writeU32(root, GuestPte{true, true, false, true, l2}.pack(), true);
    for (uint32_t i = 1; i < 32; ++i) {
      bool priv = i * kPageSize != kShared;
      view.writeU32(l2 + i * kPteSize,
                    GuestPte{true, true, false, priv, i * kPageSize}.pack(), true);
    }
    vmcb.cr3 = root;
    vmcb.rip = kCode;
  }

  void program(std::initializer_list<Instruction> prog, GuestVirtAddr at = kCode) {
    GuestVirtAddr p = at;
    for (const Instruction& ins : prog) {
      view.write(p, ins.encode(), pageOf(p) != kShared);
      p += kInstrSize;
    }
  }

  CpuContext ctx() { return CpuContext{view, &npt, mode}; }
};

}  // namespace

TEST_CASE("instruction encoding round-trips") {
  Instruction ins{Opcode::Load, Rdi, Rbx, 0xdeadbeef};
  Instruction got = Instruction::decode(ins.encode());
  CHECK(got.op == ins.op);
  CHECK(got.r1 == ins.r1);
  CHECK(got.r2 == ins.r2);
  CHECK(got.imm == ins.imm);
}

TEST_CASE("movi then hlt exits with visible registers") {
  Fixture f;
  f.program({{Opcode::Movi, Rdi, 0, 7}, {Opcode::Hlt, 0, 0, 0}});
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::HltIntercept);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rdi) == 7);
}

TEST_CASE("sealed registers hide the same run") {
  Fixture f{Mode{true, true, false, false}};
  f.program({{Opcode::Movi, Rdi, 0, 7}, {Opcode::Hlt, 0, 0, 0}});
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::HltIntercept);
  CHECK_THROWS_AS(vmcbRead(f.vmcb, f.mode, VmcbField::Rdi), StateSealed);
  // Exit information stays readable.
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::ExitCode) ==
        uint64_t(ExitReason::HltIntercept));
}

TEST_CASE("load store and arithmetic") {
  Fixture f;
  f.view.writeU32(kPageSize * 2 + 8, 41, true);
  f.program({{Opcode::Movi, Rbx, 0, Fixture::kData},
             {Opcode::Load, Rax, Rbx, 8},
             {Opcode::Movi, Rcx, 0, 1},
             {Opcode::Add, Rax, Rcx, 0},
             {Opcode::Store, Rax, Rbx, 12},
             {Opcode::Hlt, 0, 0, 0}});
  auto c = f.ctx();
  vmrun(f.vmcb, c, 1000);
  CHECK(f.view.readU32(kPageSize * 2 + 12, true) == 42);
}

TEST_CASE("memsetz zeroes a bounded run") {
  Fixture f;
  for (uint64_t off = 0; off < 64; off += 4)
    f.view.writeU32(kPageSize * 2 + off, 0xffffffff, true);
  f.program({{Opcode::Movi, Rax, 0, Fixture::kData}, {Opcode::Memsetz, Rax, 0, 32},
             {Opcode::Hlt, 0, 0, 0}});
  auto c = f.ctx();
  vmrun(f.vmcb, c, 1000);
  CHECK(f.view.readU32(kPageSize * 2 + 28, true) == 0);
  CHECK(f.view.readU32(kPageSize * 2 + 32, true) == 0xffffffff);
}

TEST_CASE("syscall and sysret bounce through lstar") {
  Fixture f;
  f.vmcb.syscallEntry = 0x2000;  // reuse the data page as code
  f.program({{Opcode::Movi, Rax, 0, 5}, {Opcode::Syscall, 0, 0, 0}, {Opcode::Hlt, 0, 0, 0}});
  f.program({{Opcode::Movi, Rbx, 0, 0x99}, {Opcode::Sysret, 0, 0, 0}}, 0x2000);
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::HltIntercept);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rbx) == 0x99);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rcx) == Fixture::kCode + 2 * kInstrSize);
}

TEST_CASE("fetch from a stripped page reports the rip page") {
  Fixture f;
  f.program({{Opcode::Nop, 0, 0, 0}});
  f.npt.entry(0x1000).noExec = true;
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::Npf);
  CHECK(e.fault.access == AccessType::Execute);
  CHECK(e.fault.gpa == 0x1000);
}

TEST_CASE("faulting instructions commit nothing and re-execute") {
  Fixture f;
  f.view.writeU32(kPageSize * 2, 0x1234, true);
  f.program({{Opcode::Movi, Rbx, 0, Fixture::kData}, {Opcode::Movi, Rax, 0, 0x77},
             {Opcode::Store, Rax, Rbx, 0}, {Opcode::Hlt, 0, 0, 0}});
  f.npt.entry(0x2000).writable = false;
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::Npf);
  CHECK(e.fault.access == AccessType::Write);
  CHECK(f.view.readU32(kPageSize * 2, true) == 0x1234);
  f.npt.entry(0x2000).writable = true;
  e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::HltIntercept);
  CHECK(f.view.readU32(kPageSize * 2, true) == 0x77);
}

TEST_CASE("timer slices interleave without touching state") {
  Fixture f;
  f.vmcb.idtBase = 0x2000;
  f.vmcb.idtCount = 1;
  f.view.writeU64(0x10 * kPageSize + 0x800, 0x2800, true);  // not used: handlers via table
  f.program({{Opcode::Iret, 0, 0, 0}}, 0x2800);
  // Long straight-line run: many movi then hlt.
  std::vector<Instruction> prog;
  for (int i = 0; i < 20; ++i) prog.push_back({Opcode::Movi, Rax, 0, uint32_t(i)});
  prog.push_back({Opcode::Hlt, 0, 0, 0});
  GuestVirtAddr p = Fixture::kCode;
  for (auto& ins : prog) {
    f.view.write(p, ins.encode(), true);
    p += kInstrSize;
  }
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000, 6);
  CHECK(e.reason == ExitReason::Timer);
  uint64_t ripAtSlice = f.vmcb.rip;
  e = vmrun(f.vmcb, c, 1000, 6);
  CHECK(f.vmcb.rip > ripAtSlice);
}

TEST_CASE("injected vectors land on the handler and return") {
  Fixture f;
  // Handler table page at 0x4000 holds vector addresses; handler at 0x2800.
  f.vmcb.idtBase = 0x4000;
  f.vmcb.idtCount = 2;
  f.view.writeU64(0x4000 + 8, 0x2800, true);
  f.program({{Opcode::Iret, 0, 0, 0}}, 0x2800);
  f.program({{Opcode::Movi, Rax, 0, 1}, {Opcode::Hlt, 0, 0, 0}});

  SUBCASE("handler physical page shows up as an execute fault") {
    f.npt.bulkSetExec(false, {});
    injectInterrupt(f.vmcb, f.mode, 1);
    auto c = f.ctx();
    VmExit e = vmrun(f.vmcb, c, 1000);
    CHECK(e.reason == ExitReason::Npf);
    CHECK(e.fault.access == AccessType::Execute);
    CHECK(pageOf(e.fault.gpa) == 0x2000);
  }

  SUBCASE("handler returns transparently") {
    injectInterrupt(f.vmcb, f.mode, 1);
    auto c = f.ctx();
    VmExit e = vmrun(f.vmcb, c, 1000);
    CHECK(e.reason == ExitReason::HltIntercept);
    CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rax) == 1);
  }

  SUBCASE("unregistered vector errors") {
    CHECK_THROWS_AS(injectInterrupt(f.vmcb, f.mode, 9), NoHandler);
  }
}

TEST_CASE("injection stays allowed when writes are restricted") {
  Fixture f{Mode{true, false, true, false}};
  CHECK_THROWS_AS(vmcbWrite(f.vmcb, f.mode, VmcbField::Rip, 0x1000), WriteOnceViolation);
  f.vmcb.idtCount = 1;
  CHECK_NOTHROW(injectInterrupt(f.vmcb, f.mode, 0));

  Fixture g{Mode{true, true, false, false}};
  CHECK_THROWS_AS(vmcbWrite(g.vmcb, g.mode, VmcbField::Rip, 0x1000), StateSealed);
  g.vmcb.idtCount = 1;
  CHECK_NOTHROW(injectInterrupt(g.vmcb, g.mode, 0));
}

TEST_CASE("rip writes divert control flow when permitted") {
  Fixture f;
  f.program({{Opcode::Movi, Rax, 0, 1}, {Opcode::Hlt, 0, 0, 0}});
  f.program({{Opcode::Movi, Rax, 0, 2}, {Opcode::Hlt, 0, 0, 0}}, 0x2000);
  vmcbWrite(f.vmcb, f.mode, VmcbField::Rip, 0x2000);
  auto c = f.ctx();
  vmrun(f.vmcb, c, 1000);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rax) == 2);
}

TEST_CASE("mode contracts on control fields") {
  Vmcb v;
  Mode es{true, true, false, false};
  CHECK_THROWS_AS(vmcbRead(v, es, VmcbField::Cr3), StateSealed);
  CHECK_NOTHROW(vmcbRead(v, es, VmcbField::Asid));

  Mode wo{true, false, true, false};
  CHECK_THROWS_AS(vmcbWrite(v, wo, VmcbField::InterceptHlt, 0), WriteOnceViolation);
}

TEST_CASE("register snapshots restore the guest exactly") {
  Fixture f;
  f.program({{Opcode::Movi, Rbx, 0, 11}, {Opcode::Movi, Rdi, 0, 12}, {Opcode::Hlt, 0, 0, 0},
             {Opcode::Movi, Rax, 0, 13}, {Opcode::Hlt, 0, 0, 0}});
  auto c = f.ctx();
  vmrun(f.vmcb, c, 1000);

  RegSnapshot snap = snapshotRegs(f.vmcb, f.mode);
  vmcbWrite(f.vmcb, f.mode, VmcbField::Rbx, 0xbad);
  vmcbWrite(f.vmcb, f.mode, VmcbField::Rdi, 0xbad);
  restoreRegs(f.vmcb, f.mode, snap);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rbx) == 11);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rdi) == 12);

  vmrun(f.vmcb, c, 1000);
  CHECK(vmcbRead(f.vmcb, f.mode, VmcbField::Rax) == 13);

  Mode es{true, true, false, false};
  CHECK_THROWS_AS(snapshotRegs(f.vmcb, es), StateSealed);
}

TEST_CASE("decode assist reveals shared stores only") {
  Fixture f{Mode{true, true, false, true}};
  SUBCASE("direct fill") {
    decodeAssistFill(f.vmcb, f.mode, Rax, 0x55, true);
    REQUIRE(f.vmcb.decodeAssist.has_value());
    CHECK(f.vmcb.decodeAssist->second == 0x55);
    decodeAssistFill(f.vmcb, f.mode, Rax, 0x55, false);
    CHECK_FALSE(f.vmcb.decodeAssist.has_value());
  }

  SUBCASE("store fault to a shared page carries the value") {
    f.program({{Opcode::Movi, Rbx, 0, Fixture::kShared}, {Opcode::Movi, Rax, 0, 0x77},
               {Opcode::Store, Rax, Rbx, 0}, {Opcode::Hlt, 0, 0, 0}});
    f.npt.entry(0x3000).writable = false;
    auto c = f.ctx();
    VmExit e = vmrun(f.vmcb, c, 1000);
    CHECK(e.reason == ExitReason::Npf);
    REQUIRE(f.vmcb.decodeAssist.has_value());
    CHECK(f.vmcb.decodeAssist->second == 0x77);
  }

  SUBCASE("store fault to a private page carries nothing") {
    f.program({{Opcode::Movi, Rbx, 0, Fixture::kData}, {Opcode::Movi, Rax, 0, 0x77},
               {Opcode::Store, Rax, Rbx, 0}, {Opcode::Hlt, 0, 0, 0}});
    f.npt.entry(0x2000).writable = false;
    auto c = f.ctx();
    VmExit e = vmrun(f.vmcb, c, 1000);
    CHECK(e.reason == ExitReason::Npf);
    CHECK_FALSE(f.vmcb.decodeAssist.has_value());
  }

  SUBCASE("load fault carries nothing") {
    f.program({{Opcode::Movi, Rbx, 0, Fixture::kShared}, {Opcode::Load, Rax, Rbx, 0},
               {Opcode::Hlt, 0, 0, 0}});
    f.npt.entry(0x3000).present = false;
    auto c = f.ctx();
    VmExit e = vmrun(f.vmcb, c, 1000);
    CHECK(e.reason == ExitReason::Npf);
    CHECK_FALSE(f.vmcb.decodeAssist.has_value());
  }
}

TEST_CASE("guest faults surface as exits") {
  Fixture f;
  f.program({{Opcode::Movi, Rbx, 0, 0x0dead000}, {Opcode::Load, Rax, Rbx, 0},
             {Opcode::Hlt, 0, 0, 0}});
  auto c = f.ctx();
  VmExit e = vmrun(f.vmcb, c, 1000);
  CHECK(e.reason == ExitReason::GuestFault);
  CHECK(e.faultGva == 0x0dead000);
}

TEST_CASE("fuel exhaustion throws") {
  Fixture f;
  f.program({{Opcode::Jmp, 0, 0, Fixture::kCode}});
  auto c = f.ctx();
  CHECK_THROWS_AS(vmrun(f.vmcb, c, 50), FuelExceeded);
}
