#include <doctest.h>

#include "sevsim/hypervisor.hpp"

using namespace sevsim;

namespace {

constexpr size_t kRam = 16ull << 20;

SimConfig smallCfg(uint64_t seed = 1) {
  SimConfig c;
  c.seed = seed;
  c.guestRamBytes = kRam;
  return c;
}

std::array<uint8_t, 16> pw(const char* s) {
  std::array<uint8_t, 16> p{};
  for (size_t i = 0; s[i] && i < 16; ++i) p[i] = uint8_t(s[i]);
  return p;
}

}  // namespace

TEST_CASE("layout randomization off lands on the reference") {
  GuestMachine m(smallCfg());
  GuestImage ref = referenceImage(kRam);
  CHECK(m.image().textBaseVirt == GuestImage::kTextVirtRef);
  CHECK(m.image().textBasePhys == GuestImage::kTextPhysRef);
  CHECK(m.config().kaslr->virtOffset == 0);
  CHECK(m.config().kaslr->physOffset == 0);
  for (const auto& [name, sym] : ref.symbols) {
    CHECK(m.image().sym(name).virt == sym.virt);
    CHECK(m.image().sym(name).phys == sym.phys);
  }
}

TEST_CASE("builds are bitwise deterministic") {
  SimConfig c = smallCfg(77);
  c.kaslrEnabled = true;
  GuestMachine a(c), b(c);
  CHECK(a.phys().rawRead(0, kRam) == b.phys().rawRead(0, kRam));
}

TEST_CASE("randomized symbols slide by the chosen offsets") {
  SimConfig c = smallCfg(5);
  c.kaslrEnabled = true;
  GuestMachine m(c);
  GuestImage ref = referenceImage(kRam);
  const KaslrConfig& k = *m.config().kaslr;
  CHECK((k.virtOffset != 0 || k.physOffset != 0));
  CHECK(k.virtOffset % GuestImage::kAlignUnit == 0);
  CHECK(m.image().sym("entry_syscall").virt - ref.sym("entry_syscall").virt ==
        k.virtOffset);
  CHECK(m.image().sym("entry_syscall").phys - ref.sym("entry_syscall").phys ==
        k.physOffset);
}

TEST_CASE("reference image is stable and carries the gadgets") {
  GuestImage a = referenceImage(kRam);
  GuestImage b = referenceImage(kRam);
  CHECK(a.symbols.size() == b.symbols.size());
  for (const auto& [name, sym] : a.symbols) {
    CHECK(b.sym(name).virt == sym.virt);
    CHECK(b.sym(name).phys == sym.phys);
  }
  CHECK(a.symbols.count("gadget_read") == 1);
  CHECK(a.symbols.count("gadget_write") == 1);
  CHECK(a.symbols.count("entry_syscall") == 1);
}

TEST_CASE("valid credentials authenticate") {
  GuestMachine m(smallCfg());
  Hypervisor hv(m);
  LoginRecord r = m.runLogin(hv, m.credential());
  CHECK(r.completed);
  CHECK(r.authenticated);
  CHECK_FALSE(r.terminated);
}

TEST_CASE("wrong credentials fail without crashing") {
  GuestMachine m(smallCfg());
  Hypervisor hv(m);
  LoginRecord r = m.runLogin(hv, pw("wrong-password"));
  CHECK(r.completed);
  CHECK_FALSE(r.authenticated);
  CHECK_FALSE(r.terminated);
}

TEST_CASE("logins keep working back to back") {
  GuestMachine m(smallCfg());
  Hypervisor hv(m);
  for (int i = 0; i < 3; ++i) {
    CHECK_FALSE(m.runLogin(hv, pw("nope")).authenticated);
    CHECK(m.runLogin(hv, m.credential()).authenticated);
  }
  CHECK(m.completedLogins() == 6);
}

TEST_CASE("buffer placement follows the kernel schedule") {
  GuestMachine m(smallCfg());
  Hypervisor hv(m);
  for (size_t i = 0; i < 4; ++i) {
    uint32_t predicted = m.offsetForAttempt(i);
    LoginRecord r = m.runLogin(hv, m.credential());
    CHECK(r.offset == predicted);
  }
}

TEST_CASE("forced offsets pin every placement") {
  SimConfig c = smallCfg();
  c.forcedOffset = 0x4a0;
  GuestMachine m(c);
  Hypervisor hv(m);
  for (int i = 0; i < 3; ++i) CHECK(m.runLogin(hv, m.credential()).offset == 0x4a0);
}

TEST_CASE("page checksum matches an independent sum") {
  GuestMachine m(smallCfg());
  GuestVirtAddr page = m.image().payloadVirt(0);
  auto bytes = m.guestView(page, kPageSize);
  uint32_t expect = 0;
  for (size_t i = 0; i < kPageSize; i += 4) {
    uint32_t w = uint32_t(bytes[i]) | uint32_t(bytes[i + 1]) << 8 |
                 uint32_t(bytes[i + 2]) << 16 | uint32_t(bytes[i + 3]) << 24;
    expect += w;
  }
  CHECK(m.runChecksum(page) == expect);
  CHECK(m.runChecksum(page) == expect);
}

TEST_CASE("poke and view round-trip through guest translation") {
  GuestMachine m(smallCfg());
  GuestVirtAddr v = m.image().payloadVirt(1) + 0x40;
  std::vector<uint8_t> data{0xde, 0xad, 0xbe, 0xef};
  m.guestPoke(v, data);
  CHECK(m.guestView(v, 4) == data);
  // Payload pages are private: the raw frame holds something else.
  Translation t = translate(m.memView(), m.npt(), m.vmcb().cr3, v, AccessType::Read, false);
  CHECK(m.phys().rawRead(t.hpa, 4) != data);
}

TEST_CASE("noise free runs are reproducible") {
  auto trace = [](double noise) {
    SimConfig c = smallCfg(3);
    c.noiseRate = noise;
    GuestMachine m(c);
    Hypervisor hv(m);
    hv.trackWrites(true);
    m.runLogin(hv, pw("abc"));
    std::vector<GuestPhysAddr> pages;
    for (const auto& d : hv.dirtyLog()) pages.push_back(d.page);
    return pages;
  };
  CHECK(trace(0.0) == trace(0.0));
}

TEST_CASE("noise perturbs some runs and is attributable") {
  SimConfig base = smallCfg(3);
  GuestMachine quiet(base);
  Hypervisor qhv(quiet);
  qhv.trackWrites(true);
  quiet.runLogin(qhv, pw("abc"));
  std::vector<GuestPhysAddr> quietPages;
  for (const auto& d : qhv.dirtyLog()) quietPages.push_back(d.page);

  bool differed = false;
  bool sawNoiseAsid = false;
  for (uint64_t seed = 1; seed <= 20 && !(differed && sawNoiseAsid); ++seed) {
    SimConfig c = smallCfg(seed);
    c.noiseRate = 0.2;
    GuestMachine m(c);
    Hypervisor hv(m);
    hv.trackWrites(true);
    hv.enableSyscallTracking(m.image().sym("entry_syscall").phys,
                             {{m.image().sym("sys_noise_a").phys, kSysNoiseA}});
    m.runLogin(hv, pw("abc"));
    std::vector<GuestPhysAddr> pages;
    for (const auto& d : hv.dirtyLog()) pages.push_back(d.page);
    if (pages != quietPages) differed = true;
    for (const auto& e : hv.writeEvents())
      if (e.asid == GuestMachine::kNoiseAsid) sawNoiseAsid = true;
  }
  CHECK(differed);
  CHECK(sawNoiseAsid);
}

TEST_CASE("distinct seeds give distinct credentials and schedules") {
  GuestMachine a(smallCfg(1)), b(smallCfg(2));
  CHECK(a.credential() != b.credential());
}
