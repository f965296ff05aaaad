#include "sevsim/guest.hpp"

#include <algorithm>
#include <cstring>

#include "sevsim/hypervisor.hpp"

namespace sevsim {

namespace {

// Text page order. Code pages first, then the kernel data pages, then the
// single user code page.
enum TextPage : size_t {
  kPgEntry = 0x0,
  kPgSpawn = 0x1,
  kPgRead = 0x2,
  kPgCopy = 0x3,
  kPgAuth = 0x4,
  kPgZero = 0x5,
  kPgWrite = 0x6,
  kPgNoiseA = 0x7,
  kPgNoiseB = 0x8,
  kPgIrqTimer = 0x9,
  kPgIrqSpurious = 0xA,
  kPgGadget = 0xB,
  kPgData = 0xC,
  kPgCred = 0xD,
  kPgStaging = 0xE,
  kPgIdt = 0xF,
  kPgUser = 0x10,
  kTextPageCount = 0x11,
};

// Kernel data page field offsets.
constexpr uint32_t kDataPhysmapBase = 0x00;  // u64
constexpr uint32_t kDataCounter = 0x08;
constexpr uint32_t kDataCuroff = 0x10;
constexpr uint32_t kDataAuthres = 0x18;
constexpr uint32_t kDataChecksum = 0x40;
constexpr uint32_t kDataSchedule = 0x100;  // u32[256]

// Stack page marker offsets (below the lowest buffer offset).
constexpr uint32_t kStkAuthres = 0x08;
constexpr uint32_t kStkWriteMark = 0x0C;
constexpr uint32_t kStkReadLen = 0x10;
constexpr uint32_t kStkCanary = 0x18;

constexpr uint32_t kUserLoginOff = 0x000;
constexpr uint32_t kUserNoiseOff = 0x100;
constexpr uint32_t kUserIdleOff = 0x180;
constexpr uint32_t kUserChecksumOff = 0x200;

constexpr GuestVirtAddr kCrashVirt = 0x0DEAD000;
constexpr size_t kSpareFrames = 512;  // host frames past guest RAM
constexpr size_t kFixedRegionBytes = 2ull << 20;
constexpr size_t kScheduleLen = 256;

size_t ramPagesFor(const SimConfig& cfg) { return cfg.guestRamBytes / kPageSize; }

GuestImage layoutFor(const KaslrConfig& k, size_t ramBytes) {
  GuestImage img;
  img.textBaseVirt = GuestImage::kTextVirtRef + k.virtOffset;
  img.textBasePhys = GuestImage::kTextPhysRef + k.physOffset;
  img.textPages = kTextPageCount;
  img.physmapBase = GuestImage::kPhysmapBase;
  img.bufferOffsets = {0x0A0, 0x4A0, 0x8A0, 0xCA0};

  GuestPhysAddr fixedBase = ramBytes - kFixedRegionBytes;
  img.networkPageGpa = fixedBase;
  for (size_t i = 0; i < img.poolPagesGpa.size(); ++i)
    img.poolPagesGpa[i] = fixedBase + (1 + i) * kPageSize;
  img.noisePagesGpa = {fixedBase + 0x9000, fixedBase + 0xA000};
  for (size_t i = 0; i < img.payloadPagesGpa.size(); ++i)
    img.payloadPagesGpa[i] = fixedBase + 0xB000 + i * kPageSize;
  img.ptAreaGpa = fixedBase + 0x20000;
  img.loginRootGpa = img.ptAreaGpa;
  img.noiseRootGpa = img.ptAreaGpa + kPageSize;

  auto pageSym = [&](size_t pg, uint32_t off) {
    return GuestImage::Symbol{img.textBaseVirt + pg * kPageSize + off,
                              img.textBasePhys + pg * kPageSize + off};
  };
  img.symbols["entry_syscall"] = pageSym(kPgEntry, 0);
  img.symbols["sys_spawn"] = pageSym(kPgSpawn, 0);
  img.symbols["sys_read"] = pageSym(kPgRead, 0);
  img.symbols["sys_copy"] = pageSym(kPgCopy, 0);
  img.symbols["sys_auth"] = pageSym(kPgAuth, 0);
  img.symbols["sys_zero"] = pageSym(kPgZero, 0);
  img.symbols["sys_write"] = pageSym(kPgWrite, 0);
  img.symbols["sys_noise_a"] = pageSym(kPgNoiseA, 0);
  img.symbols["sys_noise_b"] = pageSym(kPgNoiseB, 0);
  img.symbols["irq_timer"] = pageSym(kPgIrqTimer, 0);
  img.symbols["irq_spurious"] = pageSym(kPgIrqSpurious, 0);
  img.symbols["gadget_read"] = pageSym(kPgGadget, 0);
  img.symbols["gadget_write"] = pageSym(kPgGadget, 0x10);
  img.symbols["kernel_data"] = pageSym(kPgData, 0);
  img.symbols["page_offset_base"] = pageSym(kPgData, kDataPhysmapBase);
  img.symbols["credential"] = pageSym(kPgCred, 0);
  img.symbols["staging"] = pageSym(kPgStaging, 0);
  img.symbols["idt"] = pageSym(kPgIdt, 0);
  img.symbols["user_login"] = pageSym(kPgUser, kUserLoginOff);
  img.symbols["user_noise"] = pageSym(kPgUser, kUserNoiseOff);
  img.symbols["user_idle"] = pageSym(kPgUser, kUserIdleOff);
  img.symbols["user_checksum"] = pageSym(kPgUser, kUserChecksumOff);

  img.handlerTable = {img.symbols["irq_timer"].virt, img.symbols["irq_spurious"].virt};
  return img;
}

void validateLayout(const KaslrConfig& k, size_t ramBytes) {
  if (ramBytes < (8ull << 20) || ramBytes % kPageSize)
    throw BuildError("guest RAM must be a page multiple of at least 8 MiB");
  if (k.virtOffset % GuestImage::kAlignUnit || k.physOffset % GuestImage::kAlignUnit)
    throw BuildError("randomization offsets must be 2 MiB aligned");
  GuestPhysAddr fixedBase = ramBytes - kFixedRegionBytes;
  GuestPhysAddr textEnd = GuestImage::kTextPhysRef + k.physOffset + kTextPageCount * kPageSize;
  if (textEnd > fixedBase) throw BuildError("physical text offset exceeds guest RAM");
  GuestVirtAddr vEnd = GuestImage::kTextVirtRef + k.virtOffset + kTextPageCount * kPageSize;
  if (vEnd > GuestImage::kPoolVirtBase)
    throw BuildError("virtual text offset exceeds kernel address window");
}

SimConfig normalize(SimConfig cfg) {
  if (cfg.mode.sevEs) cfg.mode.sev = true;
  if (!cfg.kaslrEnabled) {
    cfg.kaslr = KaslrConfig::none();
  } else if (!cfg.kaslr) {
    cfg.kaslr = KaslrConfig::randomized(cfg.seed, cfg.guestRamBytes);
  }
  validateLayout(*cfg.kaslr, cfg.guestRamBytes);
  return cfg;
}

struct Prog {
  std::vector<Instruction> ins;
  void e(Opcode op, uint8_t r1 = 0, uint8_t r2 = 0, uint32_t imm = 0) {
    ins.push_back(Instruction{op, r1, r2, imm});
  }
  void emitTo(std::vector<uint8_t>& page, size_t off) const {
    for (const auto& i : ins) {
      auto b = i.encode();
      std::copy(b.begin(), b.end(), page.begin() + off);
      off += kInstrSize;
    }
  }
};

void putU32(std::vector<uint8_t>& page, size_t off, uint32_t v) {
  std::memcpy(page.data() + off, &v, 4);
}

void putU64(std::vector<uint8_t>& page, size_t off, uint64_t v) {
  std::memcpy(page.data() + off, &v, 8);
}

}  // namespace

const GuestImage::Symbol& GuestImage::sym(const std::string& name) const {
  auto it = symbols.find(name);
  if (it == symbols.end()) throw BuildError("unknown symbol: " + name);
  return it->second;
}

GuestVirtAddr GuestImage::poolVirt(size_t i) const { return kPoolVirtBase + i * kPageSize; }

GuestVirtAddr GuestImage::payloadVirt(size_t i) const {
  return kPayloadVirtBase + i * kPageSize;
}

GuestImage referenceImage(size_t guestRamBytes) {
  validateLayout(KaslrConfig::none(), guestRamBytes);
  return layoutFor(KaslrConfig::none(), guestRamBytes);
}

KaslrConfig KaslrConfig::randomized(uint64_t seed, size_t guestRamBytes) {
  if (guestRamBytes < (8ull << 20))
    throw BuildError("guest RAM must be at least 8 MiB");
  GuestPhysAddr fixedBase = guestRamBytes - kFixedRegionBytes;
  uint64_t physSlots =
      (fixedBase - GuestImage::kTextPhysRef - GuestImage::kAlignUnit) / GuestImage::kAlignUnit;
  uint64_t virtSlots =
      (GuestImage::kPoolVirtBase - GuestImage::kTextVirtRef - GuestImage::kAlignUnit) /
      GuestImage::kAlignUnit;
  std::mt19937_64 rng(seed ^ 0x6b61736c72ull);
  KaslrConfig k;
  k.virtOffset = (rng() % (virtSlots + 1)) * GuestImage::kAlignUnit;
  k.physOffset = (rng() % (physSlots + 1)) * GuestImage::kAlignUnit;
  return k;
}

GuestMachine::GuestMachine(const SimConfig& cfg)
    : cfg_(normalize(cfg)),
      img_(layoutFor(*cfg_.kaslr, cfg_.guestRamBytes)),
      ramPages_(ramPagesFor(cfg_)),
      key_(VmKey::derive(1, cfg_.seed)),
      mem_(ramPagesFor(cfg_) + kSpareFrames),
      npt_(ramPagesFor(cfg_)),
      schedRng_(cfg_.seed * 0x9E3779B97F4A7C15ull + 0xC0FFEEull) {
  build();
}

MemView GuestMachine::memView() { return MemView{&mem_, &key_, cfg_.mode.sev}; }

CpuContext GuestMachine::cpuContext() { return CpuContext{memView(), &npt_, cfg_.mode}; }

void GuestMachine::build() {
  for (size_t i = 0; i < ramPages_; ++i)
    npt_.map(i * kPageSize, i * kPageSize);

  schedule_.resize(kScheduleLen);
  for (auto& s : schedule_)
    s = cfg_.forcedOffset ? *cfg_.forcedOffset
                          : img_.bufferOffsets[schedRng_() % img_.bufferOffsets.size()];
  for (auto& c : credential_) c = uint8_t('!' + schedRng_() % 94);

  assembleText();
  buildPageTables();

  MemView view = memView();
  for (size_t i = 0; i < img_.payloadPagesGpa.size(); ++i) {
    std::vector<uint8_t> page(kPageSize);
    for (auto& b : page) b = uint8_t(schedRng_());
    view.write(img_.payloadPagesGpa[i], page, /*isPrivate=*/true);
  }

  vmcb_.syscallEntry = img_.sym("entry_syscall").virt;
  vmcb_.idtBase = img_.sym("idt").virt;
  vmcb_.idtCount = uint32_t(img_.handlerTable.size());
  vmcb_.interceptHlt = true;
  enterIdle();
}

void GuestMachine::assembleText() {
  const GuestVirtAddr dataV = img_.sym("kernel_data").virt;
  const GuestVirtAddr credV = img_.sym("credential").virt;
  const GuestVirtAddr stagingV = img_.sym("staging").virt;
  const GuestVirtAddr netV = GuestImage::kNetworkVirt;
  const GuestVirtAddr noiseV = GuestImage::kNoiseVirtBase;

  std::array<std::vector<uint8_t>, kTextPageCount> pages;
  for (auto& p : pages) p.assign(kPageSize, 0);

  // Syscall entry: compare rax against each known number, jump to the
  // matching handler page. Uses rdi as the only scratch so preset argument
  // registers survive dispatch.
  {
    Prog p;
    const struct { uint32_t no; const char* sym; } cases[] = {
        {kSysSpawn, "sys_spawn"}, {kSysRead, "sys_read"},     {kSysCopy, "sys_copy"},
        {kSysAuth, "sys_auth"},   {kSysZero, "sys_zero"},     {kSysWrite, "sys_write"},
        {kSysNoiseA, "sys_noise_a"}, {kSysNoiseB, "sys_noise_b"},
    };
    GuestVirtAddr entryV = img_.sym("entry_syscall").virt;
    for (size_t i = 0; i < std::size(cases); ++i) {
      GuestVirtAddr next = entryV + (i + 1) * 3 * kInstrSize;
      p.e(Opcode::Movi, Rdi, 0, cases[i].no);
      p.e(Opcode::CmpJne, Rax, Rdi, uint32_t(next));
      p.e(Opcode::Jmp, 0, 0, uint32_t(img_.sym(cases[i].sym).virt));
    }
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgEntry], 0);
  }

  {  // spawn: zero the caller's buffer page
    Prog p;
    p.e(Opcode::Memsetz, Rsp, 0, kPageSize);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgSpawn], 0);
  }

  {  // read: network page -> staging, then a received-length marker
    Prog p;
    p.e(Opcode::Movi, Rsi, 0, uint32_t(netV));
    p.e(Opcode::Movi, Rbx, 0, uint32_t(stagingV));
    for (uint32_t k = 0; k < 16; k += 4) {
      p.e(Opcode::Load, Rdi, Rsi, k);
      p.e(Opcode::Store, Rdi, Rbx, k);
    }
    p.e(Opcode::Movi, Rdi, 0, 16);
    p.e(Opcode::Store, Rdi, Rsp, kStkReadLen);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgRead], 0);
  }

  {  // copy: staging -> buffer at the scheduled offset, then bookkeeping
    Prog p;
    p.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));
    p.e(Opcode::Load, Rdx, Rbx, kDataCounter);
    p.e(Opcode::Add, Rdx, Rdx);
    p.e(Opcode::Add, Rdx, Rdx);
    p.e(Opcode::Movi, Rsi, 0, uint32_t(dataV + kDataSchedule));
    p.e(Opcode::Add, Rdx, Rsi);
    p.e(Opcode::Load, Rdx, Rdx, 0);  // offset for this attempt
    p.e(Opcode::Movi, Rdi, 0, 0);
    p.e(Opcode::Add, Rdi, Rdx);
    p.e(Opcode::Add, Rdi, Rsp);  // destination
    p.e(Opcode::Movi, Rsi, 0, uint32_t(stagingV));
    for (uint32_t k = 0; k < 16; k += 4) {
      p.e(Opcode::Load, Rbx, Rsi, k);
      p.e(Opcode::Store, Rbx, Rdi, k);
    }
    p.e(Opcode::Store, Rdx, Rsp, kStkCanary);
    p.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));
    p.e(Opcode::Store, Rdx, Rbx, kDataCuroff);
    p.e(Opcode::Load, Rdx, Rbx, kDataCounter);
    p.e(Opcode::Movi, Rsi, 0, 1);
    p.e(Opcode::Add, Rdx, Rsi);
    p.e(Opcode::Store, Rdx, Rbx, kDataCounter);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgCopy], 0);
  }

  {  // auth: offset sanity check, then compare buffer against credential.
     // A stale offset marker means the buffer cannot be trusted; the process
     // deliberately dies (load from an unmapped address).
    GuestVirtAddr authV = img_.sym("sys_auth").virt;
    auto at = [&](uint32_t idx) { return uint32_t(authV + idx * kInstrSize); };
    const uint32_t kFail = 22, kStoreRes = 23, kCrash = 27;
    Prog p;
    p.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));   // 0
    p.e(Opcode::Load, Rbx, Rbx, kDataCuroff);     // 1
    p.e(Opcode::Load, Rdx, Rsp, kStkCanary);      // 2
    p.e(Opcode::CmpJne, Rbx, Rdx, at(kCrash));    // 3
    p.e(Opcode::Movi, Rdi, 0, 0);                 // 4
    p.e(Opcode::Add, Rdi, Rbx);                   // 5
    p.e(Opcode::Add, Rdi, Rsp);                   // 6
    p.e(Opcode::Movi, Rsi, 0, uint32_t(credV));   // 7
    for (uint32_t k = 0; k < 16; k += 4) {        // 8..19
      p.e(Opcode::Load, Rdx, Rdi, k);
      p.e(Opcode::Load, Rbx, Rsi, k);
      p.e(Opcode::CmpJne, Rdx, Rbx, at(kFail));
    }
    p.e(Opcode::Movi, Rdi, 0, 1);                 // 20
    p.e(Opcode::Jmp, 0, 0, at(kStoreRes));        // 21
    p.e(Opcode::Movi, Rdi, 0, 0);                 // 22 fail
    p.e(Opcode::Store, Rdi, Rsp, kStkAuthres);    // 23
    p.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));   // 24
    p.e(Opcode::Store, Rdi, Rbx, kDataAuthres);   // 25
    p.e(Opcode::Sysret);                          // 26
    p.e(Opcode::Movi, Rbx, 0, uint32_t(kCrashVirt));  // 27 crash
    p.e(Opcode::Load, Rdi, Rbx, 0);               // 28
    p.emitTo(pages[kPgAuth], 0);
  }

  {  // zero: wipe the credential copy at the current offset
    Prog p;
    p.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));
    p.e(Opcode::Load, Rbx, Rbx, kDataCuroff);
    p.e(Opcode::Add, Rbx, Rsp);
    p.e(Opcode::Memsetz, Rbx, 0, 16);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgZero], 0);
  }

  {  // write: auth result out to the shared network page, plus stack marker
    Prog p;
    p.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));
    p.e(Opcode::Load, Rdi, Rbx, kDataAuthres);
    p.e(Opcode::Movi, Rbx, 0, uint32_t(netV));
    p.e(Opcode::Store, Rdi, Rbx, 0x40);
    p.e(Opcode::Store, Rdi, Rsp, kStkWriteMark);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgWrite], 0);
  }

  {  // background writer, own page
    Prog p;
    p.e(Opcode::Movi, Rbx, 0, uint32_t(noiseV));
    p.e(Opcode::Movi, Rdx, 0, 0x5EED);
    p.e(Opcode::Store, Rdx, Rbx, 0x10);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgNoiseA], 0);
  }

  {  // background writer, caller-chosen page (rbx, rdx preset)
    Prog p;
    p.e(Opcode::Store, Rdx, Rbx, 0x40);
    p.e(Opcode::Sysret);
    p.emitTo(pages[kPgNoiseB], 0);
  }

  {
    Prog p;
    p.e(Opcode::Iret);
    p.emitTo(pages[kPgIrqTimer], 0);
    p.emitTo(pages[kPgIrqSpurious], 0);
  }

  {  // the leaked-register gadgets
    Prog r;
    r.e(Opcode::Load, Rdi, Rbx, 0);
    r.e(Opcode::Hlt);
    r.emitTo(pages[kPgGadget], 0);
    Prog w;
    w.e(Opcode::Store, Rdi, Rbx, 0);
    w.e(Opcode::Hlt);
    w.emitTo(pages[kPgGadget], 0x10);
  }

  putU64(pages[kPgData], kDataPhysmapBase, img_.physmapBase);
  for (size_t i = 0; i < schedule_.size(); ++i)
    putU32(pages[kPgData], kDataSchedule + i * 4, schedule_[i]);

  std::copy(credential_.begin(), credential_.end(), pages[kPgCred].begin());

  for (size_t v = 0; v < img_.handlerTable.size(); ++v)
    putU64(pages[kPgIdt], v * 8, img_.handlerTable[v]);

  {  // user programs
    GuestVirtAddr userV = img_.sym("user_login").virt;
    GuestVirtAddr idleV = img_.sym("user_idle").virt;
    Prog login;
    for (uint32_t no : {kSysSpawn, kSysRead, kSysCopy, kSysAuth, kSysZero, kSysWrite}) {
      login.e(Opcode::Movi, Rax, 0, no);
      login.e(Opcode::Syscall);
      login.e(Opcode::Hlt);
    }
    login.e(Opcode::Jmp, 0, 0, uint32_t(idleV));
    login.emitTo(pages[kPgUser], kUserLoginOff);

    Prog noise;
    noise.e(Opcode::Syscall);
    noise.e(Opcode::Hlt);
    noise.e(Opcode::Jmp, 0, 0, uint32_t(userV + kUserNoiseOff));
    noise.emitTo(pages[kPgUser], kUserNoiseOff);

    Prog idle;
    idle.e(Opcode::Jmp, 0, 0, uint32_t(idleV));
    idle.emitTo(pages[kPgUser], kUserIdleOff);

    // checksum loop, presets: rbx = page, rsi = page end, rdx = 0, rbp = 4
    GuestVirtAddr ckV = userV + kUserChecksumOff;
    Prog ck;
    ck.e(Opcode::Load, Rdi, Rbx, 0);
    ck.e(Opcode::Add, Rdx, Rdi);
    ck.e(Opcode::Add, Rbx, Rbp);
    ck.e(Opcode::CmpJne, Rbx, Rsi, uint32_t(ckV));
    ck.e(Opcode::Movi, Rbx, 0, uint32_t(dataV));
    ck.e(Opcode::Store, Rdx, Rbx, kDataChecksum);
    ck.e(Opcode::Hlt);
    ck.e(Opcode::Jmp, 0, 0, uint32_t(idleV));
    ck.emitTo(pages[kPgUser], kUserChecksumOff);
  }

  MemView view = memView();
  for (size_t i = 0; i < kTextPageCount; ++i)
    view.write(img_.textBasePhys + i * kPageSize, pages[i], /*isPrivate=*/true);
}

void GuestMachine::buildPageTables() {
  struct MapEntry {
    GuestVirtAddr v;
    GuestPhysAddr p;
    bool w, nx, c;
  };
  std::vector<MapEntry> shared, noiseOnly;

  for (size_t i = 0; i < kTextPageCount; ++i) {
    bool data = (i >= kPgData && i <= kPgIdt);
    bool writable = (i == kPgData || i == kPgStaging);
    shared.push_back({img_.textBaseVirt + i * kPageSize, img_.textBasePhys + i * kPageSize,
                      writable, /*nx=*/data, /*c=*/true});
  }
  for (size_t i = 0; i < img_.poolPagesGpa.size(); ++i)
    shared.push_back({img_.poolVirt(i), img_.poolPagesGpa[i], true, true, true});
  for (size_t i = 0; i < img_.payloadPagesGpa.size(); ++i)
    shared.push_back({img_.payloadVirt(i), img_.payloadPagesGpa[i], true, true, true});
  shared.push_back({GuestImage::kNetworkVirt, img_.networkPageGpa, true, true, /*c=*/false});
  for (size_t i = 0; i < ramPages_; ++i)
    shared.push_back({img_.physmapBase + i * kPageSize, i * kPageSize, true, true, true});
  for (size_t i = 0; i < img_.noisePagesGpa.size(); ++i)
    noiseOnly.push_back(
        {GuestImage::kNoiseVirtBase + i * kPageSize, img_.noisePagesGpa[i], true, true, true});

  GuestPhysAddr ptNext = img_.ptAreaGpa + 2 * kPageSize;  // roots first
  GuestPhysAddr ptLimit = cfg_.guestRamBytes;
  auto allocPt = [&]() {
    if (ptNext + kPageSize > ptLimit) throw BuildError("pagetable area exhausted");
    GuestPhysAddr g = ptNext;
    ptNext += kPageSize;
    return g;
  };

  std::map<GuestPhysAddr, std::vector<uint32_t>> staged;
  staged[img_.loginRootGpa].assign(kEntriesPerTable, 0);
  staged[img_.noiseRootGpa].assign(kEntriesPerTable, 0);
  std::map<uint64_t, GuestPhysAddr> l2BySlot;

  auto place = [&](const MapEntry& m) {
    uint64_t slot = l1Index(m.v);
    auto it = l2BySlot.find(slot);
    if (it == l2BySlot.end()) {
      GuestPhysAddr t = allocPt();
      staged[t].assign(kEntriesPerTable, 0);
      it = l2BySlot.emplace(slot, t).first;
      GuestPte l1;
      l1.present = true;
      l1.writable = true;
      l1.cBit = true;
      l1.frame = t;
      staged[img_.loginRootGpa][slot] = l1.pack();
      staged[img_.noiseRootGpa][slot] = l1.pack();
    }
    GuestPte l2;
    l2.present = true;
    l2.writable = m.w;
    l2.noExec = m.nx;
    l2.cBit = m.c;
    l2.frame = m.p;
    staged[it->second][l2Index(m.v)] = l2.pack();
  };

  for (const auto& m : shared) place(m);
  // The background process keeps its scratch slot out of the login root.
  for (const auto& m : noiseOnly) {
    place(m);
    staged[img_.loginRootGpa][l1Index(m.v)] = 0;
  }

  MemView view = memView();
  std::vector<uint8_t> bytes(kPageSize);
  for (const auto& [gpa, entries] : staged) {
    for (size_t i = 0; i < kEntriesPerTable; ++i) putU32(bytes, i * 4, entries[i]);
    view.write(gpa, bytes, /*isPrivate=*/true);
  }
}

std::vector<uint8_t> GuestMachine::guestView(GuestVirtAddr gva, size_t len) {
  MemView view = memView();
  std::vector<uint8_t> out;
  out.reserve(len);
  while (out.size() < len) {
    size_t chunk = std::min(len - out.size(), kPageSize - pageOffset(gva));
    Translation t;
    try {
      t = translate(view, npt_, img_.loginRootGpa, gva, AccessType::Read, false);
    } catch (const GuestPageFault&) {
      t = translate(view, npt_, img_.noiseRootGpa, gva, AccessType::Read, false);
    }
    auto part = view.read(t.hpa, chunk, t.isPrivate);
    out.insert(out.end(), part.begin(), part.end());
    gva += chunk;
  }
  return out;
}

void GuestMachine::guestPoke(GuestVirtAddr gva, std::span<const uint8_t> data) {
  MemView view = memView();
  size_t done = 0;
  while (done < data.size()) {
    size_t chunk = std::min(data.size() - done, kPageSize - pageOffset(gva));
    Translation t;
    try {
      t = translate(view, npt_, img_.loginRootGpa, gva, AccessType::Read, false);
    } catch (const GuestPageFault&) {
      t = translate(view, npt_, img_.noiseRootGpa, gva, AccessType::Read, false);
    }
    view.write(t.hpa, data.subspan(done, chunk), t.isPrivate);
    done += chunk;
    gva += chunk;
  }
}

void GuestMachine::queueLogin(const std::array<uint8_t, 16>& password) {
  if (logins_.size() >= kScheduleLen) throw BuildError("login schedule exhausted");
  LoginRecord rec;
  rec.index = logins_.size();
  rec.password = password;
  rec.offset = schedule_[rec.index];
  rec.bufferGpa = img_.poolPagesGpa[rec.index % img_.poolPagesGpa.size()];
  logins_.push_back(rec);
  if (active_ == SIZE_MAX && !noiseActive_ && nextStart_ == rec.index)
    startLogin(logins_[rec.index]);
}

LoginRecord GuestMachine::runLogin(Hypervisor& hv, const std::array<uint8_t, 16>& password,
                                   uint64_t maxExits) {
  size_t idx = logins_.size();
  queueLogin(password);
  for (uint64_t i = 0; i < maxExits; ++i) {
    if (logins_[idx].completed) return logins_[idx];
    hv.step();
  }
  throw SimError("login attempt did not complete within the exit budget");
}

size_t GuestMachine::completedLogins() const {
  return size_t(std::count_if(logins_.begin(), logins_.end(),
                              [](const LoginRecord& r) { return r.completed; }));
}

bool GuestMachine::loginInFlight() const {
  return active_ != SIZE_MAX || nextStart_ < logins_.size();
}

uint32_t GuestMachine::offsetForAttempt(size_t index) const {
  if (index >= schedule_.size()) throw BuildError("attempt index out of range");
  return schedule_[index];
}

uint32_t GuestMachine::runChecksum(GuestVirtAddr pageVirt) {
  Vmcb saved = vmcb_;
  vmcb_.rip = img_.sym("user_checksum").virt;
  vmcb_.gpr = {};
  vmcb_.gpr[Rbx] = pageVirt;
  vmcb_.gpr[Rsi] = pageVirt + kPageSize;
  vmcb_.gpr[Rbp] = 4;
  vmcb_.cr3 = img_.loginRootGpa;
  vmcb_.asid = kLoginAsid;
  CpuContext ctx = cpuContext();
  VmExit e = vmrun(vmcb_, ctx, 100000, 0);
  if (e.reason != ExitReason::HltIntercept)
    throw SimError("checksum probe interrupted");
  uint32_t sum;
  auto b = guestView(img_.sym("kernel_data").virt + kDataChecksum, 4);
  std::memcpy(&sum, b.data(), 4);
  vmcb_ = saved;
  return sum;
}

void GuestMachine::saveInto(ProcCtx& ctx) {
  ctx.regs.rip = vmcb_.rip;
  ctx.regs.gpr = vmcb_.gpr;
  ctx.cr3 = vmcb_.cr3;
  ctx.asid = vmcb_.asid;
}

void GuestMachine::loadFrom(const ProcCtx& ctx) {
  vmcb_.rip = ctx.regs.rip;
  vmcb_.gpr = ctx.regs.gpr;
  vmcb_.cr3 = ctx.cr3;
  vmcb_.asid = ctx.asid;
}

void GuestMachine::enterIdle() {
  vmcb_.rip = img_.sym("user_idle").virt;
  vmcb_.gpr = {};
  vmcb_.cr3 = img_.loginRootGpa;
  vmcb_.asid = kLoginAsid;
}

void GuestMachine::startLogin(LoginRecord& rec) {
  mem_.rawWrite(img_.networkPageGpa, rec.password);  // shared page, plaintext
  active_ = rec.index;
  nextStart_ = rec.index + 1;
  boundaries_ = 0;
  vmcb_.rip = img_.sym("user_login").virt;
  vmcb_.gpr = {};
  vmcb_.gpr[Rsp] = img_.poolVirt(rec.index % img_.poolPagesGpa.size());
  vmcb_.cr3 = img_.loginRootGpa;
  vmcb_.asid = kLoginAsid;
}

void GuestMachine::finishLogin(bool crashed) {
  LoginRecord& rec = logins_[active_];
  rec.completed = true;
  rec.terminated = crashed;
  if (!crashed) {
    auto b = guestView(img_.sym("kernel_data").virt + kDataAuthres, 4);
    uint32_t res;
    std::memcpy(&res, b.data(), 4);
    rec.authenticated = (res == 1);
  }
  active_ = SIZE_MAX;
  boundaries_ = 0;
  if (nextStart_ < logins_.size())
    startLogin(logins_[nextStart_]);
  else
    enterIdle();
}

void GuestMachine::onHltBoundary() {
  if (noiseActive_) {
    noiseActive_ = false;
    loadFrom(loginCtx_);
    if (active_ == SIZE_MAX && nextStart_ < logins_.size())
      startLogin(logins_[nextStart_]);
    return;
  }
  if (active_ != SIZE_MAX) {
    ++boundaries_;
    if (boundaries_ == 6) {
      finishLogin(false);
      return;
    }
  }
  if (cfg_.noiseRate > 0 &&
      std::uniform_real_distribution<double>(0, 1)(schedRng_) < cfg_.noiseRate) {
    saveInto(loginCtx_);
    vmcb_.rip = img_.sym("user_noise").virt;
    vmcb_.gpr = {};
    bool scribble = active_ != SIZE_MAX && (schedRng_() & 1);
    if (scribble) {
      vmcb_.gpr[Rax] = kSysNoiseB;
      vmcb_.gpr[Rbx] = img_.poolVirt(active_ % img_.poolPagesGpa.size());
      vmcb_.gpr[Rdx] = uint32_t(schedRng_());
    } else {
      vmcb_.gpr[Rax] = kSysNoiseA;
    }
    vmcb_.cr3 = img_.noiseRootGpa;
    vmcb_.asid = kNoiseAsid;
    noiseActive_ = true;
  }
}

void GuestMachine::onGuestFault(GuestVirtAddr) {
  if (noiseActive_) {
    noiseActive_ = false;
    loadFrom(loginCtx_);
    return;
  }
  if (active_ != SIZE_MAX) {
    finishLogin(true);
    return;
  }
  enterIdle();
}

}  // namespace sevsim
