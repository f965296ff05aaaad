#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sevsim/cpu.hpp"

namespace sevsim {

class Hypervisor;

/// Kernel text randomization. Virtual and physical bases each slide by a
/// multiple of the 2 MiB alignment unit from the reference position.
struct KaslrConfig {
  uint64_t virtOffset = 0;
  uint64_t physOffset = 0;

  static KaslrConfig none() { return {}; }
  static KaslrConfig randomized(uint64_t seed, size_t guestRamBytes);
};

struct SimConfig {
  uint64_t seed = 1;
  Mode mode;
  size_t guestRamBytes = 512ull << 20;
  std::optional<KaslrConfig> kaslr;  // nullopt = randomize from seed
  bool kaslrEnabled = false;
  double noiseRate = 0.0;  // per scheduling slot chance of a noise timeslice
  std::optional<uint32_t> forcedOffset;  // pin every placement to one offset
};

/// Guest layout: symbol positions and the fixed workload structures. All
/// fields are what an owner of the image (or an attacker with a reference
/// build) knows statically.
struct GuestImage {
  struct Symbol {
    GuestVirtAddr virt = 0;
    GuestPhysAddr phys = 0;
  };

  GuestVirtAddr textBaseVirt = 0;
  GuestPhysAddr textBasePhys = 0;
  size_t textPages = 0;
  GuestVirtAddr physmapBase = 0;
  std::map<std::string, Symbol> symbols;
  std::vector<GuestVirtAddr> handlerTable;  // interrupt vector -> handler

  // Fixed (non-randomized) workload region at the top of guest RAM.
  GuestPhysAddr networkPageGpa = 0;
  std::array<GuestPhysAddr, 8> poolPagesGpa{};
  std::array<GuestPhysAddr, 2> noisePagesGpa{};
  std::array<GuestPhysAddr, 16> payloadPagesGpa{};
  GuestPhysAddr ptAreaGpa = 0;
  GuestPhysAddr loginRootGpa = 0;
  GuestPhysAddr noiseRootGpa = 0;

  std::array<uint32_t, 4> bufferOffsets{};

  const Symbol& sym(const std::string& name) const;
  GuestVirtAddr poolVirt(size_t i) const;
  GuestVirtAddr payloadVirt(size_t i) const;

  static constexpr GuestVirtAddr kTextVirtRef = 0x0040'0000;
  static constexpr GuestPhysAddr kTextPhysRef = 0x0020'0000;
  static constexpr GuestVirtAddr kPoolVirtBase = 0x1000'0000;
  static constexpr GuestVirtAddr kNoiseVirtBase = 0x1100'0000;
  static constexpr GuestVirtAddr kPayloadVirtBase = 0x2000'0000;
  static constexpr GuestVirtAddr kNetworkVirt = 0x7000'0000;
  static constexpr GuestVirtAddr kPhysmapBase = 0x8000'0000;
  static constexpr uint64_t kAlignUnit = 2ull << 20;
};

/// Layout with zero randomization offsets. This is the attacker's reference
/// build of the kernel; stable across calls for a given RAM size.
GuestImage referenceImage(size_t guestRamBytes = 512ull << 20);

/// Syscall numbers understood by the guest kernel.
enum Sysno : uint32_t {
  kSysSpawn = 2,
  kSysRead = 3,
  kSysCopy = 4,
  kSysAuth = 5,
  kSysZero = 6,
  kSysWrite = 7,
  kSysNoiseA = 8,
  kSysNoiseB = 9,
};

constexpr uint8_t kTimerVector = 0;
constexpr uint8_t kSpuriousVector = 1;

/// One queued login attempt, with ground truth the evaluation can check
/// against (the attacker never sees these fields).
struct LoginRecord {
  size_t index = 0;
  std::array<uint8_t, 16> password{};
  GuestPhysAddr bufferGpa = 0;   // pool page the attempt used
  uint32_t offset = 0;           // placement chosen by the kernel schedule
  bool completed = false;
  bool authenticated = false;
  bool terminated = false;  // crashed and was respawned
};

/// A booted VM: encrypted physical memory, nested map, guest pagetables,
/// kernel and the login/noise workload. The hypervisor drives execution and
/// calls back into the scheduling hooks on HLT boundaries and guest faults.
class GuestMachine {
 public:
  explicit GuestMachine(const SimConfig& cfg);

  const SimConfig& config() const { return cfg_; }
  const GuestImage& image() const { return img_; }
  const Mode& mode() const { return cfg_.mode; }
  const VmKey& vmKey() const { return key_; }
  PhysMemory& phys() { return mem_; }
  NestedPageTable& npt() { return npt_; }
  Vmcb& vmcb() { return vmcb_; }
  MemView memView();
  CpuContext cpuContext();
  size_t guestRamPages() const { return ramPages_; }

  static constexpr uint64_t kLoginAsid = 1;
  static constexpr uint64_t kNoiseAsid = 2;

  /// Owner-side channels, used by tests and ground-truth checks only. They
  /// go through the guest pagetables and the decryption path, never through
  /// anything the hypervisor could do.
  std::vector<uint8_t> guestView(GuestVirtAddr gva, size_t len);
  void guestPoke(GuestVirtAddr gva, std::span<const uint8_t> data);

  const std::array<uint8_t, 16>& credential() const { return credential_; }

  // Workload control.
  void queueLogin(const std::array<uint8_t, 16>& password);
  LoginRecord runLogin(Hypervisor& hv, const std::array<uint8_t, 16>& password,
                       uint64_t maxExits = 200000);
  const std::vector<LoginRecord>& logins() const { return logins_; }
  size_t completedLogins() const;
  bool loginInFlight() const;
  void setNoiseRate(double p) { cfg_.noiseRate = p; }
  uint32_t offsetForAttempt(size_t index) const;

  /// Guest-side integrity probe: sums a mapped page in-guest and returns the
  /// low 32 bits. Runs on the raw CPU with timer exits off, so the result
  /// depends only on memory content.
  uint32_t runChecksum(GuestVirtAddr pageVirt);

  // Hypervisor callbacks.
  void onHltBoundary();
  void onGuestFault(GuestVirtAddr gva);

 private:
  struct ProcCtx {
    RegSnapshot regs;
    GuestPhysAddr cr3 = 0;
    uint64_t asid = 0;
  };

  void build();
  void assembleText();
  void buildPageTables();
  void startLogin(LoginRecord& rec);
  void enterIdle();
  void saveInto(ProcCtx& ctx);
  void loadFrom(const ProcCtx& ctx);
  void finishLogin(bool crashed);

  SimConfig cfg_;
  GuestImage img_;
  size_t ramPages_ = 0;
  VmKey key_;
  PhysMemory mem_;
  NestedPageTable npt_;
  Vmcb vmcb_;
  std::array<uint8_t, 16> credential_{};
  std::vector<uint32_t> schedule_;

  std::vector<LoginRecord> logins_;
  size_t nextStart_ = 0;
  size_t active_ = SIZE_MAX;  // index into logins_, SIZE_MAX when idle
  size_t boundaries_ = 0;     // HLT boundaries seen for the active attempt
  ProcCtx loginCtx_, noiseCtx_;
  bool noiseActive_ = false;
  std::mt19937_64 schedRng_;
};

}  // namespace sevsim
