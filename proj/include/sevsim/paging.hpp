#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "sevsim/mem.hpp"

namespace sevsim {

/// Guest pagetable entry (lives encrypted in guest memory). 32-bit packed:
/// a 1024-entry table fits exactly one 4 KiB page, and a 4-byte write
/// primitive covers a whole entry.
struct GuestPte {
  bool present = false;
  bool writable = false;
  bool noExec = false;
  bool cBit = false;  // private page when set
  GuestPhysAddr frame = 0;

  uint32_t pack() const;
  static GuestPte unpack(uint32_t raw);
};

/// Nested pagetable entry (hypervisor-side, plaintext).
struct NestedPte {
  bool present = false;
  bool writable = false;
  bool noExec = false;
  bool naeMarker = false;  // force NAE classification under SEV-ES
  HostPhysAddr frame = 0;
};

/// Nested page fault metadata as delivered to the hypervisor.
struct NptFault {
  GuestPhysAddr gpa = 0;
  AccessType access = AccessType::Read;
  GuestVirtAddr gva = 0;
  bool nae = false;
};

struct NptFaultError : SimError {
  explicit NptFaultError(const NptFault& f)
      : SimError("nested page fault"), fault(f) {}
  NptFault fault;
  bool guestPrivate = false;  // C-bit of the faulting guest mapping, when known
};

struct GuestPageFault : SimError {
  GuestPageFault(GuestVirtAddr gva_, AccessType access_)
      : SimError("guest page fault"), gva(gva_), access(access_) {}
  GuestVirtAddr gva;
  AccessType access;
};

/// Guest-physical to host-physical map with permission bits, one entry per
/// 4 KiB guest page.
class NestedPageTable {
 public:
  explicit NestedPageTable(size_t guestPages);

  size_t pageCount() const { return entries_.size(); }
  NestedPte& entry(GuestPhysAddr gpa);
  const NestedPte& entry(GuestPhysAddr gpa) const;
  void map(GuestPhysAddr gpa, HostPhysAddr hpa, bool writable = true, bool noExec = false);

  /// Permission-checked walk. `classifyNae` reflects SEV-ES being active.
  HostPhysAddr walk(GuestPhysAddr gpa, AccessType access, GuestVirtAddr gvaForFault,
                    bool classifyNae) const;

  /// Update no_exec on every present entry except the listed guest pages,
  /// which keep their current permission.
  void bulkSetExec(bool allow, const std::set<GuestPhysAddr>& except);
  void bulkClearWrite();

  HostPhysAddr remap(GuestPhysAddr gpa, HostPhysAddr newHpa);

  struct PermSnapshot {
    std::vector<uint8_t> bits;  // bit0 writable, bit1 noExec per page
  };
  PermSnapshot snapshotPerms() const;
  void restorePerms(const PermSnapshot& snap);

 private:
  std::vector<NestedPte> entries_;
};

struct GuestWalk {
  GuestPhysAddr gpa = 0;
  GuestPte effective;  // merged permissions, leaf C-bit
};

struct Translation {
  HostPhysAddr hpa = 0;
  GuestPhysAddr gpa = 0;
  bool isPrivate = false;  // guest C-bit; has precedence over nested state
  GuestPte effective;
};

/// Two-level guest walk. Table entries are read through the decryption path:
/// guest pagetables live in private memory.
GuestWalk walkGuest(const MemView& mem, const NestedPageTable& npt, GuestPhysAddr ptRoot,
                    GuestVirtAddr gva, bool classifyNae);

/// Full two-step translation with permission checks on both levels.
Translation translate(const MemView& mem, const NestedPageTable& npt, GuestPhysAddr ptRoot,
                      GuestVirtAddr gva, AccessType access, bool classifyNae);

// 2-level layout: bits [31:22] level-1 index, [21:12] level-2 index.
constexpr uint64_t kPteSize = 4;
constexpr uint64_t kEntriesPerTable = 1024;
constexpr uint64_t l1Index(GuestVirtAddr gva) { return (gva >> 22) & 0x3ff; }
constexpr uint64_t l2Index(GuestVirtAddr gva) { return (gva >> 12) & 0x3ff; }

}  // namespace sevsim
