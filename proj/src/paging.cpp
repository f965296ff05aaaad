#include "sevsim/paging.hpp"

namespace sevsim {

namespace {
constexpr uint32_t kPresent = 1u << 0;
constexpr uint32_t kWritable = 1u << 1;
constexpr uint32_t kNoExec = 1u << 2;
constexpr uint32_t kCBit = 1u << 3;
constexpr uint32_t kFrameMask = ~uint32_t(kPageSize - 1);
}  // namespace

uint32_t GuestPte::pack() const {
  uint32_t raw = uint32_t(frame) & kFrameMask;
  if (present) raw |= kPresent;
  if (writable) raw |= kWritable;
  if (noExec) raw |= kNoExec;
  if (cBit) raw |= kCBit;
  return raw;
}

GuestPte GuestPte::unpack(uint32_t raw) {
  GuestPte p;
  p.present = raw & kPresent;
  p.writable = raw & kWritable;
  p.noExec = raw & kNoExec;
  p.cBit = raw & kCBit;
  p.frame = raw & kFrameMask;
  return p;
}

NestedPageTable::NestedPageTable(size_t guestPages) : entries_(guestPages) {}

NestedPte& NestedPageTable::entry(GuestPhysAddr gpa) {
  size_t idx = gpa / kPageSize;
  if (idx >= entries_.size()) throw PhysRangeError("gpa outside nested table range");
  return entries_[idx];
}

const NestedPte& NestedPageTable::entry(GuestPhysAddr gpa) const {
  size_t idx = gpa / kPageSize;
  if (idx >= entries_.size()) throw PhysRangeError("gpa outside nested table range");
  return entries_[idx];
}

void NestedPageTable::map(GuestPhysAddr gpa, HostPhysAddr hpa, bool writable, bool noExec) {
  NestedPte& e = entry(gpa);
  e.present = true;
  e.writable = writable;
  e.noExec = noExec;
  e.frame = pageOf(hpa);
}

HostPhysAddr NestedPageTable::walk(GuestPhysAddr gpa, AccessType access,
                                   GuestVirtAddr gvaForFault, bool classifyNae) const {
  size_t idx = gpa / kPageSize;
  auto fault = [&](void) -> NptFault {
    NptFault f;
    f.gpa = gpa;
    f.access = access;
    f.gva = gvaForFault;
    f.nae = classifyNae && idx < entries_.size() && entries_[idx].naeMarker;
    return f;
  };
  if (idx >= entries_.size() || !entries_[idx].present) throw NptFaultError(fault());
  const NestedPte& e = entries_[idx];
  if (access == AccessType::Write && !e.writable) throw NptFaultError(fault());
  if (access == AccessType::Execute && e.noExec) throw NptFaultError(fault());
  return e.frame | pageOffset(gpa);
}

void NestedPageTable::bulkSetExec(bool allow, const std::set<GuestPhysAddr>& except) {
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].present) continue;
    if (except.count(GuestPhysAddr(i * kPageSize))) continue;
    entries_[i].noExec = !allow;
  }
}

void NestedPageTable::bulkClearWrite() {
  for (auto& e : entries_)
    if (e.present) e.writable = false;
}

HostPhysAddr NestedPageTable::remap(GuestPhysAddr gpa, HostPhysAddr newHpa) {
  size_t idx = gpa / kPageSize;
  if (idx >= entries_.size() || !entries_[idx].present)
    throw NotMapped("npt_remap of unmapped gpa");
  HostPhysAddr old = entries_[idx].frame;
  entries_[idx].frame = pageOf(newHpa);
  return old;
}

NestedPageTable::PermSnapshot NestedPageTable::snapshotPerms() const {
  PermSnapshot s;
  s.bits.reserve(entries_.size());
  for (const auto& e : entries_)
    s.bits.push_back(uint8_t((e.writable ? 1 : 0) | (e.noExec ? 2 : 0)));
  return s;
}

void NestedPageTable::restorePerms(const PermSnapshot& snap) {
  for (size_t i = 0; i < entries_.size() && i < snap.bits.size(); ++i) {
    entries_[i].writable = snap.bits[i] & 1;
    entries_[i].noExec = snap.bits[i] & 2;
  }
}

namespace {

GuestPte readTableEntry(const MemView& mem, const NestedPageTable& npt, GuestPhysAddr entryGpa,
                        GuestVirtAddr gva, bool classifyNae) {
  // Table reads are data reads through the nested mapping; the walker always
  // decrypts since guest tables sit in private memory.
  HostPhysAddr hpa = npt.walk(entryGpa, AccessType::Read, gva, classifyNae);
  return GuestPte::unpack(mem.readU32(hpa, /*isPrivate=*/true));
}

}  // namespace

GuestWalk walkGuest(const MemView& mem, const NestedPageTable& npt, GuestPhysAddr ptRoot,
                    GuestVirtAddr gva, bool classifyNae) {
  if (gva >> 32) throw GuestPageFault(gva, AccessType::Read);
  GuestPte l1 = readTableEntry(mem, npt, ptRoot + l1Index(gva) * kPteSize, gva, classifyNae);
  if (!l1.present) throw GuestPageFault(gva, AccessType::Read);
  GuestPte l2 =
      readTableEntry(mem, npt, l1.frame + l2Index(gva) * kPteSize, gva, classifyNae);
  if (!l2.present) throw GuestPageFault(gva, AccessType::Read);
  GuestWalk w;
  w.gpa = l2.frame | pageOffset(gva);
  w.effective.present = true;
  w.effective.writable = l1.writable && l2.writable;
  w.effective.noExec = l1.noExec || l2.noExec;
  w.effective.cBit = l2.cBit;
  w.effective.frame = l2.frame;
  return w;
}

Translation translate(const MemView& mem, const NestedPageTable& npt, GuestPhysAddr ptRoot,
                      GuestVirtAddr gva, AccessType access, bool classifyNae) {
  GuestWalk w = walkGuest(mem, npt, ptRoot, gva, classifyNae);
  if (access == AccessType::Write && !w.effective.writable)
    throw GuestPageFault(gva, access);
  if (access == AccessType::Execute && w.effective.noExec)
    throw GuestPageFault(gva, access);
  Translation t;
  try {
    t.hpa = npt.walk(w.gpa, access, gva, classifyNae);
  } catch (NptFaultError& e) {
    e.guestPrivate = w.effective.cBit;
    throw;
  }
  t.gpa = w.gpa;
  t.isPrivate = w.effective.cBit;  // guest C-bit has precedence
  t.effective = w.effective;
  return t;
}

}  // namespace sevsim
