#pragma once

#include <array>
#include <cstdint>
#include <cstddef>
#include <span>
#include <vector>

#include "sevsim/errors.hpp"

namespace sevsim {

using HostPhysAddr = uint64_t;
using GuestPhysAddr = uint64_t;
using GuestVirtAddr = uint64_t;

constexpr size_t kPageSize = 4096;
constexpr size_t kBlockSize = 16;

constexpr uint64_t pageOf(uint64_t addr) { return addr & ~uint64_t(kPageSize - 1); }
constexpr uint64_t pageOffset(uint64_t addr) { return addr & uint64_t(kPageSize - 1); }

/// Per-VM memory encryption key. The key material never leaves the memory
/// controller model; the hypervisor only ever sees ciphertext.
struct VmKey {
  uint32_t keyId = 0;
  std::array<uint8_t, 32> material{};

  static VmKey derive(uint32_t keyId, uint64_t seed);
};

using Block = std::array<uint8_t, kBlockSize>;

/// Keyed pseudorandom permutation over 16-byte blocks, whitened XEX-style
/// with a value derived from the key and the host physical block address.
/// Deterministic and tweak-dependent; no cryptographic strength claimed.
Block encryptBlock(const VmKey& key, std::span<const uint8_t, kBlockSize> plaintext,
                   HostPhysAddr tweak);
Block decryptBlock(const VmKey& key, std::span<const uint8_t, kBlockSize> ciphertext,
                   HostPhysAddr tweak);

enum class AccessType { Read, Write, Execute };

const char* accessName(AccessType a);

/// Host physical frames. Private accesses run through the cipher with the
/// block address as tweak; raw accesses move bytes verbatim (the missing
/// authentication the attacks exploit). Frames start zero-filled.
class PhysMemory {
 public:
  explicit PhysMemory(size_t frameCount);

  size_t sizeBytes() const { return bytes_.size(); }
  size_t frameCount() const { return bytes_.size() / kPageSize; }

  void rawWrite(HostPhysAddr hpa, std::span<const uint8_t> data);
  std::vector<uint8_t> rawRead(HostPhysAddr hpa, size_t len) const;

  /// Memory-controller path. Private writes store ciphertext, private reads
  /// decrypt; shared accesses are raw. Partial blocks are handled by
  /// read-modify-write at block granularity.
  void guestWrite(const VmKey& key, HostPhysAddr hpa, std::span<const uint8_t> data,
                  bool isPrivate);
  std::vector<uint8_t> guestRead(const VmKey& key, HostPhysAddr hpa, size_t len,
                                 bool isPrivate) const;

 private:
  void checkRange(HostPhysAddr hpa, size_t len) const;
  std::vector<uint8_t> bytes_;
};

/// Bundles the physical memory with one VM's key and whether encryption is
/// active at all (SEV off means every access is plaintext).
struct MemView {
  PhysMemory* mem = nullptr;
  const VmKey* key = nullptr;
  bool encrypted = true;

  std::vector<uint8_t> read(HostPhysAddr hpa, size_t len, bool isPrivate) const {
    return mem->guestRead(*key, hpa, len, isPrivate && encrypted);
  }
  void write(HostPhysAddr hpa, std::span<const uint8_t> data, bool isPrivate) const {
    mem->guestWrite(*key, hpa, data, isPrivate && encrypted);
  }
  uint64_t readU64(HostPhysAddr hpa, bool isPrivate) const;
  void writeU64(HostPhysAddr hpa, uint64_t value, bool isPrivate) const;
  uint32_t readU32(HostPhysAddr hpa, bool isPrivate) const;
  void writeU32(HostPhysAddr hpa, uint32_t value, bool isPrivate) const;
};

}  // namespace sevsim
