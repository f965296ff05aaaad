#include "sevsim/mem.hpp"

#include <algorithm>
#include <cstring>

namespace sevsim {

namespace {

uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t loadU64(const uint8_t* p) {
  uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}

void storeU64(uint8_t* p, uint64_t v) { std::memcpy(p, &v, 8); }

struct KeySchedule {
  std::array<uint64_t, 8> round;
  uint64_t wIn0, wIn1, wOut0, wOut1;
};

KeySchedule schedule(const VmKey& key, HostPhysAddr tweak) {
  std::array<uint64_t, 4> kw;
  for (int i = 0; i < 4; ++i) kw[i] = loadU64(key.material.data() + 8 * i);
  KeySchedule ks;
  for (int i = 0; i < 8; ++i)
    ks.round[i] = mix64(kw[i % 4] ^ (0xa5a5a5a5a5a5a5a5ull * uint64_t(i + 1)));
  ks.wIn0 = mix64(kw[0] ^ tweak ^ 0x1111111111111111ull);
  ks.wIn1 = mix64(kw[1] ^ tweak ^ 0x2222222222222222ull);
  ks.wOut0 = mix64(kw[2] ^ tweak ^ 0x3333333333333333ull);
  ks.wOut1 = mix64(kw[3] ^ tweak ^ 0x4444444444444444ull);
  return ks;
}

void checkTweak(HostPhysAddr tweak) {
  if (tweak % kBlockSize != 0) throw AlignmentError("cipher tweak is not 16-byte aligned");
}

}  // namespace

VmKey VmKey::derive(uint32_t keyId, uint64_t seed) {
  VmKey k;
  k.keyId = keyId;
  uint64_t s = mix64(seed ^ (uint64_t(keyId) << 32));
  for (int i = 0; i < 4; ++i) {
    s = mix64(s);
    storeU64(k.material.data() + 8 * i, s);
  }
  return k;
}

Block encryptBlock(const VmKey& key, std::span<const uint8_t, kBlockSize> plaintext,
                   HostPhysAddr tweak) {
  checkTweak(tweak);
  KeySchedule ks = schedule(key, tweak);
  uint64_t l = loadU64(plaintext.data()) ^ ks.wIn0;
  uint64_t r = loadU64(plaintext.data() + 8) ^ ks.wIn1;
  for (int i = 0; i < 8; ++i) {
    uint64_t t = r;
    r = l ^ mix64(r ^ ks.round[i]);
    l = t;
  }
  Block out;
  storeU64(out.data(), l ^ ks.wOut0);
  storeU64(out.data() + 8, r ^ ks.wOut1);
  return out;
}

Block decryptBlock(const VmKey& key, std::span<const uint8_t, kBlockSize> ciphertext,
                   HostPhysAddr tweak) {
  checkTweak(tweak);
  KeySchedule ks = schedule(key, tweak);
  uint64_t l = loadU64(ciphertext.data()) ^ ks.wOut0;
  uint64_t r = loadU64(ciphertext.data() + 8) ^ ks.wOut1;
  for (int i = 7; i >= 0; --i) {
    uint64_t t = l;
    l = r ^ mix64(l ^ ks.round[i]);
    r = t;
  }
  Block out;
  storeU64(out.data(), l ^ ks.wIn0);
  storeU64(out.data() + 8, r ^ ks.wIn1);
  return out;
}

const char* accessName(AccessType a) {
  switch (a) {
    case AccessType::Read: return "read";
    case AccessType::Write: return "write";
    case AccessType::Execute: return "execute";
  }
  return "?";
}

PhysMemory::PhysMemory(size_t frameCount) : bytes_(frameCount * kPageSize, 0) {}

void PhysMemory::checkRange(HostPhysAddr hpa, size_t len) const {
  if (hpa > bytes_.size() || len > bytes_.size() - hpa)
    throw PhysRangeError("physical access out of range");
}

void PhysMemory::rawWrite(HostPhysAddr hpa, std::span<const uint8_t> data) {
  checkRange(hpa, data.size());
  std::copy(data.begin(), data.end(), bytes_.begin() + static_cast<ptrdiff_t>(hpa));
}

std::vector<uint8_t> PhysMemory::rawRead(HostPhysAddr hpa, size_t len) const {
  checkRange(hpa, len);
  return {bytes_.begin() + static_cast<ptrdiff_t>(hpa),
          bytes_.begin() + static_cast<ptrdiff_t>(hpa + len)};
}

void PhysMemory::guestWrite(const VmKey& key, HostPhysAddr hpa, std::span<const uint8_t> data,
                            bool isPrivate) {
  checkRange(hpa, data.size());
  if (!isPrivate) {
    rawWrite(hpa, data);
    return;
  }
  size_t written = 0;
  while (written < data.size()) {
    HostPhysAddr block = hpa + written;
    HostPhysAddr blockBase = block & ~uint64_t(kBlockSize - 1);
    size_t inBlock = block - blockBase;
    size_t chunk = std::min(kBlockSize - inBlock, data.size() - written);
    std::span<const uint8_t, kBlockSize> stored(bytes_.data() + blockBase, kBlockSize);
    Block plain = decryptBlock(key, stored, blockBase);
    std::copy_n(data.data() + written, chunk, plain.data() + inBlock);
    Block cipher = encryptBlock(key, plain, blockBase);
    std::copy(cipher.begin(), cipher.end(), bytes_.begin() + static_cast<ptrdiff_t>(blockBase));
    written += chunk;
  }
}

std::vector<uint8_t> PhysMemory::guestRead(const VmKey& key, HostPhysAddr hpa, size_t len,
                                           bool isPrivate) const {
  checkRange(hpa, len);
  if (!isPrivate) return rawRead(hpa, len);
  std::vector<uint8_t> out(len);
  size_t done = 0;
  while (done < len) {
    HostPhysAddr block = hpa + done;
    HostPhysAddr blockBase = block & ~uint64_t(kBlockSize - 1);
    size_t inBlock = block - blockBase;
    size_t chunk = std::min(kBlockSize - inBlock, len - done);
    std::span<const uint8_t, kBlockSize> stored(bytes_.data() + blockBase, kBlockSize);
    Block plain = decryptBlock(key, stored, blockBase);
    std::copy_n(plain.data() + inBlock, chunk, out.data() + done);
    done += chunk;
  }
  return out;
}

uint64_t MemView::readU64(HostPhysAddr hpa, bool isPrivate) const {
  auto b = read(hpa, 8, isPrivate);
  uint64_t v;
  std::memcpy(&v, b.data(), 8);
  return v;
}

void MemView::writeU64(HostPhysAddr hpa, uint64_t value, bool isPrivate) const {
  uint8_t b[8];
  std::memcpy(b, &value, 8);
  write(hpa, std::span<const uint8_t>(b, 8), isPrivate);
}

uint32_t MemView::readU32(HostPhysAddr hpa, bool isPrivate) const {
  auto b = read(hpa, 4, isPrivate);
  uint32_t v;
  std::memcpy(&v, b.data(), 4);
  return v;
}

void MemView::writeU32(HostPhysAddr hpa, uint32_t value, bool isPrivate) const {
  uint8_t b[4];
  std::memcpy(b, &value, 4);
  write(hpa, std::span<const uint8_t>(b, 4), isPrivate);
}

}  // namespace sevsim
