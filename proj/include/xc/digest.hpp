#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace xc {

inline constexpr uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr uint64_t kFnvPrime = 1099511628211ull;

// Plain FNV-1a over bytes.  Used for geometry digests and file digests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t seed = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), seed);
}

// Payload checksum: four interleaved FNV-1a lanes over little-endian u64
// words, a zero-padded tail word, and a final fold mixing in the length.
// Byte-serial FNV is too slow for multi-GB payloads; the interleaved form
// keeps the multiply chains independent so a single core can stream it near
// memory speed.  Any bit flip in the payload changes the result.
// Incremental: feed arbitrary chunks, then finish() once.
struct PayloadChecksum {
  uint64_t lane[4] = {kFnvOffset ^ 1, kFnvOffset ^ 2, kFnvOffset ^ 3,
                      kFnvOffset ^ 5};
  uint64_t nwords = 0;
  uint64_t total = 0;
  unsigned char pend[8];
  size_t npend = 0;

  void update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    total += n;
    if (npend) {
      while (npend < 8 && n) {
        pend[npend++] = *p++;
        --n;
      }
      if (npend == 8) {
        feed_word(pend);
        npend = 0;
      } else {
        return;
      }
    }
    size_t full = n / 8;
    for (size_t i = 0; i < full; ++i) feed_word(p + i * 8);
    size_t rem = n - full * 8;
    for (size_t r = 0; r < rem; ++r) pend[npend++] = p[full * 8 + r];
  }

  uint64_t finish() const {
    uint64_t l2[4] = {lane[0], lane[1], lane[2], lane[3]};
    uint64_t tail = 0;
    if (npend) __builtin_memcpy(&tail, pend, npend);
    l2[nwords % 4] = (l2[nwords % 4] ^ tail) * kFnvPrime;
    uint64_t h = kFnvOffset ^ total;
    for (uint64_t l : l2) h = (h ^ l) * kFnvPrime;
    return h;
  }

 private:
  void feed_word(const unsigned char* p) {
    uint64_t w;
    __builtin_memcpy(&w, p, 8);
    lane[nwords % 4] = (lane[nwords % 4] ^ w) * kFnvPrime;
    ++nwords;
  }
};

inline uint64_t payload_checksum64(const void* data, size_t n) {
  PayloadChecksum c;
  c.update(data, n);
  return c.finish();
}

inline std::string hex64(uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = d[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace xc
