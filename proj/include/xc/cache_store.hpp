#pragma once

// Bit-exact on-disk container for cache payloads and weight checkpoints.
//
// Layout (all integers little-endian):
//   magic      4 bytes  "XCC1"
//   version    u16      currently 1
//   kind       u8       0=kv 1=jitkv 2=xc 3=weights
//   dtype      u8       0=f32 1=f16
//   rank       u8       1..8
//   dims       rank*u64
//   digest     u64      geometry/config binding (FNV-1a 64)
//   paylen     u64      payload byte length
//   payload    paylen bytes, row-major scalars
//   checksum   u64      PayloadChecksum over the payload bytes
//
// Writes go to "<path>.tmp" then rename, so a crash never leaves a
// half-written file at the final path.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "xc/cache.hpp"
#include "xc/digest.hpp"
#include "xc/error.hpp"
#include "xc/f16.hpp"
#include "xc/tensor.hpp"

namespace xc {

inline constexpr char kStoreMagic[4] = {'X', 'C', 'C', '1'};
inline constexpr uint16_t kStoreVersion = 1;
inline constexpr uint8_t kKindWeights = 3;
inline constexpr size_t kStoreMaxRank = 8;

enum class StoreDType : uint8_t { F32 = 0, F16 = 1 };

inline size_t dtype_bytes(StoreDType t) {
  return t == StoreDType::F16 ? 2 : 4;
}

inline const char* dtype_name(StoreDType t) {
  return t == StoreDType::F16 ? "f16" : "f32";
}

struct StoreHeader {
  uint16_t version = kStoreVersion;
  uint8_t kind = 0;  // CacheStrategy value, or kKindWeights
  StoreDType dtype = StoreDType::F32;
  std::vector<uint64_t> dims;
  uint64_t digest = 0;
  uint64_t payload_bytes = 0;

  size_t byte_size() const { return 4 + 2 + 1 + 1 + 1 + 8 * dims.size() + 8 + 8; }

  uint64_t scalar_count() const {
    uint64_t n = 1;
    for (uint64_t d : dims) {
      if (d != 0 && n > UINT64_MAX / d) throw ParseError("dim product overflows u64");
      n *= d;
    }
    return n;
  }

  void validate() const {
    if (version != kStoreVersion)
      throw ParseError("unsupported container version " + std::to_string(version));
    if (kind > kKindWeights)
      throw ParseError("unknown payload kind " + std::to_string(kind));
    if (dtype != StoreDType::F32 && dtype != StoreDType::F16)
      throw ParseError("unknown dtype " + std::to_string((unsigned)dtype));
    if (dims.empty() || dims.size() > kStoreMaxRank)
      throw ParseError("rank " + std::to_string(dims.size()) + " out of range 1.." +
                       std::to_string(kStoreMaxRank));
    if (payload_bytes != scalar_count() * dtype_bytes(dtype))
      throw ParseError("payload length " + std::to_string(payload_bytes) +
                       " does not match dims (" + std::to_string(scalar_count()) +
                       " scalars of " + dtype_name(dtype) + ")");
  }
};

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back((char)(v & 0xff));
  out.push_back((char)(v >> 8));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((char)((v >> (8 * i)) & 0xff));
}

inline uint16_t get_u16(const unsigned char* p) {
  return (uint16_t)(p[0] | (p[1] << 8));
}

inline uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (uint64_t)p[i] << (8 * i);
  return v;
}

inline std::string encode_header(const StoreHeader& h) {
  std::string out;
  out.append(kStoreMagic, 4);
  put_u16(out, h.version);
  out.push_back((char)h.kind);
  out.push_back((char)h.dtype);
  out.push_back((char)h.dims.size());
  for (uint64_t d : h.dims) put_u64(out, d);
  put_u64(out, h.digest);
  put_u64(out, h.payload_bytes);
  return out;
}

}  // namespace detail

// Streaming writer: header up front, payload fed in chunks, trailing
// checksum on close().  Used directly by the load benchmark to create
// multi-GB files without holding them in memory.
class StoreWriter {
 public:
  StoreWriter(const std::string& path, StoreHeader header)
      : path_(path), tmp_(path + ".tmp"), header_(std::move(header)) {
    header_.validate();
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw ParseError("cannot open " + tmp_ + " for writing");
    std::string enc = detail::encode_header(header_);
    out_.write(enc.data(), (std::streamsize)enc.size());
  }

  ~StoreWriter() {
    if (!closed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  void write_payload(const void* data, size_t n) {
    written_ += n;
    if (written_ > header_.payload_bytes)
      throw ParseError("payload overrun writing " + path_);
    sum_.update(data, n);
    out_.write(static_cast<const char*>(data), (std::streamsize)n);
    if (!out_) throw ParseError("write failed for " + tmp_);
  }

  void close() {
    if (closed_) return;
    if (written_ != header_.payload_bytes)
      throw ParseError("payload underrun writing " + path_ + ": " +
                       std::to_string(written_) + " of " +
                       std::to_string(header_.payload_bytes) + " bytes");
    std::string tail;
    detail::put_u64(tail, sum_.finish());
    out_.write(tail.data(), (std::streamsize)tail.size());
    out_.flush();
    if (!out_) throw ParseError("write failed for " + tmp_);
    out_.close();
    std::filesystem::rename(tmp_, path_);
    closed_ = true;
  }

 private:
  std::string path_, tmp_;
  StoreHeader header_;
  std::ofstream out_;
  PayloadChecksum sum_;
  uint64_t written_ = 0;
  bool closed_ = false;
};

// Write a f32 buffer, converting per the header dtype.
inline void write_stored(const std::string& path, StoreHeader header,
                         const float* data) {
  header.payload_bytes = header.scalar_count() * dtype_bytes(header.dtype);
  StoreWriter w(path, header);
  uint64_t n = header.scalar_count();
  if (header.dtype == StoreDType::F32) {
    constexpr uint64_t kChunk = 1 << 20;
    std::string buf;
    for (uint64_t i = 0; i < n; i += kChunk) {
      uint64_t m = std::min(kChunk, n - i);
      buf.resize(m * 4);
      for (uint64_t j = 0; j < m; ++j) {
        uint32_t bits;
        std::memcpy(&bits, data + i + j, 4);
        for (int b = 0; b < 4; ++b) buf[j * 4 + (uint64_t)b] = (char)((bits >> (8 * b)) & 0xff);
      }
      w.write_payload(buf.data(), buf.size());
    }
  } else {
    constexpr uint64_t kChunk = 1 << 20;
    std::string buf;
    for (uint64_t i = 0; i < n; i += kChunk) {
      uint64_t m = std::min(kChunk, n - i);
      buf.resize(m * 2);
      for (uint64_t j = 0; j < m; ++j) {
        uint16_t h = f16_encode(data[i + j]);
        buf[j * 2] = (char)(h & 0xff);
        buf[j * 2 + 1] = (char)(h >> 8);
      }
      w.write_payload(buf.data(), buf.size());
    }
  }
  w.close();
}

struct StoredBlob {
  StoreHeader header;
  std::vector<unsigned char> payload;  // raw bytes as stored

  std::vector<float> decode() const {
    uint64_t n = header.scalar_count();
    std::vector<float> out(n);
    if (header.dtype == StoreDType::F32) {
      for (uint64_t i = 0; i < n; ++i) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= (uint32_t)payload[i * 4 + (uint64_t)b] << (8 * b);
        std::memcpy(&out[i], &bits, 4);
      }
    } else {
      for (uint64_t i = 0; i < n; ++i) {
        uint16_t h = (uint16_t)(payload[i * 2] | (payload[i * 2 + 1] << 8));
        out[i] = f16_decode(h);
      }
    }
    return out;
  }
};

inline StoreHeader read_stored_header(std::ifstream& in, const std::string& path) {
  unsigned char fixed[9];
  if (!in.read(reinterpret_cast<char*>(fixed), 9))
    throw ParseError("truncated container " + path + ": header incomplete");
  if (std::memcmp(fixed, kStoreMagic, 4) != 0)
    throw ParseError("bad magic in " + path + ": not an XCC1 container");
  StoreHeader h;
  h.version = detail::get_u16(fixed + 4);
  if (h.version != kStoreVersion)
    throw ParseError("unsupported container version " + std::to_string(h.version) +
                     " in " + path);
  h.kind = fixed[6];
  h.dtype = (StoreDType)fixed[7];
  size_t rank = fixed[8];
  if (rank == 0 || rank > kStoreMaxRank)
    throw ParseError("rank " + std::to_string(rank) + " out of range in " + path);
  std::vector<unsigned char> rest(8 * rank + 16);
  if (!in.read(reinterpret_cast<char*>(rest.data()), (std::streamsize)rest.size()))
    throw ParseError("truncated container " + path + ": header incomplete");
  h.dims.resize(rank);
  for (size_t i = 0; i < rank; ++i) h.dims[i] = detail::get_u64(rest.data() + 8 * i);
  h.digest = detail::get_u64(rest.data() + 8 * rank);
  h.payload_bytes = detail::get_u64(rest.data() + 8 * rank + 8);
  h.validate();
  return h;
}

// read_stored: full load with checksum verification.  A flipped payload bit,
// a truncated file, or trailing garbage all raise ParseError.
inline StoredBlob read_stored(const std::string& path, bool verify = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  StoredBlob blob;
  blob.header = read_stored_header(in, path);
  uint64_t expect = blob.header.byte_size() + blob.header.payload_bytes + 8;
  std::error_code ec;
  uint64_t actual = std::filesystem::file_size(path, ec);
  if (!ec && actual != expect)
    throw ParseError("container " + path + " is " + std::to_string(actual) +
                     " bytes, expected " + std::to_string(expect));
  blob.payload.resize(blob.header.payload_bytes);
  if (blob.header.payload_bytes &&
      !in.read(reinterpret_cast<char*>(blob.payload.data()),
               (std::streamsize)blob.payload.size()))
    throw ParseError("truncated container " + path + ": payload incomplete");
  unsigned char tail[8];
  if (!in.read(reinterpret_cast<char*>(tail), 8))
    throw ParseError("truncated container " + path + ": checksum missing");
  if (verify) {
    uint64_t want = detail::get_u64(tail);
    uint64_t got = payload_checksum64(blob.payload.data(), blob.payload.size());
    if (want != got)
      throw ParseError("checksum mismatch in " + path + ": stored " + hex64(want) +
                       ", computed " + hex64(got) + " (payload corrupted)");
  }
  return blob;
}

// Streaming read-and-verify in O(1) memory: the payload flows through the
// checksum in fixed-size chunks and is never decoded or retained.  This is
// the unit of work the load benchmark times.
inline StoreHeader verify_stored(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open container " + path);
  StoreHeader h = read_stored_header(in, path);
  uint64_t expect = h.byte_size() + h.payload_bytes + 8;
  std::error_code ec;
  uint64_t actual = std::filesystem::file_size(path, ec);
  if (!ec && actual != expect)
    throw ParseError("container " + path + " is " + std::to_string(actual) +
                     " bytes, expected " + std::to_string(expect));
  PayloadChecksum sum;
  std::vector<unsigned char> buf(1 << 22);
  uint64_t left = h.payload_bytes;
  while (left > 0) {
    size_t take = (size_t)std::min<uint64_t>(left, buf.size());
    if (!in.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)take))
      throw ParseError("truncated container " + path + ": payload incomplete");
    sum.update(buf.data(), take);
    left -= take;
  }
  unsigned char tail[8];
  if (!in.read(reinterpret_cast<char*>(tail), 8))
    throw ParseError("truncated container " + path + ": checksum missing");
  uint64_t want = detail::get_u64(tail);
  uint64_t got = sum.finish();
  if (want != got)
    throw ParseError("checksum mismatch in " + path + ": stored " + hex64(want) +
                     ", computed " + hex64(got) + " (payload corrupted)");
  return h;
}

// ---- typed cache-blob round trip -----------------------------------------

inline std::vector<uint64_t> cache_dims(const CacheBlob& b) {
  switch (b.strategy) {
    case CacheStrategy::KV:
      return {(uint64_t)b.geom.n_layers, 2, (uint64_t)b.tokens,
              (uint64_t)(b.geom.n_heads * b.geom.head_dim)};
    case CacheStrategy::JITKV:
      return {(uint64_t)b.geom.n_layers, (uint64_t)b.tokens, (uint64_t)b.geom.d_model};
    case CacheStrategy::XC:
      return {(uint64_t)b.tokens, (uint64_t)b.geom.d_enc};
  }
  throw ContractError("unknown strategy");
}

inline void save_cache_blob(const CacheBlob& b, const std::string& path,
                            StoreDType dtype = StoreDType::F32) {
  StoreHeader h;
  h.kind = (uint8_t)b.strategy;
  h.dtype = dtype;
  h.dims = cache_dims(b);
  h.digest = b.config_digest;
  write_stored(path, h, b.data.data());
}

inline CacheBlob load_cache_blob(const std::string& path) {
  StoredBlob s = read_stored(path);
  if (s.header.kind > (uint8_t)CacheStrategy::XC)
    throw CacheError("container " + path + " holds weights, not a cache payload");
  CacheBlob b;
  b.strategy = (CacheStrategy)s.header.kind;
  b.config_digest = s.header.digest;
  const auto& d = s.header.dims;
  switch (b.strategy) {
    case CacheStrategy::KV:
      if (d.size() != 4 || d[1] != 2)
        throw ParseError("kv payload in " + path + " must have dims [L,2,T,C]");
      b.geom.n_layers = (int64_t)d[0];
      b.tokens = (int64_t)d[2];
      b.geom.n_heads = (int64_t)d[3];  // only the product H*dh is recoverable
      b.geom.head_dim = 1;
      break;
    case CacheStrategy::JITKV:
      if (d.size() != 3) throw ParseError("jit-kv payload in " + path + " must have dims [L,T,D]");
      b.geom.n_layers = (int64_t)d[0];
      b.tokens = (int64_t)d[1];
      b.geom.d_model = (int64_t)d[2];
      break;
    case CacheStrategy::XC:
      if (d.size() != 2) throw ParseError("xc payload in " + path + " must have dims [T,E]");
      b.tokens = (int64_t)d[0];
      b.geom.d_enc = (int64_t)d[1];
      break;
  }
  b.data = s.decode();
  if ((int64_t)b.data.size() != b.payload_floats())
    throw ParseError("payload size mismatch in " + path);
  return b;
}

// ---- weight checkpoints ---------------------------------------------------
//
// A checkpoint is the concatenation of the named tensors' values in list
// order, stored rank-1.  Names are not serialized; the digest binds the
// file to the config that defines the layout.

inline void save_weights(const std::vector<std::pair<std::string, Tensor>>& named,
                         uint64_t digest, const std::string& path) {
  uint64_t total = 0;
  for (const auto& [name, t] : named) total += (uint64_t)t.numel();
  StoreHeader h;
  h.kind = kKindWeights;
  h.dtype = StoreDType::F32;
  h.dims = {total};
  h.digest = digest;
  h.payload_bytes = total * 4;
  StoreWriter w(path, h);
  std::string buf;
  for (const auto& [name, t] : named) {
    const auto& v = t.data();
    buf.resize(v.size() * 4);
    for (size_t j = 0; j < v.size(); ++j) {
      uint32_t bits;
      std::memcpy(&bits, &v[j], 4);
      for (int b = 0; b < 4; ++b) buf[j * 4 + (size_t)b] = (char)((bits >> (8 * b)) & 0xff);
    }
    w.write_payload(buf.data(), buf.size());
  }
  w.close();
}

inline void load_weights(const std::string& path, uint64_t expected_digest,
                         std::vector<std::pair<std::string, Tensor>> named) {
  StoredBlob s = read_stored(path);
  if (s.header.kind != kKindWeights)
    throw CacheError("container " + path + " holds a cache payload, not weights");
  if (s.header.digest != expected_digest)
    throw CacheError("weights in " + path + " were saved for config digest " +
                     hex64(s.header.digest) + ", expected " + hex64(expected_digest));
  uint64_t total = 0;
  for (const auto& [name, t] : named) total += (uint64_t)t.numel();
  if (s.header.scalar_count() != total)
    throw CacheError("weights in " + path + " hold " +
                     std::to_string(s.header.scalar_count()) + " scalars, expected " +
                     std::to_string(total));
  std::vector<float> flat = s.decode();
  size_t off = 0;
  for (auto& [name, t] : named) {
    auto& v = t.mutable_data();
    std::copy(flat.begin() + (ptrdiff_t)off, flat.begin() + (ptrdiff_t)(off + v.size()),
              v.begin());
    off += v.size();
  }
}

}  // namespace xc
