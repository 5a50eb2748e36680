#pragma once

// AOTB tensor container.
//
// Tensor record:  "AOTB" | u8 version=1 | u8 dtype (1=f64, 2=f32) | u8 rank |
//                 u64 dims[rank] | payload
// Bundle file:    u32 count | count x (u16 name_len | name | tensor record)
//
// All integers and payload values are little-endian. f32 payloads are widened
// to f64 on load; writes are always f64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "advood/error.hpp"
#include "advood/tensor.hpp"

namespace advood::aotb {

inline constexpr char kMagic[4] = {'A', 'O', 'T', 'B'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;
inline constexpr std::uint8_t kDtypeF32 = 2;
inline constexpr std::uint8_t kMaxRank = 16;

// Ordered name -> tensor collection. Insertion order is the on-disk order.
class Bundle {
 public:
  void set(const std::string& name, Tensor t) {
    for (auto& [n, v] : entries_) {
      if (n == name) {
        v = std::move(t);
        return;
      }
    }
    entries_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, v] : entries_) {
      if (n == name) return &v;
    }
    return nullptr;
  }

  const Tensor& at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw ParseError(name, "required entry missing");
    return *t;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  std::size_t size() const { return entries_.size(); }

  friend bool operator==(const Bundle&, const Bundle&) = default;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  Reader(const std::string& buf) : buf_(buf) {}

  template <typename T>
  T get(const std::string& field) {
    need(sizeof(T), field);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  bool at_magic() const {
    return remaining() >= 4 && std::memcmp(buf_.data() + pos_, kMagic, 4) == 0;
  }

 private:
  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n) {
      throw ParseError(field, "file truncated (needed " + std::to_string(n) +
                                  " bytes, " + std::to_string(remaining()) +
                                  " left)");
    }
  }

  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline void encode(std::string& out, const Tensor& t) {
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(kDtypeF64));
  if (t.rank() > kMaxRank) throw ShapeError("rank too large for AOTB");
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

inline Tensor decode(Reader& r, const std::string& field) {
  const std::string magic = r.bytes(4, field + ".magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw ParseError(field + ".magic", "bad magic bytes");
  }
  const auto version = r.get<std::uint8_t>(field + ".version");
  if (version != kVersion) {
    throw ParseError(field + ".version",
                     "unsupported version " + std::to_string(version));
  }
  const auto dtype = r.get<std::uint8_t>(field + ".dtype");
  if (dtype != kDtypeF64 && dtype != kDtypeF32) {
    throw ParseError(field + ".dtype", "unknown dtype " + std::to_string(dtype));
  }
  const auto rank = r.get<std::uint8_t>(field + ".rank");
  if (rank > kMaxRank) {
    throw ParseError(field + ".rank", "rank " + std::to_string(rank) + " too large");
  }
  Shape shape(rank);
  const std::size_t width = dtype == kDtypeF64 ? 8 : 4;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const auto d = r.get<std::uint64_t>(field + ".dims[" + std::to_string(i) + "]");
    if (d == 0) {
      throw ParseError(field + ".dims[" + std::to_string(i) + "]",
                       "dimension must be positive");
    }
    if (d > r.remaining() / width || count * d > r.remaining() / width) {
      throw ParseError(field + ".dims[" + std::to_string(i) + "]",
                       "dimension exceeds payload size");
    }
    shape[i] = static_cast<std::size_t>(d);
    count *= shape[i];
  }
  if (count * width > r.remaining()) {
    throw ParseError(field + ".payload",
                     "file truncated (payload needs " +
                         std::to_string(count * width) + " bytes)");
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (dtype == kDtypeF64) {
      data[i] = std::bit_cast<double>(r.get<std::uint64_t>(field + ".payload"));
    } else {
      data[i] = static_cast<double>(
          std::bit_cast<float>(r.get<std::uint32_t>(field + ".payload")));
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, "cannot open file");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out;
  detail::encode(out, t);
  return out;
}

inline Tensor decode_tensor(const std::string& bytes) {
  detail::Reader r(bytes);
  Tensor t = detail::decode(r, "tensor");
  if (r.remaining() != 0) throw ParseError("tensor", "trailing bytes");
  return t;
}

inline std::string encode_bundle(const Bundle& b) {
  std::string out;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.size()));
  for (const auto& [name, t] : b.entries()) {
    if (name.size() > 0xffff) throw Error("entry name too long: " + name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::encode(out, t);
  }
  return out;
}

inline Bundle decode_bundle(const std::string& bytes) {
  detail::Reader r(bytes);
  const auto count = r.get<std::uint32_t>("count");
  Bundle b;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string slot = "entry[" + std::to_string(i) + "]";
    const auto len = r.get<std::uint16_t>(slot + ".name_length");
    std::string name = r.bytes(len, slot + ".name");
    if (b.contains(name)) throw ParseError(slot + ".name", "duplicate entry '" + name + "'");
    b.set(name, detail::decode(r, name));
  }
  if (r.remaining() != 0) throw ParseError("bundle", "trailing bytes after last entry");
  return b;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  detail::write_file(path, encode_tensor(t));
}

inline void save_bundle(const std::string& path, const Bundle& b) {
  detail::write_file(path, encode_bundle(b));
}

// Loads either file layout; a bare tensor record becomes a one-entry bundle
// named "tensor".
inline Bundle load(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  detail::Reader probe(bytes);
  if (probe.at_magic()) {
    Bundle b;
    b.set("tensor", decode_tensor(bytes));
    return b;
  }
  return decode_bundle(bytes);
}

}  // namespace advood::aotb
