#pragma once

// ATRW tensor container.
//
//   "ATRW"                      4 bytes
//   u32 version (= 1)
//   u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 rank, u64 extents[rank]
//   payloads: f32 little-endian, table order, each starting on a 64-byte
//             boundary (zero padded)
//
// All integers are little-endian.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attnrules/error.hpp"
#include "attnrules/numkernel.hpp"

namespace attnrules::atrw {

inline constexpr std::array<char, 4> kMagic{'A', 'T', 'R', 'W'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kAlignment = 64;

using NamedTensor = std::pair<std::string, TensorF32>;
using NamedTensors = std::vector<NamedTensor>;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("ATRW: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t align_up(std::size_t v) { return (v + kAlignment - 1) / kAlignment * kAlignment; }

}  // namespace detail

inline std::string encode(const NamedTensors& tensors) {
  std::string out(kMagic.begin(), kMagic.end());
  detail::put_le<std::uint32_t>(out, kVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw FormatError("ATRW: tensor name too long");
    if (t.rank() > 0xff) throw FormatError("ATRW: rank too large");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
  }
  for (const auto& [name, t] : tensors) {
    out.resize(detail::align_up(out.size()), '\0');
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

inline NamedTensors decode(std::string_view bytes) {
  detail::Reader in(bytes);
  auto magic = in.take(4);
  if (magic != std::string_view(kMagic.data(), kMagic.size())) throw FormatError("ATRW: bad magic");
  const auto version = in.get_le<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError("ATRW: unsupported version " + std::to_string(version));
  }
  const auto count = in.get_le<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> table;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get_le<std::uint16_t>();
    std::string name(in.take(len));
    if (!seen.insert(name).second) throw FormatError("ATRW: duplicate tensor name '" + name + "'");
    const auto rank = in.get_le<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = in.get_le<std::uint64_t>();
    table.emplace_back(std::move(name), std::move(shape));
  }
  // Validate the whole payload layout before touching data.
  std::size_t end = in.pos();
  for (const auto& [name, shape] : table) {
    std::size_t n = 1;
    for (auto e : shape) {
      if (e != 0 && n > (bytes.size() / 4) / e) {
        throw FormatError("ATRW: shape table inconsistent (tensor '" + name + "' too large)");
      }
      n *= e;
    }
    end = detail::align_up(end) + 4 * n;
  }
  if (end > bytes.size()) throw FormatError("ATRW: truncated file");
  if (end != bytes.size()) throw FormatError("ATRW: shape table inconsistent (trailing bytes)");

  NamedTensors out;
  out.reserve(table.size());
  std::size_t pos = in.pos();
  for (auto& [name, shape] : table) {
    pos = detail::align_up(pos);
    const std::size_t n = shape_volume(shape);
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (std::size_t b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 4 * k + b]))
                << (8 * b);
      }
      std::memcpy(&data[k], &bits, sizeof bits);
    }
    pos += 4 * n;
    out.emplace_back(std::move(name), TensorF32(std::move(shape), std::move(data)));
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("short write to " + path.string());
}

inline void save(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file(path, encode(tensors));
}

inline NamedTensors load(const std::filesystem::path& path) { return decode(read_file(path)); }

/// Looks up a tensor by name; throws FormatError when it is missing.
inline const TensorF32& find(const NamedTensors& tensors, std::string_view name) {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("ATRW: missing tensor '" + std::string(name) + "'");
}

}  // namespace attnrules::atrw
