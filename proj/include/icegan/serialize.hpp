#pragma once

// Little-endian binary formats.
//   tensor:     u32 rank, rank x u32 extents, numel x f64
//   checkpoint: "ICEG", u32 version, then (u32 length + UTF-8 path, tensor)
//               pairs until end of file

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icegan/tensor.hpp"

namespace icegan {

inline constexpr std::array<char, 4> kCheckpointMagic{'I', 'C', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of stream reading u32");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void read_f64s(std::istream& is, std::vector<double>& out) {
  std::vector<unsigned char> raw(out.size() * 8);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("unexpected end of stream reading tensor data");
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(raw[k * 8 + i]) << (8 * i);
    out[k] = std::bit_cast<double>(bits);
  }
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(e));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 8));
  } else {
    for (double v : t.data()) detail::write_f64(os, v);
  }
}

inline Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = detail::read_u32(is);
  if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = detail::read_u32(is);
    if (e == 0) throw FormatError("zero tensor extent");
  }
  std::vector<double> values(shape_numel(shape));
  detail::read_f64s(is, values);
  return Tensor(std::move(shape), std::move(values));
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + tmp);
    os.write(kCheckpointMagic.data(), 4);
    detail::write_u32(os, kCheckpointVersion);
    for (const auto& [name, t] : entries) {
      detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_tensor(os, t);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("not a checkpoint file: " + path.string());
  const auto version = detail::read_u32(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  NamedTensors out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = detail::read_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated parameter name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

}  // namespace icegan
