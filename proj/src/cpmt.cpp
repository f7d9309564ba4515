#include "cpseg/cpmt.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace cpseg {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'P', 'M', 'T'};
constexpr std::uint8_t kVersion = 1;

template <class U>
void put_le(std::ostream& os, U value) {
  std::array<unsigned char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <class U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw FormatError("CPMT: truncated header");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(os, kVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (auto d : t.shape()) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : t.data<T>()) put_le<Bits>(os, std::bit_cast<Bits>(v));
  });
  if (!os) throw FormatError("CPMT: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw FormatError("CPMT: bad magic");
  const auto version = get_le<std::uint8_t>(is);
  if (version != kVersion) throw FormatError("CPMT: unsupported version " + std::to_string(version));
  const auto code = get_le<std::uint8_t>(is);
  if (code != 1 && code != 2) throw FormatError("CPMT: unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const auto ndim = get_le<std::uint32_t>(is);
  if (ndim > 16) throw FormatError("CPMT: implausible rank " + std::to_string(ndim));
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::int64_t>(get_le<std::uint64_t>(is));
  const auto n = static_cast<std::size_t>(numel_of(shape));
  Buffer buf(dtype, n);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    auto out = buf.as<T>();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<T>(get_le<Bits>(is));
  });
  return Tensor::from_buffer(shape, std::move(buf));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace cpseg
