#include "twinquant/io.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "twinquant/errors.hpp"

namespace twinquant::io {

namespace {

void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw FormatError("io: write failed");
}

void get_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError("io: unexpected end of stream");
  }
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { put_bytes(out, &v, 1); }

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, 8);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  if (!s.empty()) put_bytes(out, s.data(), s.size());
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u64(out, d);
  for (std::size_t i = 0; i < t.size(); ++i) write_f64(out, t[i]);
}

void write_magic(std::ostream& out, const char magic[4]) { put_bytes(out, magic, 4); }

std::uint8_t read_u8(std::istream& in) {
  std::uint8_t v;
  get_bytes(in, &v, 1);
  return v;
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  get_bytes(in, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  get_bytes(in, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  if (n > (1u << 26)) throw FormatError("io: unreasonable string length");
  std::string s(n, '\0');
  if (n) get_bytes(in, s.data(), n);
  return s;
}

Tensor read_tensor(std::istream& in) {
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw FormatError("io: unreasonable tensor rank");
  std::vector<std::size_t> shape(rank);
  std::size_t volume = rank ? 1 : 0;
  for (auto& d : shape) {
    d = static_cast<std::size_t>(read_u64(in));
    volume *= d;
  }
  if (volume > (1u << 28)) throw FormatError("io: unreasonable tensor volume");
  std::vector<double> data(volume);
  for (auto& v : data) v = read_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

void expect_magic(std::istream& in, const char magic[4], const char* what) {
  char got[4];
  get_bytes(in, got, 4);
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string(what) + ": bad magic, not a " +
                      std::string(magic, 4) + " file");
  }
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
  const std::vector<char> bytes = slurp_file(path);
  return fnv1a(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::vector<char> slurp_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("io: cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::streamsize n = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> bytes(static_cast<std::size_t>(n));
  if (n) in.read(bytes.data(), n);
  if (!in) throw FormatError("io: cannot read " + path);
  return bytes;
}

}  // namespace twinquant::io
