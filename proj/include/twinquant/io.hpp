#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "twinquant/tensor.hpp"

namespace twinquant::io {

// Little-endian primitives shared by every binary format. All formats are
// documented in docs/FORMATS.md.

void write_u8(std::ostream& out, std::uint8_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, const std::string& s);
void write_tensor(std::ostream& out, const Tensor& t);
void write_magic(std::ostream& out, const char magic[4]);

std::uint8_t read_u8(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);
Tensor read_tensor(std::istream& in);
void expect_magic(std::istream& in, const char magic[4], const char* what);

// FNV-1a, used for content hashes in manifests and staleness checks.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::string& path);
std::string hex64(std::uint64_t v);

std::vector<char> slurp_file(const std::string& path);

}  // namespace twinquant::io
