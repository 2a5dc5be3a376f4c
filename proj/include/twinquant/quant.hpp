#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "twinquant/tensor.hpp"

namespace twinquant {

// ---- symmetric uniform quantization ----------------------------------------
//
// A k-bit symmetric uniform quantizer maps x to
//   clamp(round(x / delta), -2^(k-1), 2^(k-1) - 1)
// with round-half-away-from-zero. Codes are plain signed integers.

class UniformQuantParams {
 public:
  // Production bit-widths are 2..8.
  UniformQuantParams(int bits, double delta);

  // Wider code paths (up to 24 bits) exist purely so tests can drive the
  // quantizer toward the floating-point limit with a tiny delta.
  static UniformQuantParams extended(int bits, double delta);

  int bits() const { return bits_; }
  double delta() const { return delta_; }
  std::int32_t min_code() const { return -(std::int32_t(1) << (bits_ - 1)); }
  std::int32_t max_code() const { return (std::int32_t(1) << (bits_ - 1)) - 1; }

  bool operator==(const UniformQuantParams& o) const {
    return bits_ == o.bits_ && delta_ == o.delta_;
  }

 private:
  UniformQuantParams(int bits, double delta, bool extended_ok);
  int bits_;
  double delta_;
};

struct IntTensor {
  std::vector<std::size_t> shape;
  std::vector<std::int32_t> data;
  std::size_t size() const { return data.size(); }
};

IntTensor quantize_uniform(const Tensor& x, const UniformQuantParams& p);
// Throws FormatError when a code lies outside the k-bit signed range.
Tensor dequantize_uniform(const IntTensor& q, const UniformQuantParams& p);
std::int32_t quantize_uniform_value(double x, const UniformQuantParams& p);

// ---- twin uniform quantization ---------------------------------------------
//
// A k-bit twin code spends its most significant bit on a range flag and the
// remaining k-1 bits on an unsigned level in [0, 2^(k-1) - 1]; the sign bit
// of a conventional symmetric quantizer is repurposed, not stored. The two
// ranges share one decode kernel because delta_r2 = 2^m * delta_r1 exactly:
// a flagged level left-shifted by m counts in delta_r1 units.
//
// PostSoftmax covers [0, 1]: flag 0 quantizes against delta_r1 on
// [0, 2^(k-1) * delta_r1), flag 1 against the fixed delta_r2 = 1 / 2^(k-1).
// PostGelu splits by sign: flag 0 stores |x| / delta_r1 for negatives
// (decoded negative), flag 1 stores x / delta_r2 for x >= 0, so zero lands
// in range 2 as (flag 1, level 0).

enum class TwinMode : std::uint8_t { PostSoftmax = 0, PostGelu = 1 };

const char* twin_mode_name(TwinMode mode);

class TwinQuantParams {
 public:
  // delta_r2 is pinned to 1 / 2^(bits-1); the search tunes only the shift.
  static TwinQuantParams post_softmax(int bits, int shift);
  // delta_r2 is free (it quantizes the positive tail); delta_r1 derives
  // exactly as delta_r2 * 2^-shift.
  static TwinQuantParams post_gelu(int bits, double delta_r2, int shift);

  int bits() const { return bits_; }
  int shift() const { return shift_; }
  TwinMode mode() const { return mode_; }
  double delta_r1() const { return delta_r1_; }
  double delta_r2() const;  // == ldexp(delta_r1, shift), exact
  std::uint8_t max_level() const { return static_cast<std::uint8_t>((1u << (bits_ - 1)) - 1); }
  // Boundary of range 1 for PostSoftmax: 2^(bits-1) * delta_r1.
  double range1_bound() const;

  bool operator==(const TwinQuantParams& o) const {
    return bits_ == o.bits_ && shift_ == o.shift_ && mode_ == o.mode_ &&
           delta_r1_ == o.delta_r1_;
  }

 private:
  TwinQuantParams(int bits, int shift, TwinMode mode, double delta_r1);
  int bits_;
  int shift_;
  TwinMode mode_;
  double delta_r1_;
};

struct TwinCodeTensor {
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> codes;
  std::size_t size() const { return codes.size(); }
};

std::uint8_t make_twin_code(int bits, std::uint8_t flag, std::uint8_t level);
std::uint8_t twin_flag(std::uint8_t code, int bits);
std::uint8_t twin_level(std::uint8_t code, int bits);

TwinCodeTensor quantize_twin(const Tensor& x, const TwinQuantParams& p);
Tensor dequantize_twin(const TwinCodeTensor& q, const TwinQuantParams& p);
std::uint8_t quantize_twin_value(double x, const TwinQuantParams& p);
double decode_twin_code(std::uint8_t code, const TwinQuantParams& p);

// ---- integer matmul kernels -------------------------------------------------
//
// Both kernels accumulate in int64 and apply the combined scale once at the
// end, so the result is exact given the codes. twin_matmul handles the flag
// per term: the raw product level(a) * code(b) counts in delta_r1 * delta_b
// units, a set flag shifts it left by m, and PostGelu negates unflagged
// terms because their decoded values are negative.

Tensor twin_matmul(const TwinCodeTensor& a, const TwinQuantParams& p, const IntTensor& b,
                   const UniformQuantParams& q);
Tensor uniform_matmul(const IntTensor& a, const UniformQuantParams& p, const IntTensor& b,
                      const UniformQuantParams& q);

// ---- twin code serialization ("TWQ1") ---------------------------------------
// Layout (little-endian): magic "TWQ1", u8 bits, u8 shift, u8 mode,
// f64 delta_r1, u32 rank, u64 dims[rank], u8 codes[volume] (one code per
// byte). See docs/FORMATS.md.

void write_twin_tensor(std::ostream& out, const TwinCodeTensor& t, const TwinQuantParams& p);
std::pair<TwinCodeTensor, TwinQuantParams> read_twin_tensor(std::istream& in);
void save_twin_tensor(const std::string& path, const TwinCodeTensor& t,
                      const TwinQuantParams& p);
std::pair<TwinCodeTensor, TwinQuantParams> load_twin_tensor(const std::string& path);

}  // namespace twinquant
