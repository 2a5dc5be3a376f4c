#include "twinquant/quant.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"

namespace twinquant {

namespace {

void check_rank2_pair(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                      const char* who) {
  if (a.size() != 2 || b.size() != 2) {
    throw DimensionError(std::string(who) + ": operands must be 2-D");
  }
  if (a[1] != b[0]) {
    throw DimensionError(std::string(who) + ": inner dimensions disagree");
  }
}

void check_positive_delta(double delta, const char* who) {
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw DimensionError(std::string(who) + ": delta must be positive and finite");
  }
}

}  // namespace

UniformQuantParams::UniformQuantParams(int bits, double delta)
    : UniformQuantParams(bits, delta, false) {}

UniformQuantParams::UniformQuantParams(int bits, double delta, bool extended_ok)
    : bits_(bits), delta_(delta) {
  const int hi = extended_ok ? 24 : 8;
  if (bits < 2 || bits > hi) {
    throw DimensionError("UniformQuantParams: bits must be in [2, " + std::to_string(hi) +
                         "], got " + std::to_string(bits));
  }
  check_positive_delta(delta, "UniformQuantParams");
}

UniformQuantParams UniformQuantParams::extended(int bits, double delta) {
  return UniformQuantParams(bits, delta, true);
}

std::int32_t quantize_uniform_value(double x, const UniformQuantParams& p) {
  const double r = std::round(x / p.delta());
  const double lo = static_cast<double>(p.min_code());
  const double hi = static_cast<double>(p.max_code());
  if (r < lo) return p.min_code();
  if (r > hi) return p.max_code();
  return static_cast<std::int32_t>(r);
}

IntTensor quantize_uniform(const Tensor& x, const UniformQuantParams& p) {
  IntTensor q;
  q.shape = x.shape();
  q.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q.data[i] = quantize_uniform_value(x[i], p);
  return q;
}

Tensor dequantize_uniform(const IntTensor& q, const UniformQuantParams& p) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const std::int32_t c = q.data[i];
    if (c < p.min_code() || c > p.max_code()) {
      throw FormatError("dequantize_uniform: code " + std::to_string(c) +
                        " outside the " + std::to_string(p.bits()) + "-bit range");
    }
    out[i] = static_cast<double>(c) * p.delta();
  }
  return out;
}

const char* twin_mode_name(TwinMode mode) {
  return mode == TwinMode::PostSoftmax ? "post_softmax" : "post_gelu";
}

TwinQuantParams::TwinQuantParams(int bits, int shift, TwinMode mode, double delta_r1)
    : bits_(bits), shift_(shift), mode_(mode), delta_r1_(delta_r1) {
  if (bits < 2 || bits > 8) {
    throw DimensionError("TwinQuantParams: bits must be in [2, 8], got " + std::to_string(bits));
  }
  if (shift < 0 || shift > 31) {
    throw DimensionError("TwinQuantParams: shift must be in [0, 31]");
  }
  check_positive_delta(delta_r1, "TwinQuantParams");
}

TwinQuantParams TwinQuantParams::post_softmax(int bits, int shift) {
  // delta_r2 = 2^-(bits-1) and delta_r1 = 2^-shift * delta_r2, both exact.
  const double delta_r1 = std::ldexp(1.0, -(bits - 1) - shift);
  return TwinQuantParams(bits, shift, TwinMode::PostSoftmax, delta_r1);
}

TwinQuantParams TwinQuantParams::post_gelu(int bits, double delta_r2, int shift) {
  check_positive_delta(delta_r2, "TwinQuantParams");
  const double delta_r1 = std::ldexp(delta_r2, -shift);
  check_positive_delta(delta_r1, "TwinQuantParams");
  return TwinQuantParams(bits, shift, TwinMode::PostGelu, delta_r1);
}

double TwinQuantParams::delta_r2() const { return std::ldexp(delta_r1_, shift_); }

double TwinQuantParams::range1_bound() const { return std::ldexp(delta_r1_, bits_ - 1); }

std::uint8_t make_twin_code(int bits, std::uint8_t flag, std::uint8_t level) {
  return static_cast<std::uint8_t>((flag << (bits - 1)) | level);
}

std::uint8_t twin_flag(std::uint8_t code, int bits) {
  return static_cast<std::uint8_t>((code >> (bits - 1)) & 1u);
}

std::uint8_t twin_level(std::uint8_t code, int bits) {
  return static_cast<std::uint8_t>(code & ((1u << (bits - 1)) - 1u));
}

namespace {

std::uint8_t round_level(double ratio, std::uint8_t max_level) {
  const double r = std::round(ratio);
  if (r < 0.0) return 0;
  if (r > static_cast<double>(max_level)) return max_level;
  return static_cast<std::uint8_t>(r);
}

}  // namespace

std::uint8_t quantize_twin_value(double x, const TwinQuantParams& p) {
  const std::uint8_t top = p.max_level();
  std::uint8_t flag;
  std::uint8_t level;
  if (p.mode() == TwinMode::PostSoftmax) {
    if (x < p.range1_bound()) {
      flag = 0;
      level = round_level(x / p.delta_r1(), top);
    } else {
      flag = 1;
      level = round_level(x / p.delta_r2(), top);
    }
  } else {
    if (x < 0.0) {
      flag = 0;
      level = round_level(-x / p.delta_r1(), top);
    } else {
      flag = 1;
      level = round_level(x / p.delta_r2(), top);
    }
  }
  return make_twin_code(p.bits(), flag, level);
}

TwinCodeTensor quantize_twin(const Tensor& x, const TwinQuantParams& p) {
  TwinCodeTensor q;
  q.shape = x.shape();
  q.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q.codes[i] = quantize_twin_value(x[i], p);
  return q;
}

double decode_twin_code(std::uint8_t code, const TwinQuantParams& p) {
  if (code >= (1u << p.bits())) {
    throw FormatError("decode_twin_code: code " + std::to_string(code) + " needs more than " +
                      std::to_string(p.bits()) + " bits");
  }
  const std::uint8_t flag = twin_flag(code, p.bits());
  const std::uint8_t level = twin_level(code, p.bits());
  if (flag) return static_cast<double>(level) * p.delta_r2();
  if (p.mode() == TwinMode::PostGelu) {
    return level == 0 ? 0.0 : -static_cast<double>(level) * p.delta_r1();
  }
  return static_cast<double>(level) * p.delta_r1();
}

Tensor dequantize_twin(const TwinCodeTensor& q, const TwinQuantParams& p) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = decode_twin_code(q.codes[i], p);
  return out;
}

Tensor twin_matmul(const TwinCodeTensor& a, const TwinQuantParams& p, const IntTensor& b,
                   const UniformQuantParams& q) {
  check_rank2_pair(a.shape, b.shape, "twin_matmul");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  // Worst-case |sum| = K * max_level * 2^(bits_b - 1) * 2^shift must stay
  // clear of the 64-bit accumulator.
  const long double bound = static_cast<long double>(k) *
                            static_cast<long double>(p.max_level()) *
                            static_cast<long double>(std::int64_t(1) << (q.bits() - 1)) *
                            static_cast<long double>(std::int64_t(1) << p.shift());
  if (bound >= static_cast<long double>(std::int64_t(1) << 62)) {
    throw InvariantError("twin_matmul: accumulator bound exceeded");
  }
  const bool negate_r1 = p.mode() == TwinMode::PostGelu;
  const std::int64_t shift_mult = std::int64_t(1) << p.shift();
  std::vector<std::int64_t> acc(n);
  Tensor out({m, n});
  const double scale = p.delta_r1() * q.delta();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), std::int64_t(0));
    for (std::size_t l = 0; l < k; ++l) {
      const std::uint8_t code = a.codes[i * k + l];
      if (code >= (1u << p.bits())) {
        throw FormatError("twin_matmul: invalid twin code");
      }
      std::int64_t lhs = twin_level(code, p.bits());
      if (twin_flag(code, p.bits())) {
        lhs *= shift_mult;
      } else if (negate_r1) {
        lhs = -lhs;
      }
      if (lhs == 0) continue;
      const std::int32_t* brow = b.data.data() + l * n;
      std::int64_t* arow = acc.data();
      for (std::size_t j = 0; j < n; ++j) arow[j] += lhs * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = static_cast<double>(acc[j]) * scale;
    }
  }
  return out;
}

Tensor uniform_matmul(const IntTensor& a, const UniformQuantParams& p, const IntTensor& b,
                      const UniformQuantParams& q) {
  check_rank2_pair(a.shape, b.shape, "uniform_matmul");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  const long double bound = static_cast<long double>(k) *
                            static_cast<long double>(std::int64_t(1) << (p.bits() - 1)) *
                            static_cast<long double>(std::int64_t(1) << (q.bits() - 1));
  if (bound >= static_cast<long double>(std::int64_t(1) << 62)) {
    throw InvariantError("uniform_matmul: accumulator bound exceeded");
  }
  std::vector<std::int64_t> acc(n);
  Tensor out({m, n});
  const double scale = p.delta() * q.delta();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), std::int64_t(0));
    for (std::size_t l = 0; l < k; ++l) {
      const std::int64_t av = a.data[i * k + l];
      if (av == 0) continue;
      const std::int32_t* brow = b.data.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = static_cast<double>(acc[j]) * scale;
    }
  }
  return out;
}

void write_twin_tensor(std::ostream& out, const TwinCodeTensor& t, const TwinQuantParams& p) {
  io::write_magic(out, "TWQ1");
  io::write_u8(out, static_cast<std::uint8_t>(p.bits()));
  io::write_u8(out, static_cast<std::uint8_t>(p.shift()));
  io::write_u8(out, static_cast<std::uint8_t>(p.mode()));
  io::write_f64(out, p.delta_r1());
  io::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) io::write_u64(out, d);
  for (std::uint8_t c : t.codes) io::write_u8(out, c);
}

std::pair<TwinCodeTensor, TwinQuantParams> read_twin_tensor(std::istream& in) {
  io::expect_magic(in, "TWQ1", "read_twin_tensor");
  const int bits = io::read_u8(in);
  const int shift = io::read_u8(in);
  const std::uint8_t mode = io::read_u8(in);
  if (mode > 1) throw FormatError("read_twin_tensor: unknown mode byte");
  const double delta_r1 = io::read_f64(in);
  TwinQuantParams params = mode == 0
      ? TwinQuantParams::post_softmax(bits, shift)
      : TwinQuantParams::post_gelu(bits, std::ldexp(delta_r1, shift), shift);
  if (params.delta_r1() != delta_r1) {
    throw FormatError("read_twin_tensor: delta_r1 does not match mode/shift");
  }
  const std::uint32_t rank = io::read_u32(in);
  if (rank > 8) throw FormatError("read_twin_tensor: unreasonable rank");
  TwinCodeTensor t;
  t.shape.resize(rank);
  std::size_t volume = rank ? 1 : 0;
  for (auto& d : t.shape) {
    d = static_cast<std::size_t>(io::read_u64(in));
    volume *= d;
  }
  if (volume > (1u << 28)) throw FormatError("read_twin_tensor: unreasonable volume");
  t.codes.resize(volume);
  for (auto& c : t.codes) {
    c = io::read_u8(in);
    if (c >= (1u << bits)) throw FormatError("read_twin_tensor: code out of range");
  }
  return {std::move(t), params};
}

void save_twin_tensor(const std::string& path, const TwinCodeTensor& t,
                      const TwinQuantParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_twin_tensor: cannot open " + path);
  write_twin_tensor(out, t, p);
}

std::pair<TwinCodeTensor, TwinQuantParams> load_twin_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_twin_tensor: cannot open " + path);
  return read_twin_tensor(in);
}

}  // namespace twinquant
