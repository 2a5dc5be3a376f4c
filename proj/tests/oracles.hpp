// Independent reference implementations used only by tests. Each oracle is
// deliberately written with a different structure than the library code it
// checks (different loop order, different rounding decomposition, long
// double transcendentals) so agreement is meaningful.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "twinquant/quant.hpp"
#include "twinquant/rng.hpp"
#include "twinquant/tensor.hpp"

namespace oracles {

using twinquant::Rng;
using twinquant::Tensor;

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.gaussian();
  return t;
}

inline double rel_err(double got, double want, double floor = 1e-12) {
  const double denom = std::max({std::fabs(got), std::fabs(want), floor});
  return std::fabs(got - want) / denom;
}

// i-j-k loop order with a scalar accumulator per output element.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t l = 0; l < k; ++l) sum += a.at(i, l) * b.at(l, j);
      out.at(i, j) = sum;
    }
  }
  return out;
}

// Unstabilized definition; safe for moderate inputs.
inline std::vector<double> softmax_row_oracle(const std::vector<double>& row) {
  std::vector<double> out(row.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i]);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

inline double gelu_oracle(double x) {
  const long double cdf = 0.5L * erfcl(-static_cast<long double>(x) /
                                       1.41421356237309504880168872420970L);
  return static_cast<double>(static_cast<long double>(x) * cdf);
}

// Central finite difference of a scalar functional at the given coordinate.
inline double central_diff(const std::function<double(const Tensor&)>& f, const Tensor& at,
                           std::size_t index, double h = 1e-5) {
  Tensor plus = at;
  Tensor minus = at;
  plus[index] += h;
  minus[index] -= h;
  return (f(plus) - f(minus)) / (2.0 * h);
}

// Round-half-away-from-zero via modf decomposition (the library uses
// std::round; this path is independent and exact).
inline double round_half_away_oracle(double r) {
  double ipart = 0.0;
  const double frac = std::modf(r, &ipart);
  if (frac >= 0.5) return ipart + 1.0;
  if (frac <= -0.5) return ipart - 1.0;
  return ipart;
}

inline std::int64_t quantize_uniform_oracle(double x, int bits, double delta) {
  const double r = round_half_away_oracle(x / delta);
  const double lo = -std::ldexp(1.0, bits - 1);
  const double hi = std::ldexp(1.0, bits - 1) - 1.0;
  const double c = std::min(std::max(r, lo), hi);
  return static_cast<std::int64_t>(c);
}

// Every decodable value of a twin quantizer, one entry per code.
inline std::vector<double> twin_decode_table(const twinquant::TwinQuantParams& p) {
  std::vector<double> points;
  const std::size_t count = std::size_t(1) << p.bits();
  points.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    points.push_back(twinquant::decode_twin_code(static_cast<std::uint8_t>(c), p));
  }
  return points;
}

// Nearest point of a finite set, ties resolved away from zero.
inline double nearest_point(double x, const std::vector<double>& points) {
  double best = points.front();
  double best_dist = std::fabs(x - best);
  for (double v : points) {
    const double d = std::fabs(x - v);
    if (d < best_dist || (d == best_dist && std::fabs(v) > std::fabs(best))) {
      best = v;
      best_dist = d;
    }
  }
  return best;
}

// Dequantize-then-multiply in plain f64, the float shadow of twin_matmul.
inline Tensor twin_matmul_float_oracle(const twinquant::TwinCodeTensor& a,
                                       const twinquant::TwinQuantParams& p,
                                       const twinquant::IntTensor& b,
                                       const twinquant::UniformQuantParams& q) {
  const Tensor da = twinquant::dequantize_twin(a, p);
  const Tensor db = twinquant::dequantize_uniform(b, q);
  return matmul_oracle(da, db);
}

// Magnitude of the summation, for scale-aware relative comparisons of
// near-cancelling sums.
inline double matmul_scale(const Tensor& da, const Tensor& db, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t l = 0; l < da.dim(1); ++l) {
    s += std::fabs(da.at(i, l) * db.at(l, j));
  }
  return s;
}

}  // namespace oracles
