#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "twinquant/errors.hpp"
#include "twinquant/quant.hpp"

using namespace twinquant;

TEST_SUITE_BEGIN("quant");

TEST_CASE("uniform quantization direct arithmetic") {
  const UniformQuantParams p3(3, 0.1);
  CHECK(quantize_uniform_value(0.3, p3) == 3);
  CHECK(quantize_uniform_value(0.0, p3) == 0);
  CHECK(quantize_uniform_value(0.0, UniformQuantParams(8, 2.5)) == 0);

  const UniformQuantParams p4(4, 1.0);
  CHECK(quantize_uniform_value(-10.0, p4) == -8);
  CHECK(quantize_uniform_value(100.0, p4) == 7);
}

TEST_CASE("uniform params validation") {
  CHECK_THROWS_AS(UniformQuantParams(1, 0.1), DimensionError);
  CHECK_THROWS_AS(UniformQuantParams(9, 0.1), DimensionError);
  CHECK_THROWS_AS(UniformQuantParams(4, 0.0), DimensionError);
  CHECK_THROWS_AS(UniformQuantParams(4, -1.0), DimensionError);
  const UniformQuantParams wide = UniformQuantParams::extended(16, 1e-6);
  CHECK(wide.max_code() == 32767);
  CHECK_THROWS_AS(UniformQuantParams::extended(25, 1e-6), DimensionError);
}

TEST_CASE("dequantize uniform values and range errors") {
  const UniformQuantParams p(3, 0.1);
  IntTensor q;
  q.shape = {2};
  q.data = {3, 0};
  const Tensor x = dequantize_uniform(q, p);
  CHECK(x[0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(x[1] == 0.0);

  q.data = {4, 0};
  CHECK_THROWS_AS(dequantize_uniform(q, p), FormatError);
  q.data = {-5, 0};
  CHECK_THROWS_AS(dequantize_uniform(q, p), FormatError);
}

TEST_CASE("uniform quantization matches the modf oracle on random triples") {
  Rng rng(201);
  for (int trial = 0; trial < 20000; ++trial) {
    const int bits = 2 + static_cast<int>(rng.uniform_index(7));
    const double delta = std::exp(rng.uniform(-7.0, 2.5));
    const double span = std::ldexp(delta, bits - 1) * 1.6;
    const double x = rng.uniform(-span, span);
    const UniformQuantParams p(bits, delta);
    CHECK(quantize_uniform_value(x, p) == oracles::quantize_uniform_oracle(x, bits, delta));
  }
}

TEST_CASE("uniform quantization tie cases round half away from zero") {
  const UniformQuantParams p(4, 0.5);
  CHECK(quantize_uniform_value(0.25, p) == 1);
  CHECK(quantize_uniform_value(-0.25, p) == -1);
  CHECK(quantize_uniform_value(0.75, p) == 2);
  CHECK(quantize_uniform_value(-0.75, p) == -2);
}

TEST_CASE("uniform round trip stays within half a step") {
  Rng rng(202);
  for (int trial = 0; trial < 2000; ++trial) {
    const int bits = 2 + static_cast<int>(rng.uniform_index(7));
    const double delta = std::exp(rng.uniform(-4.0, 1.0));
    const UniformQuantParams p(bits, delta);
    const double lim = (std::ldexp(1.0, bits - 1) - 0.5) * delta;
    const double x = rng.uniform(-lim * 0.999, lim * 0.999);
    Tensor t({1}, {x});
    const Tensor back = dequantize_uniform(quantize_uniform(t, p), p);
    CHECK(std::fabs(back[0] - x) <= delta / 2 + 1e-15);
  }
}

TEST_CASE("uniform quantization is monotone in x") {
  Rng rng(203);
  const UniformQuantParams p(5, 0.07);
  double prev_x = -2.0;
  std::int32_t prev_q = quantize_uniform_value(prev_x, p);
  for (int i = 0; i < 4000; ++i) {
    const double x = prev_x + rng.uniform(0.0, 0.002);
    const std::int32_t q = quantize_uniform_value(x, p);
    CHECK(q >= prev_q);
    prev_x = x;
    prev_q = q;
  }
}

TEST_CASE("twin params derive the paired step exactly") {
  const TwinQuantParams ps = TwinQuantParams::post_softmax(3, 2);
  CHECK(ps.delta_r2() == 0.25);
  CHECK(ps.delta_r1() == 0.0625);
  CHECK(ps.range1_bound() == 0.25);

  const TwinQuantParams pg = TwinQuantParams::post_gelu(3, 0.5, 2);
  CHECK(pg.delta_r1() == 0.125);
  CHECK(pg.delta_r2() == 0.5);

  // Shift identity: (L << m) * delta_r1 == L * delta_r2 exactly.
  for (int bits = 2; bits <= 8; ++bits) {
    for (int m = 0; m <= 10; ++m) {
      const TwinQuantParams p = TwinQuantParams::post_gelu(bits, 0.37, m);
      for (std::int64_t level = 0; level < (1 << (bits - 1)); ++level) {
        const double lhs = static_cast<double>(level << m) * p.delta_r1();
        const double rhs = static_cast<double>(level) * p.delta_r2();
        CHECK(lhs == rhs);
      }
    }
  }
}

TEST_CASE("twin params validation") {
  CHECK_THROWS_AS(TwinQuantParams::post_softmax(1, 0), DimensionError);
  CHECK_THROWS_AS(TwinQuantParams::post_softmax(9, 0), DimensionError);
  CHECK_THROWS_AS(TwinQuantParams::post_softmax(4, -1), DimensionError);
  CHECK_THROWS_AS(TwinQuantParams::post_softmax(4, 32), DimensionError);
  CHECK_THROWS_AS(TwinQuantParams::post_gelu(4, 0.0, 0), DimensionError);
  CHECK_THROWS_AS(TwinQuantParams::post_gelu(4, -0.5, 0), DimensionError);
}

TEST_CASE("post-softmax twin encoding examples") {
  const TwinQuantParams p = TwinQuantParams::post_softmax(3, 2);

  const std::uint8_t low = quantize_twin_value(0.05, p);
  CHECK(twin_flag(low, 3) == 0);
  CHECK(twin_level(low, 3) == 1);
  CHECK(decode_twin_code(low, p) == 0.0625);

  const std::uint8_t high = quantize_twin_value(0.9, p);
  CHECK(twin_flag(high, 3) == 1);
  CHECK(twin_level(high, 3) == 3);
  CHECK(decode_twin_code(high, p) == 0.75);
}

TEST_CASE("post-softmax boundary value goes to range 2") {
  const TwinQuantParams p = TwinQuantParams::post_softmax(4, 1);
  const double boundary = p.range1_bound();
  const std::uint8_t at = quantize_twin_value(boundary, p);
  CHECK(twin_flag(at, 4) == 1);
  const std::uint8_t below = quantize_twin_value(std::nextafter(boundary, 0.0), p);
  CHECK(twin_flag(below, 4) == 0);
}

TEST_CASE("post-gelu twin encoding examples") {
  const TwinQuantParams p = TwinQuantParams::post_gelu(3, 0.5, 2);

  const std::uint8_t neg = quantize_twin_value(-0.2, p);
  CHECK(twin_flag(neg, 3) == 0);
  CHECK(twin_level(neg, 3) == 2);
  CHECK(decode_twin_code(neg, p) == -0.25);

  // Zero lands in range 2 by convention.
  const std::uint8_t zero = quantize_twin_value(0.0, p);
  CHECK(twin_flag(zero, 3) == 1);
  CHECK(twin_level(zero, 3) == 0);
  CHECK(decode_twin_code(zero, p) == 0.0);

  const std::uint8_t pos = quantize_twin_value(0.8, p);
  CHECK(twin_flag(pos, 3) == 1);
  CHECK(twin_level(pos, 3) == 2);
  CHECK(decode_twin_code(pos, p) == 1.0);
}

TEST_CASE("dequantize twin decodes hand-checked codes") {
  const TwinQuantParams p = TwinQuantParams::post_softmax(3, 0);
  CHECK(decode_twin_code(make_twin_code(3, 1, 3), p) == 0.75);
  CHECK(decode_twin_code(make_twin_code(3, 0, 0), p) == 0.0);
  CHECK_THROWS_AS(decode_twin_code(8, p), FormatError);
}

TEST_CASE("twin code space: 2^k codes, at most 2^k decoded values") {
  for (int bits : {3, 4, 6, 8}) {
    const TwinQuantParams p = TwinQuantParams::post_gelu(bits, 0.4, 2);
    const auto points = oracles::twin_decode_table(p);
    CHECK(points.size() == (std::size_t(1) << bits));
    CHECK(points.size() == 2 * (std::size_t(1) << (bits - 1)));
    std::set<double> distinct(points.begin(), points.end());
    CHECK(distinct.size() <= (std::size_t(1) << bits));
    // Zero is represented in both ranges, so the union loses exactly one.
    CHECK(distinct.size() == (std::size_t(1) << bits) - 1);
  }
}

TEST_CASE("post-softmax representable maximum is 1 - delta_r2") {
  for (int bits : {3, 6, 8}) {
    const TwinQuantParams p = TwinQuantParams::post_softmax(bits, 3);
    const auto points = oracles::twin_decode_table(p);
    double mx = 0.0;
    for (double v : points) mx = std::max(mx, v);
    CHECK(mx == 1.0 - p.delta_r2());
    const std::uint8_t one = quantize_twin_value(1.0, p);
    CHECK(twin_flag(one, bits) == 1);
    CHECK(twin_level(one, bits) == p.max_level());
  }
}

TEST_CASE("post-gelu round trip hits the nearest union-grid point") {
  Rng rng(204);
  for (int bits : {3, 4, 6, 8}) {
    for (int m : {0, 1, 2, 5, 10}) {
      const TwinQuantParams p = TwinQuantParams::post_gelu(bits, 0.3, m);
      const auto points = oracles::twin_decode_table(p);
      for (int trial = 0; trial < 400; ++trial) {
        const double x = rng.uniform(-1.2 * p.range1_bound(), 2.4 * p.delta_r2() * p.max_level());
        const double got = decode_twin_code(quantize_twin_value(x, p), p);
        const double want = oracles::nearest_point(x, points);
        CHECK(got == want);
      }
    }
  }
}

TEST_CASE("post-softmax round trip is nearest within each range's domain") {
  // Range selection is by value (range 1 is [0, 2^(k-1) * delta_r1)), so the
  // nearest-union-point property holds away from the range boundary whenever
  // the boundary itself is a range-2 point (m <= k-1). Inputs inside
  // [boundary - delta_r1/2, boundary) keep range-1 codes by definition; that
  // zone is pinned separately below.
  Rng rng(205);
  for (int bits : {3, 6, 8}) {
    for (int m = 0; m <= bits - 1; ++m) {
      const TwinQuantParams p = TwinQuantParams::post_softmax(bits, m);
      const auto points = oracles::twin_decode_table(p);
      const double t = p.range1_bound();
      for (int trial = 0; trial < 400; ++trial) {
        const double x = rng.uniform(0.0, 1.0);
        if (x >= t - p.delta_r1() / 2 && x < t) continue;
        const double got = decode_twin_code(quantize_twin_value(x, p), p);
        const double want = oracles::nearest_point(x, points);
        CHECK(got == want);
      }
    }
  }
}

TEST_CASE("post-softmax boundary zone stays in range 1") {
  // k=3, m=1: steps 0.125/0.25, boundary 0.5. 0.49 is nearer to the range-2
  // point 0.5 but belongs to range 1 by value, so it encodes as level 3.
  const TwinQuantParams p = TwinQuantParams::post_softmax(3, 1);
  REQUIRE(p.range1_bound() == 0.5);
  const std::uint8_t c = quantize_twin_value(0.49, p);
  CHECK(twin_flag(c, 3) == 0);
  CHECK(twin_level(c, 3) == 3);
  CHECK(decode_twin_code(c, p) == 0.375);
}

TEST_CASE("twin matmul: zero codes give a zero matrix") {
  const TwinQuantParams p = TwinQuantParams::post_softmax(4, 1);
  const UniformQuantParams q(4, 0.5);
  TwinCodeTensor a;
  a.shape = {2, 3};
  a.codes = {0, 0, 0, 0, 0, 0};
  IntTensor b;
  b.shape = {3, 2};
  b.data = {1, -2, 3, -4, 5, -6};
  const Tensor out = twin_matmul(a, p, b, q);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("twin matmul worked example, integer path") {
  // a = [flag0/level2, flag1/level1], delta_r1 = 0.0625, m = 2; b = [3, -2],
  // delta_b = 0.1. Terms: 2*3 = 6 and (1*-2) << 2 = -8; total -2; scaled by
  // 0.0625 * 0.1 = -0.0125.
  const TwinQuantParams p = TwinQuantParams::post_softmax(3, 2);
  REQUIRE(p.delta_r1() == 0.0625);
  const UniformQuantParams q(8, 0.1);
  TwinCodeTensor a;
  a.shape = {1, 2};
  a.codes = {make_twin_code(3, 0, 2), make_twin_code(3, 1, 1)};
  IntTensor b;
  b.shape = {2, 1};
  b.data = {3, -2};
  const Tensor out = twin_matmul(a, p, b, q);
  CHECK(out[0] == doctest::Approx(-0.0125).epsilon(1e-15));

  const Tensor fl = oracles::twin_matmul_float_oracle(a, p, b, q);
  CHECK(oracles::rel_err(out[0], fl[0]) <= 1e-12);
}

TEST_CASE("twin matmul equals the dequantize-then-multiply oracle") {
  Rng rng(206);
  for (int trial = 0; trial < 60; ++trial) {
    const int bits = (trial % 2) ? 6 : 8;
    const int m = static_cast<int>(rng.uniform_index(11));
    const TwinMode mode = (trial % 3 == 0) ? TwinMode::PostSoftmax : TwinMode::PostGelu;
    const TwinQuantParams p = mode == TwinMode::PostSoftmax
                                  ? TwinQuantParams::post_softmax(bits, m)
                                  : TwinQuantParams::post_gelu(bits, std::exp(rng.uniform(-3, 1)), m);
    const UniformQuantParams q(bits, std::exp(rng.uniform(-3, 1)));
    TwinCodeTensor a;
    a.shape = {8, 8};
    a.codes.resize(64);
    for (auto& c : a.codes) c = static_cast<std::uint8_t>(rng.uniform_index(1u << bits));
    IntTensor b;
    b.shape = {8, 8};
    b.data.resize(64);
    for (auto& v : b.data) {
      v = static_cast<std::int32_t>(rng.uniform_index(1u << bits)) - (1 << (bits - 1));
    }
    const Tensor fast = twin_matmul(a, p, b, q);
    const Tensor slow = oracles::twin_matmul_float_oracle(a, p, b, q);
    const Tensor da = dequantize_twin(a, p);
    const Tensor db = dequantize_uniform(b, q);
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t j = 0; j < 8; ++j) {
        const double scale = std::max(oracles::matmul_scale(da, db, i, j), 1e-300);
        CHECK(std::fabs(fast.at(i, j) - slow.at(i, j)) / scale <= 1e-12);
      }
    }
  }
}

TEST_CASE("uniform integer matmul equals float path") {
  Rng rng(207);
  const UniformQuantParams pa(6, 0.021), pb(8, 0.37);
  IntTensor a, b;
  a.shape = {5, 9};
  a.data.resize(45);
  for (auto& v : a.data) v = static_cast<std::int32_t>(rng.uniform_index(64)) - 32;
  b.shape = {9, 4};
  b.data.resize(36);
  for (auto& v : b.data) v = static_cast<std::int32_t>(rng.uniform_index(256)) - 128;
  const Tensor fast = uniform_matmul(a, pa, b, pb);
  const Tensor slow = oracles::matmul_oracle(dequantize_uniform(a, pa), dequantize_uniform(b, pb));
  for (std::size_t i = 0; i < fast.size(); ++i) {
    CHECK(oracles::rel_err(fast[i], slow[i], 1e-9) <= 1e-12);
  }
}

TEST_CASE("twin matmul accumulator bound check") {
  const std::size_t k = 200000;
  const TwinQuantParams p = TwinQuantParams::post_gelu(8, 1.0, 31);
  const UniformQuantParams q(8, 1.0);
  TwinCodeTensor a;
  a.shape = {1, k};
  a.codes.assign(k, 0);
  IntTensor b;
  b.shape = {k, 1};
  b.data.assign(k, 0);
  CHECK_THROWS_AS(twin_matmul(a, p, b, q), InvariantError);
}

TEST_CASE("twin tensor serialization round trip") {
  Rng rng(208);
  const TwinQuantParams p = TwinQuantParams::post_gelu(6, 0.11, 3);
  TwinCodeTensor t;
  t.shape = {4, 5};
  t.codes.resize(20);
  for (auto& c : t.codes) c = static_cast<std::uint8_t>(rng.uniform_index(64));

  std::stringstream buf;
  write_twin_tensor(buf, t, p);
  auto [back, params] = read_twin_tensor(buf);
  CHECK(params == p);
  REQUIRE(back.shape == t.shape);
  CHECK(back.codes == t.codes);

  std::stringstream bad("XXXXjunk");
  CHECK_THROWS_AS(read_twin_tensor(bad), FormatError);
}

TEST_CASE("quantization is deterministic") {
  Rng rng(209);
  const Tensor x = oracles::random_tensor(rng, {64}, 0.5);
  const TwinQuantParams p = TwinQuantParams::post_gelu(6, 0.2, 2);
  const TwinCodeTensor a = quantize_twin(x, p);
  const TwinCodeTensor b = quantize_twin(x, p);
  CHECK(a.codes == b.codes);
}

TEST_SUITE_END();
