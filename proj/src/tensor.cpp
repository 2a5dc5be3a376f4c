#include "twinquant/tensor.hpp"

#include <cmath>
#include <string>

#include "twinquant/errors.hpp"

namespace twinquant {

namespace {

void check_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(who) + ": expected a 2-D tensor, got rank " +
                         std::to_string(t.rank()));
  }
}

// Rows-by-last-dim view: every rank >= 1 tensor is a [rows x width] sheet.
struct RowView {
  std::size_t rows;
  std::size_t width;
};

RowView row_view(const Tensor& t, const char* who) {
  if (t.rank() == 0 || t.size() == 0) {
    throw DimensionError(std::string(who) + ": tensor must be non-empty");
  }
  const std::size_t width = t.shape().back();
  return RowView{t.size() / width, width};
}

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("Tensor: data size " + std::to_string(data_.size()) +
                         " does not match shape volume " + std::to_string(shape_size(shape_)));
  }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = value;
  return t;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) {
    const double a = std::fabs(v);
    if (a > m) m = a;
  }
  return m;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + std::to_string(k) + " vs " +
                         std::to_string(b.dim(0)));
  }
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* pbl = pb + l * n;
      double* poi = po + i * n;
      for (std::size_t j = 0; j < n; ++j) poi[j] += av * pbl[j];
    }
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const RowView rv = row_view(x, "softmax_rows");
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* row = px + r * rv.width;
    double* orow = po + r * rv.width;
    double mx = row[0];
    for (std::size_t j = 1; j < rv.width; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < rv.width; ++j) orow[j] /= sum;
  }
  return out;
}

double gelu_scalar(double x) {
  return x * (0.5 * std::erfc(-x * kInvSqrt2));
}

double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * std::erfc(-x * kInvSqrt2);
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const RowView rv = row_view(x, "layernorm");
  if (gamma.size() != rv.width || beta.size() != rv.width) {
    throw DimensionError("layernorm: gamma/beta must match the last dimension");
  }
  if (!(eps > 0.0)) throw DimensionError("layernorm: eps must be positive");
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* row = px + r * rv.width;
    double* orow = po + r * rv.width;
    double mean = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) mean += row[j];
    mean /= static_cast<double>(rv.width);
    double var = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(rv.width);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < rv.width; ++j) {
      orow[j] = gamma[j] * ((row[j] - mean) * inv) + beta[j];
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("add: shape mismatch");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor transpose(const Tensor& a) {
  check_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: new shape volume does not match element count");
  }
  return Tensor(std::move(shape), a.values());
}

MatmulVjp vjp_matmul(const Tensor& a, const Tensor& b, const Tensor& upstream) {
  check_rank2(upstream, "vjp_matmul");
  if (upstream.dim(0) != a.dim(0) || upstream.dim(1) != b.dim(1)) {
    throw DimensionError("vjp_matmul: upstream shape does not match the product");
  }
  return MatmulVjp{matmul(upstream, transpose(b)), matmul(transpose(a), upstream)};
}

Tensor vjp_softmax_rows_from_output(const Tensor& y, const Tensor& upstream) {
  if (!y.same_shape(upstream)) throw DimensionError("vjp_softmax_rows: shape mismatch");
  const RowView rv = row_view(y, "vjp_softmax_rows");
  Tensor out(y.shape());
  const double* py = y.data();
  const double* pu = upstream.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* yrow = py + r * rv.width;
    const double* urow = pu + r * rv.width;
    double* orow = po + r * rv.width;
    double dot = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) dot += urow[j] * yrow[j];
    for (std::size_t j = 0; j < rv.width; ++j) orow[j] = yrow[j] * (urow[j] - dot);
  }
  return out;
}

Tensor vjp_softmax_rows(const Tensor& x, const Tensor& upstream) {
  return vjp_softmax_rows_from_output(softmax_rows(x), upstream);
}

Tensor vjp_gelu(const Tensor& x, const Tensor& upstream) {
  if (!x.same_shape(upstream)) throw DimensionError("vjp_gelu: shape mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = upstream[i] * gelu_grad_scalar(x[i]);
  return out;
}

LayernormVjp vjp_layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           double eps, const Tensor& upstream) {
  if (!x.same_shape(upstream)) throw DimensionError("vjp_layernorm: shape mismatch");
  const RowView rv = row_view(x, "vjp_layernorm");
  if (gamma.size() != rv.width || beta.size() != rv.width) {
    throw DimensionError("vjp_layernorm: gamma/beta must match the last dimension");
  }
  LayernormVjp out{Tensor(x.shape()), Tensor(gamma.shape()), Tensor(beta.shape())};
  const double* px = x.data();
  const double* pu = upstream.data();
  double* pdx = out.x_grad.data();
  const double w = static_cast<double>(rv.width);
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* row = px + r * rv.width;
    const double* urow = pu + r * rv.width;
    double* dxrow = pdx + r * rv.width;
    double mean = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) mean += row[j];
    mean /= w;
    double var = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= w;
    const double inv = 1.0 / std::sqrt(var + eps);
    double dy_mean = 0.0;
    double dyy_mean = 0.0;
    for (std::size_t j = 0; j < rv.width; ++j) {
      const double y = (row[j] - mean) * inv;
      const double dy = urow[j] * gamma[j];
      out.gamma_grad[j] += urow[j] * y;
      out.beta_grad[j] += urow[j];
      dy_mean += dy;
      dyy_mean += dy * y;
    }
    dy_mean /= w;
    dyy_mean /= w;
    for (std::size_t j = 0; j < rv.width; ++j) {
      const double y = (row[j] - mean) * inv;
      const double dy = urow[j] * gamma[j];
      dxrow[j] = inv * (dy - dy_mean - y * dyy_mean);
    }
  }
  return out;
}

AddVjp vjp_add(const Tensor& upstream) { return AddVjp{upstream, upstream}; }

Tensor vjp_transpose(const Tensor& upstream) { return transpose(upstream); }

Tensor vjp_reshape(const std::vector<std::size_t>& input_shape, const Tensor& upstream) {
  return reshape(upstream, input_shape);
}

Tensor slice_first(const Tensor& t, std::size_t index) {
  if (t.rank() < 2) throw DimensionError("slice_first: rank must be >= 2");
  if (index >= t.dim(0)) throw DimensionError("slice_first: index out of range");
  std::vector<std::size_t> shape(t.shape().begin() + 1, t.shape().end());
  const std::size_t block = shape_size(shape);
  std::vector<double> data(t.data() + index * block, t.data() + (index + 1) * block);
  return Tensor(std::move(shape), std::move(data));
}

void set_slice_first(Tensor& t, std::size_t index, const Tensor& value) {
  if (t.rank() < 2) throw DimensionError("set_slice_first: rank must be >= 2");
  if (index >= t.dim(0)) throw DimensionError("set_slice_first: index out of range");
  const std::size_t block = t.size() / t.dim(0);
  if (value.size() != block) throw DimensionError("set_slice_first: slice size mismatch");
  double* dst = t.data() + index * block;
  for (std::size_t i = 0; i < block; ++i) dst[i] = value[i];
}

Tensor take_cols(const Tensor& m, std::size_t start, std::size_t count) {
  check_rank2(m, "take_cols");
  if (start + count > m.dim(1)) throw DimensionError("take_cols: column range out of bounds");
  Tensor out({m.dim(0), count});
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = m.at(i, start + j);
  }
  return out;
}

void put_cols(Tensor& m, std::size_t start, const Tensor& value) {
  check_rank2(m, "put_cols");
  check_rank2(value, "put_cols");
  if (value.dim(0) != m.dim(0) || start + value.dim(1) > m.dim(1)) {
    throw DimensionError("put_cols: column range out of bounds");
  }
  for (std::size_t i = 0; i < value.dim(0); ++i) {
    for (std::size_t j = 0; j < value.dim(1); ++j) m.at(i, start + j) = value.at(i, j);
  }
}

void add_cols(Tensor& m, std::size_t start, const Tensor& value) {
  check_rank2(m, "add_cols");
  check_rank2(value, "add_cols");
  if (value.dim(0) != m.dim(0) || start + value.dim(1) > m.dim(1)) {
    throw DimensionError("add_cols: column range out of bounds");
  }
  for (std::size_t i = 0; i < value.dim(0); ++i) {
    for (std::size_t j = 0; j < value.dim(1); ++j) m.at(i, start + j) += value.at(i, j);
  }
}

Tensor mean_rows(const Tensor& m) {
  check_rank2(m, "mean_rows");
  Tensor out({m.dim(1)});
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) out[j] += m.at(i, j);
  }
  const double inv = 1.0 / static_cast<double>(m.dim(0));
  for (std::size_t j = 0; j < m.dim(1); ++j) out[j] *= inv;
  return out;
}

}  // namespace twinquant
