#pragma once

#include <cstddef>
#include <vector>

namespace twinquant {

// Dense row-major tensor of f64 values. Deliberately minimal: the engine
// needs exact, deterministic arithmetic more than it needs a rich type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  double max_abs() const;
  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const std::vector<std::size_t>& shape);

// ---- forward ops ----------------------------------------------------------

// 2-D matrix product, [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stabilized softmax over the last dimension.
Tensor softmax_rows(const Tensor& x);

// Exact GELU, x * Phi(x) with the Gaussian CDF.
Tensor gelu(const Tensor& x);
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

// Normalization over the last dimension with learned scale/shift.
// Variance is the biased (mean of squared deviations) estimate.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor add(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);

// ---- reverse-mode companions ----------------------------------------------
// Each vjp_<op> takes the op's inputs plus the upstream gradient (same shape
// as the op's output) and returns gradients for the inputs.

struct MatmulVjp {
  Tensor a_grad;
  Tensor b_grad;
};
MatmulVjp vjp_matmul(const Tensor& a, const Tensor& b, const Tensor& upstream);

Tensor vjp_softmax_rows(const Tensor& x, const Tensor& upstream);
// Same result when the softmax output is already at hand.
Tensor vjp_softmax_rows_from_output(const Tensor& y, const Tensor& upstream);

Tensor vjp_gelu(const Tensor& x, const Tensor& upstream);

struct LayernormVjp {
  Tensor x_grad;
  Tensor gamma_grad;
  Tensor beta_grad;
};
LayernormVjp vjp_layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           double eps, const Tensor& upstream);

struct AddVjp {
  Tensor a_grad;
  Tensor b_grad;
};
AddVjp vjp_add(const Tensor& upstream);

Tensor vjp_transpose(const Tensor& upstream);
Tensor vjp_reshape(const std::vector<std::size_t>& input_shape, const Tensor& upstream);

// ---- slicing helpers used by the transformer ------------------------------

// Copy of t[index, ...] with the leading dimension dropped.
Tensor slice_first(const Tensor& t, std::size_t index);
void set_slice_first(Tensor& t, std::size_t index, const Tensor& value);

// Column block [start, start+count) of a 2-D tensor.
Tensor take_cols(const Tensor& m, std::size_t start, std::size_t count);
void put_cols(Tensor& m, std::size_t start, const Tensor& value);
void add_cols(Tensor& m, std::size_t start, const Tensor& value);

// Row mean of a 2-D tensor -> rank-1 [n].
Tensor mean_rows(const Tensor& m);

}  // namespace twinquant
