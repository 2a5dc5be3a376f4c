#include "twinquant/metrics.hpp"

#include <cmath>

#include "twinquant/errors.hpp"

namespace twinquant {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b)) throw DimensionError(std::string(who) + ": shape mismatch");
  if (a.size() == 0) throw DimensionError(std::string(who) + ": empty tensors");
}

}  // namespace

const char* metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::Mse: return "mse";
    case MetricKind::Cosine: return "cosine";
    case MetricKind::Pearson: return "pearson";
    case MetricKind::Hessian: return "hessian";
  }
  return "unknown";
}

MetricKind parse_metric(const std::string& name) {
  if (name == "mse") return MetricKind::Mse;
  if (name == "cosine") return MetricKind::Cosine;
  if (name == "pearson") return MetricKind::Pearson;
  if (name == "hessian") return MetricKind::Hessian;
  throw FormatError("unknown metric '" + name + "'");
}

double mse(const Tensor& o, const Tensor& o_hat) {
  check_same_shape(o, o_hat, "mse");
  double sum = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double d = o_hat[i] - o[i];
    sum += d * d;
  }
  return sum / static_cast<double>(o.size());
}

double cosine_distance(const Tensor& o, const Tensor& o_hat) {
  check_same_shape(o, o_hat, "cosine_distance");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) {
    dot += o[i] * o_hat[i];
    na += o[i] * o[i];
    nb += o_hat[i] * o_hat[i];
  }
  const bool a_zero = na == 0.0;
  const bool b_zero = nb == 0.0;
  if (a_zero && b_zero) return 0.0;
  if (a_zero || b_zero) return 1.0;
  double c = dot / (std::sqrt(na) * std::sqrt(nb));
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return 1.0 - c;
}

double pearson_distance(const Tensor& o, const Tensor& o_hat) {
  check_same_shape(o, o_hat, "pearson_distance");
  const double n = static_cast<double>(o.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) {
    ma += o[i];
    mb += o_hat[i];
  }
  ma /= n;
  mb /= n;
  double dot = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double ca = o[i] - ma;
    const double cb = o_hat[i] - mb;
    dot += ca * cb;
    va += ca * ca;
    vb += cb * cb;
  }
  if (va == 0.0 || vb == 0.0) return 1.0;
  double r = dot / (std::sqrt(va) * std::sqrt(vb));
  if (r > 1.0) r = 1.0;
  if (r < -1.0) r = -1.0;
  return 1.0 - r;
}

double hessian_metric(const Tensor& o, const Tensor& o_hat, const Tensor& grad) {
  check_same_shape(o, o_hat, "hessian_metric");
  check_same_shape(o, grad, "hessian_metric");
  const std::size_t samples = o.rank() >= 2 ? o.dim(0) : 1;
  const std::size_t block = o.size() / samples;
  double total = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const double* po = o.data() + s * block;
    const double* ph = o_hat.data() + s * block;
    const double* pg = grad.data() + s * block;
    double sum = 0.0;
    for (std::size_t i = 0; i < block; ++i) {
      const double d = ph[i] - po[i];
      sum += d * d * pg[i] * pg[i];
    }
    total += sum;
  }
  return total / static_cast<double>(samples);
}

double metric_distance(MetricKind kind, const Tensor& o, const Tensor& o_hat,
                       const Tensor* grad) {
  switch (kind) {
    case MetricKind::Mse: return mse(o, o_hat);
    case MetricKind::Cosine: return cosine_distance(o, o_hat);
    case MetricKind::Pearson: return pearson_distance(o, o_hat);
    case MetricKind::Hessian:
      if (grad == nullptr) throw DimensionError("metric_distance: hessian needs grads");
      return hessian_metric(o, o_hat, *grad);
  }
  throw InvariantError("metric_distance: unknown metric kind");
}

}  // namespace twinquant
