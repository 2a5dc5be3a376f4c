#pragma once

#include <string>

#include "twinquant/tensor.hpp"

namespace twinquant {

enum class MetricKind { Mse, Cosine, Pearson, Hessian };

const char* metric_name(MetricKind kind);
MetricKind parse_metric(const std::string& name);  // throws FormatError on unknown names

// Plain distances flatten both tensors entirely.
double mse(const Tensor& o, const Tensor& o_hat);

// 1 - cos(o, o_hat). Two zero vectors are identical (0); exactly one zero
// vector is maximally misaligned by convention (1).
double cosine_distance(const Tensor& o, const Tensor& o_hat);

// 1 - Pearson correlation; any zero-variance input yields 1.
double pearson_distance(const Tensor& o, const Tensor& o_hat);

// Output-sensitivity-weighted distance: per sample, sum of
// (o_hat - o)^2 * grad^2; the per-sample sums are averaged across the batch.
// The leading dimension is the sample axis when rank >= 2; a rank-1 tensor
// counts as a single sample.
double hessian_metric(const Tensor& o, const Tensor& o_hat, const Tensor& grad);

// Dispatch helper; grad may be null for the first three kinds.
double metric_distance(MetricKind kind, const Tensor& o, const Tensor& o_hat,
                       const Tensor* grad);

}  // namespace twinquant
