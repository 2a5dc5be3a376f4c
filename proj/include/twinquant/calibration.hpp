#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twinquant/model.hpp"
#include "twinquant/tensor.hpp"

namespace twinquant {

// Everything the scaling-factor search needs to know about one matrix
// product, collected once from the floating-point model: the operands, the
// raw output, and the gradient of the calibration loss at that output.
struct LayerRecord {
  std::string layer_id;
  Tensor inputs_a;  // [S x ...]
  Tensor inputs_b;  // weight operand stored once; activation operands stacked
  bool b_is_weight = false;
  Tensor outputs;   // [S x ...]
  Tensor grads;     // same shape as outputs
};

// On-disk cache ("PTQC"): header + per-layer index, sections loaded lazily so
// a search touches one layer's worth of memory at a time. Records never
// depend on any quantization parameter; they are pure FP snapshots.
class CalibrationCache {
 public:
  // Runs the calibration set through the model (forward taps + gradients of
  // the loss against the model's own hard predictions) and persists it.
  static CalibrationCache create(const Model& model, const Tensor& samples,
                                 const std::string& path,
                                 const std::string& manifest_json = "{}");
  // Opens and validates against the model (weight-hash staleness check).
  static CalibrationCache open(const std::string& path, const Model& model);
  static CalibrationCache open_unchecked(const std::string& path);

  const std::vector<std::string>& layer_ids() const { return ids_; }
  bool has_layer(const std::string& id) const;
  LayerRecord layer(const std::string& id) const;  // FormatError on unknown id

  std::uint64_t model_hash() const { return model_hash_; }
  std::size_t sample_count() const { return sample_count_; }
  const std::string& manifest_json() const { return manifest_json_; }
  const std::string& path() const { return path_; }

 private:
  CalibrationCache() = default;
  static CalibrationCache read_header(const std::string& path);

  std::string path_;
  std::string manifest_json_;
  std::uint64_t model_hash_ = 0;
  std::size_t sample_count_ = 0;
  std::vector<std::string> ids_;
  std::vector<std::uint64_t> offsets_;
};

CalibrationCache run_calibration(const Model& model, const Tensor& samples,
                                 const std::string& cache_path,
                                 const std::string& manifest_json = "{}");

}  // namespace twinquant
