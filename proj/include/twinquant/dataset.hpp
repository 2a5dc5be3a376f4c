#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twinquant/model.hpp"
#include "twinquant/tensor.hpp"

namespace twinquant {

struct Dataset {
  Tensor x;                          // [S x num_patches x patch_dim]
  std::vector<std::uint32_t> labels; // size S
  std::size_t size() const { return labels.size(); }
};

// Synthetic patch "images": x[s,p,:] = mu(label_s) + 0.5 * rho(p) + noise.
// structure_seed fixes the class means mu and patch offsets rho so different
// splits (different sample_seed) share one underlying task.
Dataset make_synthetic_dataset(const ModelConfig& cfg, std::size_t count,
                               std::uint64_t structure_seed, std::uint64_t sample_seed,
                               double noise = 0.7);

void save_dataset(const std::string& path, const Dataset& ds,
                  const std::string& manifest_json = "{}");
Dataset load_dataset(const std::string& path);
std::string load_dataset_manifest(const std::string& path);

double accuracy(const Model& model, const Dataset& ds);
double accuracy_quantized(const Model& model, const Dataset& ds, const ParamsMap& params);

}  // namespace twinquant
