#include "twinquant/dataset.hpp"

#include <fstream>

#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"
#include "twinquant/rng.hpp"

namespace twinquant {

Dataset make_synthetic_dataset(const ModelConfig& cfg, std::size_t count,
                               std::uint64_t structure_seed, std::uint64_t sample_seed,
                               double noise) {
  cfg.validate();
  if (count == 0) throw DimensionError("make_synthetic_dataset: count must be positive");
  const std::size_t N = cfg.num_patches, Dp = cfg.patch_dim, C = cfg.classes;

  Rng structure(Rng::fork_seed(structure_seed, 0x5eedu));
  Tensor mu({C, Dp});
  for (auto& v : mu.values()) v = structure.gaussian();
  Tensor rho({N, Dp});
  for (auto& v : rho.values()) v = structure.gaussian();

  Rng draw(Rng::fork_seed(sample_seed, 0xda7au));
  Dataset ds;
  ds.x = Tensor({count, N, Dp});
  ds.labels.resize(count);
  for (std::size_t s = 0; s < count; ++s) {
    const auto label = static_cast<std::uint32_t>(draw.uniform_index(C));
    ds.labels[s] = label;
    for (std::size_t p = 0; p < N; ++p) {
      for (std::size_t f = 0; f < Dp; ++f) {
        ds.x.at(s, p, f) = mu.at(label, f) + 0.5 * rho.at(p, f) + noise * draw.gaussian();
      }
    }
  }
  return ds;
}

namespace {
constexpr std::uint32_t kDatasetVersion = 1;
}

void save_dataset(const std::string& path, const Dataset& ds, const std::string& manifest_json) {
  if (ds.x.rank() != 3 || ds.x.dim(0) != ds.labels.size()) {
    throw DimensionError("save_dataset: tensor/label mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_dataset: cannot open " + path);
  io::write_magic(out, "TVDS");
  io::write_u32(out, kDatasetVersion);
  io::write_string(out, manifest_json);
  io::write_tensor(out, ds.x);
  io::write_u64(out, ds.labels.size());
  for (std::uint32_t l : ds.labels) io::write_u32(out, l);
  if (!out) throw FormatError("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_dataset: cannot open " + path);
  io::expect_magic(in, "TVDS", "load_dataset");
  if (io::read_u32(in) != kDatasetVersion) throw FormatError("load_dataset: unsupported version");
  io::read_string(in);  // manifest
  Dataset ds;
  ds.x = io::read_tensor(in);
  const std::uint64_t count = io::read_u64(in);
  if (ds.x.rank() != 3 || count != ds.x.dim(0)) {
    throw FormatError("load_dataset: inconsistent sample count");
  }
  ds.labels.resize(count);
  for (auto& l : ds.labels) l = io::read_u32(in);
  if (!in) throw FormatError("load_dataset: truncated file " + path);
  return ds;
}

std::string load_dataset_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_dataset: cannot open " + path);
  io::expect_magic(in, "TVDS", "load_dataset");
  if (io::read_u32(in) != kDatasetVersion) throw FormatError("load_dataset: unsupported version");
  return io::read_string(in);
}

namespace {

double accuracy_of_logits(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
  std::size_t hits = 0;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.dim(1); ++c) {
      if (logits.at(s, c) > logits.at(s, best)) best = c;
    }
    if (best == labels[s]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace

double accuracy(const Model& model, const Dataset& ds) {
  return accuracy_of_logits(model.forward_logits(ds.x), ds.labels);
}

double accuracy_quantized(const Model& model, const Dataset& ds, const ParamsMap& params) {
  return accuracy_of_logits(model.forward_quantized(ds.x, params), ds.labels);
}

}  // namespace twinquant
