#include "twinquant/calibration.hpp"

#include <fstream>
#include <sstream>

#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"

namespace twinquant {

namespace {
constexpr std::uint32_t kCacheVersion = 1;
}

CalibrationCache CalibrationCache::create(const Model& model, const Tensor& samples,
                                          const std::string& path,
                                          const std::string& manifest_json) {
  TraceResult trace = model.forward_trace(samples);
  // Calibration targets: the FP model's own hard predictions. The loss is
  // CE against these one-hot rows, so its gradients carry the model's output
  // sensitivities without needing ground-truth labels.
  const Tensor y_fp = one_hot_argmax(trace.logits);
  std::map<std::string, Tensor> grads = model.backward_output_grads(samples, y_fp);

  std::vector<std::string> ids;
  std::vector<std::string> sections;
  for (auto& [id, t] : trace.layers) {
    auto git = grads.find(id);
    if (git == grads.end()) throw InvariantError("calibration: missing gradient for " + id);
    if (!git->second.same_shape(t.outputs)) {
      throw InvariantError("calibration: gradient/output shape mismatch for " + id);
    }
    std::ostringstream buf(std::ios::binary);
    io::write_u8(buf, t.b_is_weight ? 1 : 0);
    io::write_tensor(buf, t.inputs_a);
    io::write_tensor(buf, t.inputs_b);
    io::write_tensor(buf, t.outputs);
    io::write_tensor(buf, git->second);
    ids.push_back(id);
    sections.push_back(buf.str());
  }

  // Header and index first (two-pass so offsets are known), then sections.
  std::ostringstream head(std::ios::binary);
  io::write_magic(head, "PTQC");
  io::write_u32(head, kCacheVersion);
  io::write_string(head, manifest_json);
  io::write_u64(head, model.weight_hash());
  io::write_u64(head, samples.dim(0));
  io::write_u32(head, static_cast<std::uint32_t>(ids.size()));
  std::size_t index_bytes = 0;
  for (const auto& id : ids) index_bytes += 4 + id.size() + 8 + 8;
  std::uint64_t offset = head.str().size() + index_bytes;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    io::write_string(head, ids[i]);
    io::write_u64(head, offset);
    io::write_u64(head, sections[i].size());
    offset += sections[i].size();
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("calibration: cannot open " + path);
  const std::string header = head.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& s : sections) {
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  if (!out) throw FormatError("calibration: write failed for " + path);
  out.close();

  return read_header(path);
}

CalibrationCache CalibrationCache::read_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("calibration: cannot open " + path);
  io::expect_magic(in, "PTQC", "calibration cache");
  if (io::read_u32(in) != kCacheVersion) throw FormatError("calibration: unsupported version");
  CalibrationCache c;
  c.path_ = path;
  c.manifest_json_ = io::read_string(in);
  c.model_hash_ = io::read_u64(in);
  c.sample_count_ = io::read_u64(in);
  const std::uint32_t count = io::read_u32(in);
  if (count > 100000) throw FormatError("calibration: unreasonable layer count");
  c.ids_.resize(count);
  c.offsets_.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    c.ids_[i] = io::read_string(in);
    c.offsets_[i] = io::read_u64(in);
    io::read_u64(in);  // section length; sections are self-describing
  }
  if (!in) throw FormatError("calibration: truncated header in " + path);
  return c;
}

CalibrationCache CalibrationCache::open(const std::string& path, const Model& model) {
  CalibrationCache c = read_header(path);
  if (c.model_hash_ != model.weight_hash()) {
    throw FormatError("calibration: cache is stale (model hash mismatch)");
  }
  return c;
}

CalibrationCache CalibrationCache::open_unchecked(const std::string& path) {
  return read_header(path);
}

bool CalibrationCache::has_layer(const std::string& id) const {
  for (const auto& known : ids_) {
    if (known == id) return true;
  }
  return false;
}

LayerRecord CalibrationCache::layer(const std::string& id) const {
  std::size_t idx = ids_.size();
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i] == id) {
      idx = i;
      break;
    }
  }
  if (idx == ids_.size()) throw FormatError("calibration: unknown layer id '" + id + "'");
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw FormatError("calibration: cannot open " + path_);
  in.seekg(static_cast<std::streamoff>(offsets_[idx]));
  LayerRecord rec;
  rec.layer_id = id;
  rec.b_is_weight = io::read_u8(in) != 0;
  rec.inputs_a = io::read_tensor(in);
  rec.inputs_b = io::read_tensor(in);
  rec.outputs = io::read_tensor(in);
  rec.grads = io::read_tensor(in);
  if (!in) throw FormatError("calibration: truncated section for '" + id + "'");
  if (!rec.outputs.same_shape(rec.grads)) {
    throw FormatError("calibration: corrupt section for '" + id + "'");
  }
  return rec;
}

CalibrationCache run_calibration(const Model& model, const Tensor& samples,
                                 const std::string& cache_path,
                                 const std::string& manifest_json) {
  return CalibrationCache::create(model, samples, cache_path, manifest_json);
}

}  // namespace twinquant
