#include "twinquant/search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"

namespace twinquant {

const char* search_mode_name(SearchMode mode) {
  return mode == SearchMode::BasePtq ? "base" : "ptq4vit";
}

SearchMode parse_search_mode(const std::string& name) {
  if (name == "base") return SearchMode::BasePtq;
  if (name == "ptq4vit") return SearchMode::Ptq4Vit;
  throw FormatError("unknown search mode '" + name + "' (expected base|ptq4vit)");
}

SearchConfig SearchConfig::base_ptq(int bits) {
  SearchConfig cfg;
  cfg.mode = SearchMode::BasePtq;
  cfg.bits = bits;
  cfg.alpha = 0.5;
  cfg.beta = 1.2;
  cfg.candidates = 100;
  cfg.rounds = 1;
  cfg.metric = MetricKind::Cosine;
  cfg.m_candidates.clear();
  cfg.use_twin = false;
  return cfg;
}

SearchConfig SearchConfig::ptq4vit(int bits) {
  SearchConfig cfg;
  cfg.mode = SearchMode::Ptq4Vit;
  cfg.bits = bits;
  cfg.alpha = 0.0;
  cfg.beta = 1.2;
  cfg.candidates = 100;
  cfg.rounds = 3;
  cfg.metric = MetricKind::Hessian;
  cfg.m_candidates = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  cfg.use_twin = true;
  return cfg;
}

void SearchConfig::validate() const {
  if (bits < 2 || bits > 8) throw DimensionError("SearchConfig: bits must be in [2, 8]");
  if (!(alpha >= 0.0) || !(beta > alpha)) {
    throw DimensionError("SearchConfig: need 0 <= alpha < beta");
  }
  if (candidates == 0) throw DimensionError("SearchConfig: candidate count must be positive");
  if (rounds < 1) throw DimensionError("SearchConfig: rounds must be >= 1");
  if (use_twin && m_candidates.empty()) {
    throw DimensionError("SearchConfig: twin search needs m candidates");
  }
  for (int m : m_candidates) {
    if (m < 0 || m > 31) throw DimensionError("SearchConfig: m candidates must be in [0, 31]");
  }
}

CandidateGrid gen_grid(double max_abs, const SearchConfig& cfg) {
  if (!(max_abs >= 0.0) || !std::isfinite(max_abs)) {
    throw DimensionError("gen_grid: max_abs must be finite and non-negative");
  }
  CandidateGrid grid;
  if (max_abs == 0.0) {
    // All-zero operand: any step quantizes it exactly; emit one tiny positive
    // step and flag the degeneracy for the report.
    grid.deltas.push_back(std::numeric_limits<double>::epsilon());
    grid.degenerate = true;
    return grid;
  }
  const double scale = std::ldexp(1.0, -(cfg.bits - 1));  // 1 / 2^(k-1)
  const double lo = cfg.alpha * max_abs * scale;
  const double hi = cfg.beta * max_abs * scale;
  const std::size_t n = cfg.candidates;
  for (std::size_t i = 0; i < n; ++i) {
    const double delta =
        n == 1 ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    if (delta > 0.0) grid.deltas.push_back(delta);
  }
  if (grid.deltas.empty()) {
    grid.deltas.push_back(hi);
    grid.degenerate = true;
  }
  return grid;
}

std::vector<TwinQuantParams> gen_twin_grid(ActClass kind, double max_abs,
                                           const SearchConfig& cfg) {
  std::vector<TwinQuantParams> out;
  if (kind == ActClass::PostSoftmax) {
    // delta_r2 is pinned to 1/2^(k-1); only the shift varies.
    out.reserve(cfg.m_candidates.size());
    for (int m : cfg.m_candidates) out.push_back(TwinQuantParams::post_softmax(cfg.bits, m));
    return out;
  }
  if (kind != ActClass::PostGelu) {
    throw DimensionError("gen_twin_grid: twin grids exist only for tagged activations");
  }
  const CandidateGrid grid = gen_grid(max_abs, cfg);
  out.reserve(grid.deltas.size() * cfg.m_candidates.size());
  for (double delta_r2 : grid.deltas) {
    for (int m : cfg.m_candidates) {
      out.push_back(TwinQuantParams::post_gelu(cfg.bits, delta_r2, m));
    }
  }
  return out;
}

// ---- candidate evaluation -----------------------------------------------------

namespace {

Tensor roundtrip(const Tensor& x, const SiteParams& p) {
  if (std::holds_alternative<UniformQuantParams>(p)) {
    const auto& u = std::get<UniformQuantParams>(p);
    return dequantize_uniform(quantize_uniform(x, u), u);
  }
  const auto& t = std::get<TwinQuantParams>(p);
  return dequantize_twin(quantize_twin(x, t), t);
}

// One operand of the layer, pre-sliced per sample (weights appear once and are
// shared by every sample). When fixed quantization parameters are supplied the
// integer codes are produced a single time here instead of once per candidate.
struct Operand {
  std::vector<Tensor> floats;
  std::vector<IntTensor> uniform_codes;
  std::vector<TwinCodeTensor> twin_codes;
  const UniformQuantParams* uniform = nullptr;
  const TwinQuantParams* twin = nullptr;

  std::size_t index(std::size_t s) const { return floats.size() == 1 ? 0 : s; }

  static Operand make(const Tensor& stacked, bool is_weight, std::size_t samples,
                      const SiteParams* fixed) {
    Operand op;
    op.floats.resize(is_weight ? 1 : samples);
    for (std::size_t s = 0; s < op.floats.size(); ++s) {
      op.floats[s] = is_weight ? stacked : slice_first(stacked, s);
    }
    if (fixed == nullptr) return op;
    if (std::holds_alternative<UniformQuantParams>(*fixed)) {
      op.uniform = &std::get<UniformQuantParams>(*fixed);
      op.uniform_codes.resize(op.floats.size());
      for (std::size_t s = 0; s < op.floats.size(); ++s) {
        op.uniform_codes[s] = quantize_uniform(op.floats[s], *op.uniform);
        op.floats[s] = dequantize_uniform(op.uniform_codes[s], *op.uniform);
      }
    } else {
      op.twin = &std::get<TwinQuantParams>(*fixed);
      op.twin_codes.resize(op.floats.size());
      for (std::size_t s = 0; s < op.floats.size(); ++s) {
        op.twin_codes[s] = quantize_twin(op.floats[s], *op.twin);
        op.floats[s] = dequantize_twin(op.twin_codes[s], *op.twin);
      }
    }
    return op;
  }
};

}  // namespace

std::vector<double> eval_candidates(const LayerRecord& rec, bool target_a,
                                    const std::vector<SiteParams>& candidates,
                                    const SiteParams* fixed_other, MetricKind metric,
                                    std::size_t eval_batch) {
  if (candidates.empty()) throw DimensionError("eval_candidates: empty candidate list");
  if (rec.outputs.rank() < 2 || !rec.outputs.same_shape(rec.grads)) {
    throw DimensionError("eval_candidates: malformed layer record");
  }
  if (eval_batch == 0) eval_batch = 1;
  const std::size_t S = rec.outputs.dim(0);

  const bool target_is_weight = !target_a && rec.b_is_weight;
  const bool other_is_weight = target_a && rec.b_is_weight;
  const Operand target = Operand::make(target_a ? rec.inputs_a : rec.inputs_b,
                                       target_is_weight, S, nullptr);
  const Operand other = Operand::make(target_a ? rec.inputs_b : rec.inputs_a,
                                      other_is_weight, S, fixed_other);

  std::vector<double> scores(candidates.size());
  Tensor ohat(rec.outputs.shape());
  for (std::size_t start = 0; start < candidates.size(); start += eval_batch) {
    const std::size_t stop = std::min(candidates.size(), start + eval_batch);
    for (std::size_t c = start; c < stop; ++c) {
      const SiteParams& cand = candidates[c];
      const bool cand_uniform = std::holds_alternative<UniformQuantParams>(cand);
      for (std::size_t s = 0; s < S; ++s) {
        const Tensor& tgt = target.floats[target.index(s)];
        const std::size_t oi = other.index(s);
        Tensor prod;
        if (target_a && other.uniform != nullptr) {
          if (cand_uniform) {
            const auto& ua = std::get<UniformQuantParams>(cand);
            prod = uniform_matmul(quantize_uniform(tgt, ua), ua, other.uniform_codes[oi],
                                  *other.uniform);
          } else {
            const auto& ta = std::get<TwinQuantParams>(cand);
            prod = twin_matmul(quantize_twin(tgt, ta), ta, other.uniform_codes[oi],
                               *other.uniform);
          }
        } else if (!target_a && cand_uniform && other.uniform != nullptr) {
          const auto& ub = std::get<UniformQuantParams>(cand);
          prod = uniform_matmul(other.uniform_codes[oi], *other.uniform,
                                quantize_uniform(tgt, ub), ub);
        } else if (!target_a && cand_uniform && other.twin != nullptr) {
          const auto& ub = std::get<UniformQuantParams>(cand);
          prod = twin_matmul(other.twin_codes[oi], *other.twin,
                             quantize_uniform(tgt, ub), ub);
        } else if (target_a) {
          prod = matmul(roundtrip(tgt, cand), other.floats[oi]);
        } else {
          prod = matmul(other.floats[oi], roundtrip(tgt, cand));
        }
        set_slice_first(ohat, s, prod);
      }
      scores[c] = metric_distance(metric, rec.outputs, ohat, &rec.grads);
      if (!std::isfinite(scores[c])) {
        throw InvariantError("eval_candidates: non-finite score");
      }
    }
  }
  return scores;
}

// ---- per-layer alternation ------------------------------------------------------

namespace {

std::size_t argmin_lowest(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] < scores[best]) best = i;
  }
  return best;
}

}  // namespace

LayerSearchResult search_layer(const MatmulLayer& layer, const LayerRecord& rec,
                               const SearchConfig& cfg) {
  cfg.validate();
  const double a_max = rec.inputs_a.max_abs();
  const double b_max = rec.inputs_b.max_abs();

  // Candidate lists are built once; every round scans the same grids.
  std::vector<SiteParams> cand_a;
  bool a_degenerate = false;
  const bool a_twin = cfg.use_twin && layer.a_act != ActClass::Generic;
  if (a_twin) {
    a_degenerate = layer.a_act == ActClass::PostGelu && a_max == 0.0;
    for (const TwinQuantParams& p : gen_twin_grid(layer.a_act, a_max, cfg)) {
      cand_a.emplace_back(p);
    }
  } else {
    const CandidateGrid grid = gen_grid(a_max, cfg);
    a_degenerate = grid.degenerate;
    for (double delta : grid.deltas) cand_a.emplace_back(UniformQuantParams(cfg.bits, delta));
  }
  const CandidateGrid grid_b = gen_grid(b_max, cfg);
  std::vector<SiteParams> cand_b;
  for (double delta : grid_b.deltas) cand_b.emplace_back(UniformQuantParams(cfg.bits, delta));

  // Algorithm start point: delta_B = B_max / 2^(k-1).
  const double b_init = b_max > 0.0 ? std::ldexp(b_max, -(cfg.bits - 1))
                                    : std::numeric_limits<double>::epsilon();
  SiteParams current_b{UniformQuantParams(cfg.bits, b_init)};

  LayerSearchResult result;
  std::size_t ia = 0, ib = 0;
  for (int round = 0; round < cfg.rounds; ++round) {
    result.final_scores_a = eval_candidates(rec, true, cand_a, &current_b, cfg.metric,
                                            cfg.eval_batch);
    ia = argmin_lowest(result.final_scores_a);
    const SiteParams current_a = cand_a[ia];
    result.final_scores_b = eval_candidates(rec, false, cand_b, &current_a, cfg.metric,
                                            cfg.eval_batch);
    ib = argmin_lowest(result.final_scores_b);
    current_b = cand_b[ib];
    result.round_scores.push_back(result.final_scores_b[ib]);
  }

  result.a = SiteChoice{layer.a_site(), cand_a[ia], result.final_scores_a[ia], ia,
                        cand_a.size(), a_degenerate};
  result.b = SiteChoice{layer.b_site(), cand_b[ib], result.final_scores_b[ib], ib,
                        cand_b.size(), grid_b.degenerate};
  return result;
}

// ---- whole-model search ---------------------------------------------------------

namespace {

nlohmann::ordered_json site_json(const SiteChoice& choice, const QuantSite& site) {
  nlohmann::ordered_json j;
  j["site"] = choice.site_id;
  j["layer"] = site.layer_id;
  j["kind"] = site_kind_name(site.kind);
  j["activation"] = act_class_name(site.act);
  if (std::holds_alternative<UniformQuantParams>(choice.params)) {
    const auto& u = std::get<UniformQuantParams>(choice.params);
    j["quant"] = "uniform";
    j["bits"] = u.bits();
    j["delta"] = u.delta();
  } else {
    const auto& t = std::get<TwinQuantParams>(choice.params);
    j["quant"] = "twin";
    j["bits"] = t.bits();
    j["twin_mode"] = twin_mode_name(t.mode());
    j["delta_r1"] = t.delta_r1();
    j["delta_r2"] = t.delta_r2();
    j["shift"] = t.shift();
  }
  j["score"] = choice.score;
  j["chosen_index"] = choice.chosen_index;
  j["candidates"] = choice.candidate_count;
  j["degenerate_grid"] = choice.degenerate_grid;
  return j;
}

}  // namespace

QuantOutcome quantize_model(const Model& model, const CalibrationCache& cache,
                            const SearchConfig& cfg, const RunManifest* manifest,
                            const std::vector<std::string>* layer_order) {
  cfg.validate();
  if (cache.model_hash() != model.weight_hash()) {
    throw FormatError("quantize_model: calibration cache is stale (model hash mismatch)");
  }

  std::vector<std::string> order;
  if (layer_order != nullptr) {
    order = *layer_order;
  } else {
    for (const auto& layer : model.layers()) order.push_back(layer.id);
  }

  std::map<std::string, QuantSite> site_info;
  for (const auto& s : model.sites()) site_info.emplace(s.id, s);

  QuantOutcome out;
  std::map<std::string, LayerSearchResult> results;
  for (const auto& layer_id : order) {
    const MatmulLayer& layer = model.layer(layer_id);
    const LayerRecord rec = cache.layer(layer_id);
    LayerSearchResult res = search_layer(layer, rec, cfg);
    out.params.emplace(res.a.site_id, res.a.params);
    out.params.emplace(res.b.site_id, res.b.params);
    results.emplace(layer_id, std::move(res));
  }
  if (out.params.size() != model.sites().size()) {
    throw InvariantError("quantize_model: some sites were not assigned parameters");
  }

  nlohmann::ordered_json& report = out.report;
  report["format"] = "twinquant-report";
  report["version"] = 1;
  report["manifest"] = manifest != nullptr
                           ? nlohmann::ordered_json::parse(manifest->to_json())
                           : nlohmann::ordered_json(nullptr);
  report["mode"] = search_mode_name(cfg.mode);
  report["bits"] = cfg.bits;
  report["metric"] = metric_name(cfg.metric);
  report["alpha"] = cfg.alpha;
  report["beta"] = cfg.beta;
  report["candidates"] = cfg.candidates;
  report["rounds"] = cfg.rounds;
  report["m_candidates"] = cfg.m_candidates;
  report["model_hash"] = io::hex64(model.weight_hash());
  report["samples"] = cache.sample_count();
  report["sites"] = nlohmann::ordered_json::array();
  report["layers"] = nlohmann::ordered_json::array();
  // Report rows always follow the model's own topological order, independent
  // of the search order used above.
  for (const auto& layer : model.layers()) {
    const LayerSearchResult& res = results.at(layer.id);
    report["sites"].push_back(site_json(res.a, site_info.at(res.a.site_id)));
    report["sites"].push_back(site_json(res.b, site_info.at(res.b.site_id)));
    nlohmann::ordered_json lj;
    lj["layer"] = layer.id;
    lj["round_scores"] = res.round_scores;
    report["layers"].push_back(lj);
  }
  return out;
}

// ---- parameter-map serialization -------------------------------------------------

namespace {
constexpr std::uint32_t kParamsVersion = 1;
}

void write_params(std::ostream& out, const ParamsMap& params, const std::string& manifest_json) {
  io::write_magic(out, "PTQP");
  io::write_u32(out, kParamsVersion);
  io::write_string(out, manifest_json);
  io::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [site_id, p] : params) {
    io::write_string(out, site_id);
    if (std::holds_alternative<UniformQuantParams>(p)) {
      const auto& u = std::get<UniformQuantParams>(p);
      io::write_u8(out, 0);
      io::write_u8(out, static_cast<std::uint8_t>(u.bits()));
      io::write_f64(out, u.delta());
    } else {
      const auto& t = std::get<TwinQuantParams>(p);
      io::write_u8(out, 1);
      io::write_u8(out, static_cast<std::uint8_t>(t.bits()));
      io::write_u8(out, static_cast<std::uint8_t>(t.shift()));
      io::write_u8(out, static_cast<std::uint8_t>(t.mode()));
      io::write_f64(out, t.delta_r1());
    }
  }
}

ParamsMap read_params(std::istream& in) {
  io::expect_magic(in, "PTQP", "read_params");
  if (io::read_u32(in) != kParamsVersion) throw FormatError("read_params: unsupported version");
  io::read_string(in);  // manifest
  const std::uint32_t count = io::read_u32(in);
  if (count > 1000000) throw FormatError("read_params: unreasonable entry count");
  ParamsMap params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string site_id = io::read_string(in);
    const std::uint8_t tag = io::read_u8(in);
    if (tag == 0) {
      const int bits = io::read_u8(in);
      const double delta = io::read_f64(in);
      params.emplace(site_id, UniformQuantParams(bits, delta));
    } else if (tag == 1) {
      const int bits = io::read_u8(in);
      const int shift = io::read_u8(in);
      const std::uint8_t mode = io::read_u8(in);
      const double delta_r1 = io::read_f64(in);
      if (mode > 1) throw FormatError("read_params: unknown twin mode");
      TwinQuantParams p = mode == 0
                              ? TwinQuantParams::post_softmax(bits, shift)
                              : TwinQuantParams::post_gelu(bits, std::ldexp(delta_r1, shift),
                                                           shift);
      if (p.delta_r1() != delta_r1) {
        throw FormatError("read_params: inconsistent twin parameters");
      }
      params.emplace(site_id, p);
    } else {
      throw FormatError("read_params: unknown parameter tag");
    }
  }
  if (!in) throw FormatError("read_params: truncated stream");
  return params;
}

void save_params(const std::string& path, const ParamsMap& params,
                 const std::string& manifest_json) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_params: cannot open " + path);
  write_params(out, params, manifest_json);
  if (!out) throw FormatError("save_params: write failed for " + path);
}

ParamsMap load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_params: cannot open " + path);
  return read_params(in);
}

std::string load_params_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_params: cannot open " + path);
  io::expect_magic(in, "PTQP", "read_params");
  if (io::read_u32(in) != kParamsVersion) throw FormatError("read_params: unsupported version");
  return io::read_string(in);
}

}  // namespace twinquant
