#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "twinquant/calibration.hpp"
#include "twinquant/manifest.hpp"
#include "twinquant/metrics.hpp"
#include "twinquant/model.hpp"

namespace twinquant {

enum class SearchMode { BasePtq, Ptq4Vit };

const char* search_mode_name(SearchMode mode);
SearchMode parse_search_mode(const std::string& name);  // "base" | "ptq4vit"

struct SearchConfig {
  SearchMode mode = SearchMode::Ptq4Vit;
  int bits = 8;
  double alpha = 0.0;
  double beta = 1.2;
  std::size_t candidates = 100;  // linear grid size before the zero-drop
  int rounds = 3;
  MetricKind metric = MetricKind::Hessian;
  std::vector<int> m_candidates = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  bool use_twin = true;
  // Loop-blocking width for candidate evaluation; affects speed only, never
  // results (tested).
  std::size_t eval_batch = 32;

  static SearchConfig base_ptq(int bits);
  static SearchConfig ptq4vit(int bits);
  void validate() const;
};

struct CandidateGrid {
  std::vector<double> deltas;  // strictly increasing, all positive
  bool degenerate = false;     // all-zero operand; epsilon fallback emitted
};

CandidateGrid gen_grid(double max_abs, const SearchConfig& cfg);
std::vector<TwinQuantParams> gen_twin_grid(ActClass kind, double max_abs,
                                           const SearchConfig& cfg);

// Scores one operand's candidate list against the cached FP outputs. The
// other operand is held at `fixed_other` (nullptr = floating point). When
// both operands are coded the product runs through the integer kernels.
std::vector<double> eval_candidates(const LayerRecord& rec, bool target_a,
                                    const std::vector<SiteParams>& candidates,
                                    const SiteParams* fixed_other, MetricKind metric,
                                    std::size_t eval_batch = 32);

struct SiteChoice {
  std::string site_id;
  SiteParams params = UniformQuantParams(8, 1.0);
  double score = 0.0;
  std::size_t chosen_index = 0;
  std::size_t candidate_count = 0;
  bool degenerate_grid = false;
};

struct LayerSearchResult {
  SiteChoice a;
  SiteChoice b;
  std::vector<double> round_scores;  // best score after each alternation round
  std::vector<double> final_scores_a;
  std::vector<double> final_scores_b;
};

LayerSearchResult search_layer(const MatmulLayer& layer, const LayerRecord& rec,
                               const SearchConfig& cfg);

struct QuantOutcome {
  ParamsMap params;
  nlohmann::ordered_json report;
};

// Runs search_layer over every quantizable product. `layer_order` (ids)
// overrides the default topological order; results must not depend on it.
QuantOutcome quantize_model(const Model& model, const CalibrationCache& cache,
                            const SearchConfig& cfg, const RunManifest* manifest = nullptr,
                            const std::vector<std::string>* layer_order = nullptr);

// Parameter-map serialization ("PTQP").
void write_params(std::ostream& out, const ParamsMap& params,
                  const std::string& manifest_json = "{}");
ParamsMap read_params(std::istream& in);
void save_params(const std::string& path, const ParamsMap& params,
                 const std::string& manifest_json = "{}");
ParamsMap load_params(const std::string& path);
std::string load_params_manifest(const std::string& path);

}  // namespace twinquant
