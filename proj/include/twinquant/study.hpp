#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "twinquant/calibration.hpp"
#include "twinquant/model.hpp"
#include "twinquant/search.hpp"

namespace twinquant {

// Spearman rank correlation with average ranks on ties. Undefined (nullopt)
// for fewer than two points or when either side has zero rank variance.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

struct StudyRow {
  double delta = 0.0;
  double mse = 0.0;
  double cosine = 0.0;
  double pearson = 0.0;
  double hessian = 0.0;
  double true_loss_change = 0.0;  // quantized CE minus FP CE, mean over samples
};

struct SiteStudy {
  std::string site_id;
  std::string layer_id;
  bool target_a = true;
  std::vector<StudyRow> rows;
  std::optional<double> spearman_mse;
  std::optional<double> spearman_cosine;
  std::optional<double> spearman_pearson;
  std::optional<double> spearman_hessian;
};

struct MetricStudy {
  std::vector<SiteStudy> sites;
  // Means over sites where every correlation is defined, so the four
  // aggregates are directly comparable.
  std::size_t sites_aggregated = 0;
  std::optional<double> agg_mse;
  std::optional<double> agg_cosine;
  std::optional<double> agg_pearson;
  std::optional<double> agg_hessian;

  nlohmann::ordered_json to_json(const RunManifest* manifest = nullptr) const;
};

struct StudyConfig {
  std::vector<std::string> layers;  // layer ids; empty = every layer
  std::size_t candidates = 16;
  int bits = 6;
  double alpha = 0.5;
  double beta = 1.2;
};

// Scores a uniform-quantization grid per site with all four metrics plus the
// expensive oracle: the change in task loss from a full quantized forward per
// candidate. O(sites * candidates * forward).
MetricStudy compare_metrics(const Model& model, const CalibrationCache& cache,
                            const StudyConfig& cfg);

}  // namespace twinquant
