#include "twinquant/study.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"
#include "twinquant/metrics.hpp"

namespace twinquant {

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("spearman: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - mean;
    const double db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

namespace {

struct Columns {
  std::vector<double> mse, cosine, pearson, hessian, loss;
};

SiteStudy study_site(const Model& model, const LayerRecord& rec, const MatmulLayer& layer,
                     bool target_a, const StudyConfig& cfg, const Tensor& x, const Tensor& y,
                     double fp_loss) {
  SiteStudy site;
  site.site_id = target_a ? layer.a_site() : layer.b_site();
  site.layer_id = layer.id;
  site.target_a = target_a;

  SearchConfig grid_cfg;
  grid_cfg.bits = cfg.bits;
  grid_cfg.alpha = cfg.alpha;
  grid_cfg.beta = cfg.beta;
  grid_cfg.candidates = cfg.candidates;
  const Tensor& operand = target_a ? rec.inputs_a : rec.inputs_b;
  const CandidateGrid grid = gen_grid(operand.max_abs(), grid_cfg);

  const std::size_t S = rec.outputs.dim(0);
  const std::size_t num_samples = x.dim(0);
  Columns cols;
  Tensor ohat(rec.outputs.shape());
  for (double delta : grid.deltas) {
    const SiteParams params{UniformQuantParams(cfg.bits, delta)};
    for (std::size_t s = 0; s < S; ++s) {
      const Tensor a = slice_first(rec.inputs_a, s);
      const Tensor& b_full = rec.inputs_b;
      const Tensor b = rec.b_is_weight ? b_full : slice_first(b_full, s);
      const Tensor prod = quantized_product(a, target_a ? &params : nullptr, b,
                                            target_a ? nullptr : &params);
      set_slice_first(ohat, s, prod);
    }
    StudyRow row;
    row.delta = delta;
    row.mse = metric_distance(MetricKind::Mse, rec.outputs, ohat, nullptr);
    row.cosine = metric_distance(MetricKind::Cosine, rec.outputs, ohat, nullptr);
    row.pearson = metric_distance(MetricKind::Pearson, rec.outputs, ohat, nullptr);
    row.hessian = metric_distance(MetricKind::Hessian, rec.outputs, ohat, &rec.grads);

    ParamsMap one_site;
    one_site.emplace(site.site_id, params);
    const Tensor logits = model.forward_quantized(x, one_site);
    row.true_loss_change =
        Model::ce_loss(logits, y) / static_cast<double>(num_samples) - fp_loss;

    cols.mse.push_back(row.mse);
    cols.cosine.push_back(row.cosine);
    cols.pearson.push_back(row.pearson);
    cols.hessian.push_back(row.hessian);
    cols.loss.push_back(row.true_loss_change);
    site.rows.push_back(row);
  }

  site.spearman_mse = spearman(cols.mse, cols.loss);
  site.spearman_cosine = spearman(cols.cosine, cols.loss);
  site.spearman_pearson = spearman(cols.pearson, cols.loss);
  site.spearman_hessian = spearman(cols.hessian, cols.loss);
  return site;
}

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v.has_value() ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

MetricStudy compare_metrics(const Model& model, const CalibrationCache& cache,
                            const StudyConfig& cfg) {
  if (cfg.candidates == 0) throw DimensionError("compare_metrics: need at least one candidate");
  if (cache.model_hash() != model.weight_hash()) {
    throw FormatError("compare_metrics: calibration cache is stale (model hash mismatch)");
  }

  std::vector<const MatmulLayer*> selected;
  if (cfg.layers.empty()) {
    for (const auto& layer : model.layers()) selected.push_back(&layer);
  } else {
    const std::set<std::string> wanted(cfg.layers.begin(), cfg.layers.end());
    std::set<std::string> seen;
    for (const auto& layer : model.layers()) {
      if (wanted.count(layer.id) != 0) {
        selected.push_back(&layer);
        seen.insert(layer.id);
      }
    }
    for (const auto& id : wanted) {
      if (seen.count(id) == 0) throw FormatError("compare_metrics: unknown layer '" + id + "'");
    }
  }

  // The calibration inputs double as the study's probe set: the first layer's
  // activation operand is the raw patch tensor itself.
  const Tensor x = cache.layer(model.layers().front().id).inputs_a;
  const Tensor fp_logits = model.forward_logits(x);
  const Tensor y = one_hot_argmax(fp_logits);
  const double fp_loss = Model::ce_loss(fp_logits, y) / static_cast<double>(x.dim(0));

  MetricStudy study;
  for (const MatmulLayer* layer : selected) {
    const LayerRecord rec = cache.layer(layer->id);
    study.sites.push_back(study_site(model, rec, *layer, true, cfg, x, y, fp_loss));
    study.sites.push_back(study_site(model, rec, *layer, false, cfg, x, y, fp_loss));
  }

  double sum_mse = 0.0, sum_cos = 0.0, sum_pear = 0.0, sum_hess = 0.0;
  std::size_t counted = 0;
  for (const SiteStudy& s : study.sites) {
    if (!s.spearman_mse || !s.spearman_cosine || !s.spearman_pearson || !s.spearman_hessian) {
      continue;
    }
    sum_mse += *s.spearman_mse;
    sum_cos += *s.spearman_cosine;
    sum_pear += *s.spearman_pearson;
    sum_hess += *s.spearman_hessian;
    ++counted;
  }
  study.sites_aggregated = counted;
  if (counted > 0) {
    const double n = static_cast<double>(counted);
    study.agg_mse = sum_mse / n;
    study.agg_cosine = sum_cos / n;
    study.agg_pearson = sum_pear / n;
    study.agg_hessian = sum_hess / n;
  }
  return study;
}

nlohmann::ordered_json MetricStudy::to_json(const RunManifest* manifest) const {
  nlohmann::ordered_json j;
  j["format"] = "twinquant-study";
  j["version"] = 1;
  j["manifest"] = manifest != nullptr ? nlohmann::ordered_json::parse(manifest->to_json())
                                      : nlohmann::ordered_json(nullptr);
  j["sites_aggregated"] = sites_aggregated;
  j["aggregate_spearman"] = {{"mse", opt_json(agg_mse)},
                             {"cosine", opt_json(agg_cosine)},
                             {"pearson", opt_json(agg_pearson)},
                             {"hessian", opt_json(agg_hessian)}};
  j["sites"] = nlohmann::ordered_json::array();
  for (const SiteStudy& s : sites) {
    nlohmann::ordered_json sj;
    sj["site"] = s.site_id;
    sj["layer"] = s.layer_id;
    sj["operand"] = s.target_a ? "a" : "b";
    sj["spearman"] = {{"mse", opt_json(s.spearman_mse)},
                      {"cosine", opt_json(s.spearman_cosine)},
                      {"pearson", opt_json(s.spearman_pearson)},
                      {"hessian", opt_json(s.spearman_hessian)}};
    sj["rows"] = nlohmann::ordered_json::array();
    for (const StudyRow& r : s.rows) {
      nlohmann::ordered_json rj;
      rj["delta"] = r.delta;
      rj["mse"] = r.mse;
      rj["cosine"] = r.cosine;
      rj["pearson"] = r.pearson;
      rj["hessian"] = r.hessian;
      rj["true_loss_change"] = r.true_loss_change;
      sj["rows"].push_back(rj);
    }
    j["sites"].push_back(sj);
  }
  return j;
}

}  // namespace twinquant
