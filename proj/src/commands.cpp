#include "twinquant/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "twinquant/calibration.hpp"
#include "twinquant/dataset.hpp"
#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"
#include "twinquant/manifest.hpp"
#include "twinquant/rng.hpp"
#include "twinquant/search.hpp"
#include "twinquant/study.hpp"

namespace twinquant {

namespace {

class Stopwatch {
 public:
  explicit Stopwatch(std::string label) : label_(std::move(label)), start_(now()) {}
  ~Stopwatch() {
    // Wall time is diagnostic only; it goes to stderr so artifacts and stdout
    // stay byte-stable.
    const double secs = std::chrono::duration<double>(now() - start_).count();
    std::fprintf(stderr, "[time] %s: %.2f s\n", label_.c_str(), secs);
  }

 private:
  static std::chrono::steady_clock::time_point now() {
    return std::chrono::steady_clock::now();
  }
  std::string label_;
  std::chrono::steady_clock::time_point start_;
};

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out << text;
  if (!out) throw FormatError("write failed: " + path);
}

void add_model_config(RunManifest& m, const ModelConfig& cfg) {
  m.set_config("patches", static_cast<std::uint64_t>(cfg.num_patches));
  m.set_config("patch_dim", static_cast<std::uint64_t>(cfg.patch_dim));
  m.set_config("hidden", static_cast<std::uint64_t>(cfg.hidden));
  m.set_config("heads", static_cast<std::uint64_t>(cfg.heads));
  m.set_config("blocks", static_cast<std::uint64_t>(cfg.blocks));
  m.set_config("mlp_ratio", static_cast<std::uint64_t>(cfg.mlp_ratio));
  m.set_config("classes", static_cast<std::uint64_t>(cfg.classes));
}

}  // namespace

int run_gen(const GenOptions& opts) {
  Stopwatch timer("gen");
  opts.model.validate();
  if (opts.train_count == 0 || opts.calib_count == 0 || opts.eval_count == 0) {
    throw DimensionError("gen: split sizes must be positive");
  }
  if (opts.train_epochs < 0) throw DimensionError("gen: train epochs must be >= 0");
  if (opts.batch_size == 0) throw DimensionError("gen: batch size must be positive");
  if (!(opts.lr > 0.0) || !std::isfinite(opts.lr)) {
    throw DimensionError("gen: learning rate must be positive");
  }
  if (!(opts.noise >= 0.0) || !std::isfinite(opts.noise)) {
    throw DimensionError("gen: noise must be non-negative");
  }

  RunManifest manifest;
  manifest.command = "gen";
  add_model_config(manifest, opts.model);
  manifest.set_config("train_count", static_cast<std::uint64_t>(opts.train_count));
  manifest.set_config("calib_count", static_cast<std::uint64_t>(opts.calib_count));
  manifest.set_config("eval_count", static_cast<std::uint64_t>(opts.eval_count));
  manifest.set_config("train_epochs", static_cast<std::uint64_t>(opts.train_epochs));
  manifest.set_config("lr", opts.lr);
  manifest.set_config("batch_size", static_cast<std::uint64_t>(opts.batch_size));
  manifest.set_config("noise", opts.noise);
  manifest.seeds["model"] = opts.model.seed;
  manifest.seeds["data"] = opts.data_seed;
  const std::string mjson = manifest.to_json();

  Model model = Model::build(opts.model);
  const Dataset train = make_synthetic_dataset(opts.model, opts.train_count, opts.data_seed,
                                               Rng::fork_seed(opts.data_seed, 1), opts.noise);
  const Dataset calib = make_synthetic_dataset(opts.model, opts.calib_count, opts.data_seed,
                                               Rng::fork_seed(opts.data_seed, 2), opts.noise);
  const Dataset eval = make_synthetic_dataset(opts.model, opts.eval_count, opts.data_seed,
                                              Rng::fork_seed(opts.data_seed, 3), opts.noise);

  Rng train_rng(Rng::fork_seed(opts.data_seed, 0xee0c));
  for (int epoch = 0; epoch < opts.train_epochs; ++epoch) {
    const double loss =
        model.train_epoch(train.x, train.labels, opts.lr, opts.batch_size, train_rng);
    std::fprintf(stderr, "epoch %d/%d loss %.6f\n", epoch + 1, opts.train_epochs, loss);
  }

  std::filesystem::create_directories(opts.out_dir);
  const auto path = [&](const char* name) {
    return (std::filesystem::path(opts.out_dir) / name).string();
  };
  model.save(path("model.tvit"), mjson);
  save_dataset(path("train.tvds"), train, mjson);
  save_dataset(path("calib.tvds"), calib, mjson);
  save_dataset(path("eval.tvds"), eval, mjson);

  const double train_acc = accuracy(model, train);
  const double eval_acc = accuracy(model, eval);
  std::printf("model %s\n", path("model.tvit").c_str());
  std::printf("train accuracy %s\n", format_f64(train_acc).c_str());
  std::printf("eval accuracy %s\n", format_f64(eval_acc).c_str());
  return 0;
}

int run_calibrate(const CalibrateOptions& opts) {
  Stopwatch timer("calibrate");
  RunManifest manifest;
  manifest.command = "calibrate";
  manifest.hash_input("model", opts.model_path);
  manifest.hash_input("samples", opts.samples_path);

  const Model model = Model::load(opts.model_path);
  const Dataset samples = load_dataset(opts.samples_path);
  const CalibrationCache cache =
      CalibrationCache::create(model, samples.x, opts.out_path, manifest.to_json());
  std::printf("calibration cache %s\n", opts.out_path.c_str());
  std::printf("layers %zu samples %zu\n", model.layers().size(),
              static_cast<std::size_t>(cache.sample_count()));
  return 0;
}

int run_quantize(const QuantizeOptions& opts) {
  Stopwatch timer("quantize");
  const SearchMode mode = parse_search_mode(opts.mode);
  SearchConfig cfg = mode == SearchMode::BasePtq ? SearchConfig::base_ptq(opts.k)
                                                 : SearchConfig::ptq4vit(opts.k);
  if (!opts.metric.empty()) cfg.metric = parse_metric(opts.metric);
  cfg.validate();

  RunManifest manifest;
  manifest.command = "quantize";
  manifest.hash_input("model", opts.model_path);
  manifest.hash_input("cache", opts.cache_path);
  manifest.set_config("mode", search_mode_name(cfg.mode));
  manifest.set_config("k", static_cast<std::uint64_t>(cfg.bits));
  manifest.set_config("metric", metric_name(cfg.metric));

  const Model model = Model::load(opts.model_path);
  const CalibrationCache cache = CalibrationCache::open(opts.cache_path, model);
  const QuantOutcome outcome = quantize_model(model, cache, cfg, &manifest);

  if (!opts.report_path.empty()) {
    write_text_file(opts.report_path, outcome.report.dump(2) + "\n");
  }
  if (!opts.params_path.empty()) {
    save_params(opts.params_path, outcome.params, manifest.to_json());
  }
  std::printf("mode %s bits %d metric %s sites %zu\n", search_mode_name(cfg.mode), cfg.bits,
              metric_name(cfg.metric), outcome.params.size());
  return 0;
}

int run_eval(const EvalOptions& opts) {
  Stopwatch timer("eval");
  RunManifest manifest;
  manifest.command = "eval";
  manifest.hash_input("model", opts.model_path);
  manifest.hash_input("data", opts.data_path);
  if (!opts.params_path.empty()) manifest.hash_input("params", opts.params_path);
  if (!opts.report_path.empty()) manifest.hash_input("report", opts.report_path);

  const Model model = Model::load(opts.model_path);
  const Dataset data = load_dataset(opts.data_path);
  const ParamsMap params =
      opts.params_path.empty() ? ParamsMap{} : load_params(opts.params_path);

  const double fp_acc = accuracy(model, data);
  const double q_acc = accuracy_quantized(model, data, params);
  const double drop = fp_acc - q_acc;

  nlohmann::ordered_json result;
  result["format"] = "twinquant-eval";
  result["version"] = 1;
  result["manifest"] = nlohmann::ordered_json::parse(manifest.to_json());
  result["model_hash"] = io::hex64(model.weight_hash());
  result["samples"] = data.size();
  result["quantized_sites"] = params.size();
  result["fp_accuracy"] = fp_acc;
  result["quantized_accuracy"] = q_acc;
  result["accuracy_drop"] = drop;

  if (!opts.report_path.empty()) {
    nlohmann::ordered_json report;
    try {
      report = nlohmann::ordered_json::parse(io::slurp_file(opts.report_path));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("eval: bad report JSON: ") + e.what());
    }
    if (!report.is_object() || report.value("format", "") != "twinquant-report") {
      throw FormatError("eval: not a quantization report: " + opts.report_path);
    }
    double score_sum = 0.0, score_max = 0.0;
    nlohmann::ordered_json per_site = nlohmann::ordered_json::array();
    for (const auto& site : report.at("sites")) {
      const double score = site.at("score").get<double>();
      score_sum += score;
      score_max = std::max(score_max, score);
      per_site.push_back({{"site", site.at("site")}, {"score", score}});
    }
    const std::size_t n = report.at("sites").size();
    result["score_summary"] = {
        {"sites", n},
        {"mean", n == 0 ? 0.0 : score_sum / static_cast<double>(n)},
        {"max", score_max},
        {"per_site", per_site}};
  }

  if (!opts.out_path.empty()) write_text_file(opts.out_path, result.dump(2) + "\n");
  std::printf("fp accuracy %s\n", format_f64(fp_acc).c_str());
  std::printf("quantized accuracy %s\n", format_f64(q_acc).c_str());
  std::printf("accuracy drop %s\n", format_f64(drop).c_str());
  return 0;
}

int run_compare_metrics(const CompareMetricsOptions& opts) {
  Stopwatch timer("compare-metrics");
  RunManifest manifest;
  manifest.command = "compare-metrics";
  manifest.hash_input("model", opts.model_path);
  manifest.hash_input("cache", opts.cache_path);
  manifest.set_config("candidates", static_cast<std::uint64_t>(opts.candidates));
  manifest.set_config("k", static_cast<std::uint64_t>(opts.k));
  for (std::size_t i = 0; i < opts.layers.size(); ++i) {
    manifest.set_config("layer." + std::to_string(i), opts.layers[i]);
  }

  const Model model = Model::load(opts.model_path);
  const CalibrationCache cache = CalibrationCache::open(opts.cache_path, model);
  StudyConfig cfg;
  cfg.layers = opts.layers;
  cfg.candidates = opts.candidates;
  cfg.bits = opts.k;
  const MetricStudy study = compare_metrics(model, cache, cfg);

  if (!opts.out_path.empty()) {
    write_text_file(opts.out_path, study.to_json(&manifest).dump(2) + "\n");
  }
  const auto show = [](const std::optional<double>& v) {
    return v.has_value() ? format_f64(*v) : std::string("null");
  };
  std::printf("sites %zu aggregated %zu\n", study.sites.size(), study.sites_aggregated);
  std::printf("spearman mse %s\n", show(study.agg_mse).c_str());
  std::printf("spearman cosine %s\n", show(study.agg_cosine).c_str());
  std::printf("spearman pearson %s\n", show(study.agg_pearson).c_str());
  std::printf("spearman hessian %s\n", show(study.agg_hessian).c_str());
  return 0;
}

}  // namespace twinquant
