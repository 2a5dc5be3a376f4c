#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twinquant/model.hpp"

namespace twinquant {

// Each command runs end to end and returns 0; failures surface as the error
// taxonomy in errors.hpp and are mapped to exit codes by the CLI shell.

struct GenOptions {
  ModelConfig model;
  std::uint64_t data_seed = 7;
  std::size_t train_count = 256;
  std::size_t calib_count = 32;
  std::size_t eval_count = 512;
  int train_epochs = 10;
  double lr = 0.1;
  std::size_t batch_size = 16;
  // High enough that the classes overlap: the trained model keeps a real
  // error rate, so quantization quality shows up as an accuracy delta.
  double noise = 6.0;
  std::string out_dir = ".";
};
int run_gen(const GenOptions& opts);

struct CalibrateOptions {
  std::string model_path;
  std::string samples_path;
  std::string out_path;
};
int run_calibrate(const CalibrateOptions& opts);

struct QuantizeOptions {
  std::string model_path;
  std::string cache_path;
  std::string mode = "ptq4vit";
  int k = 8;
  std::string metric;  // empty = the mode's default
  std::string report_path;
  std::string params_path;
};
int run_quantize(const QuantizeOptions& opts);

struct EvalOptions {
  std::string model_path;
  std::string params_path;  // empty = evaluate floating point only
  std::string data_path;
  std::string report_path;  // optional quantization report to summarize
  std::string out_path;     // optional JSON result file
};
int run_eval(const EvalOptions& opts);

struct CompareMetricsOptions {
  std::string model_path;
  std::string cache_path;
  std::string out_path;
  std::vector<std::string> layers;
  std::size_t candidates = 16;
  int k = 6;
};
int run_compare_metrics(const CompareMetricsOptions& opts);

}  // namespace twinquant
