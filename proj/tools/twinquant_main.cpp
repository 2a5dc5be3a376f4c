#include <cstdio>
#include <exception>

#include "CLI11.hpp"
#include "twinquant/commands.hpp"
#include "twinquant/errors.hpp"
#include "twinquant/manifest.hpp"
#include "twinquant/rng.hpp"

namespace {

int dispatch(int argc, char** argv) {
  using namespace twinquant;

  CLI::App app{"Post-training quantization for a bundled toy vision transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
  app.set_config("--config", "", "Read flags from a key=value file");

  GenOptions gen;
  std::uint64_t gen_seed = 7;
  auto* cmd_gen = app.add_subcommand(
      "gen", "Build, train and save the toy model plus synthetic data splits");
  cmd_gen->add_option("--seed", gen_seed, "Master seed for weights and data");
  cmd_gen->add_option("--out", gen.out_dir, "Output directory");
  cmd_gen->add_option("--patches", gen.model.num_patches, "Patches per image");
  cmd_gen->add_option("--patch-dim", gen.model.patch_dim, "Patch vector width");
  cmd_gen->add_option("--hidden", gen.model.hidden, "Embedding width");
  cmd_gen->add_option("--heads", gen.model.heads, "Attention heads");
  cmd_gen->add_option("--blocks", gen.model.blocks, "Transformer blocks");
  cmd_gen->add_option("--mlp-ratio", gen.model.mlp_ratio, "MLP expansion factor");
  cmd_gen->add_option("--classes", gen.model.classes, "Label count");
  cmd_gen->add_option("--train-epochs", gen.train_epochs, "Training epochs (0 = untrained)");
  cmd_gen->add_option("--lr", gen.lr, "SGD learning rate");
  cmd_gen->add_option("--batch", gen.batch_size, "SGD minibatch size");
  cmd_gen->add_option("--train-count", gen.train_count, "Training samples");
  cmd_gen->add_option("--calib-count", gen.calib_count, "Calibration samples");
  cmd_gen->add_option("--eval-count", gen.eval_count, "Evaluation samples");
  cmd_gen->add_option("--noise", gen.noise, "Gaussian noise level in the data");

  CalibrateOptions cal;
  auto* cmd_cal = app.add_subcommand(
      "calibrate", "Record per-layer outputs and output gradients on calibration samples");
  cmd_cal->add_option("--model", cal.model_path, "Model checkpoint")->required();
  cmd_cal->add_option("--samples", cal.samples_path, "Calibration dataset")->required();
  cmd_cal->add_option("--out", cal.out_path, "Cache file to write")->required();

  QuantizeOptions qz;
  auto* cmd_qz = app.add_subcommand(
      "quantize", "Search per-site scaling factors against the calibration cache");
  cmd_qz->add_option("--model", qz.model_path, "Model checkpoint")->required();
  cmd_qz->add_option("--cache", qz.cache_path, "Calibration cache")->required();
  cmd_qz->add_option("--mode", qz.mode, "base | ptq4vit")->capture_default_str();
  cmd_qz->add_option("--k", qz.k, "Bit width")->capture_default_str();
  cmd_qz->add_option("--metric", qz.metric, "mse | cosine | pearson | hessian");
  cmd_qz->add_option("--out", qz.report_path, "Report JSON to write");
  cmd_qz->add_option("--params", qz.params_path, "Parameter map to write");

  EvalOptions ev;
  auto* cmd_ev = app.add_subcommand(
      "eval", "Measure floating-point vs quantized accuracy on a dataset");
  cmd_ev->add_option("--model", ev.model_path, "Model checkpoint")->required();
  cmd_ev->add_option("--data", ev.data_path, "Evaluation dataset")->required();
  cmd_ev->add_option("--params", ev.params_path, "Parameter map (omit for FP only)");
  cmd_ev->add_option("--report", ev.report_path, "Quantization report to summarize");
  cmd_ev->add_option("--out", ev.out_path, "Result JSON to write");

  CompareMetricsOptions cm;
  auto* cmd_cm = app.add_subcommand(
      "compare-metrics",
      "Score candidate grids with every metric against true task-loss change");
  cmd_cm->add_option("--model", cm.model_path, "Model checkpoint")->required();
  cmd_cm->add_option("--cache", cm.cache_path, "Calibration cache")->required();
  cmd_cm->add_option("--layers", cm.layers, "Layer ids to study (default: all)");
  cmd_cm->add_option("--candidates", cm.candidates, "Grid size per site")
      ->capture_default_str();
  cmd_cm->add_option("--k", cm.k, "Bit width")->capture_default_str();
  cmd_cm->add_option("--out", cm.out_path, "Study JSON to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*cmd_gen) {
    gen.model.seed = gen_seed;
    gen.data_seed = Rng::fork_seed(gen_seed, 0xd5);
    return run_gen(gen);
  }
  if (*cmd_cal) return run_calibrate(cal);
  if (*cmd_qz) return run_quantize(qz);
  if (*cmd_ev) return run_eval(ev);
  if (*cmd_cm) return run_compare_metrics(cm);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const twinquant::FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const twinquant::DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const twinquant::InvariantError& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 3;
  }
}
