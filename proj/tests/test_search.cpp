#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "twinquant/calibration.hpp"
#include "twinquant/errors.hpp"
#include "twinquant/model.hpp"
#include "twinquant/search.hpp"

using namespace twinquant;

namespace {

ModelConfig search_config_model() {
  ModelConfig cfg;
  cfg.num_patches = 4;
  cfg.patch_dim = 6;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.mlp_ratio = 2;
  cfg.classes = 3;
  cfg.seed = 31;
  return cfg;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

struct Fixture {
  Model model = Model::build(search_config_model());
  std::string cache_path = temp_path("twinquant_search_fixture.ptqc");
  CalibrationCache cache = make_cache(model, cache_path);

  static CalibrationCache make_cache(const Model& model, const std::string& path) {
    Rng rng(600);
    const Tensor x = oracles::random_tensor(rng, {2, 4, 6}, 1.0);
    return CalibrationCache::create(model, x, path, "{}");
  }
  ~Fixture() { std::filesystem::remove(cache_path); }
};

// Scores one candidate from first principles: float round-trips on the coded
// operands and a hand-written metric accumulation.
Tensor roundtrip_ref(const Tensor& x, const SiteParams& p) {
  if (std::holds_alternative<UniformQuantParams>(p)) {
    const auto& u = std::get<UniformQuantParams>(p);
    return dequantize_uniform(quantize_uniform(x, u), u);
  }
  const auto& t = std::get<TwinQuantParams>(p);
  return dequantize_twin(quantize_twin(x, t), t);
}

double oracle_score(const LayerRecord& rec, bool target_a, const SiteParams& cand,
                    const SiteParams* fixed_other, MetricKind metric) {
  const std::size_t S = rec.outputs.dim(0);
  double total = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    Tensor a = slice_first(rec.inputs_a, s);
    Tensor b = rec.b_is_weight ? rec.inputs_b : slice_first(rec.inputs_b, s);
    if (target_a) {
      a = roundtrip_ref(a, cand);
      if (fixed_other != nullptr) b = roundtrip_ref(b, *fixed_other);
    } else {
      b = roundtrip_ref(b, cand);
      if (fixed_other != nullptr) a = roundtrip_ref(a, *fixed_other);
    }
    const Tensor ohat = oracles::matmul_oracle(a, b);
    const Tensor o = slice_first(rec.outputs, s);
    const Tensor g = slice_first(rec.grads, s);
    double acc = 0.0;
    for (std::size_t i = 0; i < o.values().size(); ++i) {
      const double d = ohat.values()[i] - o.values()[i];
      if (metric == MetricKind::Hessian) {
        acc += d * d * g.values()[i] * g.values()[i];
      } else {
        acc += d * d;  // plain mse for the cross-check below
      }
    }
    total += acc;
  }
  return total / static_cast<double>(S);
}

}  // namespace

TEST_SUITE("search") {
  TEST_CASE("uniform grid spans alpha..beta around max_abs over the code range") {
    SearchConfig cfg;
    cfg.bits = 8;
    cfg.alpha = 0.5;
    cfg.beta = 1.2;
    cfg.candidates = 8;
    // max_abs = 2^(k-1) makes max_abs / 2^(k-1) = 1, so deltas = alpha..beta.
    const CandidateGrid grid = gen_grid(128.0, cfg);
    REQUIRE(grid.deltas.size() == 8);
    CHECK_FALSE(grid.degenerate);
    CHECK(grid.deltas.front() == 0.5);
    CHECK(grid.deltas.back() == doctest::Approx(1.2).epsilon(1e-15));
    CHECK(std::is_sorted(grid.deltas.begin(), grid.deltas.end()));
    for (std::size_t i = 1; i < grid.deltas.size(); ++i) {
      CHECK(grid.deltas[i] > grid.deltas[i - 1]);
    }
    // Uniform spacing.
    const double step = grid.deltas[1] - grid.deltas[0];
    for (std::size_t i = 2; i < grid.deltas.size(); ++i) {
      CHECK(grid.deltas[i] - grid.deltas[i - 1] == doctest::Approx(step).epsilon(1e-12));
    }
  }

  TEST_CASE("zero lower endpoint is dropped") {
    SearchConfig cfg = SearchConfig::ptq4vit(8);  // alpha = 0, 100 candidates
    const CandidateGrid grid = gen_grid(3.7, cfg);
    CHECK(grid.deltas.size() == 99);
    CHECK_FALSE(grid.degenerate);
    for (double d : grid.deltas) CHECK(d > 0.0);
    CHECK(grid.deltas.back() == doctest::Approx(1.2 * 3.7 / 128.0).epsilon(1e-15));
  }

  TEST_CASE("single-candidate grid hits the upper endpoint") {
    SearchConfig cfg;
    cfg.alpha = 0.25;
    cfg.beta = 0.75;
    cfg.candidates = 1;
    cfg.bits = 4;
    const CandidateGrid grid = gen_grid(8.0, cfg);
    REQUIRE(grid.deltas.size() == 1);
    CHECK(grid.deltas[0] == 0.75);
  }

  TEST_CASE("all-zero operands degrade to an epsilon grid") {
    SearchConfig cfg;
    const CandidateGrid grid = gen_grid(0.0, cfg);
    REQUIRE(grid.deltas.size() == 1);
    CHECK(grid.degenerate);
    CHECK(grid.deltas[0] > 0.0);
  }

  TEST_CASE("grid rejects junk") {
    SearchConfig cfg;
    CHECK_THROWS_AS(gen_grid(-1.0, cfg), DimensionError);
    CHECK_THROWS_AS(gen_grid(std::numeric_limits<double>::quiet_NaN(), cfg), DimensionError);

    SearchConfig bad = cfg;
    bad.bits = 1;
    CHECK_THROWS_AS(bad.validate(), DimensionError);
    bad = cfg;
    bad.alpha = 1.2;
    bad.beta = 1.2;
    CHECK_THROWS_AS(bad.validate(), DimensionError);
    bad = cfg;
    bad.candidates = 0;
    CHECK_THROWS_AS(bad.validate(), DimensionError);
    bad = cfg;
    bad.rounds = 0;
    CHECK_THROWS_AS(bad.validate(), DimensionError);
    bad = cfg;
    bad.m_candidates.clear();
    CHECK_THROWS_AS(bad.validate(), DimensionError);
    bad = cfg;
    bad.m_candidates = {32};
    CHECK_THROWS_AS(bad.validate(), DimensionError);
  }

  TEST_CASE("post-softmax twin grid varies only the shift") {
    const SearchConfig cfg = SearchConfig::ptq4vit(8);
    const auto grid = gen_twin_grid(ActClass::PostSoftmax, 0.997, cfg);
    REQUIRE(grid.size() == 11);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      CHECK(grid[i].shift() == static_cast<int>(i));
      CHECK(grid[i].delta_r2() == 1.0 / 128.0);
      CHECK(grid[i].delta_r2() == std::ldexp(grid[i].delta_r1(), grid[i].shift()));
    }
  }

  TEST_CASE("post-gelu twin grid is the full cross product") {
    const SearchConfig cfg = SearchConfig::ptq4vit(6);
    const auto grid = gen_twin_grid(ActClass::PostGelu, 0.17, cfg);
    REQUIRE(grid.size() == 99 * 11);  // alpha=0 drops one delta
    // delta-major, shift-minor layout with the exact power-of-two relation.
    for (std::size_t i = 0; i < grid.size(); ++i) {
      CHECK(grid[i].shift() == static_cast<int>(i % 11));
      CHECK(grid[i].delta_r2() == std::ldexp(grid[i].delta_r1(), grid[i].shift()));
    }
    for (std::size_t d = 1; d < grid.size() / 11; ++d) {
      CHECK(grid[d * 11].delta_r2() > grid[(d - 1) * 11].delta_r2());
    }
    CHECK_THROWS_AS(gen_twin_grid(ActClass::Generic, 1.0, cfg), DimensionError);
  }

  TEST_CASE("eval_candidates matches a first-principles oracle") {
    Fixture fx;
    SearchConfig cfg;
    cfg.bits = 6;
    cfg.alpha = 0.4;
    cfg.beta = 1.2;
    cfg.candidates = 9;
    for (const auto& layer : fx.model.layers()) {
      const LayerRecord rec = fx.cache.layer(layer.id);
      const CandidateGrid grid = gen_grid(rec.inputs_a.max_abs(), cfg);
      std::vector<SiteParams> cands;
      for (double d : grid.deltas) cands.emplace_back(UniformQuantParams(cfg.bits, d));
      const SiteParams fixed_b{UniformQuantParams(
          cfg.bits, std::max(rec.inputs_b.max_abs(), 1e-9) / 32.0)};
      const auto scores =
          eval_candidates(rec, true, cands, &fixed_b, MetricKind::Hessian, 4);
      REQUIRE(scores.size() == cands.size());
      for (std::size_t c = 0; c < cands.size(); ++c) {
        const double want = oracle_score(rec, true, cands[c], &fixed_b, MetricKind::Hessian);
        CHECK(oracles::rel_err(scores[c], want, 1e-18) <= 1e-10);
      }
    }
  }

  TEST_CASE("eval_candidates is batch-size independent") {
    Fixture fx;
    const LayerRecord rec = fx.cache.layer("blocks.0.mlp.fc1");
    SearchConfig cfg;
    cfg.candidates = 23;
    cfg.alpha = 0.3;
    std::vector<SiteParams> cands;
    for (double d : gen_grid(rec.inputs_a.max_abs(), cfg).deltas) {
      cands.emplace_back(UniformQuantParams(cfg.bits, d));
    }
    const SiteParams fixed{UniformQuantParams(cfg.bits, 0.01)};
    const auto s1 = eval_candidates(rec, true, cands, &fixed, MetricKind::Hessian, 1);
    const auto s7 = eval_candidates(rec, true, cands, &fixed, MetricKind::Hessian, 7);
    const auto sbig = eval_candidates(rec, true, cands, &fixed, MetricKind::Hessian, 1000);
    CHECK(s1 == s7);
    CHECK(s1 == sbig);
  }

  TEST_CASE("eval_candidates rejects an empty grid") {
    Fixture fx;
    const LayerRecord rec = fx.cache.layer("embed");
    CHECK_THROWS_AS(eval_candidates(rec, true, {}, nullptr, MetricKind::Mse, 8),
                    DimensionError);
  }

  TEST_CASE("a finer quantizer never scores worse on the same operand") {
    Fixture fx;
    const LayerRecord rec = fx.cache.layer("embed");
    const double a_max = rec.inputs_a.max_abs();
    std::vector<SiteParams> cands;
    cands.emplace_back(UniformQuantParams(4, a_max / 8.0));
    cands.emplace_back(UniformQuantParams::extended(20, a_max / std::ldexp(1.0, 19)));
    const auto scores = eval_candidates(rec, true, cands, nullptr, MetricKind::Mse, 8);
    CHECK(scores[1] < scores[0]);
    CHECK(scores[1] <= 1e-8 * std::max(1.0, scores[0]));
  }

  TEST_CASE("search_layer replays as an independent alternation") {
    Fixture fx;
    SearchConfig cfg = SearchConfig::ptq4vit(6);
    cfg.candidates = 20;  // keep the replay cheap
    for (const auto& layer : fx.model.layers()) {
      const LayerRecord rec = fx.cache.layer(layer.id);
      const LayerSearchResult got = search_layer(layer, rec, cfg);

      // Re-run the alternation from scratch on the same grids.
      std::vector<SiteParams> cand_a;
      if (cfg.use_twin && layer.a_act != ActClass::Generic) {
        for (const auto& p : gen_twin_grid(layer.a_act, rec.inputs_a.max_abs(), cfg)) {
          cand_a.emplace_back(p);
        }
      } else {
        for (double d : gen_grid(rec.inputs_a.max_abs(), cfg).deltas) {
          cand_a.emplace_back(UniformQuantParams(cfg.bits, d));
        }
      }
      std::vector<SiteParams> cand_b;
      for (double d : gen_grid(rec.inputs_b.max_abs(), cfg).deltas) {
        cand_b.emplace_back(UniformQuantParams(cfg.bits, d));
      }
      const double b_max = rec.inputs_b.max_abs();
      SiteParams b_now{UniformQuantParams(
          cfg.bits, b_max > 0.0 ? std::ldexp(b_max, -(cfg.bits - 1))
                                : std::numeric_limits<double>::epsilon())};
      std::size_t ia = 0, ib = 0;
      for (int round = 0; round < cfg.rounds; ++round) {
        const auto sa =
            eval_candidates(rec, true, cand_a, &b_now, cfg.metric, cfg.eval_batch);
        ia = static_cast<std::size_t>(
            std::min_element(sa.begin(), sa.end()) - sa.begin());
        const auto sb =
            eval_candidates(rec, false, cand_b, &cand_a[ia], cfg.metric, cfg.eval_batch);
        ib = static_cast<std::size_t>(
            std::min_element(sb.begin(), sb.end()) - sb.begin());
        b_now = cand_b[ib];
      }
      CHECK(got.a.chosen_index == ia);
      CHECK(got.b.chosen_index == ib);
      CHECK(got.a.params == cand_a[ia]);
      CHECK(got.b.params == cand_b[ib]);
      // The recorded score is the minimum of the recorded grid scan.
      CHECK(got.a.score == *std::min_element(got.final_scores_a.begin(),
                                             got.final_scores_a.end()));
      CHECK(got.b.score == *std::min_element(got.final_scores_b.begin(),
                                             got.final_scores_b.end()));
      // Ties break to the lowest index.
      for (std::size_t i = 0; i < got.a.chosen_index; ++i) {
        CHECK(got.final_scores_a[i] > got.a.score);
      }
      for (std::size_t i = 0; i < got.b.chosen_index; ++i) {
        CHECK(got.final_scores_b[i] > got.b.score);
      }
    }
  }

  TEST_CASE("alternation scores never increase across rounds") {
    Fixture fx;
    SearchConfig cfg = SearchConfig::ptq4vit(4);
    cfg.candidates = 30;
    cfg.rounds = 4;
    for (const auto& layer : fx.model.layers()) {
      const LayerSearchResult res = search_layer(layer, fx.cache.layer(layer.id), cfg);
      REQUIRE(res.round_scores.size() == 4);
      for (std::size_t r = 1; r < res.round_scores.size(); ++r) {
        CHECK(res.round_scores[r] <= res.round_scores[r - 1]);
      }
    }
  }

  TEST_CASE("rescaling all gradients cannot move the hessian argmin") {
    Fixture fx;
    SearchConfig cfg = SearchConfig::ptq4vit(6);
    cfg.candidates = 25;
    const MatmulLayer& layer = fx.model.layer("blocks.0.attn.q");
    LayerRecord rec = fx.cache.layer(layer.id);
    const LayerSearchResult base = search_layer(layer, rec, cfg);
    for (double& g : rec.grads.values()) g *= 37.5;
    const LayerSearchResult scaled = search_layer(layer, rec, cfg);
    CHECK(base.a.chosen_index == scaled.a.chosen_index);
    CHECK(base.b.chosen_index == scaled.b.chosen_index);
    CHECK(scaled.a.score == doctest::Approx(base.a.score * 37.5 * 37.5).epsilon(1e-9));
  }

  TEST_CASE("an all-zero activation yields a flagged degenerate choice") {
    Fixture fx;
    const MatmulLayer& layer = fx.model.layer("embed");
    LayerRecord rec = fx.cache.layer(layer.id);
    for (double& v : rec.inputs_a.values()) v = 0.0;
    // Outputs/grads stay as-is; only the A grid degenerates.
    SearchConfig cfg = SearchConfig::base_ptq(8);
    cfg.candidates = 10;
    const LayerSearchResult res = search_layer(layer, rec, cfg);
    CHECK(res.a.degenerate_grid);
    CHECK(res.a.candidate_count == 1);
    CHECK(res.a.chosen_index == 0);
    CHECK_FALSE(res.b.degenerate_grid);
  }

  TEST_CASE("quantize_model covers every site exactly once") {
    Fixture fx;
    SearchConfig cfg = SearchConfig::ptq4vit(6);
    cfg.candidates = 12;
    const QuantOutcome out = quantize_model(fx.model, fx.cache, cfg);
    CHECK(out.params.size() == fx.model.sites().size());
    for (const auto& [site_id, p] : out.params) CHECK(fx.model.has_site(site_id));
    // Twin quantizers appear exactly on the tagged activations.
    std::size_t twin_sites = 0;
    for (const auto& site : fx.model.sites()) {
      const bool is_twin =
          std::holds_alternative<TwinQuantParams>(out.params.at(site.id));
      CHECK(is_twin == (site.act != ActClass::Generic));
      twin_sites += is_twin ? 1 : 0;
    }
    CHECK(twin_sites == 2 + 1);  // pv per head + fc2 input at one block

    // Report shape.
    CHECK(out.report.at("format") == "twinquant-report");
    CHECK(out.report.at("mode") == "ptq4vit");
    CHECK(out.report.at("metric") == "hessian");
    CHECK(out.report.at("bits") == 6);
    CHECK(out.report.at("sites").size() == fx.model.sites().size());
    CHECK(out.report.at("layers").size() == fx.model.layers().size());
    for (const auto& lj : out.report.at("layers")) {
      CHECK(lj.at("round_scores").size() == static_cast<std::size_t>(cfg.rounds));
    }
  }

  TEST_CASE("base mode stays uniform everywhere and differs on tagged sites") {
    Fixture fx;
    SearchConfig base = SearchConfig::base_ptq(6);
    base.candidates = 40;
    SearchConfig twin = SearchConfig::ptq4vit(6);
    twin.candidates = 40;
    const QuantOutcome ob = quantize_model(fx.model, fx.cache, base);
    const QuantOutcome ot = quantize_model(fx.model, fx.cache, twin);
    bool differs_on_softmax = false;
    for (const auto& site : fx.model.sites()) {
      CHECK(std::holds_alternative<UniformQuantParams>(ob.params.at(site.id)));
      if (site.act == ActClass::PostSoftmax &&
          !(ob.params.at(site.id) == ot.params.at(site.id))) {
        differs_on_softmax = true;
      }
    }
    CHECK(differs_on_softmax);
  }

  TEST_CASE("search order over layers cannot change any choice") {
    Fixture fx;
    SearchConfig cfg = SearchConfig::ptq4vit(5);
    cfg.candidates = 10;
    std::vector<std::string> order;
    for (const auto& layer : fx.model.layers()) order.push_back(layer.id);
    std::reverse(order.begin(), order.end());
    const QuantOutcome forward_order = quantize_model(fx.model, fx.cache, cfg);
    const QuantOutcome reverse_order = quantize_model(fx.model, fx.cache, cfg, nullptr, &order);
    CHECK(forward_order.params == reverse_order.params);
    CHECK(forward_order.report == reverse_order.report);
  }

  TEST_CASE("quantize_model is deterministic") {
    Fixture fx;
    SearchConfig cfg = SearchConfig::ptq4vit(8);
    cfg.candidates = 8;
    const QuantOutcome a = quantize_model(fx.model, fx.cache, cfg);
    const QuantOutcome b = quantize_model(fx.model, fx.cache, cfg);
    CHECK(a.params == b.params);
    CHECK(a.report.dump() == b.report.dump());
  }

  TEST_CASE("a stale cache is rejected") {
    Fixture fx;
    Model trained = Model::build(search_config_model());
    Rng rng(601);
    const Tensor x = oracles::random_tensor(rng, {2, 4, 6}, 1.0);
    std::vector<std::uint32_t> labels(2, 1);
    Rng train_rng(9);
    trained.train_epoch(x, labels, 0.1, 2, train_rng);
    CHECK_THROWS_AS(quantize_model(trained, fx.cache, SearchConfig::base_ptq(8)),
                    FormatError);
  }

  TEST_CASE("params file round-trips") {
    ParamsMap params;
    params.emplace("embed:activation", UniformQuantParams(8, 0.03125));
    params.emplace("embed:weight", UniformQuantParams(4, 0.25));
    params.emplace("blocks.0.attn.matmul_pv.h0:A", TwinQuantParams::post_softmax(6, 5));
    params.emplace("blocks.0.mlp.fc2:activation", TwinQuantParams::post_gelu(6, 0.011, 7));

    std::stringstream buf;
    write_params(buf, params, "{\"k\":6}");
    const ParamsMap back = read_params(buf);
    CHECK(back == params);

    const std::string path = temp_path("twinquant_params_rt.ptqp");
    save_params(path, params, "{\"k\":6}");
    CHECK(load_params(path) == params);
    CHECK(load_params_manifest(path) == "{\"k\":6}");
    std::filesystem::remove(path);
  }

  TEST_CASE("params reader rejects junk") {
    std::stringstream junk("JUNKxxxxxxxxxxxxxxxx");
    CHECK_THROWS_AS(read_params(junk), FormatError);

    // Truncated stream: a valid header whose entries stop short.
    ParamsMap params;
    params.emplace("a:weight", UniformQuantParams(8, 0.5));
    params.emplace("b:weight", UniformQuantParams(8, 0.25));
    std::stringstream buf;
    write_params(buf, params, "{}");
    const std::string whole = buf.str();
    std::stringstream cut(whole.substr(0, whole.size() - 5));
    CHECK_THROWS_AS(read_params(cut), FormatError);

    // A twin entry whose stored delta_r1 disagrees with its own mode/shift.
    ParamsMap twin_map;
    twin_map.emplace("x:A", TwinQuantParams::post_softmax(6, 5));
    std::stringstream twin_buf;
    write_params(twin_buf, twin_map, "{}");
    std::string bytes = twin_buf.str();
    bytes[bytes.size() - 3] ^= 0x5A;  // delta_r1 is the entry's trailing f64
    std::stringstream corrupted(bytes);
    CHECK_THROWS_AS(read_params(corrupted), FormatError);
  }
}
