#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "twinquant/quant.hpp"
#include "twinquant/rng.hpp"
#include "twinquant/tensor.hpp"

namespace twinquant {

// A deliberately small pre-LN vision transformer: patch embedding, `blocks`
// encoder blocks (multi-head self-attention + 2-layer MLP), mean pooling and
// a linear classifier. Every matrix product that the quantizer may touch is
// routed through a MatmulInterceptor and addressed by a stable layer id.

struct ModelConfig {
  std::size_t num_patches = 16;  // N
  std::size_t patch_dim = 32;    // per-patch input feature size
  std::size_t hidden = 32;       // D
  std::size_t heads = 4;         // H
  std::size_t blocks = 2;        // encoder depth
  std::size_t mlp_ratio = 4;     // MLP expands D -> r*D
  std::size_t classes = 10;      // C
  std::uint64_t seed = 1;
  double ln_eps = 1e-5;

  std::size_t head_dim() const { return hidden / heads; }
  void validate() const;  // throws DimensionError
  bool operator==(const ModelConfig& o) const = default;
};

enum class SiteKind { FcInput, FcWeight, MatmulA, MatmulB };
enum class ActClass { Generic, PostSoftmax, PostGelu };

const char* site_kind_name(SiteKind kind);
const char* act_class_name(ActClass act);

// One quantizable operand of one matrix product.
struct QuantSite {
  std::string id;        // "<layer>:activation|:weight|:A|:B"
  std::string layer_id;
  SiteKind kind;
  ActClass act;
  int head;  // -1 outside attention matmuls
};

// One matrix product O = A * B. FC layers multiply activations (A) by a
// weight matrix (B); attention products multiply two activations.
struct MatmulLayer {
  std::string id;
  bool b_is_weight;
  ActClass a_act;
  int head;  // -1 for FC layers

  std::string a_site() const { return id + (b_is_weight ? ":activation" : ":A"); }
  std::string b_site() const { return id + (b_is_weight ? ":weight" : ":B"); }
};

using SiteParams = std::variant<UniformQuantParams, TwinQuantParams>;
using ParamsMap = std::map<std::string, SiteParams>;

class MatmulInterceptor {
 public:
  virtual ~MatmulInterceptor() = default;
  // a: [m x k] activation slice for one sample; b: [k x n].
  virtual Tensor product(const MatmulLayer& layer, std::size_t sample, const Tensor& a,
                         const Tensor& b);
};

// Per-layer operands and outputs stacked over samples (leading dim = S).
// Weight operands are stored once, unstacked.
struct LayerTrace {
  Tensor inputs_a;
  Tensor inputs_b;
  bool b_is_weight = false;
  Tensor outputs;
};

struct ForwardResult {
  Tensor logits;                       // [S x C]
  std::map<std::string, Tensor> taps;  // layer id -> stacked raw products
};

struct TraceResult {
  Tensor logits;
  std::map<std::string, LayerTrace> layers;
};

class Model {
 public:
  static Model build(const ModelConfig& cfg);  // Gaussian(0, 0.02) weights from cfg.seed

  const ModelConfig& config() const { return cfg_; }
  const std::vector<MatmulLayer>& layers() const { return layers_; }
  const std::vector<QuantSite>& sites() const { return sites_; }
  const MatmulLayer& layer(const std::string& id) const;  // FormatError on unknown id
  bool has_site(const std::string& site_id) const;

  // x: [S x N x patch_dim].
  Tensor forward_logits(const Tensor& x) const;
  ForwardResult forward(const Tensor& x) const;
  TraceResult forward_trace(const Tensor& x) const;
  Tensor forward_with(const Tensor& x, MatmulInterceptor& interceptor) const;
  Tensor forward_quantized(const Tensor& x, const ParamsMap& params) const;

  // Gradients of sum-over-samples cross-entropy against the given target
  // distributions, with respect to every tapped product.
  std::map<std::string, Tensor> backward_output_grads(const Tensor& x, const Tensor& y_fp) const;

  // One SGD epoch over (x, labels); returns the mean training loss.
  double train_epoch(const Tensor& x, const std::vector<std::uint32_t>& labels, double lr,
                     std::size_t batch_size, Rng& rng);

  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  std::uint64_t weight_hash() const;

  void save(const std::string& path, const std::string& manifest_json = "{}") const;
  static Model load(const std::string& path);
  static std::string load_manifest(const std::string& path);

  // Sum over samples of CE(softmax(logits_s), y_s); y rows are distributions.
  static double ce_loss(const Tensor& logits, const Tensor& y);

 private:
  explicit Model(const ModelConfig& cfg);
  void init_params();
  void build_topology();

  struct BlockParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor wo, bo;
    Tensor ln2_gamma, ln2_beta;
    Tensor w1, b1, w2, b2;
  };

  struct BlockTrace;
  struct SampleTrace;

  Tensor forward_sample(const Tensor& x_s, std::size_t sample, MatmulInterceptor& icpt,
                        SampleTrace* st) const;
  void backward_sample(const SampleTrace& st, const Tensor& dlogits,
                       std::map<std::string, Tensor>* tap_grads, std::size_t sample,
                       std::size_t total_samples, std::vector<Tensor>* param_grads) const;

  ModelConfig cfg_;
  Tensor embed_w_, embed_b_;
  std::vector<BlockParams> blocks_;
  Tensor final_gamma_, final_beta_;
  Tensor head_w_, head_b_;

  std::vector<MatmulLayer> layers_;
  std::vector<QuantSite> sites_;
  std::map<std::string, std::size_t> layer_index_;
};

// Row-wise one-hot of the argmax (first index wins ties): [S x C] -> [S x C].
Tensor one_hot_argmax(const Tensor& logits);

// a*b with either operand optionally quantized (nullptr = floating point).
// Uniform-coded pairs and twin-A/uniform-B pairs run on the integer kernels;
// a lone coded operand round-trips through its grid before a float product.
Tensor quantized_product(const Tensor& a, const SiteParams* pa, const Tensor& b,
                         const SiteParams* pb);

}  // namespace twinquant
