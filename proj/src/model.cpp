#include "twinquant/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"

namespace twinquant {

namespace {

void add_row_bias(Tensor& m, const Tensor& bias) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m.at(i, j) += bias[j];
  }
}

Tensor sum_rows(const Tensor& m) {
  Tensor out({m.dim(1)});
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) out[j] += m.at(i, j);
  }
  return out;
}

void accumulate(Tensor& into, const Tensor& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

Tensor quant_roundtrip(const Tensor& x, const SiteParams& p) {
  if (std::holds_alternative<UniformQuantParams>(p)) {
    const auto& u = std::get<UniformQuantParams>(p);
    return dequantize_uniform(quantize_uniform(x, u), u);
  }
  const auto& t = std::get<TwinQuantParams>(p);
  return dequantize_twin(quantize_twin(x, t), t);
}

class QuantizingInterceptor : public MatmulInterceptor {
 public:
  explicit QuantizingInterceptor(const ParamsMap& params) : params_(params) {}

  Tensor product(const MatmulLayer& layer, std::size_t, const Tensor& a,
                 const Tensor& b) override {
    return quantized_product(a, find(layer.a_site()), b, find(layer.b_site()));
  }

 private:
  const SiteParams* find(const std::string& id) const {
    auto it = params_.find(id);
    return it == params_.end() ? nullptr : &it->second;
  }
  const ParamsMap& params_;
};

}  // namespace

Tensor quantized_product(const Tensor& a, const SiteParams* pa, const Tensor& b,
                         const SiteParams* pb) {
  if (pa == nullptr && pb == nullptr) return matmul(a, b);
  if (pa != nullptr && pb != nullptr && std::holds_alternative<UniformQuantParams>(*pb)) {
    const auto& ub = std::get<UniformQuantParams>(*pb);
    const IntTensor bq = quantize_uniform(b, ub);
    if (std::holds_alternative<TwinQuantParams>(*pa)) {
      const auto& ta = std::get<TwinQuantParams>(*pa);
      return twin_matmul(quantize_twin(a, ta), ta, bq, ub);
    }
    const auto& ua = std::get<UniformQuantParams>(*pa);
    return uniform_matmul(quantize_uniform(a, ua), ua, bq, ub);
  }
  // Only one operand covered (or an unusual twin-coded B): the coded side
  // round-trips through its grid and the product stays floating-point.
  const Tensor af = pa ? quant_roundtrip(a, *pa) : Tensor();
  const Tensor bf = pb ? quant_roundtrip(b, *pb) : Tensor();
  return matmul(pa ? af : a, pb ? bf : b);
}

Tensor MatmulInterceptor::product(const MatmulLayer&, std::size_t, const Tensor& a,
                                  const Tensor& b) {
  return matmul(a, b);
}

void ModelConfig::validate() const {
  if (num_patches == 0 || patch_dim == 0 || hidden == 0 || heads == 0 || blocks == 0 ||
      mlp_ratio == 0 || classes == 0) {
    throw DimensionError("ModelConfig: all sizes must be positive");
  }
  if (hidden % heads != 0) {
    throw DimensionError("ModelConfig: hidden size must be divisible by heads");
  }
  if (!(ln_eps > 0.0)) throw DimensionError("ModelConfig: ln_eps must be positive");
}

const char* site_kind_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::FcInput: return "fc_input";
    case SiteKind::FcWeight: return "fc_weight";
    case SiteKind::MatmulA: return "matmul_a";
    case SiteKind::MatmulB: return "matmul_b";
  }
  return "unknown";
}

const char* act_class_name(ActClass act) {
  switch (act) {
    case ActClass::Generic: return "generic";
    case ActClass::PostSoftmax: return "post_softmax";
    case ActClass::PostGelu: return "post_gelu";
  }
  return "unknown";
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build_topology();
}

Model Model::build(const ModelConfig& cfg) {
  Model m(cfg);
  m.init_params();
  return m;
}

void Model::build_topology() {
  layers_.clear();
  sites_.clear();
  layer_index_.clear();

  auto add_fc = [&](const std::string& id, ActClass input_act) {
    layers_.push_back(MatmulLayer{id, true, input_act, -1});
    sites_.push_back(QuantSite{id + ":activation", id, SiteKind::FcInput, input_act, -1});
    sites_.push_back(QuantSite{id + ":weight", id, SiteKind::FcWeight, ActClass::Generic, -1});
  };
  auto add_matmul = [&](const std::string& id, ActClass a_act, int head) {
    layers_.push_back(MatmulLayer{id, false, a_act, head});
    sites_.push_back(QuantSite{id + ":A", id, SiteKind::MatmulA, a_act, head});
    sites_.push_back(QuantSite{id + ":B", id, SiteKind::MatmulB, ActClass::Generic, head});
  };

  add_fc("embed", ActClass::Generic);
  for (std::size_t i = 0; i < cfg_.blocks; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    add_fc(p + "attn.q", ActClass::Generic);
    add_fc(p + "attn.k", ActClass::Generic);
    add_fc(p + "attn.v", ActClass::Generic);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      add_matmul(p + "attn.matmul_qk.h" + std::to_string(h), ActClass::Generic,
                 static_cast<int>(h));
    }
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      add_matmul(p + "attn.matmul_pv.h" + std::to_string(h), ActClass::PostSoftmax,
                 static_cast<int>(h));
    }
    add_fc(p + "attn.proj", ActClass::Generic);
    add_fc(p + "mlp.fc1", ActClass::Generic);
    add_fc(p + "mlp.fc2", ActClass::PostGelu);
  }
  add_fc("head", ActClass::Generic);

  for (std::size_t i = 0; i < layers_.size(); ++i) layer_index_[layers_[i].id] = i;
}

void Model::init_params() {
  const std::size_t D = cfg_.hidden, Dp = cfg_.patch_dim, R = cfg_.mlp_ratio * D,
                    C = cfg_.classes;
  embed_w_ = Tensor({Dp, D});
  embed_b_ = Tensor({D});
  blocks_.resize(cfg_.blocks);
  for (auto& b : blocks_) {
    b.ln1_gamma = Tensor::full({D}, 1.0);
    b.ln1_beta = Tensor({D});
    b.wq = Tensor({D, D});
    b.bq = Tensor({D});
    b.wk = Tensor({D, D});
    b.bk = Tensor({D});
    b.wv = Tensor({D, D});
    b.bv = Tensor({D});
    b.wo = Tensor({D, D});
    b.bo = Tensor({D});
    b.ln2_gamma = Tensor::full({D}, 1.0);
    b.ln2_beta = Tensor({D});
    b.w1 = Tensor({D, R});
    b.b1 = Tensor({R});
    b.w2 = Tensor({R, D});
    b.b2 = Tensor({D});
  }
  final_gamma_ = Tensor::full({D}, 1.0);
  final_beta_ = Tensor({D});
  head_w_ = Tensor({D, C});
  head_b_ = Tensor({C});

  // One rng stream per parameter tensor so initialization is independent of
  // traversal details. Weight matrices get Gaussian(0, 0.02); vectors keep
  // their structural defaults.
  const auto params = named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].second;
    if (t.rank() != 2) continue;
    Rng rng(Rng::fork_seed(cfg_.seed, i));
    for (auto& v : t.values()) v = 0.02 * rng.gaussian();
  }
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embed.w", &embed_w_);
  out.emplace_back("embed.b", &embed_b_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    BlockParams& b = blocks_[i];
    out.emplace_back(p + "ln1.gamma", &b.ln1_gamma);
    out.emplace_back(p + "ln1.beta", &b.ln1_beta);
    out.emplace_back(p + "attn.q.w", &b.wq);
    out.emplace_back(p + "attn.q.b", &b.bq);
    out.emplace_back(p + "attn.k.w", &b.wk);
    out.emplace_back(p + "attn.k.b", &b.bk);
    out.emplace_back(p + "attn.v.w", &b.wv);
    out.emplace_back(p + "attn.v.b", &b.bv);
    out.emplace_back(p + "attn.proj.w", &b.wo);
    out.emplace_back(p + "attn.proj.b", &b.bo);
    out.emplace_back(p + "ln2.gamma", &b.ln2_gamma);
    out.emplace_back(p + "ln2.beta", &b.ln2_beta);
    out.emplace_back(p + "mlp.fc1.w", &b.w1);
    out.emplace_back(p + "mlp.fc1.b", &b.b1);
    out.emplace_back(p + "mlp.fc2.w", &b.w2);
    out.emplace_back(p + "mlp.fc2.b", &b.b2);
  }
  out.emplace_back("final_ln.gamma", &final_gamma_);
  out.emplace_back("final_ln.beta", &final_beta_);
  out.emplace_back("head.w", &head_w_);
  out.emplace_back("head.b", &head_b_);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
  auto mutable_view = const_cast<Model*>(this)->named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_view.size());
  for (auto& [name, t] : mutable_view) out.emplace_back(name, t);
  return out;
}

const MatmulLayer& Model::layer(const std::string& id) const {
  auto it = layer_index_.find(id);
  if (it == layer_index_.end()) throw FormatError("unknown layer id '" + id + "'");
  return layers_[it->second];
}

bool Model::has_site(const std::string& site_id) const {
  for (const auto& s : sites_) {
    if (s.id == site_id) return true;
  }
  return false;
}

// ---- forward ----------------------------------------------------------------

struct Model::BlockTrace {
  Tensor h_in, z1, q, k, v;
  std::vector<Tensor> p;  // per-head attention probabilities [N x N]
  Tensor concat, h_mid, z2, f1, g, h_out;
};

struct Model::SampleTrace {
  Tensor x;
  Tensor h0;
  std::vector<BlockTrace> blocks;
  Tensor z_final, pooled, logits;
};

Tensor Model::forward_sample(const Tensor& x_s, std::size_t sample, MatmulInterceptor& icpt,
                             SampleTrace* st) const {
  const std::size_t N = cfg_.num_patches, D = cfg_.hidden, H = cfg_.heads,
                    d = cfg_.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  // Layers were built in execution order; walk them with a cursor.
  std::size_t li = 0;
  auto next = [&]() -> const MatmulLayer& { return layers_[li++]; };

  if (st) {
    st->x = x_s;
    st->blocks.resize(cfg_.blocks);
  }

  Tensor h = icpt.product(next(), sample, x_s, embed_w_);
  add_row_bias(h, embed_b_);
  if (st) st->h0 = h;

  for (std::size_t bi = 0; bi < cfg_.blocks; ++bi) {
    const BlockParams& bp = blocks_[bi];
    BlockTrace* bt = st ? &st->blocks[bi] : nullptr;
    if (bt) bt->h_in = h;

    const Tensor z1 = layernorm(h, bp.ln1_gamma, bp.ln1_beta, cfg_.ln_eps);
    if (bt) bt->z1 = z1;
    Tensor q = icpt.product(next(), sample, z1, bp.wq);
    add_row_bias(q, bp.bq);
    Tensor k = icpt.product(next(), sample, z1, bp.wk);
    add_row_bias(k, bp.bk);
    Tensor v = icpt.product(next(), sample, z1, bp.wv);
    add_row_bias(v, bp.bv);
    if (bt) {
      bt->q = q;
      bt->k = k;
      bt->v = v;
      bt->p.resize(H);
    }

    std::vector<Tensor> probs(H);
    for (std::size_t hh = 0; hh < H; ++hh) {
      const Tensor qh = take_cols(q, hh * d, d);
      const Tensor kh_t = transpose(take_cols(k, hh * d, d));
      Tensor s_raw = icpt.product(next(), sample, qh, kh_t);
      for (auto& val : s_raw.values()) val *= inv_sqrt_d;
      probs[hh] = softmax_rows(s_raw);
      if (bt) bt->p[hh] = probs[hh];
    }
    Tensor concat({N, D});
    for (std::size_t hh = 0; hh < H; ++hh) {
      const Tensor vh = take_cols(v, hh * d, d);
      const Tensor oh = icpt.product(next(), sample, probs[hh], vh);
      put_cols(concat, hh * d, oh);
    }
    if (bt) bt->concat = concat;

    Tensor attn_out = icpt.product(next(), sample, concat, bp.wo);
    add_row_bias(attn_out, bp.bo);
    Tensor h_mid = add(h, attn_out);
    if (bt) bt->h_mid = h_mid;

    const Tensor z2 = layernorm(h_mid, bp.ln2_gamma, bp.ln2_beta, cfg_.ln_eps);
    if (bt) bt->z2 = z2;
    Tensor f1 = icpt.product(next(), sample, z2, bp.w1);
    add_row_bias(f1, bp.b1);
    const Tensor g = gelu(f1);
    if (bt) {
      bt->f1 = f1;
      bt->g = g;
    }
    Tensor f2 = icpt.product(next(), sample, g, bp.w2);
    add_row_bias(f2, bp.b2);
    h = add(h_mid, f2);
    if (bt) bt->h_out = h;
  }

  const Tensor z_final = layernorm(h, final_gamma_, final_beta_, cfg_.ln_eps);
  const Tensor pooled = reshape(mean_rows(z_final), {1, cfg_.hidden});
  Tensor logits = icpt.product(next(), sample, pooled, head_w_);
  add_row_bias(logits, head_b_);
  if (st) {
    st->z_final = z_final;
    st->pooled = pooled;
    st->logits = logits;
  }
  return logits;
}

namespace {

void check_input(const ModelConfig& cfg, const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) != cfg.num_patches || x.dim(2) != cfg.patch_dim ||
      x.dim(0) == 0) {
    throw DimensionError("model input must be [S x num_patches x patch_dim]");
  }
}

}  // namespace

Tensor Model::forward_with(const Tensor& x, MatmulInterceptor& interceptor) const {
  check_input(cfg_, x);
  const std::size_t S = x.dim(0);
  Tensor logits({S, cfg_.classes});
  for (std::size_t s = 0; s < S; ++s) {
    const Tensor one = forward_sample(slice_first(x, s), s, interceptor, nullptr);
    for (std::size_t c = 0; c < cfg_.classes; ++c) logits.at(s, c) = one.at(0, c);
  }
  return logits;
}

Tensor Model::forward_logits(const Tensor& x) const {
  MatmulInterceptor plain;
  return forward_with(x, plain);
}

namespace {

// Records every product into per-layer [S x ...] stacks.
class TracingInterceptor : public MatmulInterceptor {
 public:
  TracingInterceptor(std::size_t samples, std::map<std::string, LayerTrace>& out)
      : samples_(samples), out_(out) {}

  Tensor product(const MatmulLayer& layer, std::size_t sample, const Tensor& a,
                 const Tensor& b) override {
    Tensor o = matmul(a, b);
    LayerTrace& t = out_[layer.id];
    if (t.outputs.empty()) {
      t.b_is_weight = layer.b_is_weight;
      t.inputs_a = Tensor({samples_, a.dim(0), a.dim(1)});
      t.inputs_b = layer.b_is_weight ? b : Tensor({samples_, b.dim(0), b.dim(1)});
      t.outputs = Tensor({samples_, o.dim(0), o.dim(1)});
    }
    set_slice_first(t.inputs_a, sample, a);
    if (!layer.b_is_weight) set_slice_first(t.inputs_b, sample, b);
    set_slice_first(t.outputs, sample, o);
    return o;
  }

 private:
  std::size_t samples_;
  std::map<std::string, LayerTrace>& out_;
};

}  // namespace

TraceResult Model::forward_trace(const Tensor& x) const {
  check_input(cfg_, x);
  TraceResult result;
  TracingInterceptor icpt(x.dim(0), result.layers);
  result.logits = forward_with(x, icpt);
  return result;
}

ForwardResult Model::forward(const Tensor& x) const {
  TraceResult tr = forward_trace(x);
  ForwardResult out;
  out.logits = std::move(tr.logits);
  for (auto& [id, t] : tr.layers) out.taps.emplace(id, std::move(t.outputs));
  return out;
}

Tensor Model::forward_quantized(const Tensor& x, const ParamsMap& params) const {
  for (const auto& [site_id, unused] : params) {
    (void)unused;
    if (!has_site(site_id)) {
      throw FormatError("forward_quantized: unknown site id '" + site_id + "'");
    }
  }
  QuantizingInterceptor icpt(params);
  return forward_with(x, icpt);
}

// ---- backward ---------------------------------------------------------------

void Model::backward_sample(const SampleTrace& st, const Tensor& dlogits,
                            std::map<std::string, Tensor>* tap_grads, std::size_t sample,
                            std::size_t total_samples, std::vector<Tensor>* param_grads) const {
  const std::size_t N = cfg_.num_patches, D = cfg_.hidden, H = cfg_.heads,
                    d = cfg_.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  auto emit_tap = [&](const std::string& layer_id, const Tensor& g) {
    if (!tap_grads) return;
    Tensor& stack = (*tap_grads)[layer_id];
    if (stack.empty()) stack = Tensor({total_samples, g.dim(0), g.dim(1)});
    set_slice_first(stack, sample, g);
  };
  // Parameter gradient slots follow named_parameters() order.
  auto emit_param = [&](std::size_t index, const Tensor& g) {
    if (!param_grads) return;
    accumulate((*param_grads)[index], g);
  };
  const std::size_t block_stride = 16;
  const std::size_t final_base = 2 + block_stride * cfg_.blocks;

  // Classifier head.
  emit_tap("head", dlogits);
  emit_param(final_base + 2, matmul(transpose(st.pooled), dlogits));
  emit_param(final_base + 3, sum_rows(dlogits));
  const Tensor d_pooled = matmul(dlogits, transpose(head_w_));

  // Mean pooling spreads the gradient evenly over patches.
  Tensor d_zfinal({N, D});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < D; ++j) {
      d_zfinal.at(i, j) = d_pooled.at(0, j) / static_cast<double>(N);
    }
  }

  const Tensor& h_last = st.blocks.back().h_out;
  LayernormVjp fin = vjp_layernorm(h_last, final_gamma_, final_beta_, cfg_.ln_eps, d_zfinal);
  emit_param(final_base + 0, fin.gamma_grad);
  emit_param(final_base + 1, fin.beta_grad);
  Tensor dh = std::move(fin.x_grad);

  for (std::size_t bi = cfg_.blocks; bi-- > 0;) {
    const BlockParams& bp = blocks_[bi];
    const BlockTrace& bt = st.blocks[bi];
    const std::string prefix = "blocks." + std::to_string(bi) + ".";
    const std::size_t base = 2 + block_stride * bi;

    // MLP: h_out = h_mid + (gelu(fc1(z2)) -> fc2).
    const Tensor& d_f2 = dh;
    emit_tap(prefix + "mlp.fc2", d_f2);
    emit_param(base + 15, sum_rows(d_f2));
    MatmulVjp v2 = vjp_matmul(bt.g, bp.w2, d_f2);
    emit_param(base + 14, v2.b_grad);
    const Tensor d_f1 = vjp_gelu(bt.f1, v2.a_grad);
    emit_tap(prefix + "mlp.fc1", d_f1);
    emit_param(base + 13, sum_rows(d_f1));
    MatmulVjp v1 = vjp_matmul(bt.z2, bp.w1, d_f1);
    emit_param(base + 12, v1.b_grad);
    LayernormVjp l2 = vjp_layernorm(bt.h_mid, bp.ln2_gamma, bp.ln2_beta, cfg_.ln_eps,
                                    v1.a_grad);
    emit_param(base + 10, l2.gamma_grad);
    emit_param(base + 11, l2.beta_grad);
    Tensor d_hmid = std::move(l2.x_grad);
    accumulate(d_hmid, dh);

    // Attention: h_mid = h_in + proj(concat(heads)).
    const Tensor& d_attnout = d_hmid;
    emit_tap(prefix + "attn.proj", d_attnout);
    emit_param(base + 9, sum_rows(d_attnout));
    MatmulVjp vo = vjp_matmul(bt.concat, bp.wo, d_attnout);
    emit_param(base + 8, vo.b_grad);
    const Tensor& d_concat = vo.a_grad;

    Tensor d_q({N, D}), d_k({N, D}), d_v({N, D});
    for (std::size_t hh = 0; hh < H; ++hh) {
      const Tensor qh = take_cols(bt.q, hh * d, d);
      const Tensor kh = take_cols(bt.k, hh * d, d);
      const Tensor vh = take_cols(bt.v, hh * d, d);
      const Tensor d_oh = take_cols(d_concat, hh * d, d);
      emit_tap(prefix + "attn.matmul_pv.h" + std::to_string(hh), d_oh);
      MatmulVjp vpv = vjp_matmul(bt.p[hh], vh, d_oh);
      const Tensor d_a = vjp_softmax_rows_from_output(bt.p[hh], vpv.a_grad);
      Tensor d_sraw = d_a;
      for (auto& val : d_sraw.values()) val *= inv_sqrt_d;
      emit_tap(prefix + "attn.matmul_qk.h" + std::to_string(hh), d_sraw);
      MatmulVjp vqk = vjp_matmul(qh, transpose(kh), d_sraw);
      add_cols(d_q, hh * d, vqk.a_grad);
      add_cols(d_k, hh * d, transpose(vqk.b_grad));
      add_cols(d_v, hh * d, vpv.b_grad);
    }
    emit_tap(prefix + "attn.q", d_q);
    emit_tap(prefix + "attn.k", d_k);
    emit_tap(prefix + "attn.v", d_v);
    emit_param(base + 3, sum_rows(d_q));
    emit_param(base + 5, sum_rows(d_k));
    emit_param(base + 7, sum_rows(d_v));
    MatmulVjp vq = vjp_matmul(bt.z1, bp.wq, d_q);
    MatmulVjp vk = vjp_matmul(bt.z1, bp.wk, d_k);
    MatmulVjp vv = vjp_matmul(bt.z1, bp.wv, d_v);
    emit_param(base + 2, vq.b_grad);
    emit_param(base + 4, vk.b_grad);
    emit_param(base + 6, vv.b_grad);
    Tensor d_z1 = std::move(vq.a_grad);
    accumulate(d_z1, vk.a_grad);
    accumulate(d_z1, vv.a_grad);
    LayernormVjp l1 = vjp_layernorm(bt.h_in, bp.ln1_gamma, bp.ln1_beta, cfg_.ln_eps, d_z1);
    emit_param(base + 0, l1.gamma_grad);
    emit_param(base + 1, l1.beta_grad);
    dh = std::move(l1.x_grad);
    accumulate(dh, d_hmid);
  }

  // Patch embedding.
  emit_tap("embed", dh);
  emit_param(1, sum_rows(dh));
  MatmulVjp ve = vjp_matmul(st.x, embed_w_, dh);
  emit_param(0, ve.b_grad);
}

std::map<std::string, Tensor> Model::backward_output_grads(const Tensor& x,
                                                           const Tensor& y_fp) const {
  check_input(cfg_, x);
  if (y_fp.rank() != 2 || y_fp.dim(0) != x.dim(0) || y_fp.dim(1) != cfg_.classes) {
    throw DimensionError("backward_output_grads: targets must be [S x classes]");
  }
  const std::size_t S = x.dim(0);
  MatmulInterceptor plain;
  std::map<std::string, Tensor> grads;
  for (std::size_t s = 0; s < S; ++s) {
    SampleTrace st;
    forward_sample(slice_first(x, s), s, plain, &st);
    // L = sum_s CE(softmax(logits_s), y_s)  =>  dL/dlogits_s = p_s - y_s.
    Tensor dlogits = softmax_rows(st.logits);
    for (std::size_t c = 0; c < cfg_.classes; ++c) dlogits.at(0, c) -= y_fp.at(s, c);
    backward_sample(st, dlogits, &grads, s, S, nullptr);
  }
  return grads;
}

double Model::ce_loss(const Tensor& logits, const Tensor& y) {
  if (!logits.same_shape(y) || logits.rank() != 2) {
    throw DimensionError("ce_loss: logits/target shape mismatch");
  }
  const std::size_t S = logits.dim(0), C = logits.dim(1);
  double total = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    double mx = logits.at(s, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits.at(s, c));
    double lse = 0.0;
    for (std::size_t c = 0; c < C; ++c) lse += std::exp(logits.at(s, c) - mx);
    lse = mx + std::log(lse);
    for (std::size_t c = 0; c < C; ++c) total += y.at(s, c) * (lse - logits.at(s, c));
  }
  return total;
}

double Model::train_epoch(const Tensor& x, const std::vector<std::uint32_t>& labels,
                          double lr, std::size_t batch_size, Rng& rng) {
  check_input(cfg_, x);
  const std::size_t S = x.dim(0), C = cfg_.classes;
  if (labels.size() != S) throw DimensionError("train_epoch: label count mismatch");
  if (batch_size == 0) throw DimensionError("train_epoch: batch size must be positive");

  std::vector<std::size_t> order(S);
  for (std::size_t i = 0; i < S; ++i) order[i] = i;
  rng.shuffle(order);

  auto params = named_parameters();
  std::vector<Tensor> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) grads[i] = Tensor(params[i].second->shape());

  MatmulInterceptor plain;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < S; start += batch_size) {
    const std::size_t stop = std::min(S, start + batch_size);
    const double inv_batch = 1.0 / static_cast<double>(stop - start);
    for (auto& g : grads) std::fill(g.values().begin(), g.values().end(), 0.0);
    for (std::size_t i = start; i < stop; ++i) {
      const std::size_t s = order[i];
      SampleTrace st;
      forward_sample(slice_first(x, s), s, plain, &st);
      Tensor y({1, C});
      y.at(0, labels[s]) = 1.0;
      loss_sum += ce_loss(st.logits, y);
      Tensor dlogits = softmax_rows(st.logits);
      for (std::size_t c = 0; c < C; ++c) {
        dlogits.at(0, c) = (dlogits.at(0, c) - y.at(0, c)) * inv_batch;
      }
      backward_sample(st, dlogits, nullptr, 0, 1, &grads);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].second;
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * grads[i][j];
    }
  }
  return loss_sum / static_cast<double>(S);
}

// ---- persistence --------------------------------------------------------------

namespace {
constexpr std::uint32_t kModelVersion = 1;
}

std::uint64_t Model::weight_hash() const {
  std::ostringstream buf(std::ios::binary);
  for (const auto& [name, t] : named_parameters()) {
    io::write_string(buf, name);
    io::write_tensor(buf, *t);
  }
  const std::string bytes = buf.str();
  return io::fnv1a(bytes.data(), bytes.size());
}

void Model::save(const std::string& path, const std::string& manifest_json) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("Model::save: cannot open " + path);
  io::write_magic(out, "TVIT");
  io::write_u32(out, kModelVersion);
  io::write_string(out, manifest_json);
  io::write_u64(out, cfg_.num_patches);
  io::write_u64(out, cfg_.patch_dim);
  io::write_u64(out, cfg_.hidden);
  io::write_u64(out, cfg_.heads);
  io::write_u64(out, cfg_.blocks);
  io::write_u64(out, cfg_.mlp_ratio);
  io::write_u64(out, cfg_.classes);
  io::write_u64(out, cfg_.seed);
  io::write_f64(out, cfg_.ln_eps);
  const auto params = named_parameters();
  io::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    io::write_string(out, name);
    io::write_tensor(out, *t);
  }
  if (!out) throw FormatError("Model::save: write failed for " + path);
}

namespace {

ModelConfig read_config(std::istream& in) {
  ModelConfig cfg;
  cfg.num_patches = io::read_u64(in);
  cfg.patch_dim = io::read_u64(in);
  cfg.hidden = io::read_u64(in);
  cfg.heads = io::read_u64(in);
  cfg.blocks = io::read_u64(in);
  cfg.mlp_ratio = io::read_u64(in);
  cfg.classes = io::read_u64(in);
  cfg.seed = io::read_u64(in);
  cfg.ln_eps = io::read_f64(in);
  return cfg;
}

}  // namespace

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("Model::load: cannot open " + path);
  io::expect_magic(in, "TVIT", "Model::load");
  if (io::read_u32(in) != kModelVersion) throw FormatError("Model::load: unsupported version");
  io::read_string(in);  // manifest, not needed here
  const ModelConfig cfg = read_config(in);
  Model m(cfg);
  m.init_params();
  auto params = m.named_parameters();
  const std::uint32_t count = io::read_u32(in);
  if (count != params.size()) throw FormatError("Model::load: parameter count mismatch");
  for (auto& [name, t] : params) {
    const std::string got = io::read_string(in);
    if (got != name) throw FormatError("Model::load: expected parameter '" + name +
                                       "', found '" + got + "'");
    Tensor loaded = io::read_tensor(in);
    if (!loaded.same_shape(*t)) {
      throw FormatError("Model::load: shape mismatch for parameter '" + name + "'");
    }
    *t = std::move(loaded);
  }
  if (!in) throw FormatError("Model::load: truncated file " + path);
  return m;
}

std::string Model::load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("Model::load_manifest: cannot open " + path);
  io::expect_magic(in, "TVIT", "Model::load_manifest");
  if (io::read_u32(in) != kModelVersion) {
    throw FormatError("Model::load_manifest: unsupported version");
  }
  return io::read_string(in);
}

Tensor one_hot_argmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("one_hot_argmax: rank-2 input required");
  Tensor out(logits.shape());
  for (std::size_t s = 0; s < logits.dim(0); ++s) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.dim(1); ++c) {
      if (logits.at(s, c) > logits.at(s, best)) best = c;
    }
    out.at(s, best) = 1.0;
  }
  return out;
}

}  // namespace twinquant
