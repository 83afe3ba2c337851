#include "mit/infusion.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "mit/ops.h"
#include "mit/rng.h"

namespace mit {

std::string to_string(RescalePooling pooling) {
  return pooling == RescalePooling::kPerToken ? "per_token" : "mean_over_tokens";
}

RescalePooling rescale_pooling_from_string(const std::string& s) {
  if (s == "per_token") return RescalePooling::kPerToken;
  if (s == "mean_over_tokens") return RescalePooling::kMeanOverTokens;
  throw std::invalid_argument("unknown rescale_pooling '" + s + "' (expected per_token or mean_over_tokens)");
}

void MiTConfig::validate(const LMConfig& lm) const {
  if (d_modal < 1) throw std::invalid_argument("MiTConfig: d_modal must be positive");
  int previous = -1;
  for (int l : infused_layers) {
    if (l < 0 || l >= lm.n_layers) {
      throw std::out_of_range("MiTConfig: infused layer " + std::to_string(l) + " outside [0, " +
                              std::to_string(lm.n_layers) + ")");
    }
    if (l <= previous) throw std::invalid_argument("MiTConfig: infused_layers must be strictly increasing");
    previous = l;
  }
}

std::vector<NamedShape> infusion_param_shapes(const MiTConfig& config, const LMConfig& lm) {
  config.validate(lm);
  const auto di = static_cast<std::size_t>(config.d_modal);
  const auto d = static_cast<std::size_t>(lm.d_model);
  const auto ff = static_cast<std::size_t>(lm.d_ff);
  std::vector<NamedShape> out;
  for (int l : config.infused_layers) {
    const std::string p = "infusion.layer" + std::to_string(l) + ".";
    if (config.enable_kv) {
      for (const char* which : {"k", "v"}) {
        out.push_back({p + "w_d_" + which, {di, d}});
        out.push_back({p + "b_d_" + which, {d}});
        out.push_back({p + "w_a_" + which, {di, d}});
        out.push_back({p + "b_a_" + which, {d}});
      }
    }
    if (config.enable_ff) {
      out.push_back({p + "w_f", {di, ff}});
      out.push_back({p + "b_f", {ff}});
    }
    if (config.enable_rescale) out.push_back({p + "l_gate", {static_cast<std::size_t>(lm.n_heads)}});
  }
  return out;
}

std::size_t infusion_param_count(const MiTConfig& config, const LMConfig& lm) {
  const auto di = static_cast<std::size_t>(config.d_modal);
  const auto d = static_cast<std::size_t>(lm.d_model);
  const auto ff = static_cast<std::size_t>(lm.d_ff);
  std::size_t per_layer = 0;
  if (config.enable_kv) per_layer += 4 * (di * d + d);
  if (config.enable_ff) per_layer += di * ff + ff;
  if (config.enable_rescale) per_layer += static_cast<std::size_t>(lm.n_heads);
  return per_layer * config.infused_layers.size();
}

InfusionParams InfusionParams::init(const MiTConfig& config, const LMConfig& lm, std::uint64_t) {
  config.validate(lm);
  InfusionParams p;
  p.config_ = config;
  p.n_heads_ = lm.n_heads;
  const auto di = static_cast<std::size_t>(config.d_modal);
  const auto d = static_cast<std::size_t>(lm.d_model);
  const auto ff = static_cast<std::size_t>(lm.d_ff);
  for (int l : config.infused_layers) {
    InfusionLayer layer;
    layer.layer = l;
    if (config.enable_kv) {
      layer.w_d_k = Tensor::zeros({di, d}, true);
      layer.b_d_k = Tensor::ones({d}, true);
      layer.w_a_k = Tensor::zeros({di, d}, true);
      layer.b_a_k = Tensor::zeros({d}, true);
      layer.w_d_v = Tensor::zeros({di, d}, true);
      layer.b_d_v = Tensor::ones({d}, true);
      layer.w_a_v = Tensor::zeros({di, d}, true);
      layer.b_a_v = Tensor::zeros({d}, true);
    }
    if (config.enable_ff) {
      layer.w_f = Tensor::zeros({di, ff}, true);
      layer.b_f = Tensor::ones({ff}, true);
    }
    if (config.enable_rescale) {
      layer.l_gate = Tensor::full({static_cast<std::size_t>(lm.n_heads)}, config.gate_init, true);
    }
    p.layers_.push_back(std::move(layer));
  }
  return p;
}

namespace {

std::vector<std::pair<const char*, Tensor*>> slots(InfusionLayer& l) {
  return {{"w_d_k", &l.w_d_k}, {"b_d_k", &l.b_d_k}, {"w_a_k", &l.w_a_k}, {"b_a_k", &l.b_a_k},
          {"w_d_v", &l.w_d_v}, {"b_d_v", &l.b_d_v}, {"w_a_v", &l.w_a_v}, {"b_a_v", &l.b_a_v},
          {"w_f", &l.w_f},     {"b_f", &l.b_f},     {"l_gate", &l.l_gate}};
}

}  // namespace

InfusionParams InfusionParams::from_tensors(const MiTConfig& config, const LMConfig& lm,
                                            const std::vector<NamedTensor>& tensors) {
  InfusionParams p = init(config, lm);
  std::map<std::string, Tensor> by_name;
  for (const auto& t : tensors) by_name[t.name] = t.tensor;
  for (auto& layer : p.layers_) {
    const std::string prefix = "infusion.layer" + std::to_string(layer.layer) + ".";
    for (auto [name, slot] : slots(layer)) {
      if (!slot->defined()) continue;
      auto it = by_name.find(prefix + name);
      if (it == by_name.end()) throw std::invalid_argument("infusion: missing tensor " + prefix + name);
      if (it->second.shape() != slot->shape()) {
        throw ShapeError("infusion: tensor " + prefix + name + " has shape " + shape_str(it->second.shape()) +
                         ", expected " + shape_str(slot->shape()));
      }
      *slot = it->second.clone(true);
    }
  }
  return p;
}

const InfusionLayer* InfusionParams::find(int layer) const {
  for (const auto& l : layers_) {
    if (l.layer == layer) return &l;
  }
  return nullptr;
}

std::vector<NamedTensor> InfusionParams::named_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& layer : layers_) {
    auto copy = layer;
    const std::string prefix = "infusion.layer" + std::to_string(layer.layer) + ".";
    for (auto [name, slot] : slots(copy)) {
      if (slot->defined()) out.push_back({prefix + name, *slot});
    }
  }
  return out;
}

void InfusionParams::perturb(double scale, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (auto& t : named_tensors()) {
    Tensor tensor = t.tensor;
    for (double& v : tensor.mutable_data()) v += rng.normal(0.0, scale);
  }
}

Tensor affine_project(const Tensor& modal, const Tensor& weight, const Tensor& bias) {
  if (modal.rank() != 1 || weight.rank() != 2 || bias.rank() != 1 || weight.dim(0) != modal.dim(0) ||
      weight.dim(1) != bias.dim(0)) {
    throw ShapeError("affine_project: incompatible shapes I " + shape_str(modal.shape()) + ", W " +
                     shape_str(weight.shape()) + ", b " + shape_str(bias.shape()));
  }
  const Tensor row = reshape(modal, {1, modal.dim(0)});
  return add(reshape(matmul(row, weight), {weight.dim(1)}), bias);
}

Tensor infuse_kv(const Tensor& x, const Tensor& multiplier, const Tensor& adder) {
  if (x.rank() != 3 || multiplier.rank() != 1 || adder.rank() != 1 ||
      multiplier.dim(0) != x.dim(1) * x.dim(2) || adder.dim(0) != multiplier.dim(0)) {
    throw ShapeError("infuse_kv: incompatible shapes X " + shape_str(x.shape()) + ", I_mul " +
                     shape_str(multiplier.shape()) + ", I_add " + shape_str(adder.shape()));
  }
  const Shape per_head{x.dim(1), x.dim(2)};
  return add(mul(x, reshape(multiplier, per_head)), reshape(adder, per_head));
}

RescaleResult head_rescale(const Tensor& v_infused, const Tensor& k_infused, const Tensor& v_raw,
                           const Tensor& proxy, const Tensor& l_gate, RescalePooling pooling) {
  if (v_infused.rank() != 3 || k_infused.shape() != v_infused.shape() || v_raw.shape() != v_infused.shape()) {
    throw ShapeError("head_rescale: V', K', V must share a (L, h, hd) shape, got " + shape_str(v_infused.shape()) +
                     ", " + shape_str(k_infused.shape()) + ", " + shape_str(v_raw.shape()));
  }
  const std::size_t len = v_raw.dim(0);
  const std::size_t heads = v_raw.dim(1);
  const std::size_t hd = v_raw.dim(2);
  if (l_gate.rank() != 1 || l_gate.dim(0) != heads) {
    throw ShapeError("head_rescale: L_gate must be (" + std::to_string(heads) + "), got " +
                     shape_str(l_gate.shape()));
  }
  Tensor shifted;
  if (proxy.defined()) {
    if (proxy.shape() != Shape{heads, hd}) {
      throw ShapeError("head_rescale: proxy must be " + shape_str({heads, hd}) + ", got " +
                       shape_str(proxy.shape()));
    }
    Tensor cos = cosine_similarity(v_raw, broadcast_to(proxy, v_raw.shape()));  // (L, h)
    if (pooling == RescalePooling::kMeanOverTokens) cos = mean(cos, 0, true);  // (1, h)
    shifted = add(cos, l_gate);
  } else {
    shifted = reshape(l_gate, {1, heads});
  }
  (void)len;
  RescaleResult r;
  r.gate = sigmoid(shifted);
  const Tensor g3 = reshape(r.gate, {r.gate.dim(0), heads, 1});
  r.v = mul(v_infused, g3);
  r.k = mul(k_infused, g3);
  return r;
}

Tensor infused_attention(const Tensor& q, const Tensor& k_r, const Tensor& v_r, const Tensor& wo, double scale) {
  return matmul(causal_attention(q, k_r, v_r, scale), wo);
}

Tensor infuse_ff(const Tensor& hidden, const Tensor& modal, const Tensor& w_f, const Tensor& b_f) {
  if (hidden.rank() != 2 || w_f.rank() != 2 || hidden.dim(1) != w_f.dim(1)) {
    throw ShapeError("infuse_ff: incompatible shapes H " + shape_str(hidden.shape()) + ", W_f " +
                     shape_str(w_f.shape()));
  }
  return mul(hidden, affine_project(modal, w_f, b_f));
}

std::vector<int> select_layers(int n_layers, const LayerSelection& selection) {
  if (n_layers < 1) throw std::invalid_argument("select_layers: n_layers must be >= 1");
  std::set<int> chosen;
  auto strided = [&](int start_one_based, int stride) {
    for (int l = start_one_based; l <= n_layers; l += stride) chosen.insert(l - 1);
    chosen.insert(n_layers - 1);
  };
  switch (selection.kind) {
    case LayerSelection::Kind::kPaperDefault: {
      const int start = (3 * n_layers + 7) / 8 + 1;
      const int stride = std::max(1, static_cast<int>(std::lround(n_layers / 8.0)));
      strided(start, stride);
      break;
    }
    case LayerSelection::Kind::kLastThirdStride: {
      if (selection.stride < 1) throw std::invalid_argument("select_layers: stride must be >= 1");
      strided((n_layers + 2) / 3 + 1, selection.stride);
      break;
    }
    case LayerSelection::Kind::kExplicit:
      for (int l : selection.layers) {
        if (l < 0 || l >= n_layers) {
          throw std::out_of_range("select_layers: layer " + std::to_string(l) + " outside [0, " +
                                  std::to_string(n_layers) + ")");
        }
        chosen.insert(l);
      }
      break;
  }
  return {chosen.begin(), chosen.end()};
}

InfusionHook::InfusionHook(const InfusionParams& params, Tensor modal, int n_heads)
    : params_(params), modal_(std::move(modal)), n_heads_(n_heads) {
  if (!modal_.defined() || modal_.rank() != 1 ||
      modal_.dim(0) != static_cast<std::size_t>(params.config().d_modal)) {
    throw ShapeError("InfusionHook: modal embedding must be (" + std::to_string(params.config().d_modal) +
                     "), got " + (modal_.defined() ? shape_str(modal_.shape()) : "undefined"));
  }
}

std::optional<KVOverride> InfusionHook::on_attention(const LayerTap& tap) const {
  const InfusionLayer* layer = params_.find(tap.layer_index);
  const MiTConfig& cfg = params_.config();
  if (layer == nullptr || (!cfg.enable_kv && !cfg.enable_rescale)) return std::nullopt;
  Tensor k = tap.k;
  Tensor v = tap.v;
  Tensor proxy;
  if (cfg.enable_kv) {
    const Tensor mul_v = affine_project(modal_, layer->w_d_v, layer->b_d_v);
    v = infuse_kv(tap.v, mul_v, affine_project(modal_, layer->w_a_v, layer->b_a_v));
    k = infuse_kv(tap.k, affine_project(modal_, layer->w_d_k, layer->b_d_k),
                  affine_project(modal_, layer->w_a_k, layer->b_a_k));
    if (cfg.enable_rescale) proxy = reshape(mul_v, {tap.v.dim(1), tap.v.dim(2)});
  }
  if (cfg.enable_rescale) {
    RescaleResult r = head_rescale(v, k, tap.v, proxy, layer->l_gate, cfg.pooling);
    k = r.k;
    v = r.v;
  }
  return KVOverride{k, v};
}

std::optional<Tensor> InfusionHook::on_feed_forward(int layer_index, const Tensor& ff_hidden) const {
  const InfusionLayer* layer = params_.find(layer_index);
  if (layer == nullptr || !params_.config().enable_ff) return std::nullopt;
  return infuse_ff(ff_hidden, modal_, layer->w_f, layer->b_f);
}

}  // namespace mit
