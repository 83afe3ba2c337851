#include "mit/transformer.h"

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "mit/ops.h"
#include "mit/rng.h"

namespace mit {

std::string to_string(AttnScaleMode mode) {
  return mode == AttnScaleMode::kPerHead ? "per_head" : "paper_literal";
}

AttnScaleMode attn_scale_mode_from_string(const std::string& s) {
  if (s == "per_head") return AttnScaleMode::kPerHead;
  if (s == "paper_literal") return AttnScaleMode::kPaperLiteral;
  throw std::invalid_argument("unknown attn_scale_mode '" + s + "' (expected per_head or paper_literal)");
}

void LMConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab < 1 || max_seq < 1) {
    throw std::invalid_argument("LMConfig: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("LMConfig: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                std::to_string(n_heads));
  }
}

int LMConfig::default_ff(int d_model) {
  return static_cast<int>(std::lround(static_cast<double>(d_model) * 11008.0 / 4096.0));
}

LMConfig LMConfig::toy() { return LMConfig{}; }

LMConfig LMConfig::llama7b() {
  LMConfig c;
  c.n_layers = 32;
  c.d_model = 4096;
  c.n_heads = 32;
  c.d_ff = 11008;
  c.vocab = 32000;
  c.max_seq = 2048;
  c.learned_positions = false;
  return c;
}

std::optional<KVOverride> IdentityHook::on_attention(const LayerTap& tap) const {
  return KVOverride{tap.k, tap.v};
}

std::optional<Tensor> IdentityHook::on_feed_forward(int, const Tensor& ff_hidden) const { return ff_hidden; }

Tensor attention_probs(const Tensor& q, const Tensor& k, double scale, bool causal) {
  if (q.rank() != 3 || k.shape() != q.shape()) {
    throw ShapeError("attention: expected equal (L, heads, head_dim) shapes, got q " + shape_str(q.shape()) +
                     " k " + shape_str(k.shape()));
  }
  const std::size_t len = q.dim(0);
  const Tensor qh = permute(q, {1, 0, 2});  // (h, L, hd)
  const Tensor kt = permute(k, {1, 2, 0});  // (h, hd, L)
  Tensor scores = mul_scalar(matmul(qh, kt), 1.0 / scale);
  if (causal) {
    std::vector<double> mask_data(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = i + 1; j < len; ++j) mask_data[i * len + j] = 1.0;
    }
    const Tensor mask = Tensor::from({len, len}, std::move(mask_data));
    scores = masked_fill(scores, mask, -std::numeric_limits<double>::infinity());
  }
  AllocationTag tag("attn_map");
  return softmax(scores, -1);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale, bool causal) {
  if (v.shape() != q.shape()) {
    throw ShapeError("attention: expected equal (L, heads, head_dim) shapes, got q " + shape_str(q.shape()) +
                     " v " + shape_str(v.shape()));
  }
  const Tensor probs = attention_probs(q, k, scale, causal);
  const Tensor out = matmul(probs, permute(v, {1, 0, 2}));  // (h, L, hd)
  return reshape(permute(out, {1, 0, 2}), {q.dim(0), q.dim(1) * q.dim(2)});
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  return attention(q, k, v, scale, true);
}

MicroLM MicroLM::random(const LMConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sff = 1.0 / std::sqrt(static_cast<double>(ff));
  MicroLM m;
  m.config_ = config;
  m.tok_emb_ = random_normal({static_cast<std::size_t>(config.vocab), d}, 1.0, rng);
  if (config.learned_positions) m.pos_emb_ = random_normal({static_cast<std::size_t>(config.max_seq), d}, 0.5, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm = Tensor::ones({d});
    w.wq = random_normal({d, d}, sd, rng);
    w.wk = random_normal({d, d}, sd, rng);
    w.wv = random_normal({d, d}, sd, rng);
    w.wo = random_normal({d, d}, sd, rng);
    w.ffn_norm = Tensor::ones({d});
    w.w_gate = random_normal({d, ff}, sd, rng);
    w.w_up = random_normal({d, ff}, sd, rng);
    w.w_down = random_normal({ff, d}, sff, rng);
    m.layers_.push_back(std::move(w));
  }
  m.final_norm_ = Tensor::ones({d});
  m.lm_head_ = random_normal({d, static_cast<std::size_t>(config.vocab)}, sd, rng);
  return m;
}

double MicroLM::attention_scale() const {
  const int dim = config_.scale_mode == AttnScaleMode::kPerHead ? config_.head_dim() : config_.d_model;
  return std::sqrt(static_cast<double>(dim));
}

Tensor MicroLM::embed(std::span<const int> tokens, const ForwardOptions& options) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  const auto vocab = static_cast<std::size_t>(config_.vocab);
  const std::size_t extra = options.extra_embeddings.defined() ? options.extra_embeddings.dim(0) : 0;
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab + extra) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " out of range [0, " +
                              std::to_string(vocab + extra) + ")");
    }
    ids.push_back(static_cast<std::size_t>(t));
  }
  const Tensor table = extra == 0 ? tok_emb_ : concat({tok_emb_, options.extra_embeddings}, 0);
  Tensor x = index_select(table, 0, ids);
  if (options.prefix.defined()) {
    if (options.prefix.rank() != 2 || options.prefix.dim(1) != static_cast<std::size_t>(config_.d_model)) {
      throw ShapeError("forward: prefix rows must be (P, " + std::to_string(config_.d_model) + "), got " +
                       shape_str(options.prefix.shape()));
    }
    x = concat({options.prefix, x}, 0);
  }
  const std::size_t len = x.dim(0);
  if (len > static_cast<std::size_t>(config_.max_seq)) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(len) + " exceeds max_seq " +
                                std::to_string(config_.max_seq));
  }
  if (config_.learned_positions) x = add(x, slice(pos_emb_, 0, 0, len));
  return x;
}

Tensor MicroLM::run_layers(Tensor x, int begin, int end, const LayerHook* hook) const {
  if (begin < 0 || end > config_.n_layers || begin > end) {
    throw std::out_of_range("run_layers: invalid layer range [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ")");
  }
  const std::size_t len = x.dim(0);
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const auto hd = static_cast<std::size_t>(config_.head_dim());
  const double scale = attention_scale();
  for (int l = begin; l < end; ++l) {
    const LayerWeights& w = layers_[static_cast<std::size_t>(l)];
    const Tensor h = rms_norm(x, w.attn_norm);
    LayerTap tap;
    tap.layer_index = l;
    tap.q = reshape(matmul(h, w.wq), {len, heads, hd});
    tap.k = reshape(matmul(h, w.wk), {len, heads, hd});
    tap.v = reshape(matmul(h, w.wv), {len, heads, hd});
    Tensor k = tap.k;
    Tensor v = tap.v;
    if (hook != nullptr) {
      if (auto kv = hook->on_attention(tap)) {
        if (!kv->k.defined() || !kv->v.defined() || kv->k.shape() != tap.k.shape() ||
            kv->v.shape() != tap.v.shape()) {
          throw ShapeError("layer " + std::to_string(l) + " hook: K/V must keep shape " +
                           shape_str(tap.k.shape()) + ", got K " +
                           (kv->k.defined() ? shape_str(kv->k.shape()) : "undefined") + " V " +
                           (kv->v.defined() ? shape_str(kv->v.shape()) : "undefined"));
        }
        k = kv->k;
        v = kv->v;
      }
    }
    x = add(x, matmul(causal_attention(tap.q, k, v, scale), w.wo));
    const Tensor h2 = rms_norm(x, w.ffn_norm);
    Tensor ff = mul(silu(matmul(h2, w.w_gate)), matmul(h2, w.w_up));
    if (hook != nullptr) {
      if (auto replaced = hook->on_feed_forward(l, ff)) {
        if (!replaced->defined() || replaced->shape() != ff.shape()) {
          throw ShapeError("layer " + std::to_string(l) + " hook: feed-forward activation must keep shape " +
                           shape_str(ff.shape()) + ", got " +
                           (replaced->defined() ? shape_str(replaced->shape()) : "undefined"));
        }
        ff = *replaced;
      }
    }
    x = add(x, matmul(ff, w.w_down));
  }
  return x;
}

ForwardResult MicroLM::finish(const Tensor& x, bool compute_logits) const {
  ForwardResult r;
  r.hidden = rms_norm(x, final_norm_);
  if (compute_logits) r.logits = matmul(r.hidden, lm_head_);
  return r;
}

ForwardResult MicroLM::forward(std::span<const int> tokens, const LayerHook* hook,
                               const ForwardOptions& options) const {
  Tensor x = embed(tokens, options);
  x = run_layers(std::move(x), 0, config_.n_layers, hook);
  return finish(x, options.compute_logits);
}

std::vector<NamedTensor> MicroLM::named_weights() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", tok_emb_});
  if (pos_emb_.defined()) out.push_back({"pos_emb", pos_emb_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const LayerWeights& w = layers_[l];
    out.push_back({p + "attn_norm", w.attn_norm});
    out.push_back({p + "wq", w.wq});
    out.push_back({p + "wk", w.wk});
    out.push_back({p + "wv", w.wv});
    out.push_back({p + "wo", w.wo});
    out.push_back({p + "ffn_norm", w.ffn_norm});
    out.push_back({p + "w_gate", w.w_gate});
    out.push_back({p + "w_up", w.w_up});
    out.push_back({p + "w_down", w.w_down});
  }
  out.push_back({"final_norm", final_norm_});
  out.push_back({"lm_head", lm_head_});
  return out;
}

MicroLM MicroLM::from_weights(const LMConfig& config, const std::vector<NamedTensor>& weights) {
  MicroLM m = random(config, 0);
  std::map<std::string, Tensor> by_name;
  for (const auto& w : weights) by_name[w.name] = w.tensor;
  auto take = [&](const std::string& name, Tensor& slot) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("MicroLM: missing weight " + name);
    if (it->second.shape() != slot.shape()) {
      throw ShapeError("MicroLM: weight " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(slot.shape()));
    }
    slot = it->second.clone(false);
  };
  take("tok_emb", m.tok_emb_);
  if (m.pos_emb_.defined()) take("pos_emb", m.pos_emb_);
  for (std::size_t l = 0; l < m.layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights& w = m.layers_[l];
    take(p + "attn_norm", w.attn_norm);
    take(p + "wq", w.wq);
    take(p + "wk", w.wk);
    take(p + "wv", w.wv);
    take(p + "wo", w.wo);
    take(p + "ffn_norm", w.ffn_norm);
    take(p + "w_gate", w.w_gate);
    take(p + "w_up", w.w_up);
    take(p + "w_down", w.w_down);
  }
  take("final_norm", m.final_norm_);
  take("lm_head", m.lm_head_);
  return m;
}

Tensor last_token_embedding(const Tensor& hidden) {
  if (!hidden.defined() || hidden.rank() != 2) {
    throw ShapeError("last_token_embedding: expected (L, d) hidden states");
  }
  const std::size_t len = hidden.dim(0);
  return reshape(slice(hidden, 0, len - 1, 1), {hidden.dim(1)});
}

ParamCount count_params(std::span<const NamedTensor> tensors) {
  ParamCount c;
  for (const auto& t : tensors) {
    if (!t.tensor.defined()) continue;
    c.total += t.tensor.numel();
    if (t.tensor.requires_grad()) c.trainable += t.tensor.numel();
  }
  return c;
}

ParamCount count_params(const MicroLM& model) {
  const auto w = model.named_weights();
  return count_params(w);
}

std::size_t lm_param_count(const LMConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto vocab = static_cast<std::size_t>(c.vocab);
  const std::size_t per_layer = 4 * d * d + 3 * d * ff + 2 * d;
  std::size_t total = vocab * d + static_cast<std::size_t>(c.n_layers) * per_layer + d + d * vocab;
  if (c.learned_positions) total += static_cast<std::size_t>(c.max_seq) * d;
  return total;
}

}  // namespace mit
