#pragma once

// Frozen decoder-only transformer with per-layer intervention points.
//
// Architecture (LLaMA-style, pre-norm):
//   x   = tok_emb[tokens] (+ learned absolute position embedding)
//   per layer:
//     h   = rms_norm(x) * attn_norm
//     Q,K,V = h Wq, h Wk, h Wv            reshaped (L, heads, head_dim)
//     [hook may replace K and V]
//     x  += concat_heads(softmax(mask(Q K^T / s)) V) Wo
//     h2  = rms_norm(x) * ffn_norm
//     H   = silu(h2 Wgate) * (h2 Wup)     (L, d_ff)
//     [hook may replace H]
//     x  += H Wdown
//   hidden = rms_norm(x) * final_norm ; logits = hidden Wlm
//
// RMS normalization uses eps = 1e-6. Attention is always causal; the scale
// s is sqrt(head_dim) by default or sqrt(d_model) in paper_literal mode.
// Norm layers see raw activations; hooks only touch K, V and H.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mit/tensor.h"

namespace mit {

enum class AttnScaleMode { kPerHead, kPaperLiteral };

std::string to_string(AttnScaleMode mode);
AttnScaleMode attn_scale_mode_from_string(const std::string& s);

struct LMConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 172;
  int vocab = 256;
  int max_seq = 128;
  AttnScaleMode scale_mode = AttnScaleMode::kPerHead;
  // Learned absolute positions. The LLaMA preset turns this off (rotary
  // positions carry no parameters) so parameter totals line up.
  bool learned_positions = true;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  // d_ff = round(d_model * 11008 / 4096).
  static int default_ff(int d_model);
  static LMConfig toy();
  static LMConfig llama7b();
};

// Read-only view of one layer's projections handed to a hook.
struct LayerTap {
  int layer_index = 0;
  Tensor q;  // (L, heads, head_dim)
  Tensor k;
  Tensor v;
};

struct KVOverride {
  Tensor k;
  Tensor v;
};

class LayerHook {
 public:
  virtual ~LayerHook() = default;
  // Replacement K/V for the layer, or nullopt to keep the raw projections.
  virtual std::optional<KVOverride> on_attention(const LayerTap& tap) const = 0;
  // Replacement feed-forward activation (L, d_ff), or nullopt.
  virtual std::optional<Tensor> on_feed_forward(int layer_index, const Tensor& ff_hidden) const = 0;
};

// Passes every activation through unchanged (returns copies of the inputs).
class IdentityHook final : public LayerHook {
 public:
  std::optional<KVOverride> on_attention(const LayerTap& tap) const override;
  std::optional<Tensor> on_feed_forward(int layer_index, const Tensor& ff_hidden) const override;
};

struct LayerWeights {
  Tensor attn_norm;  // (d)
  Tensor wq, wk, wv, wo;  // (d, d)
  Tensor ffn_norm;  // (d)
  Tensor w_gate, w_up;  // (d, d_ff)
  Tensor w_down;  // (d_ff, d)
};

struct ForwardResult {
  Tensor hidden;  // (L_total, d) final-normed
  Tensor logits;  // (L_total, vocab); undefined when logits were skipped
};

struct ForwardOptions {
  // Rows prepended after token embedding and before positions, used to
  // model prefix-token conditioning. (P, d).
  Tensor prefix;
  // Additional embedding rows addressed by token ids >= vocab, in order.
  Tensor extra_embeddings;
  bool compute_logits = true;
};

// Per head softmax(mask(Q K^T / scale)); q, k: (L, heads, head_dim).
// Returns (heads, L, L). The result is allocated under the "attn_map" tag.
Tensor attention_probs(const Tensor& q, const Tensor& k, double scale, bool causal);

// Per head attention_probs(q, k) V, heads concatenated: (L, heads * head_dim).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale, bool causal);
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

class MicroLM {
 public:
  // Random N(0, 1/fan_in) projections, N(0, 1) embeddings, unit norms; all
  // frozen.
  static MicroLM random(const LMConfig& config, std::uint64_t seed);

  const LMConfig& config() const { return config_; }
  double attention_scale() const;

  ForwardResult forward(std::span<const int> tokens, const LayerHook* hook = nullptr,
                        const ForwardOptions& options = {}) const;

  // Building blocks of forward, exposed so callers can cache a frozen
  // prefix of layers.
  Tensor embed(std::span<const int> tokens, const ForwardOptions& options = {}) const;
  Tensor run_layers(Tensor x, int begin, int end, const LayerHook* hook = nullptr) const;
  ForwardResult finish(const Tensor& x, bool compute_logits = true) const;

  // Every weight with a stable dotted name ("layer3.wq", "tok_emb", ...).
  std::vector<NamedTensor> named_weights() const;

  const LayerWeights& layer(int i) const { return layers_.at(static_cast<std::size_t>(i)); }

  // Rebuilds a model from named weights (checkpoint load); names and shapes
  // must match named_weights() of a model with the same config.
  static MicroLM from_weights(const LMConfig& config, const std::vector<NamedTensor>& weights);

 private:
  LMConfig config_;
  Tensor tok_emb_;
  Tensor pos_emb_;
  std::vector<LayerWeights> layers_;
  Tensor final_norm_;
  Tensor lm_head_;
};

// Row L-1 of an (L, d) hidden matrix as a (d) tensor.
Tensor last_token_embedding(const Tensor& hidden);

struct ParamCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total); }
};

// Enumerates scalar entries; trainable = entries of tensors with requires_grad.
ParamCount count_params(std::span<const NamedTensor> tensors);
ParamCount count_params(const MicroLM& model);

// Closed-form parameter count of a MicroLM with the given config.
std::size_t lm_param_count(const LMConfig& config);

}  // namespace mit
