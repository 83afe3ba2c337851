#pragma once

// Multimodal infusion: conditions a frozen MicroLM on one global modal
// embedding I (d_I) without adding tokens.
//
// For each infused layer:
//   I_mul^v = I W_d_v + b_d_v,  I_add^v = I W_a_v + b_a_v     (and K twins)
//   V' = V * I_mul^v + I_add^v,  K' = K * I_mul^k + I_add^k     (per head view)
//   c[t,j] = cos(V[t,j,:], I_mul^v[j,:])
//   gate = sigmoid(L_gate + c);  V_r = V' * gate,  K_r = K' * gate
//   S = causal softmax attention over (Q, K_r, V_r), then the frozen Wo
//   H' = H * (I W_f + b_f)                                      (feed-forward)
//
// Initialization makes every multiplier exactly 1 and every adder exactly
// 0, so with rescaling disabled the infused model reproduces the frozen
// base bit-for-bit; the gate starts at sigmoid(gate_init +- 1).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mit/tensor.h"
#include "mit/transformer.h"

namespace mit {

enum class RescalePooling { kPerToken, kMeanOverTokens };

std::string to_string(RescalePooling pooling);
RescalePooling rescale_pooling_from_string(const std::string& s);

struct MiTConfig {
  std::vector<int> infused_layers;  // sorted, 0-indexed
  bool enable_kv = true;
  bool enable_ff = true;
  bool enable_rescale = true;
  double gate_init = 10.0;
  RescalePooling pooling = RescalePooling::kPerToken;
  int d_modal = 32;

  bool any_enabled() const { return !infused_layers.empty() && (enable_kv || enable_ff || enable_rescale); }
  void validate(const LMConfig& lm) const;
};

struct InfusionLayer {
  int layer = 0;
  // Present when enable_kv.
  Tensor w_d_k, b_d_k, w_a_k, b_a_k;
  Tensor w_d_v, b_d_v, w_a_v, b_a_v;
  // Present when enable_ff.
  Tensor w_f, b_f;
  // Present when enable_rescale.
  Tensor l_gate;
};

struct NamedShape {
  std::string name;
  Shape shape;
};

// Names and shapes of every infusion tensor, without allocating them.
// Names follow `infusion.layer{l}.{w_d_k|b_d_k|...|w_f|b_f|l_gate}`.
std::vector<NamedShape> infusion_param_shapes(const MiTConfig& config, const LMConfig& lm);

// Closed form: per layer kv*4*(d_I*d + d) + ff*(d_I*d_ff + d_ff) + rescale*h.
std::size_t infusion_param_count(const MiTConfig& config, const LMConfig& lm);

class InfusionParams {
 public:
  InfusionParams() = default;

  // W = 0, multiplicative biases = 1, additive biases = 0, b_f = 1,
  // L_gate = gate_init. All tensors trainable. The seed is unused by the
  // deterministic init and kept for interface stability.
  static InfusionParams init(const MiTConfig& config, const LMConfig& lm, std::uint64_t seed = 0);

  // Rebuilds parameters from checkpoint tensors (names must match).
  static InfusionParams from_tensors(const MiTConfig& config, const LMConfig& lm,
                                     const std::vector<NamedTensor>& tensors);

  const MiTConfig& config() const { return config_; }
  const std::vector<InfusionLayer>& layers() const { return layers_; }
  const InfusionLayer* find(int layer) const;
  std::vector<NamedTensor> named_tensors() const;

  // Adds N(0, scale^2) noise to every tensor; used to move away from the
  // identity point in tests and gradient checks.
  void perturb(double scale, std::uint64_t seed);

 private:
  MiTConfig config_;
  int n_heads_ = 1;
  std::vector<InfusionLayer> layers_;
};

// I W + b. I: (d_I); W: (d_I, d_out); b: (d_out).
Tensor affine_project(const Tensor& modal, const Tensor& weight, const Tensor& bias);

// out[t,j,c] = x[t,j,c] * mul[j*hd + c] + add[j*hd + c]. x: (L, h, hd).
Tensor infuse_kv(const Tensor& x, const Tensor& multiplier, const Tensor& adder);

struct RescaleResult {
  Tensor v;
  Tensor k;
  Tensor gate;  // (L, h) per token or (1, h) pooled
};

// Head-level adaptive rescaling. `proxy` is (h, hd) or undefined (cosine
// taken as 0 everywhere).
RescaleResult head_rescale(const Tensor& v_infused, const Tensor& k_infused, const Tensor& v_raw,
                           const Tensor& proxy, const Tensor& l_gate, RescalePooling pooling);

// Causal multi-head attention over the rescaled K/V followed by the frozen
// output projection. Returns (L, d).
Tensor infused_attention(const Tensor& q, const Tensor& k_r, const Tensor& v_r, const Tensor& wo, double scale);

// H * (I W_f + b_f), broadcast over tokens. H: (L, d_ff).
Tensor infuse_ff(const Tensor& hidden, const Tensor& modal, const Tensor& w_f, const Tensor& b_f);

struct LayerSelection {
  enum class Kind { kPaperDefault, kLastThirdStride, kExplicit };
  Kind kind = Kind::kPaperDefault;
  int stride = 2;
  std::vector<int> layers;  // explicit, 0-indexed

  static LayerSelection paper_default() { return {}; }
  static LayerSelection last_third_stride(int s) { return {Kind::kLastThirdStride, s, {}}; }
  static LayerSelection explicit_list(std::vector<int> l) { return {Kind::kExplicit, 0, std::move(l)}; }
};

// 0-indexed infusion layers.
//  paper_default:        1-indexed start ceil(3n/8)+1, stride max(1, round(n/8)),
//                        plus the final layer; 32 layers -> {12,16,20,24,28,31}.
//  last_third_stride(s): 1-indexed start ceil(n/3)+1, every s-th layer, plus
//                        the final layer; 8 layers, s=2 -> {3,5,7}.
std::vector<int> select_layers(int n_layers, const LayerSelection& selection);

// Hook that infuses one modal embedding into the configured layers.
class InfusionHook final : public LayerHook {
 public:
  InfusionHook(const InfusionParams& params, Tensor modal, int n_heads);

  std::optional<KVOverride> on_attention(const LayerTap& tap) const override;
  std::optional<Tensor> on_feed_forward(int layer_index, const Tensor& ff_hidden) const override;

 private:
  const InfusionParams& params_;
  Tensor modal_;
  int n_heads_;
};

}  // namespace mit
