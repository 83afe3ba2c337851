#pragma once

// Analytic cost counters and allocation measurements contrasting infusion
// (no extra tokens) with prefix conditioning (P extra tokens).
//
// FLOP convention: 2mnk per (m x k)(k x n) matmul, 1 per element-wise output
// (reductions count one per input element), 5 per softmax element; causal
// masking and data movement (reshape, permute, slicing) are free.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mit/infusion.h"
#include "mit/tensor.h"
#include "mit/transformer.h"

namespace mit {

enum class CostMode { kBase, kMit, kPrefix };

std::string to_string(CostMode mode);

// n_layers * h * T^2 with T = L (base, mit) or L + P (prefix).
std::uint64_t attn_map_elements(const LMConfig& lm, std::uint64_t l_tok, CostMode mode, std::uint64_t prefix = 0);

struct OpCost {
  std::string name;
  std::uint64_t flops = 0;
};

// Every arithmetic op of one forward pass over T tokens, with its FLOPs.
std::vector<OpCost> enumerate_forward_ops(const LMConfig& lm, std::uint64_t tokens, bool include_head = true);

// Closed form of one transformer layer over T tokens:
//   8Td^2 + 6Tdf + 4dT^2 + 6hT^2 + 10Td + 2Tf + 4T
std::uint64_t layer_flops(const LMConfig& lm, std::uint64_t tokens);
// All layers + final norm + LM head.
std::uint64_t forward_flops(const LMConfig& lm, std::uint64_t tokens, bool include_head = true);

struct Overhead {
  std::uint64_t token_independent = 0;
  std::uint64_t token_dependent = 0;
  std::uint64_t total() const { return token_independent + token_dependent; }
};

// Extra FLOPs of the infusion path over the frozen base.
Overhead mit_overhead_flops(const LMConfig& lm, const MiTConfig& mit, std::uint64_t l_tok);
// forward_flops(L + P) - forward_flops(L); everything is token dependent.
Overhead prefix_overhead_flops(const LMConfig& lm, std::uint64_t l_tok, std::uint64_t prefix);

// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

// Floats allocated by one forward pass (every op output, mirroring the
// tensor engine). `mit` may be null for base/prefix.
struct ActivationCount {
  std::uint64_t total = 0;
  std::uint64_t attn_map = 0;
};
ActivationCount analytic_activation_floats(const LMConfig& lm, const MiTConfig* mit, std::uint64_t l_tok,
                                           std::uint64_t prefix, bool include_logits = true);

struct MeasuredActivation {
  std::uint64_t allocated_floats = 0;
  std::uint64_t attn_map_floats = 0;
  std::uint64_t peak_live_floats = 0;
};

// Runs `trials` forward passes under an AllocationProbe and returns the
// per-trial counts (throws if trials disagree). mode kMit needs `params`.
MeasuredActivation measure_peak_activation(const MicroLM& model, std::uint64_t l_tok, CostMode mode,
                                           std::uint64_t prefix, int trials, const InfusionParams* params = nullptr);

struct ScaleEstimate {
  std::uint64_t tokens = 0;
  std::uint64_t layer_flops = 0;     // all transformer layers
  std::uint64_t head_flops = 0;      // final norm + LM head
  double layer_tflops = 0.0;
  double reference_tflops = 0.47;
  std::string convention;
};

// Forward-pass FLOPs of the 7B preset at `tokens` under our convention.
ScaleEstimate scale_estimate(std::uint64_t tokens = 512, const LMConfig& lm = LMConfig::llama7b());

}  // namespace mit
