#include "mit/cost.h"

#include <cmath>
#include <stdexcept>

#include "mit/ops.h"

namespace mit {

std::string to_string(CostMode mode) {
  switch (mode) {
    case CostMode::kBase:
      return "base";
    case CostMode::kMit:
      return "mit";
    case CostMode::kPrefix:
      return "prefix";
  }
  return "?";
}

std::uint64_t attn_map_elements(const LMConfig& lm, std::uint64_t l_tok, CostMode mode, std::uint64_t prefix) {
  const std::uint64_t t = l_tok + (mode == CostMode::kPrefix ? prefix : 0);
  return static_cast<std::uint64_t>(lm.n_layers) * static_cast<std::uint64_t>(lm.n_heads) * t * t;
}

namespace {

struct Dims {
  std::uint64_t d, f, h, hd, v, n;
};

Dims dims(const LMConfig& lm) {
  return {static_cast<std::uint64_t>(lm.d_model), static_cast<std::uint64_t>(lm.d_ff),
          static_cast<std::uint64_t>(lm.n_heads), static_cast<std::uint64_t>(lm.head_dim()),
          static_cast<std::uint64_t>(lm.vocab),   static_cast<std::uint64_t>(lm.n_layers)};
}

std::uint64_t matmul_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; }

void add_norm(std::vector<OpCost>& ops, const std::string& p, std::uint64_t t, std::uint64_t d) {
  ops.push_back({p + ".square", t * d});
  ops.push_back({p + ".mean", t * d});
  ops.push_back({p + ".add_eps", t});
  ops.push_back({p + ".sqrt", t});
  ops.push_back({p + ".div", t * d});
  ops.push_back({p + ".scale", t * d});
}

}  // namespace

std::vector<OpCost> enumerate_forward_ops(const LMConfig& lm, std::uint64_t t, bool include_head) {
  const Dims k = dims(lm);
  std::vector<OpCost> ops;
  if (lm.learned_positions) ops.push_back({"embed.add_pos", t * k.d});
  for (std::uint64_t l = 0; l < k.n; ++l) {
    const std::string p = "layer" + std::to_string(l);
    add_norm(ops, p + ".attn_norm", t, k.d);
    ops.push_back({p + ".q", matmul_flops(t, k.d, k.d)});
    ops.push_back({p + ".k", matmul_flops(t, k.d, k.d)});
    ops.push_back({p + ".v", matmul_flops(t, k.d, k.d)});
    ops.push_back({p + ".scores", k.h * matmul_flops(t, k.hd, t)});
    ops.push_back({p + ".scale", k.h * t * t});
    ops.push_back({p + ".softmax", 5 * k.h * t * t});
    ops.push_back({p + ".attn_v", k.h * matmul_flops(t, t, k.hd)});
    ops.push_back({p + ".o", matmul_flops(t, k.d, k.d)});
    ops.push_back({p + ".resid1", t * k.d});
    add_norm(ops, p + ".ffn_norm", t, k.d);
    ops.push_back({p + ".gate", matmul_flops(t, k.d, k.f)});
    ops.push_back({p + ".silu", t * k.f});
    ops.push_back({p + ".up", matmul_flops(t, k.d, k.f)});
    ops.push_back({p + ".gate_mul", t * k.f});
    ops.push_back({p + ".down", matmul_flops(t, k.f, k.d)});
    ops.push_back({p + ".resid2", t * k.d});
  }
  if (include_head) {
    add_norm(ops, "final_norm", t, k.d);
    ops.push_back({"lm_head", matmul_flops(t, k.d, k.v)});
  }
  return ops;
}

std::uint64_t layer_flops(const LMConfig& lm, std::uint64_t t) {
  const Dims k = dims(lm);
  return 8 * t * k.d * k.d + 6 * t * k.d * k.f + 4 * k.d * t * t + 6 * k.h * t * t + 10 * t * k.d + 2 * t * k.f +
         4 * t;
}

std::uint64_t forward_flops(const LMConfig& lm, std::uint64_t t, bool include_head) {
  const Dims k = dims(lm);
  std::uint64_t total = k.n * layer_flops(lm, t) + (lm.learned_positions ? t * k.d : 0);
  if (include_head) total += 4 * t * k.d + 2 * t + 2 * t * k.d * k.v;
  return total;
}

Overhead mit_overhead_flops(const LMConfig& lm, const MiTConfig& mit, std::uint64_t t) {
  const Dims k = dims(lm);
  const auto di = static_cast<std::uint64_t>(mit.d_modal);
  Overhead per_layer;
  if (mit.enable_kv) {
    per_layer.token_independent += 4 * (matmul_flops(1, di, k.d) + k.d);
    per_layer.token_dependent += 2 * (2 * t * k.d);
  }
  if (mit.enable_rescale) {
    if (mit.enable_kv) {
      per_layer.token_independent += 2 * k.d + k.h;      // proxy norms
      per_layer.token_dependent += t * (4 * k.d + 3 * k.h);  // cosine per token and head
      if (mit.pooling == RescalePooling::kPerToken) {
        per_layer.token_dependent += 2 * t * k.h;  // shift + sigmoid
      } else {
        per_layer.token_dependent += t * k.h;  // mean over tokens
        per_layer.token_independent += 2 * k.h;
      }
    } else {
      per_layer.token_independent += k.h;  // sigmoid of the gate vector
    }
    per_layer.token_dependent += 2 * t * k.d;  // gate applied to K and V
  }
  if (mit.enable_ff) {
    per_layer.token_independent += matmul_flops(1, di, k.f) + k.f;
    per_layer.token_dependent += t * k.f;
  }
  const auto layers = static_cast<std::uint64_t>(mit.infused_layers.size());
  return {per_layer.token_independent * layers, per_layer.token_dependent * layers};
}

Overhead prefix_overhead_flops(const LMConfig& lm, std::uint64_t l_tok, std::uint64_t prefix) {
  return {0, forward_flops(lm, l_tok + prefix) - forward_flops(lm, l_tok)};
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw std::invalid_argument("loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

ActivationCount analytic_activation_floats(const LMConfig& lm, const MiTConfig* mit, std::uint64_t l_tok,
                                           std::uint64_t prefix, bool include_logits) {
  const Dims k = dims(lm);
  const std::uint64_t t = l_tok + prefix;
  ActivationCount c;
  // Embedding: gather, optional prefix concat, positions slice + add.
  c.total += l_tok * k.d;
  if (prefix > 0) c.total += t * k.d;
  if (lm.learned_positions) c.total += 2 * t * k.d;
  const std::uint64_t norm = 3 * t * k.d + 4 * t;
  // Per layer: two norms, Q/K/V (+ reshapes), attention internals, output
  // projection and residuals, gated feed-forward.
  const std::uint64_t attention = 6 * t * k.d + 4 * k.h * t * t + t * t;
  const std::uint64_t layer = 2 * norm + 6 * t * k.d + attention + 2 * t * k.d + 4 * t * k.f + 2 * t * k.d;
  c.total += k.n * layer;
  c.attn_map = k.n * k.h * t * t;
  if (mit != nullptr) {
    const auto di = static_cast<std::uint64_t>(mit->d_modal);
    std::uint64_t extra = 0;
    const std::uint64_t project_d = di + 3 * k.d;
    if (mit->enable_kv) extra += 4 * project_d + 2 * (2 * t * k.d + 2 * k.d);
    if (mit->enable_rescale) {
      if (mit->enable_kv) {
        extra += k.d + t * k.d + t * k.h;  // proxy reshape, broadcast, cosine
        if (mit->pooling == RescalePooling::kMeanOverTokens) {
          extra += 5 * k.h;  // mean, shift, sigmoid, reshape
        } else {
          extra += 3 * t * k.h;  // shift, sigmoid, reshape
        }
      } else {
        extra += 3 * k.h;  // reshape, sigmoid, reshape
      }
      extra += 2 * t * k.d;
    }
    if (mit->enable_ff) extra += di + 3 * k.f + t * k.f;
    c.total += extra * static_cast<std::uint64_t>(mit->infused_layers.size());
  }
  c.total += norm;
  if (include_logits) c.total += t * k.v;
  return c;
}

MeasuredActivation measure_peak_activation(const MicroLM& model, std::uint64_t l_tok, CostMode mode,
                                           std::uint64_t prefix, int trials, const InfusionParams* params) {
  if (trials < 1) throw std::invalid_argument("measure_peak_activation: trials must be >= 1");
  if (mode == CostMode::kMit && params == nullptr) {
    throw std::invalid_argument("measure_peak_activation: mit mode needs infusion parameters");
  }
  const LMConfig& lm = model.config();
  std::vector<int> tokens(l_tok);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>((7 * i + 3) % static_cast<std::size_t>(lm.vocab));
  ForwardOptions opts;
  if (mode == CostMode::kPrefix && prefix > 0) opts.prefix = Tensor::zeros({prefix, static_cast<std::size_t>(lm.d_model)});
  Tensor modal;
  if (mode == CostMode::kMit) modal = Tensor::zeros({static_cast<std::size_t>(params->config().d_modal)});
  MeasuredActivation first;
  for (int trial = 0; trial < trials; ++trial) {
    NoGradGuard no_grad;
    AllocationProbe probe;
    {
      if (mode == CostMode::kMit) {
        const InfusionHook hook(*params, modal, lm.n_heads);
        model.forward(tokens, &hook, opts);
      } else {
        model.forward(tokens, nullptr, opts);
      }
    }
    const AllocationStats& s = probe.stats();
    MeasuredActivation m;
    m.allocated_floats = s.allocated_floats;
    auto it = s.by_tag.find("attn_map");
    m.attn_map_floats = it == s.by_tag.end() ? 0 : it->second;
    m.peak_live_floats = s.peak_live_floats;
    if (trial == 0) {
      first = m;
    } else if (m.allocated_floats != first.allocated_floats || m.attn_map_floats != first.attn_map_floats ||
               m.peak_live_floats != first.peak_live_floats) {
      throw std::runtime_error("measure_peak_activation: allocation counts differ between trials");
    }
  }
  return first;
}

ScaleEstimate scale_estimate(std::uint64_t tokens, const LMConfig& lm) {
  ScaleEstimate r;
  r.tokens = tokens;
  r.layer_flops = static_cast<std::uint64_t>(lm.n_layers) * layer_flops(lm, tokens);
  r.head_flops = forward_flops(lm, tokens, true) - forward_flops(lm, tokens, false);
  r.layer_tflops = static_cast<double>(r.layer_flops) / 1e12;
  r.convention =
      "forward pass only, " + std::to_string(tokens) +
      " tokens, transformer layers only, 2mnk per matmul, 1 FLOP per element-wise output, 5 per softmax element; "
      "the 0.47 TFLOPs reference does not state its convention or sequence length";
  return r;
}

}  // namespace mit
