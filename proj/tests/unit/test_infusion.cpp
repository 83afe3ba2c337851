#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mit/infusion.h"
#include "mit/ops.h"
#include "mit/rng.h"
#include "oracles.h"

using namespace mit;

namespace {

LMConfig tiny() {
  LMConfig c;
  c.n_layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.vocab = 16;
  c.max_seq = 16;
  return c;
}

MiTConfig tiny_mit(RescalePooling pooling = RescalePooling::kPerToken) {
  MiTConfig m;
  m.infused_layers = {1, 2};
  m.d_modal = 5;
  m.pooling = pooling;
  return m;
}

}  // namespace

TEST(AffineProject, InitPaths) {
  const Tensor modal = Tensor::from({3}, {0.3, -1.2, 2.0});
  EXPECT_EQ(oracle::values(affine_project(modal, Tensor::zeros({3, 4}), Tensor::zeros({4}))), oracle::Vec(4, 0.0));
  EXPECT_EQ(oracle::values(affine_project(modal, Tensor::zeros({3, 4}), Tensor::ones({4}))), oracle::Vec(4, 1.0));
}

TEST(AffineProject, MatchesLoop) {
  SplitMix64 rng(1);
  const Tensor i = oracle::random_tensor({3}, rng);
  const Tensor w = oracle::random_tensor({3, 4}, rng);
  const Tensor b = oracle::random_tensor({4}, rng);
  const auto want = oracle::affine(oracle::values(i), oracle::values(w), oracle::values(b));
  EXPECT_LT(oracle::max_abs_diff(oracle::values(affine_project(i, w, b)), want), 1e-12);
  EXPECT_THROW(affine_project(Tensor::zeros({2}), w, b), ShapeError);
}

TEST(InfuseKV, Examples) {
  SplitMix64 rng(2);
  const Tensor x = oracle::random_tensor({3, 2, 4}, rng);
  EXPECT_EQ(oracle::values(infuse_kv(x, Tensor::ones({8}), Tensor::zeros({8}))), oracle::values(x));

  const Tensor a = oracle::random_tensor({8}, rng);
  const auto out = oracle::values(infuse_kv(Tensor::zeros({3, 2, 4}), Tensor::ones({8}), a));
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out[t * 8 + c], a.data()[c]);
  }

  const Tensor mul = oracle::random_tensor({8}, rng);
  const auto got = oracle::values(infuse_kv(x, mul, a));
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t j = 0; j < 2; ++j) {
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t i = (t * 2 + j) * 4 + c;
        EXPECT_EQ(got[i], x.data()[i] * mul.data()[j * 4 + c] + a.data()[j * 4 + c]);
      }
    }
  }
  EXPECT_THROW(infuse_kv(x, Tensor::ones({7}), Tensor::zeros({8})), ShapeError);
}

TEST(HeadRescale, ParallelAndOrthogonal) {
  const Tensor proxy = Tensor::from({1, 3}, {1, 2, 0});
  const Tensor lg = Tensor::zeros({1});
  const Tensor ones = Tensor::ones({1, 1, 3});
  auto gate_for = [&](const Tensor& v_raw) {
    return head_rescale(ones, ones, v_raw, proxy, lg, RescalePooling::kPerToken).gate.data()[0];
  };
  EXPECT_NEAR(gate_for(Tensor::from({1, 1, 3}, {2, 4, 0})), 0.731059, 1e-6);
  EXPECT_DOUBLE_EQ(gate_for(Tensor::from({1, 1, 3}, {-2, 1, 5})), 0.5);
  EXPECT_DOUBLE_EQ(gate_for(Tensor::zeros({1, 1, 3})), 0.5);
}

TEST(HeadRescale, MatchesScalarLoop) {
  for (auto pooling : {RescalePooling::kPerToken, RescalePooling::kMeanOverTokens}) {
    SplitMix64 rng(3);
    const std::size_t len = 2, heads = 2, hd = 3;
    const Tensor vi = oracle::random_tensor({len, heads, hd}, rng);
    const Tensor ki = oracle::random_tensor({len, heads, hd}, rng);
    const Tensor vr = oracle::random_tensor({len, heads, hd}, rng);
    const Tensor proxy = oracle::random_tensor({heads, hd}, rng);
    const Tensor lg = oracle::random_tensor({heads}, rng);
    const RescaleResult r = head_rescale(vi, ki, vr, proxy, lg, pooling);

    std::vector<double> cosv(len * heads);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t j = 0; j < heads; ++j) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t c = 0; c < hd; ++c) {
          const double a = vr.data()[(t * heads + j) * hd + c];
          const double b = proxy.data()[j * hd + c];
          dot += a * b;
          na += a * a;
          nb += b * b;
        }
        cosv[t * heads + j] = dot / std::sqrt(na * nb);
      }
    }
    if (pooling == RescalePooling::kMeanOverTokens) {
      for (std::size_t j = 0; j < heads; ++j) {
        const double m = (cosv[j] + cosv[heads + j]) / 2.0;
        cosv[j] = cosv[heads + j] = m;
      }
    }
    double err = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t j = 0; j < heads; ++j) {
        const double g = oracle::sigmoid(lg.data()[j] + cosv[t * heads + j]);
        for (std::size_t c = 0; c < hd; ++c) {
          const std::size_t i = (t * heads + j) * hd + c;
          err = std::max(err, std::abs(r.v.data()[i] - vi.data()[i] * g));
          err = std::max(err, std::abs(r.k.data()[i] - ki.data()[i] * g));
        }
      }
    }
    EXPECT_LT(err, 1e-12) << to_string(pooling);
  }
}

TEST(HeadRescale, GateIsMonotoneInLogit) {
  SplitMix64 rng(4);
  const Tensor v = oracle::random_tensor({4, 2, 3}, rng);
  const Tensor proxy = oracle::random_tensor({2, 3}, rng);
  double prev[8];
  for (int step = 0; step < 5; ++step) {
    const double l = -4.0 + 2.0 * step;
    const auto g = oracle::values(head_rescale(v, v, v, proxy, Tensor::full({2}, l), RescalePooling::kPerToken).gate);
    for (std::size_t i = 0; i < g.size(); ++i) {
      EXPECT_GT(g[i], 0.0);
      EXPECT_LT(g[i], 1.0);
      if (step > 0) {
        EXPECT_GT(g[i], prev[i]);
      }
      prev[i] = g[i];
    }
  }
}

TEST(InfusedAttention, SingleTokenReturnsValue) {
  SplitMix64 rng(5);
  const Tensor q = oracle::random_tensor({1, 2, 2}, rng);
  const Tensor k = oracle::random_tensor({1, 2, 2}, rng);
  const Tensor v = oracle::random_tensor({1, 2, 2}, rng);
  Tensor eye = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.0;
  EXPECT_EQ(oracle::values(infused_attention(q, k, v, eye, 1.0)), oracle::values(v));
}

TEST(InfusedAttention, MatchesStraightLine) {
  SplitMix64 rng(6);
  const Tensor q = oracle::random_tensor({3, 2, 4}, rng);
  const Tensor k = oracle::random_tensor({3, 2, 4}, rng);
  const Tensor v = oracle::random_tensor({3, 2, 4}, rng);
  const Tensor wo = oracle::random_tensor({8, 8}, rng);
  const auto att = oracle::causal_attention(oracle::values(q), oracle::values(k), oracle::values(v), 3, 2, 4, 2.0);
  const auto want = oracle::matmul(att, oracle::values(wo), 3, 8, 8);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(infused_attention(q, k, v, wo, 2.0)), want), 1e-10);
}

TEST(InfuseFF, Examples) {
  SplitMix64 rng(7);
  const Tensor h = oracle::random_tensor({4, 5}, rng);
  const Tensor modal = oracle::random_tensor({3}, rng);
  EXPECT_EQ(oracle::values(infuse_ff(h, modal, Tensor::zeros({3, 5}), Tensor::ones({5}))), oracle::values(h));

  const Tensor w = oracle::random_tensor({3, 5}, rng);
  const Tensor b = oracle::random_tensor({5}, rng);
  const auto m = oracle::values(affine_project(modal, w, b));
  const auto unit = oracle::values(infuse_ff(Tensor::ones({4, 5}), modal, w, b));
  const auto got = oracle::values(infuse_ff(h, modal, w, b));
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(unit[t * 5 + c], m[c]);
      EXPECT_EQ(got[t * 5 + c], h.data()[t * 5 + c] * m[c]);
    }
  }
  EXPECT_THROW(infuse_ff(Tensor::ones({4, 6}), modal, w, b), ShapeError);
}

TEST(InfusionInit, ProjectionsAreIdentityForAnyModal) {
  const LMConfig lm = tiny();
  const InfusionParams p = InfusionParams::init(tiny_mit(), lm);
  SplitMix64 rng(8);
  const Tensor modal = oracle::random_tensor({5}, rng, false, 10.0);
  for (const auto& l : p.layers()) {
    EXPECT_EQ(oracle::values(affine_project(modal, l.w_d_k, l.b_d_k)), oracle::Vec(8, 1.0));
    EXPECT_EQ(oracle::values(affine_project(modal, l.w_d_v, l.b_d_v)), oracle::Vec(8, 1.0));
    EXPECT_EQ(oracle::values(affine_project(modal, l.w_a_k, l.b_a_k)), oracle::Vec(8, 0.0));
    EXPECT_EQ(oracle::values(affine_project(modal, l.w_a_v, l.b_a_v)), oracle::Vec(8, 0.0));
    EXPECT_EQ(oracle::values(affine_project(modal, l.w_f, l.b_f)), oracle::Vec(12, 1.0));
    EXPECT_EQ(oracle::values(l.l_gate), oracle::Vec(2, 10.0));
  }
  for (const auto& t : p.named_tensors()) EXPECT_TRUE(t.tensor.requires_grad()) << t.name;
}

TEST(InfusionInit, GateStaysInSaturatedBand) {
  const double lo = oracle::sigmoid(9.0), hi = oracle::sigmoid(11.0);
  EXPECT_GT(lo, 0.99987);
  EXPECT_LT(hi, 0.99999);
  SplitMix64 rng(9);
  const Tensor v = oracle::random_tensor({6, 2, 3}, rng);
  const Tensor proxy = oracle::random_tensor({2, 3}, rng);
  const RescaleResult r = head_rescale(v, v, v, proxy, Tensor::full({2}, 10.0), RescalePooling::kPerToken);
  for (double g : r.gate.data()) {
    EXPECT_GE(g, lo);
    EXPECT_LE(g, hi);
  }
}

TEST(InfusionInit, RescaleDisabledIsBitIdentical) {
  const LMConfig lm = tiny();
  const MicroLM m = MicroLM::random(lm, 11);
  MiTConfig cfg = tiny_mit();
  cfg.enable_rescale = false;
  const InfusionParams p = InfusionParams::init(cfg, lm);
  SplitMix64 rng(10);
  const std::vector<int> toks{1, 5, 9, 2, 3};
  InfusionHook hook(p, oracle::random_tensor({5}, rng), lm.n_heads);
  EXPECT_EQ(oracle::values(m.forward(toks, &hook).logits), oracle::values(m.forward(toks).logits));
}

TEST(InfusionHook, MatchesPlainLoopForward) {
  const LMConfig lm = tiny();
  const MicroLM m = MicroLM::random(lm, 12);
  const std::vector<int> toks{3, 1, 4, 1, 5, 9};
  for (auto pooling : {RescalePooling::kPerToken, RescalePooling::kMeanOverTokens}) {
    for (int mask = 0; mask < 8; ++mask) {
      MiTConfig cfg = tiny_mit(pooling);
      cfg.enable_kv = mask & 1;
      cfg.enable_ff = mask & 2;
      cfg.enable_rescale = mask & 4;
      InfusionParams p = InfusionParams::init(cfg, lm);
      p.perturb(0.3, 77);
      SplitMix64 rng(13);
      const Tensor modal = oracle::random_tensor({5}, rng);
      InfusionHook hook(p, modal, lm.n_heads);
      oracle::PlainLM plain(m);
      plain.set_infusion(p, oracle::values(modal));
      const double err = oracle::max_abs_diff(oracle::values(m.forward(toks, &hook).logits), plain.forward(toks));
      EXPECT_LT(err, 1e-10) << "mask " << mask << " " << to_string(pooling);
    }
  }
}

TEST(InfusionHook, PreservesTokenCount) {
  const LMConfig lm = tiny();
  const MicroLM m = MicroLM::random(lm, 1);
  const InfusionParams p = InfusionParams::init(tiny_mit(), lm);
  InfusionHook hook(p, Tensor::ones({5}), lm.n_heads);
  AllocationProbe probe;
  m.forward(std::vector<int>{1, 2, 3, 4}, &hook);
  EXPECT_EQ(probe.stats().by_tag.at("attn_map"), static_cast<std::size_t>(lm.n_layers * lm.n_heads * 16));
}

TEST(SelectLayers, Examples) {
  EXPECT_EQ(select_layers(32, LayerSelection::paper_default()), (std::vector<int>{12, 16, 20, 24, 28, 31}));
  EXPECT_EQ(select_layers(8, LayerSelection::last_third_stride(2)), (std::vector<int>{3, 5, 7}));
  EXPECT_EQ(select_layers(1, LayerSelection::paper_default()), (std::vector<int>{0}));
  EXPECT_EQ(select_layers(1, LayerSelection::last_third_stride(2)), (std::vector<int>{0}));
  EXPECT_EQ(select_layers(1, LayerSelection::explicit_list({0})), (std::vector<int>{0}));
  EXPECT_EQ(select_layers(8, LayerSelection::explicit_list({5, 1, 5})), (std::vector<int>{1, 5}));
  EXPECT_THROW(select_layers(8, LayerSelection::explicit_list({8})), std::out_of_range);
  EXPECT_THROW(select_layers(8, LayerSelection::explicit_list({-1})), std::out_of_range);
}

TEST(SelectLayers, AlwaysSortedInRangeAndEndsAtLastLayer) {
  for (int n = 1; n <= 40; ++n) {
    for (const auto& sel : {LayerSelection::paper_default(), LayerSelection::last_third_stride(1),
                            LayerSelection::last_third_stride(3)}) {
      const auto layers = select_layers(n, sel);
      ASSERT_FALSE(layers.empty());
      EXPECT_TRUE(std::is_sorted(layers.begin(), layers.end()));
      EXPECT_EQ(std::adjacent_find(layers.begin(), layers.end()), layers.end());
      EXPECT_GE(layers.front(), 0);
      EXPECT_EQ(layers.back(), n - 1);
    }
  }
}

TEST(InfusionParamCount, Llama7bPreset) {
  MiTConfig cfg;
  cfg.d_modal = 768;
  cfg.infused_layers = select_layers(32, LayerSelection::paper_default());
  EXPECT_EQ(infusion_param_count(cfg, LMConfig::llama7b()), 126386880u);
  std::size_t from_shapes = 0;
  for (const auto& s : infusion_param_shapes(cfg, LMConfig::llama7b())) from_shapes += shape_numel(s.shape);
  EXPECT_EQ(from_shapes, 126386880u);
}

TEST(InfusionParamCount, DisabledAxesContributeNothing) {
  const LMConfig lm = tiny();
  for (int mask = 0; mask < 8; ++mask) {
    MiTConfig cfg = tiny_mit();
    cfg.enable_kv = mask & 1;
    cfg.enable_ff = mask & 2;
    cfg.enable_rescale = mask & 4;
    const std::size_t want = 2 * ((mask & 1 ? 4 * (5 * 8 + 8) : 0) + (mask & 2 ? 5 * 12 + 12 : 0) + (mask & 4 ? 2 : 0));
    EXPECT_EQ(infusion_param_count(cfg, lm), want);
    EXPECT_EQ(count_params(InfusionParams::init(cfg, lm).named_tensors()).total, want);
  }
}

TEST(MiTConfig, Validation) {
  MiTConfig cfg = tiny_mit();
  cfg.infused_layers = {3};
  EXPECT_THROW(cfg.validate(tiny()), std::out_of_range);
  cfg.infused_layers = {2, 1};
  EXPECT_THROW(cfg.validate(tiny()), std::invalid_argument);
}
