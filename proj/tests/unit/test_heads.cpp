#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mit/gradcheck.h"
#include "mit/heads.h"
#include "mit/ops.h"
#include "mit/rng.h"
#include "oracles.h"

using namespace mit;

TEST(Prompt, SegTemplateIsVerbatim) {
  EXPECT_EQ(prompt_template(Task::kSeg), "Segment the {description} according to the text. #Segmentation:");
  EXPECT_EQ(render_prompt(Task::kSeg, {{"description", "red ball"}}),
            "Segment the red ball according to the text. #Segmentation:");
}

TEST(Prompt, MsaContainsUtterance) {
  const std::string s = render_prompt(Task::kMsa, {{"text", "good movie"}});
  EXPECT_NE(s.find("good movie"), std::string::npos);
}

TEST(Prompt, TokensAreBytesAndDeterministic) {
  const auto a = format_prompt(Task::kCls, {{"text", "a b"}});
  EXPECT_EQ(a, format_prompt(Task::kCls, {{"text", "a b"}}));
  const std::string s = render_prompt(Task::kCls, {{"text", "a b"}});
  ASSERT_EQ(a.size(), s.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(a[i], static_cast<unsigned char>(s[i]));
}

TEST(Prompt, MissingSlotIsNamed) {
  try {
    render_prompt(Task::kSeg, {});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("description"), std::string::npos);
  }
}

TEST(TaskTokens, VocabGrowsByRegisteredTokens) {
  TaskTokenTable t(256, 8);
  EXPECT_EQ(t.vocab_size(), 256);
  EXPECT_FALSE(t.embeddings().defined());
  EXPECT_EQ(t.add("<SEG>", 1), 256);
  EXPECT_EQ(t.add("<CLS>", 2), 257);
  EXPECT_EQ(t.vocab_size(), 258);
  EXPECT_EQ(t.id("<CLS>"), 257);
  EXPECT_EQ(t.embeddings().shape(), (Shape{2, 8}));
  EXPECT_THROW(t.id("<MSA>"), std::invalid_argument);
}

TEST(ExtractEmbedding, Schemas) {
  SplitMix64 rng(1);
  const Tensor h = oracle::random_tensor({4, 3}, rng);
  const auto last = oracle::values(extract_embedding(h, EmbeddingSchema::kLastToken));
  EXPECT_EQ(last, oracle::values(slice(h, 0, 3, 1)));
  EXPECT_EQ(oracle::values(extract_embedding(h, EmbeddingSchema::kTaskToken, 3)), last);
  EXPECT_EQ(oracle::values(extract_embedding(h, EmbeddingSchema::kTaskToken, 1)), oracle::values(slice(h, 0, 1, 1)));
  EXPECT_THROW(extract_embedding(h, EmbeddingSchema::kTaskToken), std::invalid_argument);
  EXPECT_THROW(extract_embedding(h, EmbeddingSchema::kTaskToken, 4), std::out_of_range);

  const std::vector<int> toks{1, 2, 300, 4};
  EXPECT_EQ(find_token(toks, 300), 2u);
  EXPECT_THROW(find_token(toks, 301), std::invalid_argument);
}

namespace {

ImageFeatures features(std::size_t size, std::uint64_t seed) {
  const ImageEncoder enc = ImageEncoder::random(8, 3, seed);
  SplitMix64 rng(seed);
  Tensor img = Tensor::zeros({size, size, 3});
  for (double& v : img.mutable_data()) v = rng.uniform();
  return enc.encode(img);
}

}  // namespace

TEST(SegDecoder, OutputMatchesImageSize) {
  const SegDecoder dec = SegDecoder::random(6, {16, 32, 8}, 1);
  for (std::size_t s : {32u, 64u}) {
    EXPECT_EQ(dec.decode(Tensor::ones({6}), features(s, 2)).shape(), (Shape{s, s}));
  }
}

TEST(SegDecoder, ConditionsOnTaskEmbedding) {
  const SegDecoder dec = SegDecoder::random(6, {16, 32, 8}, 1);
  const ImageFeatures f = features(32, 3);
  EXPECT_NE(oracle::values(dec.decode(Tensor::ones({6}), f)), oracle::values(dec.decode(-Tensor::ones({6}), f)));
  EXPECT_THROW(dec.decode(Tensor::ones({5}), f), ShapeError);
}

TEST(SegDecoder, ParamCountMatchesTensors) {
  const SegDecoder dec = SegDecoder::random(6, {16, 32, 8}, 1);
  EXPECT_EQ(count_params(dec.named_tensors()).trainable, SegDecoder::param_count(6, {16, 32, 8}));
}

TEST(SegDecoder, GradientReachesTaskEmbedding) {
  const SegDecoder dec = SegDecoder::random(3, {16, 32, 8}, 1);
  const ImageFeatures f = features(16, 4);
  SplitMix64 rng(5);
  Tensor emb = oracle::random_tensor({3}, rng, true);
  std::vector<double> g(256, 0.0);
  for (std::size_t i = 0; i < 60; ++i) g[i] = 1.0;
  const Tensor mask = Tensor::from({16, 16}, g);
  std::vector<NamedTensor> params{{"emb", emb}};
  const auto rep = grad_check([&] { return dice_loss(sigmoid(dec.decode(emb, f)), mask); }, params);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err;
}

TEST(Upsample, NearestNeighbour) {
  const Tensor x = Tensor::from({1, 2, 1}, {1, 2});
  EXPECT_EQ(oracle::values(upsample2(x)), (oracle::Vec{1, 1, 2, 2, 1, 1, 2, 2}));
  const Tensor d = Tensor::from({1, 1, 4}, {1, 2, 3, 4});
  EXPECT_EQ(oracle::values(depth_to_space(d, 2)), (oracle::Vec{1, 2, 3, 4}));
}

TEST(DiceLoss, Cases) {
  const Tensor gt = Tensor::from({2, 2}, {1, 0, 0, 0});
  EXPECT_NEAR(dice_loss(Tensor::from({2, 2}, {0.5, 0.0, 1.0, 0.0}), gt).item(), 0.6, 1e-6);
  const double want = 1.0 - 2.0 * 0.5 / (1.5 + 1.0 + kDiceEps);
  EXPECT_NEAR(dice_loss(Tensor::from({2, 2}, {0.5, 0.0, 1.0, 0.0}), gt).item(), want, 1e-9);
  EXPECT_NEAR(dice_loss(gt, gt).item(), 0.0, 1e-6);
  EXPECT_NEAR(dice_loss(Tensor::from({2, 2}, {0, 1, 1, 1}), gt).item(), 1.0, 1e-9);
  EXPECT_THROW(dice_loss(gt, Tensor::from({2, 2}, {0.5, 0, 0, 0})), std::invalid_argument);
  EXPECT_THROW(dice_loss(gt, Tensor::zeros({4})), ShapeError);
}

TEST(DiceLoss, BoundedAndTransposeSymmetric) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(12), g(12);
    for (std::size_t i = 0; i < 12; ++i) {
      p[i] = rng.uniform();
      g[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }
    const double l = dice_loss(Tensor::from({3, 4}, p), Tensor::from({3, 4}, g)).item();
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0 + kDiceEps);
    const Tensor pt = transpose(Tensor::from({3, 4}, p), 0, 1);
    const Tensor gtt = transpose(Tensor::from({3, 4}, g), 0, 1);
    EXPECT_NEAR(dice_loss(pt, gtt).item(), l, 1e-15);
  }
}

TEST(CeLoss, Cases) {
  const std::vector<int> label{1};
  EXPECT_NEAR(ce_loss(Tensor::from({1, 3}, {0, 100, 0}), label).item(), 0.0, 1e-9);
  for (int k : {2, 3, 7}) {
    EXPECT_NEAR(ce_loss(Tensor::zeros({1, static_cast<std::size_t>(k)}), label).item(), std::log(k), 1e-12);
  }
  SplitMix64 rng(7);
  const Tensor logits = oracle::random_tensor({3, 4}, rng);
  const std::vector<int> labels{0, 3, 2};
  double want = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(logits.at({r, c}));
    want += -(logits.at({r, static_cast<std::size_t>(labels[r])}) - std::log(z));
  }
  EXPECT_NEAR(ce_loss(logits, labels).item(), want / 3.0, 1e-12);
  EXPECT_THROW(ce_loss(logits, std::vector<int>{0, 4, 1}), std::out_of_range);
  EXPECT_THROW(ce_loss(logits, std::vector<int>{0}), ShapeError);
}

TEST(RmseLoss, Cases) {
  const Tensor a = Tensor::from({2}, {1.5, -2.0});
  EXPECT_EQ(rmse_loss(a, a).item(), 0.0);
  EXPECT_NEAR(rmse_loss(Tensor::from({2}, {3, -4}), Tensor::zeros({2})).item(), std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(rmse_loss(Tensor::from({2}, {3, -4}), Tensor::zeros({2})).item(), 3.53553, 1e-5);
  SplitMix64 rng(8);
  for (double c : {-3.0, 0.5, 2.0}) {
    const Tensor x = oracle::random_tensor({6}, rng);
    const Tensor y = oracle::random_tensor({6}, rng);
    EXPECT_NEAR(rmse_loss(x * c, y * c).item(), std::abs(c) * rmse_loss(x, y).item(), 1e-12);
  }
  EXPECT_THROW(rmse_loss(Tensor::zeros({0}), Tensor::zeros({0})), std::invalid_argument);
}

TEST(RmseLoss, GradientAtExactFitIsFinite) {
  Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
  const Tensor loss = rmse_loss(p, Tensor::from({2}, {1.0, 2.0}));
  loss.backward();
  for (double g : p.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(ClsHead, ShapesZerosAndGradients) {
  for (int k : {2, 3, 101}) {
    EXPECT_EQ(ClsHead::random(4, 3, k, 1).logits(Tensor::ones({4}), Tensor::ones({3})).shape(),
              (Shape{static_cast<std::size_t>(k)}));
  }
  EXPECT_EQ(oracle::values(ClsHead::zeros(4, 3, 5).logits(Tensor::ones({4}), Tensor::ones({3}))), oracle::Vec(5, 0.0));
  EXPECT_EQ(count_params(ClsHead::random(4, 3, 5, 1).named_tensors()).trainable, ClsHead::param_count(4, 3, 5));

  const ClsHead head = ClsHead::random(4, 3, 3, 2);
  SplitMix64 rng(9);
  Tensor t = oracle::random_tensor({4}, rng, true);
  Tensor g = oracle::random_tensor({3}, rng, true);
  std::vector<NamedTensor> params{{"task", t}, {"global", g}};
  for (const auto& p : head.named_tensors()) params.push_back(p);
  const std::vector<int> label{2};
  const auto rep = grad_check([&] { return ce_loss(reshape(head.logits(t, g), {1, 3}), label); }, params);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err;
}

TEST(RegHead, ZerosLinearityAndGradients) {
  EXPECT_EQ(RegHead::zeros(4).predict(Tensor::ones({4})).item(), 0.0);
  const RegHead lin = RegHead::random(4, 3);
  SplitMix64 rng(10);
  const Tensor a = oracle::random_tensor({4}, rng);
  const Tensor b = oracle::random_tensor({4}, rng);
  const double pa = lin.predict(a).item(), pb = lin.predict(b).item(), pab = lin.predict(a + b).item();
  const double bias = lin.predict(Tensor::zeros({4})).item();
  EXPECT_NEAR(pab - bias, (pa - bias) + (pb - bias), 1e-12);

  const RegHead head = RegHead::random(4, 4);
  Tensor t = oracle::random_tensor({4}, rng, true);
  std::vector<NamedTensor> params{{"task", t}};
  for (const auto& p : head.named_tensors()) params.push_back(p);
  const auto rep = grad_check([&] { return rmse_loss(head.predict(t), Tensor::from({1}, {0.3})); }, params);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err;
}

TEST(Metrics, SegOverallIoU) {
  SegMetrics m;
  m.add(std::vector<double>{0.9, 0.9, 0.1, 0.1}, std::vector<double>{1, 0, 0, 0});
  m.add(std::vector<double>{0.9, 0.1, 0.1, 0.1}, std::vector<double>{1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(m.oiou(), 2.0 / 4.0);
  EXPECT_DOUBLE_EQ(m.mean_dice(), (2.0 / 3.0 + 2.0 / 3.0) / 2.0);
}

TEST(Metrics, Classification) {
  const auto m = classification_metrics(std::vector<int>{0, 1, 1, 2}, std::vector<int>{0, 1, 2, 2}, 3);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_NEAR(m.macro_f1, (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0, 1e-12);
}

TEST(Metrics, Sentiment) {
  const auto m = sentiment_metrics(std::vector<double>{1.0, -1.0, 2.6, 0.2}, std::vector<double>{1.0, -2.0, 3.0, -0.5});
  EXPECT_DOUBLE_EQ(m.mae, (0.0 + 1.0 + 0.4 + 0.7) / 4.0);
  EXPECT_DOUBLE_EQ(m.acc2, 0.75);
  EXPECT_DOUBLE_EQ(m.acc7, 0.5);
  EXPECT_GT(m.corr, 0.9);
}

TEST(Export, PgmIsBinaryMask) {
  const auto path = std::filesystem::temp_directory_path() / "mit_test_mask.pgm";
  write_pgm(path.string(), std::vector<double>{0.2, 0.7, 0.5, 0.0}, 2, 2);
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes, std::string("P5\n2 2\n255\n") + std::string("\x00\xff\xff\x00", 4));
  std::filesystem::remove(path);
}
