#include <gtest/gtest.h>

#include "mit/encoders.h"
#include "mit/ops.h"
#include "mit/rng.h"
#include "oracles.h"

using namespace mit;

TEST(ImageEncoder, LevelShapesFollowStrides) {
  const ImageEncoder enc = ImageEncoder::random(32, 3, 1);
  for (std::size_t h : {16u, 32u, 48u}) {
    for (std::size_t w : {16u, 32u, 64u}) {
      const ImageFeatures f = enc.encode(Tensor::zeros({h, w, 3}));
      EXPECT_EQ(f.global.shape(), (Shape{32}));
      EXPECT_EQ(f.levels[0].shape(), (Shape{h / 4, w / 4, 16}));
      EXPECT_EQ(f.levels[1].shape(), (Shape{h / 8, w / 8, 32}));
      EXPECT_EQ(f.levels[2].shape(), (Shape{h / 16, w / 16, 32}));
    }
  }
}

TEST(ImageEncoder, RejectsIndivisibleSizes) {
  const ImageEncoder enc = ImageEncoder::random(8, 3, 1);
  EXPECT_THROW(enc.encode(Tensor::zeros({20, 32, 3})), ShapeError);
  EXPECT_THROW(enc.encode(Tensor::zeros({32, 32, 4})), ShapeError);
}

TEST(ImageEncoder, DeterministicAndNonDegenerate) {
  const ImageEncoder a = ImageEncoder::random(32, 3, 5);
  const ImageEncoder b = ImageEncoder::random(32, 3, 5);
  SplitMix64 rng(1);
  Tensor img = Tensor::zeros({32, 32, 3});
  for (double& v : img.mutable_data()) v = rng.uniform();
  EXPECT_EQ(oracle::values(a.encode(img).global), oracle::values(b.encode(img).global));
  EXPECT_NE(oracle::values(a.encode(Tensor::zeros({32, 32, 3})).global),
            oracle::values(a.encode(Tensor::ones({32, 32, 3})).global));
}

TEST(ImageEncoder, FrozenWeightsAndCount) {
  const ImageEncoder enc = ImageEncoder::random(32, 3, 1);
  const auto w = enc.named_weights();
  const ParamCount pc = count_params(w);
  EXPECT_EQ(pc.trainable, 0u);
  EXPECT_EQ(pc.total, ImageEncoder::param_count(32, 3));
}

TEST(Patchify, RasterOrder) {
  std::vector<double> v(4 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const Tensor p = patchify(Tensor::from({4, 4, 1}, v), 2);
  EXPECT_EQ(p.shape(), (Shape{4, 4}));
  EXPECT_EQ(oracle::values(p), (oracle::Vec{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15}));
}

TEST(SeqEncoder, Shapes) {
  const SeqEncoder enc = SeqEncoder::random(8, 32, 16, true, 1);
  for (std::size_t len : {1u, 5u, 16u}) {
    const SeqFeatures f = enc.encode(Tensor::ones({len, 8}));
    EXPECT_EQ(f.pooled.shape(), (Shape{32}));
    EXPECT_EQ(f.per_step.shape(), (Shape{len, 32}));
  }
  EXPECT_THROW(enc.encode(Tensor::zeros({0, 8})), std::invalid_argument);
  EXPECT_THROW(enc.encode(Tensor::zeros({17, 8})), std::invalid_argument);
  EXPECT_THROW(enc.encode(Tensor::zeros({3, 7})), ShapeError);
}

TEST(SeqEncoder, PooledIsMeanOfSteps) {
  const SeqEncoder enc = SeqEncoder::random(6, 8, 10, true, 2);
  SplitMix64 rng(3);
  const SeqFeatures one = enc.encode(oracle::random_tensor({1, 6}, rng));
  EXPECT_EQ(oracle::values(one.pooled), oracle::values(one.per_step));

  const SeqFeatures f = enc.encode(oracle::random_tensor({7, 6}, rng));
  for (std::size_t c = 0; c < 8; ++c) {
    double m = 0.0;
    for (std::size_t t = 0; t < 7; ++t) m += f.per_step.at({t, c});
    EXPECT_NEAR(f.pooled.data()[c], m / 7.0, 1e-14);
  }
}

TEST(SeqEncoder, SensitiveToStepOrder) {
  const SeqEncoder enc = SeqEncoder::random(4, 8, 8, true, 4);
  const Tensor x = Tensor::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  const Tensor swapped = Tensor::from({2, 4}, {0, 1, 0, 0, 1, 0, 0, 0});
  EXPECT_NE(oracle::values(enc.encode(x).pooled), oracle::values(enc.encode(swapped).pooled));
}

TEST(SeqEncoder, GradientFollowsTrainableFlag) {
  SplitMix64 rng(5);
  const Tensor x = oracle::random_tensor({3, 4}, rng);
  for (bool trainable : {true, false}) {
    const SeqEncoder enc = SeqEncoder::random(4, 8, 8, trainable, 6);
    const auto weights = enc.named_weights();
    EXPECT_EQ(count_params(weights).total, SeqEncoder::param_count(4, 8, 8));
    EXPECT_EQ(count_params(weights).trainable, trainable ? SeqEncoder::param_count(4, 8, 8) : 0u);
    const Tensor loss = sum(square(enc.encode(x).pooled));
    if (!trainable) {
      EXPECT_FALSE(loss.requires_grad());
      continue;
    }
    loss.backward();
    for (const auto& w : weights) {
      ASSERT_TRUE(w.tensor.has_grad()) << w.name;
      double norm = 0.0;
      for (double g : w.tensor.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << w.name;
    }
  }
}

TEST(SeqEncoder, LoadWeightsRoundTrip) {
  const SeqEncoder a = SeqEncoder::random(4, 8, 8, true, 7);
  SeqEncoder b = SeqEncoder::random(4, 8, 8, true, 8);
  std::vector<NamedTensor> named;
  for (const auto& w : a.named_weights()) named.push_back({"enc." + w.name, w.tensor});
  b.load_weights(named, "enc.");
  const Tensor x = Tensor::ones({3, 4});
  EXPECT_EQ(oracle::values(a.encode(x).pooled), oracle::values(b.encode(x).pooled));
}
