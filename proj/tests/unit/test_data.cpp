#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "mit/data.h"
#include "mit/io.h"

using namespace mit;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mit_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(SynthData, DeterministicBytes) {
  for (Task task : {Task::kSeg, Task::kCls, Task::kMsa}) {
    const auto a = serialize_samples(generate_dataset(task, 60, 3));
    const auto b = serialize_samples(generate_dataset(task, 60, 3));
    const auto c = serialize_samples(generate_dataset(task, 60, 4));
    EXPECT_EQ(a, b) << to_string(task);
    EXPECT_NE(a, c) << to_string(task);
  }
}

TEST(SynthData, PrefixStableAcrossSizes) {
  const Dataset small = generate_dataset(Task::kSeg, 10, 5);
  const Dataset big = generate_dataset(Task::kSeg, 50, 5);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(small.seg[i].mask, big.seg[i].mask);
}

TEST(SynthData, RejectsEmpty) { EXPECT_THROW(generate_dataset(Task::kSeg, 0, 1), std::invalid_argument); }

TEST(SynthData, SegValidatorSweep) {
  const Dataset d = generate_dataset(Task::kSeg, 1000, 7);
  EXPECT_TRUE(validate_dataset(d).empty());
  for (const auto& s : d.seg) {
    ASSERT_GE(s.shapes.size(), 2u);
    ASSERT_LE(s.shapes.size(), 4u);
    std::set<std::pair<int, int>> pairs;
    for (const auto& sh : s.shapes) pairs.insert({sh.color, sh.kind});
    EXPECT_EQ(pairs.size(), s.shapes.size());
    EXPECT_EQ(s.description, describe(s.shapes[static_cast<std::size_t>(s.target)]));
    EXPECT_EQ(s.mask, rasterize(s.shapes[static_cast<std::size_t>(s.target)], kImageSize, kImageSize));
  }
}

TEST(SynthData, ValidatorCatchesBrokenSample) {
  SegSample s = generate_dataset(Task::kSeg, 1, 1).seg[0];
  EXPECT_TRUE(validate_sample(s).empty());
  s.mask[0] = 1.0 - s.mask[0];
  EXPECT_FALSE(validate_sample(s).empty());
  s = generate_dataset(Task::kSeg, 1, 1).seg[0];
  s.description = "mauve blob";
  EXPECT_FALSE(validate_sample(s).empty());

  MsaSample m = generate_dataset(Task::kMsa, 1, 1).msa[0];
  m.label = 4.0;
  EXPECT_FALSE(validate_sample(m).empty());
}

TEST(SynthData, SegTextOnlyCeiling) {
  const Dataset d = generate_dataset(Task::kSeg, 1000, 7);
  EXPECT_LE(text_only_oracle_dice(d.seg), kTextOnlyDiceCeiling);
}

TEST(SynthData, ClsNeedsBothModalities) {
  const Dataset d = generate_dataset(Task::kCls, 600, 7);
  EXPECT_TRUE(validate_dataset(d).empty());
  int counts[3] = {0, 0, 0};
  for (const auto& s : d.cls) ++counts[s.label];
  for (int c : counts) EXPECT_GT(c, 100);
}

TEST(SynthData, MsaTextIsInsufficient) {
  const Dataset d = generate_dataset(Task::kMsa, 1000, 7);
  EXPECT_TRUE(validate_dataset(d).empty());
  const LeastSquaresOracle o = msa_least_squares_oracle(d.msa);
  EXPECT_GE(o.text_only_mae, 2.0 * o.all_modal_mae);
}

TEST(SynthData, SaveLoadRoundTrip) {
  const auto dir = scratch("data_rt");
  const Dataset d = generate_dataset(Task::kMsa, 20, 2);
  const std::string sum = save_dataset(d, dir);
  EXPECT_EQ(sum, save_dataset(generate_dataset(Task::kMsa, 20, 2), scratch("data_rt2")));
  const auto manifest = read_json(dir / "manifest.json");
  EXPECT_EQ(manifest.at("task"), "msa");
  EXPECT_EQ(manifest.at("n"), 20);
  EXPECT_EQ(manifest.at("seed"), 2);
  EXPECT_EQ(manifest.at("generator_version"), kGeneratorVersion);
  EXPECT_EQ(manifest.at("checksum"), sum);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(serialize_samples(back), serialize_samples(d));

  auto bytes = read_file(dir / "samples.bin");
  bytes[bytes.size() / 2] ^= 0x01;
  write_file(dir / "samples.bin", bytes);
  EXPECT_THROW(load_dataset(dir), FormatError);
  EXPECT_THROW(load_dataset(scratch("absent")), IoError);
}

TEST(Split, Proportions) {
  const Split s = train_test_split(100, 1);
  EXPECT_EQ(s.train.size(), 90u);
  EXPECT_EQ(s.test.size(), 10u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(train_test_split(2, 1).test.size(), 1u);
  EXPECT_EQ(train_test_split(100, 1).test, s.test);
  EXPECT_NE(train_test_split(100, 2).test, s.test);
}
