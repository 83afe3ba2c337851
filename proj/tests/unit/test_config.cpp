#include <gtest/gtest.h>

#include "mit/config.h"
#include "mit/experiments.h"

using namespace mit;

TEST(Config, DefaultsAreToyPreset) {
  const RunConfig c = config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.model.preset, "toy");
  EXPECT_EQ(c.model.lm.n_layers, 8);
  EXPECT_EQ(c.model.lm.d_model, 64);
  EXPECT_EQ(c.train.lr0, 4e-5);
  EXPECT_EQ(c.train.epochs, 30);
  EXPECT_EQ(c.train.batch, 8);
  EXPECT_EQ(c.infusion.gate_init, 10.0);
  EXPECT_EQ(c.infusion.resolve(c.model.lm).infused_layers, (std::vector<int>{3, 5, 7}));
}

TEST(Config, RoundTripsThroughJson) {
  RunConfig c;
  c.task.name = Task::kMsa;
  c.task.modalities = {"facial"};
  c.infusion.enable_ff = false;
  c.infusion.pooling = RescalePooling::kMeanOverTokens;
  c.train.lr0 = 1e-2;
  c.data.n = 77;
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json({{"modle", nlohmann::json::object()}}), ConfigError);
  EXPECT_THROW(config_from_json({{"train", {{"lr", 1e-3}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"infusion", {{"enable_kv", "yes"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"task", {{"name", "bogus"}}}}), ConfigError);
  try {
    config_from_json({{"train", {{"lr", 1e-3}}}});
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.lr"), std::string::npos) << e.what();
  }
}

TEST(Config, PresetSelectsDims) {
  const RunConfig c = config_from_json({{"model", {{"preset", "llama7b"}}}});
  EXPECT_EQ(c.model.lm.n_layers, 32);
  EXPECT_EQ(c.model.lm.d_ff, 11008);
}

TEST(Config, Validation) {
  RunConfig c;
  c.train.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.task.name = Task::kMsa;
  c.task.modalities = {"smell"};
  EXPECT_THROW(c.validate(), ConfigError);
  c.task.modalities = {"facial"};
  c.infusion.d_modal = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(IntRange, Forms) {
  EXPECT_EQ(parse_int_range("32..512"), (std::vector<int>{32, 64, 128, 256, 512}));
  EXPECT_EQ(parse_int_range("8..32:8"), (std::vector<int>{8, 16, 24, 32}));
  EXPECT_EQ(parse_int_range("1,2,5"), (std::vector<int>{1, 2, 5}));
  EXPECT_EQ(parse_int_range("7"), (std::vector<int>{7}));
  EXPECT_THROW(parse_int_range(""), ConfigError);
  EXPECT_THROW(parse_int_range("a..b"), ConfigError);
  EXPECT_THROW(parse_int_range("64..32"), ConfigError);
  EXPECT_THROW(parse_int_range("8..32:0"), ConfigError);
}

TEST(Axes, ParseAndCount) {
  EXPECT_EQ(parse_axes("kv,ff,rescale"), (std::vector<std::string>{"kv", "ff", "rescale"}));
  EXPECT_THROW(parse_axes("kv,kv"), std::invalid_argument);
  EXPECT_THROW(parse_axes("kv,attn"), std::invalid_argument);
  EXPECT_THROW(parse_axes(""), std::invalid_argument);

  const RunConfig c;
  const std::size_t layers = 3, d = 64, f = 172, di = 32, h = 4;
  EXPECT_EQ(axis_param_count("kv", c), layers * 4 * (di * d + d));
  EXPECT_EQ(axis_param_count("ff", c), layers * (di * f + f));
  EXPECT_EQ(axis_param_count("rescale", c), layers * h);
}

TEST(Seeds, WithSeedKeepsFrozenModel) {
  RunConfig c;
  const RunConfig s = with_seed(c, 9);
  EXPECT_EQ(s.data.seed, 9u);
  EXPECT_EQ(s.train.seed, 9u);
  EXPECT_EQ(s.model.seed, c.model.seed);
}

TEST(RunMemo, KeyedByConfigAndSalt) {
  const auto file = std::filesystem::temp_directory_path() / "mit_test_memo.json";
  std::filesystem::remove(file);
  RunConfig c;
  {
    RunMemo memo(file, "v1");
    EXPECT_FALSE(memo.find(c).has_value());
    memo.store(c, {7, {{"dice", 0.5}}});
  }
  RunMemo again(file, "v1");
  ASSERT_TRUE(again.find(c).has_value());
  EXPECT_EQ(again.find(c)->metrics.at("dice"), 0.5);
  RunConfig other = c;
  other.train.epochs = 3;
  EXPECT_FALSE(again.find(other).has_value());
  EXPECT_FALSE(RunMemo(file, "v2").find(c).has_value());
  std::filesystem::remove(file);
}

TEST(Config, ShippedConfigsLoad) {
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(MIT_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    SCOPED_TRACE(entry.path().string());
    const RunConfig c = load_config(entry.path().string());
    EXPECT_NO_THROW(c.validate());
    ++n;
  }
  EXPECT_GE(n, 3u);
}
