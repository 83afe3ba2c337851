#pragma once

// JSON run configuration with sections {model, infusion, task, train, data,
// cost}. Every field defaults to the toy preset; unknown keys are rejected.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mit/heads.h"
#include "mit/infusion.h"
#include "mit/transformer.h"

namespace mit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelSection {
  std::string preset = "toy";  // toy | llama7b
  LMConfig lm = LMConfig::toy();
  std::uint64_t seed = 1234;   // frozen weights (language model and image encoder)
};

struct InfusionSection {
  std::string layers = "last_third_stride";  // last_third_stride | paper_default | explicit
  int stride = 2;
  std::vector<int> explicit_layers;
  bool enable_kv = true;
  bool enable_ff = true;
  bool enable_rescale = true;
  double gate_init = 10.0;
  RescalePooling pooling = RescalePooling::kPerToken;
  int d_modal = 32;

  MiTConfig resolve(const LMConfig& lm) const;
};

struct TaskSection {
  Task name = Task::kSeg;
  EmbeddingSchema schema = EmbeddingSchema::kLastToken;
  std::vector<std::string> modalities{"acoustic", "facial"};  // msa only
  int classes = 3;
  int filler_tokens = 0;  // neutral text prepended to every prompt
};

struct TrainSection {
  double lr0 = 4e-5;
  double decay = 0.1;
  int decay_every = 10;
  int epochs = 30;
  int batch = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;  // trainable init and data order
  double grad_clip = 0.0;     // 0 disables
  double weight_decay = 0.0;  // 0 disables
  long max_steps = 0;         // 0 = no limit
};

struct DataSection {
  std::size_t n = 400;
  std::uint64_t seed = 7;
  double train_fraction = 0.9;
};

struct CostSection {
  std::vector<int> lengths{32, 64, 128, 256, 512};
  int prefix_tokens = -1;  // -1: P = L
  int trials = 3;
};

struct RunConfig {
  ModelSection model;
  InfusionSection infusion;
  TaskSection task;
  TrainSection train;
  DataSection data;
  CostSection cost;

  void validate() const;
};

RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);
RunConfig load_config(const std::string& path);

// "32..512" -> doubling sequence 32, 64, ..., 512; "8..96:8" -> step 8;
// "1,2,5" -> list.
std::vector<int> parse_int_range(const std::string& spec);

}  // namespace mit
