#pragma once

// Multi-seed training sweeps: ablations over infusion paths and the
// embedding-schema sweep over prompt lengths.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mit/config.h"
#include "mit/train.h"

namespace mit {

// Root seed of one run: drives data generation, split, trainable init and
// batch order. The frozen model keeps model.seed.
RunConfig with_seed(RunConfig cfg, std::uint64_t seed);

struct SeedRun {
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;  // final held-out metrics
};

// Final metrics of completed runs keyed by resolved config. With a file the
// memo persists between processes; `salt` must change whenever the code
// that produced the entries may have.
class RunMemo {
 public:
  RunMemo() = default;
  RunMemo(std::filesystem::path file, std::string salt);

  std::optional<SeedRun> find(const RunConfig& cfg) const;
  void store(const RunConfig& cfg, const SeedRun& run);

 private:
  std::string key(const RunConfig& cfg) const;

  std::filesystem::path file_;
  std::string salt_;
  std::map<std::string, SeedRun> entries_;
};

using Progress = std::function<void(const std::string&)>;

struct VariantSummary {
  std::string name;
  RunConfig config;
  std::vector<SeedRun> runs;
  std::map<std::string, double> mean;  // seed average of every metric
  TrainableReport report;
};

// Trains `cfg` once per seed on freshly generated data. Each run writes its
// artifacts under out_dir/seed{S} when out_dir is set.
VariantSummary run_seeds(const std::string& name, const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                         const std::filesystem::path& out_dir = {}, const Progress& progress = {},
                         RunMemo* memo = nullptr);

// "kv,ff,rescale" (any non-empty subset, no repeats).
std::vector<std::string> parse_axes(const std::string& spec);

// Trainable parameters an axis contributes under `cfg`.
std::size_t axis_param_count(const std::string& axis, const RunConfig& cfg);

struct AblationRow {
  std::map<std::string, bool> enabled;
  VariantSummary summary;
  std::size_t removed_params = 0;  // trainable(all on) - trainable(row)
};

// Trains all 2^k on/off combinations of `axes`, starting from all off.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::string>& axes,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::filesystem::path& out_dir = {}, const Progress& progress = {},
                                      RunMemo* memo = nullptr);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<std::string>& axes,
                        const std::vector<AblationRow>& rows);

struct SchemaRow {
  int filler_tokens = 0;
  EmbeddingSchema schema = EmbeddingSchema::kLastToken;
  VariantSummary summary;
};

// Last-token vs task-token heads with `lengths` filler tokens in front of
// every prompt. max_seq is raised once for the whole sweep so every run
// shares the same frozen model.
std::vector<SchemaRow> run_schema_sweep(const RunConfig& base, const std::vector<int>& lengths,
                                        const std::vector<std::uint64_t>& seeds,
                                        const std::filesystem::path& out_dir = {}, const Progress& progress = {},
                                        RunMemo* memo = nullptr);

void write_schema_csv(const std::filesystem::path& path, const std::vector<SchemaRow>& rows);

}  // namespace mit
