#include "mit/experiments.h"

#include <algorithm>
#include <set>

#include "mit/data.h"
#include "mit/io.h"

namespace mit {

RunConfig with_seed(RunConfig cfg, std::uint64_t seed) {
  cfg.data.seed = seed;
  cfg.train.seed = seed;
  return cfg;
}

RunMemo::RunMemo(std::filesystem::path file, std::string salt) : file_(std::move(file)), salt_(std::move(salt)) {
  if (file_.empty() || !std::filesystem::exists(file_)) return;
  const nlohmann::json j = read_json(file_);
  for (const auto& [k, v] : j.items()) {
    SeedRun run;
    run.seed = v.at("seed").get<std::uint64_t>();
    run.metrics = v.at("metrics").get<std::map<std::string, double>>();
    entries_[k] = run;
  }
}

std::string RunMemo::key(const RunConfig& cfg) const {
  const std::string text = salt_ + "|" + kGeneratorVersion + "|" + config_to_json(cfg).dump();
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::optional<SeedRun> RunMemo::find(const RunConfig& cfg) const {
  auto it = entries_.find(key(cfg));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void RunMemo::store(const RunConfig& cfg, const SeedRun& run) {
  entries_[key(cfg)] = run;
  if (file_.empty()) return;
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : entries_) j[k] = {{"seed", v.seed}, {"metrics", v.metrics}};
  if (file_.has_parent_path()) std::filesystem::create_directories(file_.parent_path());
  write_json(file_, j);
}

VariantSummary run_seeds(const std::string& name, const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                         const std::filesystem::path& out_dir, const Progress& progress, RunMemo* memo) {
  if (seeds.empty()) throw std::invalid_argument("run_seeds: no seeds");
  VariantSummary s;
  s.name = name;
  s.config = cfg;
  s.report = closed_form_report(cfg);
  for (std::uint64_t seed : seeds) {
    const RunConfig run_cfg = with_seed(cfg, seed);
    if (memo != nullptr) {
      if (auto hit = memo->find(run_cfg)) {
        if (progress) progress(name + " seed " + std::to_string(seed) + ": reused");
        s.runs.push_back(*hit);
        continue;
      }
    }
    const Dataset data = generate_dataset(run_cfg.task.name, run_cfg.data.n, run_cfg.data.seed);
    TrainHooks hooks;
    if (progress) {
      hooks.on_epoch = [&](const EpochRecord& rec) {
        const std::string metric = primary_metric(run_cfg.task.name);
        auto it = rec.metrics.find(metric);
        progress(name + " seed " + std::to_string(seed) + " epoch " + std::to_string(rec.epoch) + " loss " +
                 format_double(rec.train_loss) +
                 (it == rec.metrics.end() ? "" : " " + metric + " " + format_double(it->second)));
      };
    }
    const std::filesystem::path dir = out_dir.empty() ? out_dir : out_dir / ("seed" + std::to_string(seed));
    const RunOutcome outcome = run_training(run_cfg, data, dir, hooks);
    SeedRun run{seed, outcome.final_metrics};
    if (memo != nullptr) memo->store(run_cfg, run);
    s.runs.push_back(run);
  }
  for (const auto& run : s.runs) {
    for (const auto& [k, v] : run.metrics) s.mean[k] += v / static_cast<double>(s.runs.size());
  }
  return s;
}

namespace {

const std::vector<std::string>& known_axes() {
  static const std::vector<std::string> axes{"kv", "ff", "rescale"};
  return axes;
}

bool& axis_flag(InfusionSection& inf, const std::string& axis) {
  if (axis == "kv") return inf.enable_kv;
  if (axis == "ff") return inf.enable_ff;
  if (axis == "rescale") return inf.enable_rescale;
  throw ConfigError("unknown ablation axis '" + axis + "' (expected kv, ff or rescale)");
}

}  // namespace

std::vector<std::string> parse_axes(const std::string& spec) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = spec.find(',', start);
    const std::string axis = spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (std::find(known_axes().begin(), known_axes().end(), axis) == known_axes().end()) {
      throw ConfigError("unknown ablation axis '" + axis + "' (expected kv, ff or rescale)");
    }
    if (!seen.insert(axis).second) throw ConfigError("ablation axis '" + axis + "' repeated");
    out.push_back(axis);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::size_t axis_param_count(const std::string& axis, const RunConfig& cfg) {
  const LMConfig& lm = cfg.model.lm;
  MiTConfig only = cfg.infusion.resolve(lm);
  only.enable_kv = axis == "kv";
  only.enable_ff = axis == "ff";
  only.enable_rescale = axis == "rescale";
  if (!only.enable_kv && !only.enable_ff && !only.enable_rescale) {
    throw ConfigError("unknown ablation axis '" + axis + "' (expected kv, ff or rescale)");
  }
  return infusion_param_count(only, lm);
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::string>& axes,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                                      const Progress& progress, RunMemo* memo) {
  if (axes.empty()) throw ConfigError("ablation needs at least one axis");
  RunConfig all_on = base;
  for (const auto& a : axes) axis_flag(all_on.infusion, a) = true;
  const std::size_t full = closed_form_report(all_on).trainable;
  std::vector<AblationRow> rows;
  for (unsigned mask = 0; mask < (1u << axes.size()); ++mask) {
    RunConfig cfg = base;
    AblationRow row;
    std::string name;
    for (std::size_t i = 0; i < axes.size(); ++i) {
      const bool on = (mask >> i) & 1u;
      axis_flag(cfg.infusion, axes[i]) = on;
      row.enabled[axes[i]] = on;
      name += (name.empty() ? "" : ",") + axes[i] + (on ? "=on" : "=off");
    }
    const std::filesystem::path dir = out_dir.empty() ? out_dir : out_dir / ("variant" + std::to_string(mask));
    row.summary = run_seeds(name, cfg, seeds, dir, progress, memo);
    row.removed_params = full - row.summary.report.trainable;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<std::string>& axes,
                        const std::vector<AblationRow>& rows) {
  std::vector<std::string> header = axes;
  for (const char* h : {"seeds", "trainable", "infusion", "removed_params"}) header.emplace_back(h);
  std::vector<std::string> metric_names;
  if (!rows.empty()) {
    for (const auto& [k, _] : rows.front().summary.mean) metric_names.push_back(k);
  }
  header.insert(header.end(), metric_names.begin(), metric_names.end());
  std::vector<std::vector<std::string>> out;
  for (const auto& r : rows) {
    std::vector<std::string> line;
    for (const auto& a : axes) line.push_back(r.enabled.at(a) ? "1" : "0");
    line.push_back(std::to_string(r.summary.runs.size()));
    line.push_back(std::to_string(r.summary.report.trainable));
    line.push_back(std::to_string(r.summary.report.infusion));
    line.push_back(std::to_string(r.removed_params));
    for (const auto& m : metric_names) line.push_back(format_double(r.summary.mean.at(m)));
    out.push_back(std::move(line));
  }
  write_csv(path.string(), header, out);
}

std::vector<SchemaRow> run_schema_sweep(const RunConfig& base, const std::vector<int>& lengths,
                                        const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                                        const Progress& progress, RunMemo* memo) {
  if (lengths.empty()) throw ConfigError("schema sweep needs at least one length");
  const int longest = *std::max_element(lengths.begin(), lengths.end());
  if (*std::min_element(lengths.begin(), lengths.end()) < 0) throw ConfigError("filler lengths must be >= 0");
  // Longest prompt text plus the task token.
  constexpr int kPromptBudget = 192;
  RunConfig sweep = base;
  sweep.model.lm.max_seq = std::max(sweep.model.lm.max_seq, longest + kPromptBudget);
  std::vector<SchemaRow> rows;
  for (int len : lengths) {
    for (EmbeddingSchema schema : {EmbeddingSchema::kLastToken, EmbeddingSchema::kTaskToken}) {
      RunConfig cfg = sweep;
      cfg.task.filler_tokens = len;
      cfg.task.schema = schema;
      const std::string name = to_string(schema) + " filler=" + std::to_string(len);
      const std::filesystem::path dir =
          out_dir.empty() ? out_dir : out_dir / (to_string(schema) + "_" + std::to_string(len));
      rows.push_back({len, schema, run_seeds(name, cfg, seeds, dir, progress, memo)});
    }
  }
  return rows;
}

void write_schema_csv(const std::filesystem::path& path, const std::vector<SchemaRow>& rows) {
  std::vector<std::string> header{"filler_tokens", "schema", "seeds"};
  std::vector<std::string> metric_names;
  if (!rows.empty()) {
    for (const auto& [k, _] : rows.front().summary.mean) metric_names.push_back(k);
  }
  header.insert(header.end(), metric_names.begin(), metric_names.end());
  std::vector<std::vector<std::string>> out;
  for (const auto& r : rows) {
    std::vector<std::string> line{std::to_string(r.filler_tokens), to_string(r.schema),
                                  std::to_string(r.summary.runs.size())};
    for (const auto& m : metric_names) line.push_back(format_double(r.summary.mean.at(m)));
    out.push_back(std::move(line));
  }
  write_csv(path.string(), header, out);
}

}  // namespace mit
