// mit: data generation, training, evaluation, gradient checks, cost sweeps
// and ablations for the infusion pipeline.
//
// Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mit/config.h"
#include "mit/cost.h"
#include "mit/data.h"
#include "mit/experiments.h"
#include "mit/gradcheck.h"
#include "mit/io.h"
#include "mit/train.h"

namespace fs = std::filesystem;
using namespace mit;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

void echo_config(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  write_json(dir / "resolved-config.json", config_to_json(cfg));
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> out;
  for (int s : parse_int_range(spec)) out.push_back(static_cast<std::uint64_t>(s));
  return out;
}

void print_progress(const std::string& line) { std::cerr << line << '\n'; }

int cmd_gen_data(const std::string& task, std::size_t n, std::uint64_t seed, const std::string& out) {
  if (n == 0) throw ConfigError("--n must be positive");
  const Dataset d = generate_dataset(task_from_string(task), n, seed);
  if (const auto problems = validate_dataset(d); !problems.empty()) {
    throw std::runtime_error("generated dataset failed validation: " + problems.front());
  }
  const std::string checksum = save_dataset(d, out);
  std::cout << "wrote " << n << " " << task << " samples to " << out << " sha256=" << checksum << '\n';
  if (d.task == Task::kSeg) {
    std::cout << "text_only_oracle_dice=" << format_double(text_only_oracle_dice(d.seg)) << '\n';
  } else if (d.task == Task::kMsa) {
    const LeastSquaresOracle o = msa_least_squares_oracle(d.msa);
    std::cout << "least_squares_mae text_only=" << format_double(o.text_only_mae)
              << " all_modalities=" << format_double(o.all_modal_mae) << '\n';
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out) {
  const RunConfig cfg = load_config(config_path);
  const Dataset data = load_dataset(data_dir);
  if (data.task != cfg.task.name) {
    throw ConfigError("config task '" + to_string(cfg.task.name) + "' does not match data task '" +
                      to_string(data.task) + "'");
  }
  echo_config(out, cfg);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec) {
    std::ostringstream line;
    line << "epoch " << rec.epoch << " lr " << format_double(rec.lr) << " train_loss " << format_double(rec.train_loss);
    for (const auto& [k, v] : rec.metrics) line << " " << k << " " << format_double(v);
    print_progress(line.str());
  };
  const RunOutcome outcome = run_training(cfg, data, out, hooks);
  std::cout << "trainable " << outcome.report.trainable << " / " << outcome.report.total << " ("
            << format_double(100.0 * outcome.report.fraction()) << "%)\n";
  for (const auto& [k, v] : outcome.final_metrics) std::cout << k << "=" << format_double(v) << '\n';
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& data_dir, std::string out, const std::string& split_name) {
  const Checkpoint ckpt = load_checkpoint(fs::path(run_dir) / "checkpoint");
  const RunConfig cfg = config_from_json(ckpt.config);
  const Dataset data = load_dataset(data_dir);
  if (data.task != cfg.task.name) {
    throw ConfigError("run task '" + to_string(cfg.task.name) + "' does not match data task '" +
                      to_string(data.task) + "'");
  }
  MitPipeline pipeline(cfg);
  pipeline.load_state(ckpt.tensors);
  pipeline.attach(data);
  std::vector<std::size_t> indices;
  if (split_name == "all") {
    indices.resize(data.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  } else {
    indices = train_test_split(data.size(), cfg.data.seed, cfg.data.train_fraction).test;
  }
  const EvalResult result = pipeline.evaluate(indices, true);
  if (out.empty()) out = run_dir;
  echo_config(out, cfg);
  std::vector<std::vector<std::string>> rows;
  for (const auto& [k, v] : result.metrics) {
    rows.push_back({k, format_double(v)});
    std::cout << k << "=" << format_double(v) << '\n';
  }
  write_csv((fs::path(out) / "metrics.csv").string(), {"metric", "value"}, rows);

  const fs::path pred_dir = fs::path(out) / "predictions";
  fs::create_directories(pred_dir);
  std::vector<std::vector<std::string>> pred_rows;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t idx = indices[i];
    const SamplePrediction& p = result.predictions.at(i);
    switch (cfg.task.name) {
      case Task::kSeg:
        write_pgm((pred_dir / ("sample" + std::to_string(idx) + ".pgm")).string(), p.seg_prob, kImageSize,
                  kImageSize);
        break;
      case Task::kCls: {
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.logits.size(); ++c) {
          if (p.logits[c] > p.logits[best]) best = c;
        }
        pred_rows.push_back({std::to_string(idx), std::to_string(data.cls[idx].label), std::to_string(best)});
        break;
      }
      case Task::kMsa:
        pred_rows.push_back({std::to_string(idx), format_double(data.msa[idx].label), format_double(p.value)});
        break;
    }
  }
  if (cfg.task.name != Task::kSeg) {
    write_csv((pred_dir / "predictions.csv").string(), {"index", "label", "prediction"}, pred_rows);
  }
  return 0;
}

int cmd_gradcheck(const std::string& config_path, std::size_t samples, const GradCheckOptions& options,
                  double perturb) {
  const RunConfig cfg = config_or_default(config_path);
  const GradCheckReport report = pipeline_grad_check(cfg, samples, options, perturb);
  for (const auto& p : report.per_param) {
    if (p.frozen) continue;
    std::cout << (p.passed ? "ok   " : "FAIL ") << p.name << " checked=" << p.checked
              << " max_rel_err=" << format_double(p.max_rel_err) << '\n';
  }
  std::cout << (report.passed() ? "PASS" : "FAIL") << " max_rel_err=" << format_double(report.max_rel_err)
            << " tol=" << format_double(report.tol) << '\n';
  return report.passed() ? 0 : kExitRuntime;
}

int cmd_cost(const std::string& config_path, const std::string& sweep, int prefix_opt, const std::string& out,
             bool measure) {
  const RunConfig cfg = config_or_default(config_path);
  std::string spec = sweep;
  if (spec.rfind("L=", 0) == 0) spec = spec.substr(2);
  const std::vector<int> lengths = spec.empty() ? cfg.cost.lengths : parse_int_range(spec);
  const int prefix_cfg = prefix_opt >= 0 ? prefix_opt : cfg.cost.prefix_tokens;
  const LMConfig& lm = cfg.model.lm;
  const MiTConfig mit = cfg.infusion.resolve(lm);

  // Measurements run a model whose position table covers the longest
  // prefixed sequence; only allocation counts are read from it.
  std::optional<MicroLM> probe_model;
  std::optional<InfusionParams> probe_params;
  if (measure) {
    LMConfig wide = lm;
    for (int l : lengths) wide.max_seq = std::max(wide.max_seq, l + (prefix_cfg < 0 ? l : prefix_cfg));
    probe_model = MicroLM::random(wide, cfg.model.seed);
    probe_params = InfusionParams::init(mit, wide);
  }

  std::vector<std::vector<std::string>> rows;
  std::vector<double> xs, mit_dep, prefix_attn_growth;
  for (int l : lengths) {
    const auto lt = static_cast<std::uint64_t>(l);
    const std::uint64_t p = prefix_cfg < 0 ? lt : static_cast<std::uint64_t>(prefix_cfg);
    const std::uint64_t base_attn = attn_map_elements(lm, lt, CostMode::kBase);
    const Overhead mit_over = mit_overhead_flops(lm, mit, lt);
    const Overhead prefix_over = prefix_overhead_flops(lm, lt, p);
    struct Row {
      CostMode mode;
      std::uint64_t p;
      std::uint64_t overhead;
      const MiTConfig* mit;
    };
    for (const Row& r : {Row{CostMode::kBase, 0, 0, nullptr}, Row{CostMode::kMit, 0, mit_over.total(), &mit},
                         Row{CostMode::kPrefix, p, prefix_over.total(), nullptr}}) {
      std::uint64_t floats = analytic_activation_floats(lm, r.mit, lt, r.p).total;
      if (measure) {
        floats = measure_peak_activation(*probe_model, lt, r.mode, r.p, cfg.cost.trials,
                                         r.mode == CostMode::kMit ? &*probe_params : nullptr)
                     .allocated_floats;
      }
      rows.push_back({to_string(r.mode), std::to_string(l), std::to_string(r.p),
                      std::to_string(attn_map_elements(lm, lt, r.mode, r.p)), std::to_string(r.overhead),
                      std::to_string(floats)});
    }
    xs.push_back(static_cast<double>(l));
    mit_dep.push_back(static_cast<double>(mit_over.token_dependent));
    prefix_attn_growth.push_back(static_cast<double>(attn_map_elements(lm, lt, CostMode::kPrefix, p) - base_attn));
  }
  write_csv(out, {"mode", "L_tok", "P", "attn_elems", "overhead_flops", "peak_floats"}, rows);
  std::cout << "wrote " << out << " (" << rows.size() << " rows, peak_floats "
            << (measure ? "measured" : "analytic") << ")\n";
  if (lengths.size() >= 2) {
    if (mit_dep.front() > 0) {
      std::cout << "mit token-dependent overhead log-log slope: " << format_double(loglog_slope(xs, mit_dep)) << '\n';
    }
    if (prefix_attn_growth.front() > 0) {
      std::cout << "prefix attention-map growth log-log slope: "
                << format_double(loglog_slope(xs, prefix_attn_growth)) << '\n';
    }
  }
  const ScaleEstimate est = scale_estimate();
  std::cout << "llama7b forward estimate: " << format_double(est.layer_tflops) << " TFLOPs (reference "
            << format_double(est.reference_tflops) << " TFLOPs); " << est.convention << '\n';
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axes_spec, const std::string& seeds_spec,
               const std::string& out) {
  const RunConfig cfg = config_or_default(config_path);
  const std::vector<std::string> axes = parse_axes(axes_spec);
  const std::vector<std::uint64_t> seeds = parse_seeds(seeds_spec);
  echo_config(out, cfg);
  const std::vector<AblationRow> rows = run_ablation(cfg, axes, seeds, out, print_progress);
  write_ablation_csv(fs::path(out) / "ablation.csv", axes, rows);
  const std::string metric = primary_metric(cfg.task.name);
  for (const auto& r : rows) {
    std::cout << r.summary.name << "  trainable=" << r.summary.report.trainable << " removed=" << r.removed_params
              << "  " << metric << "=" << format_double(r.summary.mean.at(metric)) << '\n';
  }
  return 0;
}

int cmd_schema_sweep(const std::string& config_path, const std::string& lengths_spec, const std::string& seeds_spec,
                     const std::string& out) {
  const RunConfig cfg = config_or_default(config_path);
  const std::vector<int> lengths = parse_int_range(lengths_spec);
  const std::vector<std::uint64_t> seeds = parse_seeds(seeds_spec);
  echo_config(out, cfg);
  const std::vector<SchemaRow> rows = run_schema_sweep(cfg, lengths, seeds, out, print_progress);
  write_schema_csv(fs::path(out) / "schema_sweep.csv", rows);
  const std::string metric = primary_metric(cfg.task.name);
  for (const auto& r : rows) {
    std::cout << "filler=" << r.filler_tokens << " " << to_string(r.schema) << "  " << metric << "="
              << format_double(r.summary.mean.at(metric)) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal infusion tuning toolkit"};
  app.require_subcommand(1);

  std::string task, out, config, data, run, split = "test", sweep, axes = "kv,ff,rescale", seeds = "7,8,9";
  std::string lengths = "8..96";
  std::size_t n = 0, samples = 2;
  std::uint64_t seed = 7;
  int prefix = -1;
  bool analytic_only = false;
  GradCheckOptions gc;
  gc.abs_floor = 1e-6;
  gc.max_entries_per_tensor = 6;
  double perturb = 0.05;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--task", task, "seg, cls or msa")->required()->check(CLI::IsMember({"seg", "cls", "msa"}));
  gen->add_option("--n", n, "Number of samples")->required();
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train the trainable parts of the pipeline");
  tr->add_option("--config", config, "Run config (JSON)")->required();
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--out", out, "Run directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a trained run");
  ev->add_option("--run", run, "Run directory")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--out", out, "Output directory (default: the run directory)");
  ev->add_option("--split", split, "test or all")->check(CLI::IsMember({"test", "all"}));

  auto* gcmd = app.add_subcommand("gradcheck", "Central-difference gradient check of the task loss");
  gcmd->add_option("--config", config, "Run config (JSON); toy defaults when omitted");
  gcmd->add_option("--samples", samples, "Samples in the checked batch");
  gcmd->add_option("--entries", gc.max_entries_per_tensor, "Entries checked per tensor (0 = all)");
  gcmd->add_option("--step", gc.step, "Finite-difference step");
  gcmd->add_option("--tol", gc.tol, "Relative error tolerance");
  gcmd->add_option("--floor", gc.abs_floor, "Relative error denominator floor");
  gcmd->add_option("--perturb", perturb, "Std of the noise added to trainable tensors");

  auto* cost = app.add_subcommand("cost", "Analytic and measured conditioning cost sweep");
  cost->add_option("--config", config, "Run config (JSON)");
  cost->add_option("--sweep", sweep, "Token lengths, e.g. L=32..512");
  cost->add_option("--prefix", prefix, "Prefix tokens P (default: config, -1 means P = L)");
  cost->add_option("--out", out, "CSV path")->default_str("cost.csv");
  cost->add_flag("--analytic-only", analytic_only, "Skip allocation measurements");

  auto* ab = app.add_subcommand("ablate", "Train every on/off combination of infusion paths");
  ab->add_option("--config", config, "Run config (JSON)");
  ab->add_option("--axes", axes, "Comma-separated subset of kv,ff,rescale");
  ab->add_option("--seeds", seeds, "Root seeds, e.g. 7,8,9");
  ab->add_option("--out", out, "Output directory")->default_str("ablation");

  auto* ss = app.add_subcommand("schema-sweep", "Last-token vs task-token heads across prompt lengths");
  ss->add_option("--config", config, "Run config (JSON)");
  ss->add_option("--lengths", lengths, "Filler token counts, e.g. 8..96 or 8..96:8");
  ss->add_option("--seeds", seeds, "Root seeds, e.g. 7,8,9");
  ss->add_option("--out", out, "Output directory")->default_str("schema_sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(task, n, seed, out);
    if (tr->parsed()) return cmd_train(config, data, out);
    if (ev->parsed()) return cmd_eval(run, data, out, split);
    if (gcmd->parsed()) return cmd_gradcheck(config, samples, gc, perturb);
    if (cost->parsed()) return cmd_cost(config, sweep, prefix, out.empty() ? "cost.csv" : out, !analytic_only);
    if (ab->parsed()) return cmd_ablate(config, axes, seeds, out.empty() ? "ablation" : out);
    if (ss->parsed()) return cmd_schema_sweep(config, lengths, seeds, out.empty() ? "schema_sweep" : out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
