// Acceptance runner: one PASS/FAIL line per criterion.
//
//   mit_acceptance [--criterion N]... [--memo FILE] [--quiet]
//
// Long training criteria (7, 8, 11) record finished runs in the memo file,
// salted with a hash of this executable, so a rebuilt binary never reuses
// stale results.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "mit/cost.h"
#include "mit/experiments.h"
#include "mit/io.h"
#include "mit/ops.h"
#include "mit/rng.h"
#include "mit/train.h"

namespace fs = std::filesystem;
using namespace mit;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Context {
  RunMemo* memo = nullptr;
  bool quiet = false;
  fs::path scratch;
  std::shared_ptr<int> reused = std::make_shared<int>(0);
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

Progress progress_for(const Context& ctx) {
  return [reused = ctx.reused, quiet = ctx.quiet](const std::string& line) {
    if (line.ends_with(": reused")) ++*reused;
    if (!quiet) std::cerr << "  " << line << '\n';
  };
}

std::string memo_note(const Context& ctx) {
  const int n = std::exchange(*ctx.reused, 0);
  return n == 0 ? "" : "; " + std::to_string(n) + " runs reused from memo";
}

double mean_of(const VariantSummary& s, const std::string& metric) { return s.mean.at(metric); }

std::string per_seed(const VariantSummary& s, const std::string& metric) {
  std::string out;
  for (const auto& r : s.runs) out += (out.empty() ? "" : ",") + fmt(r.metrics.at(metric), 3);
  return out;
}

// ---- shared configurations ----------------------------------------------------

const std::vector<std::uint64_t> kSeeds{7, 8, 9};

RunConfig seg_config() {
  RunConfig c;
  c.task.name = Task::kSeg;
  c.data.n = 1000;
  c.train.lr0 = 1e-2;
  return c;
}

RunConfig msa_config() {
  RunConfig c;
  c.task.name = Task::kMsa;
  c.data.n = 400;
  c.train.lr0 = 1e-2;
  return c;
}

RunConfig without_infusion(RunConfig c) {
  c.infusion.enable_kv = false;
  c.infusion.enable_ff = false;
  c.infusion.enable_rescale = false;
  return c;
}

// ---- 1, 2: behaviour at initialization ------------------------------------------

struct InitDeviation {
  double max_abs = 0.0;
  double max_rel = 0.0;
};

InitDeviation init_deviation(bool rescale) {
  RunConfig cfg;
  cfg.task.name = Task::kSeg;
  cfg.infusion.enable_rescale = rescale;
  const Dataset data = generate_dataset(Task::kSeg, 50, 2024);
  MitPipeline p(cfg);
  p.attach(data);
  std::vector<std::size_t> images(50);
  std::iota(images.begin(), images.end(), 0);
  SplitMix64 rng(11);
  rng.shuffle(images);
  InitDeviation dev;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto tokens = p.tokens_for(i);
    const InfusionHook hook(p.infusion(), p.modal_embedding(images[i]), cfg.model.lm.n_heads);
    const ForwardResult plain = p.lm().forward(tokens);
    const ForwardResult infused = p.lm().forward(tokens, &hook);
    const auto base = plain.logits.data();
    const auto inf = infused.logits.data();
    double diff = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < base.size(); ++k) {
      diff = std::max(diff, std::abs(inf[k] - base[k]));
      scale = std::max(scale, std::abs(base[k]));
    }
    dev.max_abs = std::max(dev.max_abs, diff);
    dev.max_rel = std::max(dev.max_rel, diff / scale);
  }
  return dev;
}

Verdict criterion1(const Context&) {
  const InitDeviation d = init_deviation(false);
  return {d.max_abs <= 1e-12, "max |dlogit| = " + fmt(d.max_abs) + " over 50 pairs (tol 1e-12)"};
}

Verdict criterion2(const Context&) {
  const InitDeviation d = init_deviation(true);
  return {d.max_rel <= 1e-3, "max relative logit deviation = " + fmt(d.max_rel) + " (tol 1e-3), max |dlogit| = " +
                                 fmt(d.max_abs)};
}

// ---- 3: gradients ----------------------------------------------------------------

Verdict criterion3(const Context& ctx) {
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.tol = 1e-4;
  opt.abs_floor = 1e-6;
  opt.max_entries_per_tensor = 6;
  bool pass = true;
  std::string detail;
  for (Task task : {Task::kSeg, Task::kCls, Task::kMsa}) {
    RunConfig cfg;
    cfg.task.name = task;
    const GradCheckReport rep = pipeline_grad_check(cfg, 2, opt);
    std::size_t checked = 0;
    for (const auto& p : rep.per_param) {
      checked += p.checked;
      if (!p.passed && !ctx.quiet) std::cerr << "  " << to_string(task) << " " << p.name << " rel " << p.max_rel_err << '\n';
    }
    pass = pass && rep.passed();
    detail += (detail.empty() ? "" : "; ") + to_string(task) + " " + std::to_string(rep.per_param.size()) +
              " tensors/" + std::to_string(checked) + " entries max_rel_err=" + fmt(rep.max_rel_err, 3);
  }
  return {pass, detail + " (tol 1e-4, step 1e-5)"};
}

// ---- 4: freeze contract ----------------------------------------------------------

Verdict criterion4(const Context&) {
  RunConfig cfg;
  cfg.task.name = Task::kSeg;
  cfg.data.n = 200;
  cfg.train.lr0 = 1e-2;
  cfg.train.max_steps = 100;
  const Dataset data = generate_dataset(cfg.task.name, cfg.data.n, cfg.data.seed);
  const Split split = train_test_split(data.size(), cfg.data.seed);

  MitPipeline p(cfg);
  p.attach(data);
  std::map<std::string, std::string> before;
  for (const auto& t : p.frozen_tensors()) before[t.name] = tensor_sha256(t.tensor);
  const TrainResult r = train(p, split, cfg.train);
  std::size_t changed = 0;
  for (const auto& t : p.frozen_tensors()) changed += before.at(t.name) != tensor_sha256(t.tensor);

  MitPipeline leaky(cfg);
  leaky.attach(data);
  bool aborted = false;
  std::string message;
  for (auto& t : leaky.frozen_tensors()) {
    if (t.name == "lm.final_norm") t.tensor.set_requires_grad(true);
  }
  try {
    TrainSection short_run = cfg.train;
    short_run.max_steps = 1;
    train(leaky, split, short_run);
  } catch (const FreezeViolation& e) {
    aborted = true;
    message = e.what();
  }
  const bool pass = r.steps == 100 && changed == 0 && aborted;
  return {pass, std::to_string(r.steps) + " steps, " + std::to_string(changed) + "/" + std::to_string(before.size()) +
                    " frozen tensors changed; injected leak " + (aborted ? "aborted: " + message : "NOT detected")};
}

// ---- 5: parameter accounting -----------------------------------------------------

Verdict criterion5(const Context&) {
  SplitMix64 rng(5);
  int mismatches = 0;
  for (int i = 0; i < 20; ++i) {
    LMConfig lm;
    lm.n_heads = 1 + static_cast<int>(rng.below(4));
    lm.d_model = lm.n_heads * (1 + static_cast<int>(rng.below(8)));
    lm.n_layers = 1 + static_cast<int>(rng.below(6));
    lm.d_ff = 1 + static_cast<int>(rng.below(40));
    lm.vocab = 2 + static_cast<int>(rng.below(64));
    lm.max_seq = 1 + static_cast<int>(rng.below(16));
    lm.learned_positions = rng.below(2) == 0;
    MiTConfig mit;
    for (int l = 0; l < lm.n_layers; ++l) {
      if (rng.below(2) == 0) mit.infused_layers.push_back(l);
    }
    mit.enable_kv = rng.below(2) == 0;
    mit.enable_ff = rng.below(2) == 0;
    mit.enable_rescale = rng.below(2) == 0;
    mit.d_modal = 1 + static_cast<int>(rng.below(12));
    const std::size_t enumerated = count_params(MicroLM::random(lm, static_cast<std::uint64_t>(i))).total +
                                   count_params(InfusionParams::init(mit, lm).named_tensors()).total;
    mismatches += enumerated != lm_param_count(lm) + infusion_param_count(mit, lm);

    RunConfig run;
    run.task.name = static_cast<Task>(i % 3);
    run.model.lm.n_layers = lm.n_layers;
    run.model.lm.n_heads = lm.n_heads;
    run.model.lm.d_model = lm.d_model;
    run.model.lm.d_ff = lm.d_ff;
    run.infusion.d_modal = 4 * (1 + static_cast<int>(rng.below(4)));
    run.infusion.enable_kv = mit.enable_kv;
    run.infusion.enable_ff = mit.enable_ff;
    run.infusion.enable_rescale = mit.enable_rescale;
    const TrainableReport rep = MitPipeline(run).trainable_report();
    const TrainableReport cf = closed_form_report(run);
    mismatches += rep.total != cf.total || rep.trainable != cf.trainable;
    for (const auto& c : rep.components) mismatches += c.total != c.closed_form;
  }

  RunConfig large;
  large.model.preset = "llama7b";
  large.model.lm = LMConfig::llama7b();
  large.infusion.layers = "paper_default";
  large.infusion.d_modal = 768;
  large.task.name = Task::kSeg;
  const TrainableReport r = closed_form_report(large);
  const double inf_pct = 100.0 * r.infusion_fraction_of_base();
  const double all_pct = 100.0 * r.trainable_fraction_of_base();
  const bool pass = mismatches == 0 && r.infusion == 126386880u && std::abs(inf_pct - 1.9) < 0.05 &&
                    all_pct >= 1.5 && all_pct <= 3.0;
  return {pass, "20 random configs, " + std::to_string(mismatches) + " mismatches; llama7b infusion " +
                    std::to_string(r.infusion) + " = " + fmt(inf_pct, 3) + "% of " + fmt(static_cast<double>(r.base_total), 4) +
                    ", full trainable " + fmt(all_pct, 3) + "% (band [1.5, 3.0])"};
}

// ---- 6: cost model ---------------------------------------------------------------

Verdict criterion6(const Context&) {
  const std::vector<std::uint64_t> lengths{32, 64, 128, 256, 512};
  LMConfig lm = LMConfig::toy();
  lm.max_seq = 1024;
  RunConfig cfg;
  const MiTConfig mit = cfg.infusion.resolve(lm);
  const MicroLM model = MicroLM::random(lm, cfg.model.seed);
  const InfusionParams params = InfusionParams::init(mit, lm);

  bool equal_maps = true;
  double worst_ratio = 0.0;
  std::vector<double> x, mit_dep, prefix_attn;
  for (std::uint64_t l : lengths) {
    equal_maps = equal_maps && attn_map_elements(lm, l, CostMode::kMit) == attn_map_elements(lm, l, CostMode::kBase);
    x.push_back(static_cast<double>(l));
    mit_dep.push_back(static_cast<double>(mit_overhead_flops(lm, mit, l).token_dependent));
    prefix_attn.push_back(static_cast<double>(attn_map_elements(lm, l, CostMode::kPrefix, l) -
                                              attn_map_elements(lm, l, CostMode::kBase)));
    struct Case {
      CostMode mode;
      std::uint64_t prefix;
      const MiTConfig* cfg;
    };
    for (const Case& c : {Case{CostMode::kBase, 0, nullptr}, Case{CostMode::kMit, 0, &mit},
                          Case{CostMode::kPrefix, l, nullptr}}) {
      const auto measured = measure_peak_activation(model, l, c.mode, c.prefix, 3, &params);
      const auto analytic = analytic_activation_floats(lm, c.cfg, l, c.prefix);
      const double ratio = std::abs(static_cast<double>(measured.allocated_floats) /
                                        static_cast<double>(analytic.total) - 1.0);
      worst_ratio = std::max(worst_ratio, ratio);
      if (c.mode == CostMode::kMit) {
        equal_maps = equal_maps && measured.attn_map_floats == attn_map_elements(lm, l, CostMode::kBase);
      }
    }
  }
  const double s_mit = loglog_slope(x, mit_dep);
  const double s_prefix = loglog_slope(x, prefix_attn);
  const bool pass = equal_maps && std::abs(s_mit - 1.0) <= 0.05 && std::abs(s_prefix - 2.0) <= 0.05 &&
                    worst_ratio <= 0.10;
  return {pass, std::string("attention maps mit == base: ") + (equal_maps ? "yes" : "NO") + "; mit slope " +
                    fmt(s_mit) + " (1 +- 0.05); prefix(P=L) attention slope " + fmt(s_prefix) +
                    " (2 +- 0.05); worst activation mismatch " + fmt(100.0 * worst_ratio, 3) + "% (tol 10%)"};
}

// ---- 7: segmentation information flow ------------------------------------------------

Verdict criterion7(const Context& ctx) {
  const VariantSummary full = run_seeds("seg-full", seg_config(), kSeeds, {}, progress_for(ctx), ctx.memo);
  const VariantSummary none =
      run_seeds("seg-no-infusion", without_infusion(seg_config()), kSeeds, {}, progress_for(ctx), ctx.memo);
  const double d_full = mean_of(full, "dice");
  const double d_none = mean_of(none, "dice");
  return {d_full >= 0.60 && d_none <= 0.35, "full MiT mean DICE " + fmt(d_full) + " [" + per_seed(full, "dice") +
                                                "] (>= 0.60); no infusion " + fmt(d_none) + " [" +
                                                per_seed(none, "dice") + "] (<= 0.35)" + memo_note(ctx)};
}

// ---- 8: sentiment modality ablation ------------------------------------------------------

Verdict criterion8(const Context& ctx) {
  std::map<std::string, double> mae;
  std::string detail;
  for (const auto& [name, mods] : std::vector<std::pair<std::string, std::vector<std::string>>>{
           {"T+A+F", {"acoustic", "facial"}}, {"T+A", {"acoustic"}}, {"T+F", {"facial"}}, {"T", {}}}) {
    RunConfig cfg = msa_config();
    cfg.task.modalities = mods;
    const VariantSummary s = run_seeds("msa " + name, cfg, kSeeds, {}, progress_for(ctx), ctx.memo);
    mae[name] = mean_of(s, "mae");
    detail += (detail.empty() ? "" : ", ") + name + " " + fmt(mae[name]) + " [" + per_seed(s, "mae") + "]";
  }
  const bool pass = mae["T+A+F"] <= 0.5 * mae["T"] && mae["T+A+F"] < mae["T+A"] && mae["T+A+F"] < mae["T+F"];
  return {pass, "mean test MAE: " + detail + "; need T+A+F <= 0.5 T and < each two-modality row" + memo_note(ctx)};
}

// ---- 9: losses and schedule -------------------------------------------------------------

Verdict criterion9(const Context&) {
  std::vector<std::string> failed;
  int cases = 0;
  auto check = [&](const std::string& name, double got, double want, double tol = 1e-9) {
    ++cases;
    if (!(std::abs(got - want) <= tol)) failed.push_back(name + " got " + fmt(got, 17) + " want " + fmt(want, 17));
  };
  const Tensor gt = Tensor::from({2, 2}, {1, 0, 0, 0});
  check("dice perfect", dice_loss(gt, gt).item(), 1.0 - 2.0 / (2.0 + kDiceEps));
  check("dice disjoint", dice_loss(Tensor::from({2, 2}, {0, 1, 1, 0}), gt).item(), 1.0);
  check("dice hand case", dice_loss(Tensor::from({2, 2}, {0.5, 0.0, 1.0, 0.0}), gt).item(),
        1.0 - 2.0 * 0.5 / (1.5 + 1.0 + kDiceEps));
  const std::vector<int> one{1};
  check("ce confident", ce_loss(Tensor::from({1, 3}, {0, 100, 0}), one).item(), 0.0);
  for (std::size_t k : {2u, 3u, 10u}) {
    check("ce uniform k=" + std::to_string(k), ce_loss(Tensor::zeros({1, k}), one).item(), std::log(double(k)));
  }
  SplitMix64 rng(9);
  std::vector<double> lv(12);
  for (double& v : lv) v = rng.normal();
  const std::vector<int> labels{2, 0, 3};
  double want = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(lv[r * 4 + c]);
    want += std::log(z) - lv[r * 4 + static_cast<std::size_t>(labels[r])];
  }
  check("ce loop oracle", ce_loss(Tensor::from({3, 4}, lv), labels).item(), want / 3.0, 1e-12);
  const Tensor a = Tensor::from({2}, {0.25, -1.5});
  check("rmse zero", rmse_loss(a, a).item(), 0.0);
  check("rmse hand case", rmse_loss(Tensor::from({2}, {3, -4}), Tensor::zeros({2})).item(), std::sqrt(12.5));
  const Tensor x = Tensor::from({3}, {0.3, -2.0, 1.1}), y = Tensor::from({3}, {1.0, 0.5, -0.7});
  check("rmse homogeneity", rmse_loss(x * -2.5, y * -2.5).item(), 2.5 * rmse_loss(x, y).item());

  const TrainSection schedule;
  const std::vector<std::pair<int, double>> sched{{0, 4e-5}, {10, 4e-6}, {20, 4e-7}};
  for (const auto& [epoch, lr] : sched) {
    if (lr_at_epoch(schedule, epoch) != lr) failed.push_back("lr epoch " + std::to_string(epoch) + " = " + fmt(lr_at_epoch(schedule, epoch), 17));
  }
  std::string detail = std::to_string(cases) + " loss cases to 1e-9, lr {0,10,20} -> {" + fmt(lr_at_epoch(schedule, 0)) + ", " +
                       fmt(lr_at_epoch(schedule, 10)) + ", " + fmt(lr_at_epoch(schedule, 20)) + "} exact";
  for (const auto& f : failed) detail += "; FAILED " + f;
  return {failed.empty(), detail};
}

// ---- 10: determinism and persistence -------------------------------------------------------

Verdict criterion10(const Context& ctx) {
  RunConfig cfg;
  cfg.task.name = Task::kSeg;
  cfg.data.n = 64;
  cfg.train.epochs = 2;
  cfg.train.lr0 = 1e-2;
  const Dataset data = generate_dataset(cfg.task.name, cfg.data.n, cfg.data.seed);
  const fs::path a = ctx.scratch / "det_a", b = ctx.scratch / "det_b", c = ctx.scratch / "det_c";
  for (const auto& d : {a, b, c}) fs::remove_all(d);
  run_training(cfg, data, a);
  run_training(cfg, data, b);
  const bool identical = read_file(a / "checkpoint" / "payload.bin") == read_file(b / "checkpoint" / "payload.bin") &&
                         read_file(a / "checkpoint" / "manifest.json") == read_file(b / "checkpoint" / "manifest.json");

  const Checkpoint first = load_checkpoint(a / "checkpoint");
  save_checkpoint(c, first);
  const Checkpoint second = load_checkpoint(c);
  bool round_trip = read_file(a / "checkpoint" / "payload.bin") == read_file(c / "payload.bin") &&
                    first.tensors.size() == second.tensors.size();
  for (std::size_t i = 0; round_trip && i < first.tensors.size(); ++i) {
    round_trip = first.tensors[i].name == second.tensors[i].name &&
                 tensor_sha256(first.tensors[i].tensor) == tensor_sha256(second.tensors[i].tensor);
  }

  const auto payload = read_file(c / "payload.bin");
  SplitMix64 rng(10);
  int detected = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    auto bad = payload;
    bad[rng.below(bad.size())] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    write_file(c / "payload.bin", bad);
    try {
      load_checkpoint(c);
    } catch (const CheckpointError&) {
      ++detected;
    }
  }
  write_file(c / "payload.bin", payload);
  const bool pass = identical && round_trip && detected == trials;
  return {pass, std::string("seeded runs identical: ") + (identical ? "yes" : "NO") + "; load-save-load bit-exact: " +
                    (round_trip ? "yes" : "NO") + "; corruptions detected " + std::to_string(detected) + "/" +
                    std::to_string(trials)};
}

// ---- 11: ablation harness ---------------------------------------------------------------------

Verdict criterion11(const Context& ctx) {
  const std::vector<std::string> axes{"kv", "ff", "rescale"};
  const auto rows = run_ablation(seg_config(), axes, kSeeds, {}, progress_for(ctx), ctx.memo);
  bool counts_ok = rows.size() == 8;
  const AblationRow* all_on = nullptr;
  std::vector<const AblationRow*> single_off;
  for (const auto& r : rows) {
    std::size_t want = 0;
    int off = 0;
    for (const auto& a : axes) {
      if (!r.enabled.at(a)) {
        want += axis_param_count(a, seg_config());
        ++off;
      }
    }
    counts_ok = counts_ok && r.removed_params == want;
    if (off == 0) all_on = &r;
    if (off == 1) single_off.push_back(&r);
  }
  if (all_on == nullptr || single_off.size() != 3) return {false, "ablation did not produce the expected rows"};
  const double top = mean_of(all_on->summary, "dice");
  bool ordered = true;
  std::string detail = "8 rows, parameter removals " + std::string(counts_ok ? "exact" : "WRONG") + "; DICE all-on " +
                       fmt(top);
  for (const auto* r : single_off) {
    std::string which;
    for (const auto& a : axes) {
      if (!r->enabled.at(a)) which = a;
    }
    const double d = mean_of(r->summary, "dice");
    ordered = ordered && top >= d;
    detail += ", -" + which + " " + fmt(d);
  }
  for (const auto& r : rows) {
    std::string on;
    for (const auto& a : axes) on += r.enabled.at(a) ? "1" : "0";
    detail += (on == "000" ? "; all-off " + fmt(mean_of(r.summary, "dice")) : "");
  }
  return {counts_ok && ordered, detail + memo_note(ctx)};
}

std::string executable_digest() {
  try {
    return sha256_hex(read_file("/proc/self/exe"));
  } catch (const std::exception&) {
    return "unsalted";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::string memo_path;
  bool quiet = false;
  app.add_option("--criterion", only, "Criterion number (repeatable); all when omitted")->check(CLI::Range(1, 11));
  app.add_option("--memo", memo_path, "Run memo file shared by the training criteria");
  app.add_flag("--quiet", quiet, "No progress on stderr");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Verdict(const Context&)>>> criteria{
      {"identity at init, rescale off", criterion1},
      {"near-identity at init, rescale on", criterion2},
      {"gradient check", criterion3},
      {"freeze contract", criterion4},
      {"parameter accounting", criterion5},
      {"cost model", criterion6},
      {"segmentation information flow", criterion7},
      {"sentiment modality ablation", criterion8},
      {"loss and schedule suite", criterion9},
      {"determinism and persistence", criterion10},
      {"ablation harness", criterion11},
  };
  if (only.empty()) {
    for (int i = 1; i <= 11; ++i) only.push_back(i);
  }

  RunMemo memo;
  if (!memo_path.empty()) memo = RunMemo(memo_path, executable_digest());
  Context ctx{&memo, quiet, fs::temp_directory_path() / "mit_acceptance"};
  fs::create_directories(ctx.scratch);

  int failures = 0;
  for (int n : only) {
    const auto& [name, fn] = criteria.at(static_cast<std::size_t>(n - 1));
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << v.detail << " ["
              << fmt(secs, 3) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
