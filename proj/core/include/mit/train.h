#pragma once

// Optimization, freeze-contract enforcement, checkpoints and the train/eval
// loops around the full pipeline:
//   prompt tokens -> frozen MicroLM (+ infusion of I) -> task embedding -> head
// with I the global image vector (seg, cls) or the sum of the pooled
// acoustic/facial encodings (msa).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mit/config.h"
#include "mit/data.h"
#include "mit/encoders.h"
#include "mit/gradcheck.h"
#include "mit/heads.h"
#include "mit/infusion.h"
#include "mit/transformer.h"

namespace mit {

// lr0 * decay^floor(epoch / decay_every); epoch in [0, epochs).
double lr_at_epoch(const TrainSection& cfg, int epoch);

class FreezeViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(long step, int epoch, double value);
  long step() const { return step_; }

 private:
  long step_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FreezeMask {
  std::map<std::string, bool> trainable;
  bool is_trainable(const std::string& name) const;
};

// Adam with bias correction. Tensors marked frozen must never carry a
// gradient; step() throws FreezeViolation naming the tensor otherwise.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, const FreezeMask& mask, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double weight_decay = 0.0, double grad_clip = 0.0);

  void step(double lr);
  void zero_grad();
  long steps() const { return t_; }
  std::span<const double> first_moment(std::size_t i) const { return m_.at(i); }
  std::span<const double> second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<NamedTensor> params_;
  std::vector<bool> trainable_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_, grad_clip_;
  long t_ = 0;
};

// Raises FreezeViolation if any frozen tensor holds a gradient.
void check_freeze(std::span<const NamedTensor> tensors, const FreezeMask& mask);

// SHA-256 over the little-endian float64 bytes of a tensor.
std::string tensor_sha256(const Tensor& t);

struct Checkpoint {
  nlohmann::json config;
  int epoch = 0;
  nlohmann::json history = nlohmann::json::array();
  std::vector<NamedTensor> tensors;
};

// DIR/manifest.json + DIR/payload.bin (little-endian float32). Each tensor
// entry records name, shape, offset, count and the SHA-256 of its bytes.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct ComponentCount {
  std::string name;
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t closed_form = 0;
};

struct TrainableReport {
  std::vector<ComponentCount> components;
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t base_total = 0;  // frozen language model alone
  std::size_t infusion = 0;

  double fraction() const;             // trainable / total
  double infusion_fraction_of_base() const;
  double trainable_fraction_of_base() const;
  nlohmann::json to_json() const;
};

// Closed-form counts without allocating any tensor (used for the 7B preset).
TrainableReport closed_form_report(const RunConfig& cfg);

struct SamplePrediction {
  std::vector<double> seg_prob;  // (H*W)
  std::vector<double> logits;    // cls
  double value = 0.0;            // msa
};

struct EvalResult {
  std::map<std::string, double> metrics;
  std::vector<SamplePrediction> predictions;
};

class MitPipeline {
 public:
  explicit MitPipeline(const RunConfig& cfg);

  const RunConfig& config() const { return cfg_; }
  const MicroLM& lm() const { return lm_; }
  const MiTConfig& mit_config() const { return mit_; }
  const InfusionParams& infusion() const { return infusion_; }
  const ImageEncoder& image_encoder() const { return image_; }

  // Precomputes per-sample frozen features; must match the configured task.
  void attach(const Dataset& data);
  std::size_t attached_size() const;

  // Mean task loss over the given attached samples (graph recorded when
  // grad mode is on).
  Tensor batch_loss(std::span<const std::size_t> indices);
  EvalResult evaluate(std::span<const std::size_t> indices, bool keep_predictions = false);

  // Prompt tokens for sample i (after filler and task token).
  std::vector<int> tokens_for(std::size_t i) const;
  // Modal embedding I for sample i.
  Tensor modal_embedding(std::size_t i) const;
  // Task embedding of sample i.
  Tensor task_embedding(std::size_t i);

  std::vector<NamedTensor> state() const;
  std::vector<NamedTensor> trainable_tensors() const;
  std::vector<NamedTensor> frozen_tensors() const;
  FreezeMask freeze_mask() const;
  void load_state(const std::vector<NamedTensor>& tensors);

  TrainableReport trainable_report() const;

  // Drops cached frozen activations (e.g. after load_state).
  void clear_cache() { prefix_cache_.clear(); }

 private:
  struct Output {
    Tensor seg_logits;
    Tensor cls_logits;
    Tensor value;
  };
  Output forward_sample(std::size_t i);
  Tensor lm_hidden(const std::vector<int>& tokens, const Tensor& modal);

  RunConfig cfg_;
  MiTConfig mit_;
  MicroLM lm_;
  ImageEncoder image_;
  std::optional<SeqEncoder> acoustic_, facial_;
  InfusionParams infusion_;
  TaskTokenTable task_tokens_;
  int task_token_id_ = -1;
  std::optional<SegDecoder> seg_head_;
  std::optional<ClsHead> cls_head_;
  std::optional<RegHead> reg_head_;

  const Dataset* data_ = nullptr;
  std::vector<ImageFeatures> image_feats_;
  std::vector<Tensor> acoustic_in_, facial_in_;
  std::map<std::vector<int>, Tensor> prefix_cache_;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::map<std::string, double> metrics;  // held-out split
};

nlohmann::json history_to_json(const std::vector<EpochRecord>& history);
void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

struct TrainResult {
  std::vector<EpochRecord> history;
  long steps = 0;
};

struct TrainHooks {
  // Called after every optimizer step.
  std::function<void(long step)> on_step;
  // Called after every epoch with its record.
  std::function<void(const EpochRecord&)> on_epoch;
};

// Fixed-seed shuffled mini-batches over split.train; evaluates split.test
// after every epoch. Checks the freeze mask before every step and aborts on
// a non-finite loss.
TrainResult train(MitPipeline& pipeline, const Split& split, const TrainSection& cfg, const TrainHooks& hooks = {});

// Full run: pipeline on `data`, training, final checkpoint and history in
// out_dir (when non-empty).
struct RunOutcome {
  TrainResult result;
  std::map<std::string, double> final_metrics;
  TrainableReport report;
};
RunOutcome run_training(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir = {},
                        const TrainHooks& hooks = {});

// Headline metric for a task: dice (seg), acc (cls), mae (msa).
std::string primary_metric(Task task);

// Gradient check of the task loss over `n_samples` freshly generated samples
// against every trainable pipeline tensor. Trainable tensors are first moved
// off their initialization by N(0, perturb_scale^2) noise and gate logits
// are redrawn from N(0, 1), so no gradient is degenerate.
GradCheckReport pipeline_grad_check(const RunConfig& cfg, std::size_t n_samples, const GradCheckOptions& options,
                                    double perturb_scale = 0.05);

}  // namespace mit
