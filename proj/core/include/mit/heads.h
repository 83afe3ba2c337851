#pragma once

// Prompt templating, task-embedding extraction, task heads, losses and
// metrics.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mit/encoders.h"
#include "mit/tensor.h"

namespace mit {

enum class Task { kSeg, kCls, kMsa };

std::string to_string(Task task);
Task task_from_string(const std::string& s);

// ---- prompts --------------------------------------------------------------

std::string prompt_template(Task task);

// Substitutes every {slot}; throws std::invalid_argument naming a missing slot.
std::string render_prompt(Task task, const std::map<std::string, std::string>& fields);

// One token per byte (vocab 256).
std::vector<int> byte_tokens(const std::string& text);
std::vector<int> format_prompt(Task task, const std::map<std::string, std::string>& fields);

// ---- task embeddings -------------------------------------------------------

enum class EmbeddingSchema { kLastToken, kTaskToken };

std::string to_string(EmbeddingSchema schema);
EmbeddingSchema embedding_schema_from_string(const std::string& s);

// Learnable embeddings for extra tokens (<SEG>, <CLS>, ...) with ids starting
// at base_vocab.
class TaskTokenTable {
 public:
  TaskTokenTable() = default;
  TaskTokenTable(int base_vocab, int d_model) : base_vocab_(base_vocab), d_model_(d_model) {}

  int add(const std::string& name, std::uint64_t seed);
  int id(const std::string& name) const;
  bool contains(const std::string& name) const { return ids_.count(name) != 0; }
  std::size_t size() const { return names_.size(); }
  int vocab_size() const { return base_vocab_ + static_cast<int>(names_.size()); }

  // (size, d_model), or undefined when empty.
  Tensor embeddings() const;
  std::vector<NamedTensor> named_tensors() const;

 private:
  int base_vocab_ = 256;
  int d_model_ = 64;
  std::vector<std::string> names_;
  std::map<std::string, int> ids_;
  std::vector<Tensor> rows_;  // each (1, d_model)
};

// Position of the first occurrence of token_id; throws when absent.
std::size_t find_token(std::span<const int> tokens, int token_id);

// last_token -> row L-1; task_token -> row task_token_pos (required).
Tensor extract_embedding(const Tensor& hidden, EmbeddingSchema schema, std::optional<std::size_t> task_token_pos = {});

// ---- heads -------------------------------------------------------------------

// Three upsampling blocks over the image feature pyramid, each fed the task
// embedding projected to kTaskWidth channels and broadcast over space:
//   b1 = up2(relu(conv([level3, t1])))
//   b2 = up2(relu(conv([b1, level2, t2])))
//   b3 = relu(conv([b2, level1, t3]))
// A pointwise head emits 16 logits per stride-4 cell, rearranged into the
// 4x4 pixels of that cell, so the mask matches the image size.
class SegDecoder {
 public:
  static constexpr std::size_t kTaskWidth = 16;
  static constexpr std::array<std::size_t, 3> kHidden{128, 128, 64};

  static SegDecoder random(int d_task, std::array<int, 3> level_channels, std::uint64_t seed);

  // task_emb: (d_task). Returns mask logits (H, W).
  Tensor decode(const Tensor& task_emb, const ImageFeatures& feats) const;

  std::vector<NamedTensor> named_tensors() const;
  static std::size_t param_count(int d_task, std::array<int, 3> level_channels);

 private:
  int d_task_ = 64;
  std::array<int, 3> level_channels_{16, 32, 32};
  std::array<Tensor, 3> task_w_, task_b_, conv_w_, conv_b_;
  Tensor head_w_, head_b_;
};

// Linear map over [task_emb || global].
class ClsHead {
 public:
  static ClsHead random(int d_task, int d_modal, int classes, std::uint64_t seed);
  static ClsHead zeros(int d_task, int d_modal, int classes);
  Tensor logits(const Tensor& task_emb, const Tensor& global) const;  // (classes)
  int classes() const { return classes_; }
  std::vector<NamedTensor> named_tensors() const { return {{"cls.w", w_}, {"cls.b", b_}}; }
  static std::size_t param_count(int d_task, int d_modal, int classes);

 private:
  int classes_ = 3;
  Tensor w_, b_;
};

class RegHead {
 public:
  static RegHead random(int d_task, std::uint64_t seed);
  static RegHead zeros(int d_task, bool with_bias = true);
  Tensor predict(const Tensor& task_emb) const;  // (1)
  std::vector<NamedTensor> named_tensors() const;
  static std::size_t param_count(int d_task) { return static_cast<std::size_t>(d_task) + 1; }

 private:
  Tensor w_, b_;
};

// Nearest-neighbour 2x upsampling of an (h, w, c) map.
Tensor upsample2(const Tensor& x);
// (h, w, r*r) -> (h*r, w*r).
Tensor depth_to_space(const Tensor& x, std::size_t r);

// ---- losses ------------------------------------------------------------------

inline constexpr double kDiceEps = 1e-6;

// 1 - 2 sum(p*g) / (sum p + sum g + eps). gt must be 0/1 and match pred's shape.
Tensor dice_loss(const Tensor& pred, const Tensor& gt);
// Mean over rows of -log_softmax(logits)[label]. logits: (n, classes).
Tensor ce_loss(const Tensor& logits, std::span<const int> labels);
// sqrt(mean((pred - gt)^2)).
Tensor rmse_loss(const Tensor& pred, const Tensor& gt);

// ---- metrics -----------------------------------------------------------------

struct SegMetrics {
  double intersection = 0.0;
  double union_ = 0.0;
  double dice_sum = 0.0;
  std::size_t n = 0;

  // prob and gt are (H, W); prob is thresholded at 0.5.
  void add(std::span<const double> prob, std::span<const double> gt);
  double oiou() const { return union_ == 0.0 ? 1.0 : intersection / union_; }
  double mean_dice() const { return n == 0 ? 0.0 : dice_sum / static_cast<double>(n); }
};

struct ClsMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};
ClsMetrics classification_metrics(std::span<const int> pred, std::span<const int> gt, int classes);

struct MsaMetrics {
  double mae = 0.0;
  double corr = 0.0;
  double acc2 = 0.0;
  double f1 = 0.0;
  double acc7 = 0.0;
};
// acc2/f1 use the sign (>= 0 positive); acc7 rounds clamped values to {-3..3}.
MsaMetrics sentiment_metrics(std::span<const double> pred, std::span<const double> gt);

// ---- export --------------------------------------------------------------------

// Binary PGM (P5), 0/255 by thresholding prob at 0.5.
void write_pgm(const std::string& path, std::span<const double> prob, std::size_t height, std::size_t width);

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

std::string format_double(double v);

}  // namespace mit
