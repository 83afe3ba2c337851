#pragma once

// Modality encoders producing the global embedding I.
//
// ImageEncoder: frozen, seeded stand-in for a pretrained vision backbone.
// Three non-overlapping strided convolutions (4x4/4, 2x2/2, 2x2/2) with ReLU;
// two normalized coordinate channels are appended to the input so the maps
// carry location. Levels sit at strides {4, 8, 16} with {16, 32, d_I}
// channels; `global` is a frozen linear map of the mean-pooled last level.
//
// SeqEncoder: trainable encoder for per-step feature sequences (acoustic,
// facial). Linear input projection to d_I, learned positions, three pre-norm
// bidirectional transformer blocks with 2 heads, then mean pooling.

#include <array>
#include <cstdint>
#include <vector>

#include "mit/tensor.h"

namespace mit {

struct ImageFeatures {
  Tensor global;                 // (d_I)
  std::array<Tensor, 3> levels;  // (H/4, W/4, 16), (H/8, W/8, 32), (H/16, W/16, d_I)
};

class ImageEncoder {
 public:
  static constexpr int kStride = 16;
  static constexpr std::array<int, 3> kLevelStrides{4, 8, 16};

  static ImageEncoder random(int d_modal, int in_channels, std::uint64_t seed);

  int d_modal() const { return d_modal_; }
  int in_channels() const { return in_channels_; }
  std::array<int, 3> level_channels() const { return {16, 32, d_modal_}; }

  // img: (H, W, C) with H, W divisible by 16. Runs without recording a graph.
  ImageFeatures encode(const Tensor& img) const;

  std::vector<NamedTensor> named_weights() const;
  static ImageEncoder from_weights(int d_modal, int in_channels, const std::vector<NamedTensor>& weights);
  static std::size_t param_count(int d_modal, int in_channels);

 private:
  int d_modal_ = 32;
  int in_channels_ = 3;
  std::array<Tensor, 3> kernels_;  // (k*k*c_in, c_out)
  std::array<Tensor, 3> biases_;
  Tensor global_w_;  // (d_I, d_I)
  Tensor global_b_;
};

// (H, W, C) -> (H/p * W/p, p*p*C), rows in raster order of patches.
Tensor patchify(const Tensor& x, std::size_t p);

struct SeqFeatures {
  Tensor pooled;    // (d_I)
  Tensor per_step;  // (L, d_I)
};

struct SeqBlock {
  Tensor norm1, wq, wk, wv, wo;
  Tensor norm2, w1, b1, w2, b2;
};

class SeqEncoder {
 public:
  static constexpr int kBlocks = 3;
  static constexpr int kHeads = 2;

  static SeqEncoder random(int d_feat, int d_modal, int max_len, bool trainable, std::uint64_t seed);

  int d_feat() const { return d_feat_; }
  int d_modal() const { return d_modal_; }
  int max_len() const { return max_len_; }
  bool trainable() const { return trainable_; }

  // x: (L, d_feat) with 1 <= L <= max_len.
  SeqFeatures encode(const Tensor& x) const;

  std::vector<NamedTensor> named_weights() const;
  // Copies the given tensors into this encoder's weights (shape-checked).
  void load_weights(const std::vector<NamedTensor>& weights, const std::string& prefix);

  // Closed-form parameter count.
  static std::size_t param_count(int d_feat, int d_modal, int max_len);

 private:
  int d_feat_ = 8;
  int d_modal_ = 32;
  int max_len_ = 32;
  bool trainable_ = true;
  Tensor in_w_, in_b_, pos_;
  std::vector<SeqBlock> blocks_;
  Tensor final_norm_;
};

}  // namespace mit
