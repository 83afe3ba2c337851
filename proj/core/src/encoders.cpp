#include "mit/encoders.h"

#include <cmath>
#include <map>
#include <stdexcept>

#include "mit/ops.h"
#include "mit/rng.h"
#include "mit/transformer.h"

namespace mit {

Tensor patchify(const Tensor& x, std::size_t p) {
  if (x.rank() != 3 || p == 0 || x.dim(0) % p != 0 || x.dim(1) % p != 0) {
    throw ShapeError("patchify: cannot split " + shape_str(x.shape()) + " into " + std::to_string(p) + "x" +
                     std::to_string(p) + " patches");
  }
  const std::size_t h = x.dim(0) / p;
  const std::size_t w = x.dim(1) / p;
  const std::size_t c = x.dim(2);
  const Tensor t = permute(reshape(x, {h, p, w, p, c}), {0, 2, 1, 3, 4});
  return reshape(t, {h * w, p * p * c});
}

namespace {

constexpr std::array<std::size_t, 3> kPatch{4, 2, 2};

Tensor with_coordinates(const Tensor& img) {
  const std::size_t h = img.dim(0);
  const std::size_t w = img.dim(1);
  std::vector<double> coords(h * w * 2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      coords[(y * w + x) * 2] = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      coords[(y * w + x) * 2 + 1] = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
    }
  }
  return concat({img, Tensor::from({h, w, 2}, std::move(coords))}, 2);
}

void check_shape(const std::map<std::string, Tensor>& by_name, const std::string& name, const Tensor& expected) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw std::invalid_argument("missing tensor " + name);
  if (it->second.shape() != expected.shape()) {
    throw ShapeError("tensor " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                     shape_str(expected.shape()));
  }
}

}  // namespace

ImageEncoder ImageEncoder::random(int d_modal, int in_channels, std::uint64_t seed) {
  if (d_modal < 1 || in_channels < 1) throw std::invalid_argument("ImageEncoder: dimensions must be positive");
  ImageEncoder e;
  e.d_modal_ = d_modal;
  e.in_channels_ = in_channels;
  SplitMix64 rng(seed);
  const auto out = e.level_channels();
  std::size_t c_in = static_cast<std::size_t>(in_channels) + 2;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t fan_in = kPatch[i] * kPatch[i] * c_in;
    const auto c_out = static_cast<std::size_t>(out[i]);
    e.kernels_[i] = random_normal({fan_in, c_out}, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
    e.biases_[i] = random_normal({c_out}, 0.1, rng);
    c_in = c_out;
  }
  const auto d = static_cast<std::size_t>(d_modal);
  e.global_w_ = random_normal({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  e.global_b_ = Tensor::zeros({d});
  return e;
}

ImageFeatures ImageEncoder::encode(const Tensor& img) const {
  if (img.rank() != 3 || img.dim(0) % kStride != 0 || img.dim(1) % kStride != 0 || img.dim(0) == 0 ||
      img.dim(2) != static_cast<std::size_t>(in_channels_)) {
    throw ShapeError("ImageEncoder: expected (H, W, " + std::to_string(in_channels_) +
                     ") with H, W divisible by 16, got " + shape_str(img.shape()));
  }
  NoGradGuard no_grad;
  ImageFeatures f;
  Tensor x = with_coordinates(img);
  std::size_t h = img.dim(0);
  std::size_t w = img.dim(1);
  for (std::size_t i = 0; i < 3; ++i) {
    h /= kPatch[i];
    w /= kPatch[i];
    const Tensor y = relu(add(matmul(patchify(x, kPatch[i]), kernels_[i]), biases_[i]));
    x = reshape(y, {h, w, y.dim(1)});
    f.levels[i] = x;
  }
  const Tensor pooled = mean(reshape(x, {h * w, x.dim(2)}), 0);
  f.global = add(reshape(matmul(reshape(pooled, {1, pooled.dim(0)}), global_w_), {global_w_.dim(1)}), global_b_);
  return f;
}

std::vector<NamedTensor> ImageEncoder::named_weights() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back({"image.conv" + std::to_string(i + 1) + ".w", kernels_[i]});
    out.push_back({"image.conv" + std::to_string(i + 1) + ".b", biases_[i]});
  }
  out.push_back({"image.global.w", global_w_});
  out.push_back({"image.global.b", global_b_});
  return out;
}

ImageEncoder ImageEncoder::from_weights(int d_modal, int in_channels, const std::vector<NamedTensor>& weights) {
  ImageEncoder e = random(d_modal, in_channels, 0);
  std::map<std::string, Tensor> by_name;
  for (const auto& w : weights) by_name[w.name] = w.tensor;
  auto take = [&](const std::string& name, Tensor& slot) {
    check_shape(by_name, name, slot);
    slot = by_name.at(name).clone(false);
  };
  for (std::size_t i = 0; i < 3; ++i) {
    take("image.conv" + std::to_string(i + 1) + ".w", e.kernels_[i]);
    take("image.conv" + std::to_string(i + 1) + ".b", e.biases_[i]);
  }
  take("image.global.w", e.global_w_);
  take("image.global.b", e.global_b_);
  return e;
}

std::size_t ImageEncoder::param_count(int d_modal, int in_channels) {
  const auto d = static_cast<std::size_t>(d_modal);
  const std::size_t c1 = 4 * 4 * (static_cast<std::size_t>(in_channels) + 2) * 16 + 16;
  const std::size_t c2 = 2 * 2 * 16 * 32 + 32;
  const std::size_t c3 = 2 * 2 * 32 * d + d;
  return c1 + c2 + c3 + d * d + d;
}

SeqEncoder SeqEncoder::random(int d_feat, int d_modal, int max_len, bool trainable, std::uint64_t seed) {
  if (d_feat < 1 || d_modal < 1 || max_len < 1 || d_modal % kHeads != 0) {
    throw std::invalid_argument("SeqEncoder: invalid dimensions");
  }
  SeqEncoder e;
  e.d_feat_ = d_feat;
  e.d_modal_ = d_modal;
  e.max_len_ = max_len;
  e.trainable_ = trainable;
  SplitMix64 rng(seed);
  const auto f = static_cast<std::size_t>(d_feat);
  const auto d = static_cast<std::size_t>(d_modal);
  const std::size_t hidden = 2 * d;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  e.in_w_ = random_normal({f, d}, 1.0 / std::sqrt(static_cast<double>(f)), rng, trainable);
  e.in_b_ = Tensor::zeros({d}, trainable);
  e.pos_ = random_normal({static_cast<std::size_t>(max_len), d}, 0.1, rng, trainable);
  for (int b = 0; b < kBlocks; ++b) {
    SeqBlock blk;
    blk.norm1 = Tensor::ones({d}, trainable);
    blk.wq = random_normal({d, d}, sd, rng, trainable);
    blk.wk = random_normal({d, d}, sd, rng, trainable);
    blk.wv = random_normal({d, d}, sd, rng, trainable);
    blk.wo = random_normal({d, d}, sd, rng, trainable);
    blk.norm2 = Tensor::ones({d}, trainable);
    blk.w1 = random_normal({d, hidden}, sd, rng, trainable);
    blk.b1 = Tensor::zeros({hidden}, trainable);
    blk.w2 = random_normal({hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng, trainable);
    blk.b2 = Tensor::zeros({d}, trainable);
    e.blocks_.push_back(std::move(blk));
  }
  e.final_norm_ = Tensor::ones({d}, trainable);
  return e;
}

SeqFeatures SeqEncoder::encode(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != static_cast<std::size_t>(d_feat_)) {
    throw ShapeError("SeqEncoder: expected (L, " + std::to_string(d_feat_) + "), got " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(0);
  if (len == 0) throw std::invalid_argument("SeqEncoder: empty sequence");
  if (len > static_cast<std::size_t>(max_len_)) {
    throw std::invalid_argument("SeqEncoder: sequence length " + std::to_string(len) + " exceeds max_len " +
                                std::to_string(max_len_));
  }
  const auto d = static_cast<std::size_t>(d_modal_);
  const std::size_t hd = d / kHeads;
  const double scale = std::sqrt(static_cast<double>(hd));
  Tensor h = add(add(matmul(x, in_w_), in_b_), slice(pos_, 0, 0, len));
  for (const auto& blk : blocks_) {
    const Tensor a = rms_norm(h, blk.norm1);
    const Shape heads{len, static_cast<std::size_t>(kHeads), hd};
    const Tensor q = reshape(matmul(a, blk.wq), heads);
    const Tensor k = reshape(matmul(a, blk.wk), heads);
    const Tensor v = reshape(matmul(a, blk.wv), heads);
    h = add(h, matmul(attention(q, k, v, scale, false), blk.wo));
    const Tensor b = rms_norm(h, blk.norm2);
    h = add(h, add(matmul(relu(add(matmul(b, blk.w1), blk.b1)), blk.w2), blk.b2));
  }
  SeqFeatures f;
  f.per_step = rms_norm(h, final_norm_);
  f.pooled = mean(f.per_step, 0);
  return f;
}

std::vector<NamedTensor> SeqEncoder::named_weights() const {
  std::vector<NamedTensor> out{{"in_w", in_w_}, {"in_b", in_b_}, {"pos", pos_}};
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    const auto& blk = blocks_[b];
    for (auto [name, t] : std::vector<std::pair<const char*, const Tensor*>>{
             {"norm1", &blk.norm1}, {"wq", &blk.wq}, {"wk", &blk.wk}, {"wv", &blk.wv}, {"wo", &blk.wo},
             {"norm2", &blk.norm2}, {"w1", &blk.w1}, {"b1", &blk.b1}, {"w2", &blk.w2}, {"b2", &blk.b2}}) {
      out.push_back({p + name, *t});
    }
  }
  out.push_back({"final_norm", final_norm_});
  return out;
}

void SeqEncoder::load_weights(const std::vector<NamedTensor>& weights, const std::string& prefix) {
  std::map<std::string, Tensor> by_name;
  for (const auto& w : weights) by_name[w.name] = w.tensor;
  for (auto& nt : named_weights()) {
    const std::string name = prefix + nt.name;
    check_shape(by_name, name, nt.tensor);
    Tensor dst = nt.tensor;
    const auto src = by_name.at(name).data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

std::size_t SeqEncoder::param_count(int d_feat, int d_modal, int max_len) {
  const auto f = static_cast<std::size_t>(d_feat);
  const auto d = static_cast<std::size_t>(d_modal);
  const std::size_t block = 2 * d + 4 * d * d + (d * 2 * d + 2 * d) + (2 * d * d + d);
  return f * d + d + static_cast<std::size_t>(max_len) * d + kBlocks * block + d;
}

}  // namespace mit
