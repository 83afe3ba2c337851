#include "mit/heads.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mit/ops.h"
#include "mit/rng.h"

namespace mit {

std::string to_string(Task task) {
  switch (task) {
    case Task::kSeg:
      return "seg";
    case Task::kCls:
      return "cls";
    case Task::kMsa:
      return "msa";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "seg") return Task::kSeg;
  if (s == "cls") return Task::kCls;
  if (s == "msa") return Task::kMsa;
  throw std::invalid_argument("unknown task '" + s + "' (expected seg, cls or msa)");
}

std::string prompt_template(Task task) {
  switch (task) {
    case Task::kSeg:
      return "Segment the {description} according to the text. #Segmentation:";
    case Task::kCls:
      return "Classify the image and text pair. Text: {text}. #Class:";
    case Task::kMsa:
      return "Predict the sentiment of the utterance. Utterance: {text}. #Sentiment:";
  }
  throw std::invalid_argument("unknown task");
}

std::string render_prompt(Task task, const std::map<std::string, std::string>& fields) {
  const std::string tpl = prompt_template(task);
  std::string out;
  std::size_t pos = 0;
  while (pos < tpl.size()) {
    const std::size_t open = tpl.find('{', pos);
    if (open == std::string::npos) {
      out += tpl.substr(pos);
      break;
    }
    const std::size_t close = tpl.find('}', open);
    out += tpl.substr(pos, open - pos);
    const std::string slot = tpl.substr(open + 1, close - open - 1);
    auto it = fields.find(slot);
    if (it == fields.end()) {
      throw std::invalid_argument("prompt for task " + to_string(task) + " requires slot '" + slot + "'");
    }
    out += it->second;
    pos = close + 1;
  }
  return out;
}

std::vector<int> byte_tokens(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

std::vector<int> format_prompt(Task task, const std::map<std::string, std::string>& fields) {
  return byte_tokens(render_prompt(task, fields));
}

std::string to_string(EmbeddingSchema schema) {
  return schema == EmbeddingSchema::kLastToken ? "last_token" : "task_token";
}

EmbeddingSchema embedding_schema_from_string(const std::string& s) {
  if (s == "last_token") return EmbeddingSchema::kLastToken;
  if (s == "task_token") return EmbeddingSchema::kTaskToken;
  throw std::invalid_argument("unknown embedding schema '" + s + "' (expected last_token or task_token)");
}

int TaskTokenTable::add(const std::string& name, std::uint64_t seed) {
  if (contains(name)) throw std::invalid_argument("task token " + name + " already registered");
  SplitMix64 rng(seed);
  const int token = base_vocab_ + static_cast<int>(names_.size());
  names_.push_back(name);
  ids_[name] = token;
  rows_.push_back(random_normal({1, static_cast<std::size_t>(d_model_)}, 1.0, rng, true));
  return token;
}

int TaskTokenTable::id(const std::string& name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) throw std::invalid_argument("task token " + name + " is not registered");
  return it->second;
}

Tensor TaskTokenTable::embeddings() const {
  if (rows_.empty()) return {};
  return rows_.size() == 1 ? rows_.front() : concat(rows_, 0);
}

std::vector<NamedTensor> TaskTokenTable::named_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.push_back({"task_token." + names_[i], rows_[i]});
  return out;
}

std::size_t find_token(std::span<const int> tokens, int token_id) {
  auto it = std::find(tokens.begin(), tokens.end(), token_id);
  if (it == tokens.end()) throw std::invalid_argument("task token " + std::to_string(token_id) + " not in sequence");
  return static_cast<std::size_t>(it - tokens.begin());
}

Tensor extract_embedding(const Tensor& hidden, EmbeddingSchema schema, std::optional<std::size_t> task_token_pos) {
  if (hidden.rank() != 2 || hidden.dim(0) == 0) {
    throw ShapeError("extract_embedding: expected (L, d), got " + shape_str(hidden.shape()));
  }
  std::size_t row = hidden.dim(0) - 1;
  if (schema == EmbeddingSchema::kTaskToken) {
    if (!task_token_pos) throw std::invalid_argument("extract_embedding: task token absent from the sequence");
    if (*task_token_pos >= hidden.dim(0)) {
      throw std::out_of_range("extract_embedding: task token position " + std::to_string(*task_token_pos) +
                              " outside " + std::to_string(hidden.dim(0)) + " rows");
    }
    row = *task_token_pos;
  }
  return reshape(slice(hidden, 0, row, 1), {hidden.dim(1)});
}

Tensor upsample2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample2: expected (h, w, c), got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0);
  const std::size_t w = x.dim(1);
  const std::size_t c = x.dim(2);
  return reshape(broadcast_to(reshape(x, {h, 1, w, 1, c}), {h, 2, w, 2, c}), {2 * h, 2 * w, c});
}

Tensor depth_to_space(const Tensor& x, std::size_t r) {
  if (x.rank() != 3 || x.dim(2) != r * r) {
    throw ShapeError("depth_to_space: expected (h, w, " + std::to_string(r * r) + "), got " + shape_str(x.shape()));
  }
  const std::size_t h = x.dim(0);
  const std::size_t w = x.dim(1);
  return reshape(permute(reshape(x, {h, w, r, r}), {0, 2, 1, 3}), {h * r, w * r});
}

namespace {

Tensor pointwise(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t h = x.dim(0);
  const std::size_t wd = x.dim(1);
  const Tensor y = add(matmul(reshape(x, {h * wd, x.dim(2)}), w), b);
  return reshape(y, {h, wd, w.dim(1)});
}

Tensor broadcast_task(const Tensor& t, std::size_t h, std::size_t w) {
  return broadcast_to(reshape(t, {1, 1, t.dim(0)}), {h, w, t.dim(0)});
}

Tensor linear_vec(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(reshape(matmul(reshape(x, {1, x.dim(0)}), w), {w.dim(1)}), b);
}

}  // namespace

SegDecoder SegDecoder::random(int d_task, std::array<int, 3> level_channels, std::uint64_t seed) {
  SegDecoder s;
  s.d_task_ = d_task;
  s.level_channels_ = level_channels;
  SplitMix64 rng(seed);
  const auto dt = static_cast<std::size_t>(d_task);
  const std::array<std::size_t, 3> in{static_cast<std::size_t>(level_channels[2]) + kTaskWidth,
                                      kHidden[0] + static_cast<std::size_t>(level_channels[1]) + kTaskWidth,
                                      kHidden[1] + static_cast<std::size_t>(level_channels[0]) + kTaskWidth};
  for (std::size_t i = 0; i < 3; ++i) {
    s.task_w_[i] = random_normal({dt, kTaskWidth}, 1.0 / std::sqrt(static_cast<double>(dt)), rng, true);
    s.task_b_[i] = Tensor::zeros({kTaskWidth}, true);
    s.conv_w_[i] = random_normal({in[i], kHidden[i]}, std::sqrt(2.0 / static_cast<double>(in[i])), rng, true);
    s.conv_b_[i] = Tensor::zeros({kHidden[i]}, true);
  }
  s.head_w_ = random_normal({kHidden[2], 16}, 1.0 / std::sqrt(static_cast<double>(kHidden[2])), rng, true);
  s.head_b_ = Tensor::zeros({16}, true);
  return s;
}

Tensor SegDecoder::decode(const Tensor& task_emb, const ImageFeatures& feats) const {
  if (task_emb.rank() != 1 || task_emb.dim(0) != static_cast<std::size_t>(d_task_)) {
    throw ShapeError("seg_decode: task embedding must be (" + std::to_string(d_task_) + "), got " +
                     shape_str(task_emb.shape()));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor& lv = feats.levels[i];
    const bool ok = lv.defined() && lv.rank() == 3 && lv.dim(2) == static_cast<std::size_t>(level_channels_[i]) &&
                    lv.dim(0) == feats.levels[0].dim(0) >> i && lv.dim(1) == feats.levels[0].dim(1) >> i;
    if (!ok) {
      throw ShapeError("seg_decode: feature level " + std::to_string(i + 1) + " has shape " +
                       (lv.defined() ? shape_str(lv.shape()) : "undefined") + ", expected channels " +
                       std::to_string(level_channels_[i]) + " at stride " + std::to_string(4 << i));
    }
  }
  const Tensor& l1 = feats.levels[0];
  const Tensor& l2 = feats.levels[1];
  const Tensor& l3 = feats.levels[2];
  auto task_map = [&](std::size_t i, const Tensor& like) {
    return broadcast_task(linear_vec(task_emb, task_w_[i], task_b_[i]), like.dim(0), like.dim(1));
  };
  Tensor x = relu(pointwise(concat({l3, task_map(0, l3)}, 2), conv_w_[0], conv_b_[0]));
  x = upsample2(x);
  x = relu(pointwise(concat({x, l2, task_map(1, l2)}, 2), conv_w_[1], conv_b_[1]));
  x = upsample2(x);
  x = relu(pointwise(concat({x, l1, task_map(2, l1)}, 2), conv_w_[2], conv_b_[2]));
  return depth_to_space(pointwise(x, head_w_, head_b_), 4);
}

std::vector<NamedTensor> SegDecoder::named_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "seg.block" + std::to_string(i + 1) + ".";
    out.push_back({p + "task_w", task_w_[i]});
    out.push_back({p + "task_b", task_b_[i]});
    out.push_back({p + "conv_w", conv_w_[i]});
    out.push_back({p + "conv_b", conv_b_[i]});
  }
  out.push_back({"seg.head_w", head_w_});
  out.push_back({"seg.head_b", head_b_});
  return out;
}

std::size_t SegDecoder::param_count(int d_task, std::array<int, 3> level_channels) {
  const auto dt = static_cast<std::size_t>(d_task);
  const std::array<std::size_t, 3> in{static_cast<std::size_t>(level_channels[2]) + kTaskWidth,
                                      kHidden[0] + static_cast<std::size_t>(level_channels[1]) + kTaskWidth,
                                      kHidden[1] + static_cast<std::size_t>(level_channels[0]) + kTaskWidth};
  std::size_t total = 0;
  for (std::size_t i = 0; i < 3; ++i) total += dt * kTaskWidth + kTaskWidth + in[i] * kHidden[i] + kHidden[i];
  return total + kHidden[2] * 16 + 16;
}

ClsHead ClsHead::random(int d_task, int d_modal, int classes, std::uint64_t seed) {
  if (classes < 1) throw std::invalid_argument("ClsHead: classes must be positive");
  SplitMix64 rng(seed);
  ClsHead h;
  h.classes_ = classes;
  const auto in = static_cast<std::size_t>(d_task + d_modal);
  h.w_ = random_normal({in, static_cast<std::size_t>(classes)}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
  h.b_ = Tensor::zeros({static_cast<std::size_t>(classes)}, true);
  return h;
}

ClsHead ClsHead::zeros(int d_task, int d_modal, int classes) {
  ClsHead h;
  h.classes_ = classes;
  h.w_ = Tensor::zeros({static_cast<std::size_t>(d_task + d_modal), static_cast<std::size_t>(classes)}, true);
  h.b_ = Tensor::zeros({static_cast<std::size_t>(classes)}, true);
  return h;
}

Tensor ClsHead::logits(const Tensor& task_emb, const Tensor& global) const {
  if (task_emb.rank() != 1 || global.rank() != 1 || task_emb.dim(0) + global.dim(0) != w_.dim(0)) {
    throw ShapeError("cls_head: expected inputs summing to " + std::to_string(w_.dim(0)) + ", got " +
                     shape_str(task_emb.shape()) + " and " + shape_str(global.shape()));
  }
  return linear_vec(concat({task_emb, global}, 0), w_, b_);
}

std::size_t ClsHead::param_count(int d_task, int d_modal, int classes) {
  return static_cast<std::size_t>(d_task + d_modal + 1) * static_cast<std::size_t>(classes);
}

RegHead RegHead::random(int d_task, std::uint64_t seed) {
  SplitMix64 rng(seed);
  RegHead h;
  h.w_ = random_normal({static_cast<std::size_t>(d_task), 1}, 1.0 / std::sqrt(static_cast<double>(d_task)), rng, true);
  h.b_ = Tensor::zeros({1}, true);
  return h;
}

RegHead RegHead::zeros(int d_task, bool with_bias) {
  RegHead h;
  h.w_ = Tensor::zeros({static_cast<std::size_t>(d_task), 1}, true);
  if (with_bias) h.b_ = Tensor::zeros({1}, true);
  return h;
}

Tensor RegHead::predict(const Tensor& task_emb) const {
  if (task_emb.rank() != 1 || task_emb.dim(0) != w_.dim(0)) {
    throw ShapeError("reg_head: expected (" + std::to_string(w_.dim(0)) + "), got " + shape_str(task_emb.shape()));
  }
  const Tensor y = reshape(matmul(reshape(task_emb, {1, task_emb.dim(0)}), w_), {1});
  return b_.defined() ? add(y, b_) : y;
}

std::vector<NamedTensor> RegHead::named_tensors() const {
  std::vector<NamedTensor> out{{"reg.w", w_}};
  if (b_.defined()) out.push_back({"reg.b", b_});
  return out;
}

Tensor dice_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("dice_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(gt.shape()));
  }
  for (double g : gt.data()) {
    if (g != 0.0 && g != 1.0) throw std::invalid_argument("dice_loss: target mask must be binary");
  }
  const Tensor inter = sum(mul(pred, gt));
  const Tensor denom = add_scalar(add(sum(pred), sum(gt)), kDiceEps);
  return add_scalar(neg(div(mul_scalar(inter, 2.0), denom)), 1.0);
}

Tensor ce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("ce_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t k = logits.dim(1);
  std::vector<std::size_t> flat(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("ce_loss: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) +
                              ")");
    }
    flat[i] = i * k + static_cast<std::size_t>(labels[i]);
  }
  const Tensor lp = reshape(log_softmax(logits, 1), {logits.numel()});
  return neg(mean(index_select(lp, 0, flat)));
}

Tensor rmse_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.numel() == 0) throw std::invalid_argument("rmse_loss: empty input");
  if (pred.shape() != gt.shape()) {
    throw ShapeError("rmse_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(gt.shape()));
  }
  return sqrt(mean(square(sub(pred, gt))));
}

void SegMetrics::add(std::span<const double> prob, std::span<const double> gt) {
  if (prob.size() != gt.size()) throw std::invalid_argument("SegMetrics: size mismatch");
  double inter = 0.0;
  double p_sum = 0.0;
  double g_sum = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double p = prob[i] >= 0.5 ? 1.0 : 0.0;
    inter += p * gt[i];
    p_sum += p;
    g_sum += gt[i];
  }
  intersection += inter;
  union_ += p_sum + g_sum - inter;
  dice_sum += (p_sum + g_sum) == 0.0 ? 1.0 : 2.0 * inter / (p_sum + g_sum);
  ++n;
}

ClsMetrics classification_metrics(std::span<const int> pred, std::span<const int> gt, int classes) {
  if (pred.size() != gt.size()) throw std::invalid_argument("classification_metrics: size mismatch");
  ClsMetrics m;
  if (pred.empty()) return m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == gt[i] ? 1 : 0;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  double f1_sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += (pred[i] == c && gt[i] == c) ? 1 : 0;
      fp += (pred[i] == c && gt[i] != c) ? 1 : 0;
      fn += (pred[i] != c && gt[i] == c) ? 1 : 0;
    }
    f1_sum += (2 * tp + fp + fn) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  m.macro_f1 = f1_sum / static_cast<double>(classes);
  return m;
}

MsaMetrics sentiment_metrics(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("sentiment_metrics: size mismatch");
  MsaMetrics m;
  const auto n = static_cast<double>(pred.size());
  if (pred.empty()) return m;
  double mp = 0, mg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    m.mae += std::abs(pred[i] - gt[i]);
    mp += pred[i];
    mg += gt[i];
  }
  m.mae /= n;
  mp /= n;
  mg /= n;
  double cov = 0, vp = 0, vg = 0;
  double tp = 0, fp = 0, fn = 0, hit2 = 0, hit7 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    cov += (pred[i] - mp) * (gt[i] - mg);
    vp += (pred[i] - mp) * (pred[i] - mp);
    vg += (gt[i] - mg) * (gt[i] - mg);
    const bool p_pos = pred[i] >= 0.0;
    const bool g_pos = gt[i] >= 0.0;
    hit2 += p_pos == g_pos ? 1 : 0;
    tp += (p_pos && g_pos) ? 1 : 0;
    fp += (p_pos && !g_pos) ? 1 : 0;
    fn += (!p_pos && g_pos) ? 1 : 0;
    const double p7 = std::round(std::clamp(pred[i], -3.0, 3.0));
    const double g7 = std::round(std::clamp(gt[i], -3.0, 3.0));
    hit7 += p7 == g7 ? 1 : 0;
  }
  m.corr = (vp == 0.0 || vg == 0.0) ? 0.0 : cov / std::sqrt(vp * vg);
  m.acc2 = hit2 / n;
  m.f1 = (2 * tp + fp + fn) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  m.acc7 = hit7 / n;
  return m;
}

void write_pgm(const std::string& path, std::span<const double> prob, std::size_t height, std::size_t width) {
  if (prob.size() != height * width) throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  for (double p : prob) out.put(static_cast<char>(p >= 0.5 ? 255 : 0));
  if (!out) throw std::runtime_error("failed writing " + path);
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace mit
