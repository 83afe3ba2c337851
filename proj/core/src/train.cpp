#include "mit/train.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>

#include "mit/io.h"
#include "mit/ops.h"
#include "mit/rng.h"

namespace mit {

static_assert(std::endian::native == std::endian::little, "checkpoint and hash encodings assume little-endian");

double lr_at_epoch(const TrainSection& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw std::out_of_range("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(cfg.epochs) + ")");
  }
  // Snapped to 15 significant digits so 4e-5 * 0.1^2 is 4e-7 and not 4.000000000000001e-07.
  const double raw = cfg.lr0 * std::pow(cfg.decay, epoch / cfg.decay_every);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", raw);
  return std::strtod(buf, nullptr);
}

NonFiniteLoss::NonFiniteLoss(long step, int epoch, double value)
    : std::runtime_error("non-finite loss " + std::to_string(value) + " at step " + std::to_string(step) +
                         " (epoch " + std::to_string(epoch) + ")"),
      step_(step) {}

bool FreezeMask::is_trainable(const std::string& name) const {
  auto it = trainable.find(name);
  return it != trainable.end() && it->second;
}

void check_freeze(std::span<const NamedTensor> tensors, const FreezeMask& mask) {
  for (const auto& t : tensors) {
    if (!mask.is_trainable(t.name) && t.tensor.has_grad()) {
      throw FreezeViolation("freeze contract violated: gradient reached frozen tensor " + t.name);
    }
  }
}

Adam::Adam(std::vector<NamedTensor> params, const FreezeMask& mask, double beta1, double beta2, double eps,
           double weight_decay, double grad_clip)
    : params_(std::move(params)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay),
      grad_clip_(grad_clip) {
  for (const auto& p : params_) {
    trainable_.push_back(mask.is_trainable(p.name));
    m_.emplace_back(trainable_.back() ? p.tensor.numel() : 0, 0.0);
    v_.emplace_back(trainable_.back() ? p.tensor.numel() : 0, 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void Adam::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!trainable_[i] && params_[i].tensor.has_grad()) {
      throw FreezeViolation("freeze contract violated: gradient reached frozen tensor " + params_[i].name);
    }
  }
  ++t_;
  double clip_scale = 1.0;
  if (grad_clip_ > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!trainable_[i] || !params_[i].tensor.has_grad()) continue;
      for (double g : params_[i].tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > grad_clip_) clip_scale = grad_clip_ / norm;
  }
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!trainable_[i] || !params_[i].tensor.has_grad()) continue;
    Tensor t = params_[i].tensor;
    const auto grad = t.grad();
    auto data = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j] * clip_scale + weight_decay_ * data[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::string tensor_sha256(const Tensor& t) {
  const auto d = t.data();
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(d.data()), d.size() * sizeof(double)));
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  ByteWriter payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    const std::size_t offset = payload.size();
    payload.f32s(t.tensor.data());
    const auto bytes = std::span(payload.data()).subspan(offset);
    entries.push_back({{"name", t.name},
                       {"shape", t.tensor.shape()},
                       {"offset", offset},
                       {"count", t.tensor.numel()},
                       {"sha256", sha256_hex(bytes)}});
  }
  nlohmann::json manifest{{"format", "mit-checkpoint-1"},
                          {"config", ckpt.config},
                          {"epoch", ckpt.epoch},
                          {"history", ckpt.history},
                          {"payload_bytes", payload.size()},
                          {"tensors", entries}};
  write_file(dir / "payload.bin", payload.data());
  write_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = read_json(dir / "manifest.json");
  } catch (const FormatError& e) {
    throw CheckpointError(e.what());
  }
  const auto payload = read_file(dir / "payload.bin");
  Checkpoint ckpt;
  try {
    if (manifest.at("format").get<std::string>() != "mit-checkpoint-1") {
      throw CheckpointError("unsupported checkpoint format");
    }
    ckpt.config = manifest.at("config");
    ckpt.epoch = manifest.at("epoch").get<int>();
    ckpt.history = manifest.at("history");
    std::size_t expected_bytes = 0;
    for (const auto& e : manifest.at("tensors")) expected_bytes += 4 * e.at("count").get<std::size_t>();
    if (expected_bytes != payload.size() || manifest.at("payload_bytes").get<std::size_t>() != payload.size()) {
      throw CheckpointError("payload.bin has " + std::to_string(payload.size()) + " bytes, manifest describes " +
                            std::to_string(expected_bytes));
    }
    for (const auto& e : manifest.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (shape.empty() || shape_numel(shape) != count) {
        throw CheckpointError("tensor " + name + ": shape " + shape_str(shape) + " disagrees with count " +
                              std::to_string(count));
      }
      if (offset + 4 * count > payload.size()) throw CheckpointError("tensor " + name + ": extends past payload end");
      const auto bytes = std::span(payload).subspan(offset, 4 * count);
      if (sha256_hex(bytes) != e.at("sha256").get<std::string>()) {
        throw CheckpointError("checksum mismatch in tensor " + name);
      }
      ByteReader r(bytes);
      ckpt.tensors.push_back({name, Tensor::from(shape, r.f32s(count))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(dir.string() + "/manifest.json: " + e.what());
  }
  return ckpt;
}

double TrainableReport::fraction() const {
  return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total);
}

double TrainableReport::infusion_fraction_of_base() const {
  return base_total == 0 ? 0.0 : static_cast<double>(infusion) / static_cast<double>(base_total);
}

double TrainableReport::trainable_fraction_of_base() const {
  return base_total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(base_total);
}

nlohmann::json TrainableReport::to_json() const {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : components) {
    comps.push_back({{"name", c.name}, {"total", c.total}, {"trainable", c.trainable}, {"closed_form", c.closed_form}});
  }
  return {{"components", comps},
          {"total", total},
          {"trainable", trainable},
          {"fraction", fraction()},
          {"base_total", base_total},
          {"infusion", infusion},
          {"infusion_fraction_of_base", infusion_fraction_of_base()},
          {"trainable_fraction_of_base", trainable_fraction_of_base()}};
}

namespace {

const char* task_token_name(Task task) {
  switch (task) {
    case Task::kSeg:
      return "<SEG>";
    case Task::kCls:
      return "<CLS>";
    case Task::kMsa:
      return "<SENT>";
  }
  return "<TASK>";
}

bool uses_modality(const RunConfig& cfg, const std::string& m) {
  return std::find(cfg.task.modalities.begin(), cfg.task.modalities.end(), m) != cfg.task.modalities.end();
}

void finalize(TrainableReport& r) {
  r.total = 0;
  r.trainable = 0;
  for (const auto& c : r.components) {
    r.total += c.total;
    r.trainable += c.trainable;
    if (c.name == "language_model") r.base_total = c.total;
    if (c.name == "infusion") r.infusion = c.trainable;
  }
}

std::string filler_text(int n) {
  static const std::string kFiller = "lorem ipsum dolor sit amet ";
  std::string out;
  for (int i = 0; i < n; ++i) out.push_back(kFiller[static_cast<std::size_t>(i) % kFiller.size()]);
  return out;
}

std::vector<std::pair<std::string, std::size_t>> closed_components(const RunConfig& cfg, const MiTConfig& mit) {
  const LMConfig& lm = cfg.model.lm;
  const int di = cfg.infusion.d_modal;
  std::vector<std::pair<std::string, std::size_t>> out{{"language_model", lm_param_count(lm)}};
  if (cfg.task.name != Task::kMsa) out.emplace_back("image_encoder", ImageEncoder::param_count(di, kImageChannels));
  if (cfg.task.name == Task::kMsa) {
    if (uses_modality(cfg, "acoustic")) out.emplace_back("acoustic_encoder", SeqEncoder::param_count(kAcousticDim, di, kMaxSteps));
    if (uses_modality(cfg, "facial")) out.emplace_back("facial_encoder", SeqEncoder::param_count(kFacialDim, di, kMaxSteps));
  }
  out.emplace_back("infusion", infusion_param_count(mit, lm));
  if (cfg.task.schema == EmbeddingSchema::kTaskToken) out.emplace_back("task_tokens", static_cast<std::size_t>(lm.d_model));
  switch (cfg.task.name) {
    case Task::kSeg:
      out.emplace_back("head", SegDecoder::param_count(lm.d_model, {16, 32, di}));
      break;
    case Task::kCls:
      out.emplace_back("head", ClsHead::param_count(lm.d_model, di, cfg.task.classes));
      break;
    case Task::kMsa:
      out.emplace_back("head", RegHead::param_count(lm.d_model));
      break;
  }
  return out;
}

bool frozen_component(const std::string& name) { return name == "language_model" || name == "image_encoder"; }

}  // namespace

TrainableReport closed_form_report(const RunConfig& cfg) {
  const MiTConfig mit = cfg.infusion.resolve(cfg.model.lm);
  TrainableReport r;
  for (const auto& [name, n] : closed_components(cfg, mit)) {
    r.components.push_back({name, n, frozen_component(name) ? 0 : n, n});
  }
  finalize(r);
  return r;
}

MitPipeline::MitPipeline(const RunConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const LMConfig& lm = cfg_.model.lm;
  mit_ = cfg_.infusion.resolve(lm);
  const std::uint64_t ts = cfg_.train.seed;
  lm_ = MicroLM::random(lm, cfg_.model.seed);
  image_ = ImageEncoder::random(cfg_.infusion.d_modal, kImageChannels, mix_seed(cfg_.model.seed, 1));
  infusion_ = InfusionParams::init(mit_, lm);
  task_tokens_ = TaskTokenTable(lm.vocab, lm.d_model);
  if (cfg_.task.schema == EmbeddingSchema::kTaskToken) {
    task_token_id_ = task_tokens_.add(task_token_name(cfg_.task.name), mix_seed(ts, 11));
  }
  const int di = cfg_.infusion.d_modal;
  switch (cfg_.task.name) {
    case Task::kSeg:
      seg_head_ = SegDecoder::random(lm.d_model, image_.level_channels(), mix_seed(ts, 10));
      break;
    case Task::kCls:
      cls_head_ = ClsHead::random(lm.d_model, di, cfg_.task.classes, mix_seed(ts, 10));
      break;
    case Task::kMsa:
      reg_head_ = RegHead::random(lm.d_model, mix_seed(ts, 10));
      if (uses_modality(cfg_, "acoustic")) {
        acoustic_ = SeqEncoder::random(kAcousticDim, di, kMaxSteps, true, mix_seed(ts, 12));
      }
      if (uses_modality(cfg_, "facial")) {
        facial_ = SeqEncoder::random(kFacialDim, di, kMaxSteps, true, mix_seed(ts, 13));
      }
      break;
  }
}

void MitPipeline::attach(const Dataset& data) {
  if (data.task != cfg_.task.name) {
    throw ConfigError("dataset task " + to_string(data.task) + " does not match configured task " +
                      to_string(cfg_.task.name));
  }
  if (cfg_.task.name == Task::kCls) {
    for (const auto& s : data.cls) {
      if (s.label >= cfg_.task.classes) throw ConfigError("dataset label exceeds task.classes");
    }
  }
  data_ = &data;
  image_feats_.clear();
  acoustic_in_.clear();
  facial_in_.clear();
  const Shape img_shape{kImageSize, kImageSize, kImageChannels};
  for (const auto& s : data.seg) image_feats_.push_back(image_.encode(Tensor::from(img_shape, s.image)));
  for (const auto& s : data.cls) image_feats_.push_back(image_.encode(Tensor::from(img_shape, s.image)));
  for (const auto& s : data.msa) {
    const auto steps = static_cast<std::size_t>(s.steps);
    acoustic_in_.push_back(Tensor::from({steps, kAcousticDim}, s.acoustic));
    facial_in_.push_back(Tensor::from({steps, kFacialDim}, s.facial));
  }
}

std::size_t MitPipeline::attached_size() const { return data_ == nullptr ? 0 : data_->size(); }

std::vector<int> MitPipeline::tokens_for(std::size_t i) const {
  if (data_ == nullptr || i >= data_->size()) throw std::out_of_range("sample index out of range");
  std::map<std::string, std::string> fields;
  switch (cfg_.task.name) {
    case Task::kSeg:
      fields["description"] = data_->seg[i].description;
      break;
    case Task::kCls:
      fields["text"] = data_->cls[i].text;
      break;
    case Task::kMsa:
      fields["text"] = data_->msa[i].text;
      break;
  }
  std::vector<int> tokens = byte_tokens(filler_text(cfg_.task.filler_tokens));
  const auto prompt = format_prompt(cfg_.task.name, fields);
  tokens.insert(tokens.end(), prompt.begin(), prompt.end());
  if (task_token_id_ >= 0) tokens.push_back(task_token_id_);
  return tokens;
}

Tensor MitPipeline::modal_embedding(std::size_t i) const {
  if (cfg_.task.name != Task::kMsa) return image_feats_.at(i).global;
  Tensor total;
  if (acoustic_) total = acoustic_->encode(acoustic_in_.at(i)).pooled;
  if (facial_) {
    const Tensor f = facial_->encode(facial_in_.at(i)).pooled;
    total = total.defined() ? add(total, f) : f;
  }
  if (!total.defined()) total = Tensor::zeros({static_cast<std::size_t>(cfg_.infusion.d_modal)});
  return total;
}

Tensor MitPipeline::lm_hidden(const std::vector<int>& tokens, const Tensor& modal) {
  const int n = lm_.config().n_layers;
  const bool infuse = mit_.any_enabled();
  const int first = infuse ? mit_.infused_layers.front() : n;
  Tensor x;
  if (task_token_id_ < 0 && first > 0) {
    auto it = prefix_cache_.find(tokens);
    if (it == prefix_cache_.end()) {
      NoGradGuard no_grad;
      it = prefix_cache_.emplace(tokens, lm_.run_layers(lm_.embed(tokens), 0, first)).first;
    }
    x = it->second;
  } else {
    ForwardOptions opts;
    opts.extra_embeddings = task_tokens_.embeddings();
    x = lm_.run_layers(lm_.embed(tokens, opts), 0, first);
  }
  if (infuse) {
    const InfusionHook hook(infusion_, modal, lm_.config().n_heads);
    x = lm_.run_layers(x, first, n, &hook);
  }
  return lm_.finish(x, false).hidden;
}

Tensor MitPipeline::task_embedding(std::size_t i) {
  const auto tokens = tokens_for(i);
  const Tensor hidden = lm_hidden(tokens, modal_embedding(i));
  std::optional<std::size_t> pos;
  if (task_token_id_ >= 0) pos = find_token(tokens, task_token_id_);
  return extract_embedding(hidden, cfg_.task.schema, pos);
}

MitPipeline::Output MitPipeline::forward_sample(std::size_t i) {
  const Tensor emb = task_embedding(i);
  Output out;
  switch (cfg_.task.name) {
    case Task::kSeg:
      out.seg_logits = seg_head_->decode(emb, image_feats_.at(i));
      break;
    case Task::kCls:
      out.cls_logits = cls_head_->logits(emb, image_feats_.at(i).global);
      break;
    case Task::kMsa:
      out.value = reg_head_->predict(emb);
      break;
  }
  return out;
}

Tensor MitPipeline::batch_loss(std::span<const std::size_t> indices) {
  if (data_ == nullptr) throw std::logic_error("batch_loss: no dataset attached");
  if (indices.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const Shape mask_shape{kImageSize, kImageSize};
  switch (cfg_.task.name) {
    case Task::kSeg: {
      Tensor total;
      for (std::size_t i : indices) {
        const Tensor loss = dice_loss(sigmoid(forward_sample(i).seg_logits), Tensor::from(mask_shape, data_->seg.at(i).mask));
        total = total.defined() ? add(total, loss) : loss;
      }
      return mul_scalar(total, 1.0 / static_cast<double>(indices.size()));
    }
    case Task::kCls: {
      std::vector<Tensor> rows;
      std::vector<int> labels;
      for (std::size_t i : indices) {
        const Tensor logits = forward_sample(i).cls_logits;
        rows.push_back(reshape(logits, {1, logits.dim(0)}));
        labels.push_back(data_->cls.at(i).label);
      }
      return ce_loss(concat(rows, 0), labels);
    }
    case Task::kMsa: {
      std::vector<Tensor> preds;
      std::vector<double> gts;
      for (std::size_t i : indices) {
        preds.push_back(forward_sample(i).value);
        gts.push_back(data_->msa.at(i).label);
      }
      const std::size_t n = gts.size();
      return rmse_loss(concat(preds, 0), Tensor::from({n}, gts));
    }
  }
  throw std::logic_error("unknown task");
}

EvalResult MitPipeline::evaluate(std::span<const std::size_t> indices, bool keep_predictions) {
  if (data_ == nullptr) throw std::logic_error("evaluate: no dataset attached");
  NoGradGuard no_grad;
  EvalResult r;
  SegMetrics seg;
  std::vector<int> cls_pred, cls_gt;
  std::vector<double> msa_pred, msa_gt;
  double loss_sum = 0.0;
  for (std::size_t i : indices) {
    const Output out = forward_sample(i);
    SamplePrediction p;
    switch (cfg_.task.name) {
      case Task::kSeg: {
        const Tensor prob = sigmoid(out.seg_logits);
        const auto& mask = data_->seg.at(i).mask;
        loss_sum += dice_loss(prob, Tensor::from({kImageSize, kImageSize}, mask)).item();
        seg.add(prob.data(), mask);
        if (keep_predictions) p.seg_prob.assign(prob.data().begin(), prob.data().end());
        break;
      }
      case Task::kCls: {
        const auto logits = out.cls_logits.data();
        const int label = data_->cls.at(i).label;
        loss_sum += ce_loss(reshape(out.cls_logits, {1, logits.size()}), std::span(&label, 1)).item();
        cls_pred.push_back(static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
        cls_gt.push_back(label);
        if (keep_predictions) p.logits.assign(logits.begin(), logits.end());
        break;
      }
      case Task::kMsa: {
        const double v = out.value.item();
        const double gt = data_->msa.at(i).label;
        loss_sum += (v - gt) * (v - gt);
        msa_pred.push_back(v);
        msa_gt.push_back(gt);
        p.value = v;
        break;
      }
    }
    if (keep_predictions) r.predictions.push_back(std::move(p));
  }
  const double n = std::max<double>(1.0, static_cast<double>(indices.size()));
  switch (cfg_.task.name) {
    case Task::kSeg:
      r.metrics["loss"] = loss_sum / n;
      r.metrics["dice"] = seg.mean_dice();
      r.metrics["oiou"] = seg.oiou();
      break;
    case Task::kCls: {
      const auto m = classification_metrics(cls_pred, cls_gt, cfg_.task.classes);
      r.metrics["loss"] = loss_sum / n;
      r.metrics["acc"] = m.accuracy;
      r.metrics["f1"] = m.macro_f1;
      break;
    }
    case Task::kMsa: {
      const auto m = sentiment_metrics(msa_pred, msa_gt);
      r.metrics["loss"] = std::sqrt(loss_sum / n);
      r.metrics["mae"] = m.mae;
      r.metrics["corr"] = m.corr;
      r.metrics["acc2"] = m.acc2;
      r.metrics["f1"] = m.f1;
      r.metrics["acc7"] = m.acc7;
      break;
    }
  }
  return r;
}

std::vector<NamedTensor> MitPipeline::state() const {
  std::vector<NamedTensor> out;
  for (const auto& w : lm_.named_weights()) out.push_back({"lm." + w.name, w.tensor});
  if (cfg_.task.name != Task::kMsa) {
    for (const auto& w : image_.named_weights()) out.push_back(w);
  }
  if (acoustic_) {
    for (const auto& w : acoustic_->named_weights()) out.push_back({"acoustic." + w.name, w.tensor});
  }
  if (facial_) {
    for (const auto& w : facial_->named_weights()) out.push_back({"facial." + w.name, w.tensor});
  }
  for (const auto& w : infusion_.named_tensors()) out.push_back(w);
  for (const auto& w : task_tokens_.named_tensors()) out.push_back(w);
  if (seg_head_) {
    for (const auto& w : seg_head_->named_tensors()) out.push_back(w);
  }
  if (cls_head_) {
    for (const auto& w : cls_head_->named_tensors()) out.push_back(w);
  }
  if (reg_head_) {
    for (const auto& w : reg_head_->named_tensors()) out.push_back(w);
  }
  return out;
}

FreezeMask MitPipeline::freeze_mask() const {
  FreezeMask mask;
  for (const auto& t : state()) {
    const bool frozen = t.name.rfind("lm.", 0) == 0 || t.name.rfind("image.", 0) == 0;
    mask.trainable[t.name] = !frozen;
  }
  return mask;
}

std::vector<NamedTensor> MitPipeline::trainable_tensors() const {
  const FreezeMask mask = freeze_mask();
  std::vector<NamedTensor> out;
  for (const auto& t : state()) {
    if (mask.is_trainable(t.name)) out.push_back(t);
  }
  return out;
}

std::vector<NamedTensor> MitPipeline::frozen_tensors() const {
  const FreezeMask mask = freeze_mask();
  std::vector<NamedTensor> out;
  for (const auto& t : state()) {
    if (!mask.is_trainable(t.name)) out.push_back(t);
  }
  return out;
}

void MitPipeline::load_state(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, Tensor> by_name;
  for (const auto& t : tensors) by_name[t.name] = t.tensor;
  for (const auto& dst : state()) {
    auto it = by_name.find(dst.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor " + dst.name);
    if (it->second.shape() != dst.tensor.shape()) {
      throw CheckpointError("tensor " + dst.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                            shape_str(dst.tensor.shape()));
    }
    Tensor t = dst.tensor;
    const auto src = it->second.data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
  prefix_cache_.clear();
}

TrainableReport MitPipeline::trainable_report() const {
  std::map<std::string, std::vector<NamedTensor>> groups;
  for (const auto& t : state()) {
    std::string g;
    if (t.name.rfind("lm.", 0) == 0) {
      g = "language_model";
    } else if (t.name.rfind("image.", 0) == 0) {
      g = "image_encoder";
    } else if (t.name.rfind("acoustic.", 0) == 0) {
      g = "acoustic_encoder";
    } else if (t.name.rfind("facial.", 0) == 0) {
      g = "facial_encoder";
    } else if (t.name.rfind("infusion.", 0) == 0) {
      g = "infusion";
    } else if (t.name.rfind("task_token.", 0) == 0) {
      g = "task_tokens";
    } else {
      g = "head";
    }
    groups[g].push_back(t);
  }
  TrainableReport r;
  for (const auto& [name, closed] : closed_components(cfg_, mit_)) {
    ComponentCount c;
    c.name = name;
    c.closed_form = closed;
    const ParamCount pc = count_params(groups[name]);
    c.total = pc.total;
    c.trainable = pc.trainable;
    if (c.total != c.closed_form) {
      throw std::logic_error("trainable_report: " + name + " enumerates " + std::to_string(c.total) +
                             " parameters, closed form gives " + std::to_string(c.closed_form));
    }
    r.components.push_back(c);
  }
  finalize(r);
  return r;
}

nlohmann::json history_to_json(const std::vector<EpochRecord>& history) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& h : history) {
    out.push_back({{"epoch", h.epoch}, {"lr", h.lr}, {"train_loss", h.train_loss}, {"metrics", h.metrics}});
  }
  return out;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::vector<std::string> header{"epoch", "lr", "train_loss"};
  if (!history.empty()) {
    for (const auto& [k, _] : history.front().metrics) header.push_back("test_" + k);
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& h : history) {
    std::vector<std::string> row{std::to_string(h.epoch), format_double(h.lr), format_double(h.train_loss)};
    for (const auto& [_, v] : h.metrics) row.push_back(format_double(v));
    rows.push_back(std::move(row));
  }
  write_csv(path.string(), header, rows);
}

TrainResult train(MitPipeline& pipeline, const Split& split, const TrainSection& cfg, const TrainHooks& hooks) {
  if (split.train.empty()) throw std::invalid_argument("train: empty training split");
  const FreezeMask mask = pipeline.freeze_mask();
  Adam adam(pipeline.state(), mask, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.grad_clip);
  SplitMix64 order_rng(mix_seed(cfg.seed, 0xDA7A));
  TrainResult result;
  const auto batch = static_cast<std::size_t>(cfg.batch);
  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::vector<std::size_t> order = split.train;
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(batch, order.size() - start);
      const Tensor loss = pipeline.batch_loss(std::span(order).subspan(start, len));
      const double value = loss.item();
      if (!std::isfinite(value)) throw NonFiniteLoss(result.steps, epoch, value);
      adam.zero_grad();
      loss.backward();
      adam.step(lr);
      ++result.steps;
      loss_sum += value;
      ++batches;
      if (hooks.on_step) hooks.on_step(result.steps);
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        done = true;
        break;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    if (!split.test.empty()) rec.metrics = pipeline.evaluate(split.test).metrics;
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  adam.zero_grad();
  return result;
}

std::string primary_metric(Task task) {
  switch (task) {
    case Task::kSeg:
      return "dice";
    case Task::kCls:
      return "acc";
    case Task::kMsa:
      return "mae";
  }
  return "loss";
}

RunOutcome run_training(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                        const TrainHooks& hooks) {
  MitPipeline pipeline(cfg);
  pipeline.attach(data);
  const Split split = train_test_split(data.size(), cfg.data.seed, cfg.data.train_fraction);
  RunOutcome out;
  out.report = pipeline.trainable_report();
  out.result = train(pipeline, split, cfg.train, hooks);
  if (!out.result.history.empty()) out.final_metrics = out.result.history.back().metrics;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    write_json(out_dir / "resolved-config.json", config_to_json(cfg));
    write_json(out_dir / "trainable_report.json", out.report.to_json());
    write_history_csv(out_dir / "history.csv", out.result.history);
    Checkpoint ckpt;
    ckpt.config = config_to_json(cfg);
    ckpt.epoch = out.result.history.empty() ? 0 : out.result.history.back().epoch + 1;
    ckpt.history = history_to_json(out.result.history);
    ckpt.tensors = pipeline.state();
    save_checkpoint(out_dir / "checkpoint", ckpt);
  }
  return out;
}

GradCheckReport pipeline_grad_check(const RunConfig& cfg, std::size_t n_samples, const GradCheckOptions& options,
                                    double perturb_scale) {
  if (n_samples == 0) throw std::invalid_argument("pipeline_grad_check: need at least one sample");
  const Dataset data = generate_dataset(cfg.task.name, n_samples, cfg.data.seed);
  MitPipeline pipeline(cfg);
  pipeline.attach(data);
  SplitMix64 rng(mix_seed(cfg.train.seed, 0x6C4E));
  const std::vector<NamedTensor> params = pipeline.trainable_tensors();
  for (const auto& p : params) {
    Tensor t = p.tensor;
    // Saturated gates have gradients below central-difference resolution.
    const bool gate = p.name.ends_with(".l_gate");
    for (double& v : t.mutable_data()) v = gate ? rng.normal(0.0, 1.0) : v + rng.normal(0.0, perturb_scale);
  }
  std::vector<std::size_t> indices(n_samples);
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  return grad_check([&] { return pipeline.batch_loss(indices); }, params, options);
}

}  // namespace mit
