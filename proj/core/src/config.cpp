#include "mit/config.h"

#include <set>
#include <sstream>

#include "mit/io.h"

namespace mit {

using nlohmann::json;

MiTConfig InfusionSection::resolve(const LMConfig& lm) const {
  MiTConfig c;
  LayerSelection sel;
  if (layers == "last_third_stride") {
    sel = LayerSelection::last_third_stride(stride);
  } else if (layers == "paper_default") {
    sel = LayerSelection::paper_default();
  } else if (layers == "explicit") {
    sel = LayerSelection::explicit_list(explicit_layers);
  } else {
    throw ConfigError("infusion.layers: unknown policy '" + layers + "'");
  }
  c.infused_layers = select_layers(lm.n_layers, sel);
  c.enable_kv = enable_kv;
  c.enable_ff = enable_ff;
  c.enable_rescale = enable_rescale;
  c.gate_init = gate_init;
  c.pooling = pooling;
  c.d_modal = d_modal;
  return c;
}

namespace {

class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (root.contains(name)) {
      obj_ = root.at(name);
      if (!obj_.is_object()) throw ConfigError(name + ": expected an object");
    } else {
      obj_ = json::object();
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  void finish() const {
    for (const auto& [key, _] : obj_.items()) {
      if (seen_.count(key) == 0) throw ConfigError("unknown key " + name_ + "." + key);
    }
  }

 private:
  std::string name_;
  json obj_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> kSections{"model", "infusion", "task", "train", "data", "cost"};
  for (const auto& [key, _] : j.items()) {
    if (kSections.count(key) == 0) throw ConfigError("unknown config section '" + key + "'");
  }
  RunConfig c;
  {
    Section s(j, "model");
    s.get("preset", c.model.preset);
    if (c.model.preset == "toy") {
      c.model.lm = LMConfig::toy();
    } else if (c.model.preset == "llama7b") {
      c.model.lm = LMConfig::llama7b();
    } else {
      throw ConfigError("model.preset: unknown preset '" + c.model.preset + "'");
    }
    LMConfig& lm = c.model.lm;
    s.get("n_layers", lm.n_layers);
    s.get("d_model", lm.d_model);
    s.get("n_heads", lm.n_heads);
    if (s.has("d_model") && !s.has("d_ff")) lm.d_ff = LMConfig::default_ff(lm.d_model);
    s.get("d_ff", lm.d_ff);
    s.get("vocab", lm.vocab);
    s.get("max_seq", lm.max_seq);
    s.get("learned_positions", lm.learned_positions);
    std::string scale = to_string(lm.scale_mode);
    s.get("attn_scale_mode", scale);
    try {
      lm.scale_mode = attn_scale_mode_from_string(scale);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("model.attn_scale_mode: ") + e.what());
    }
    s.get("seed", c.model.seed);
    s.finish();
  }
  {
    Section s(j, "infusion");
    auto& inf = c.infusion;
    if (s.has("layers") && j.at("infusion").at("layers").is_array()) {
      inf.layers = "explicit";
      s.get("layers", inf.explicit_layers);
    } else {
      s.get("layers", inf.layers);
    }
    s.get("stride", inf.stride);
    s.get("enable_kv", inf.enable_kv);
    s.get("enable_ff", inf.enable_ff);
    s.get("enable_rescale", inf.enable_rescale);
    s.get("gate_init", inf.gate_init);
    std::string pooling = to_string(inf.pooling);
    s.get("rescale_pooling", pooling);
    try {
      inf.pooling = rescale_pooling_from_string(pooling);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("infusion.rescale_pooling: ") + e.what());
    }
    s.get("d_modal", inf.d_modal);
    s.finish();
  }
  {
    Section s(j, "task");
    std::string name = to_string(c.task.name);
    std::string schema = to_string(c.task.schema);
    s.get("name", name);
    s.get("schema", schema);
    try {
      c.task.name = task_from_string(name);
      c.task.schema = embedding_schema_from_string(schema);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("task: ") + e.what());
    }
    s.get("modalities", c.task.modalities);
    s.get("classes", c.task.classes);
    s.get("filler_tokens", c.task.filler_tokens);
    s.finish();
  }
  {
    Section s(j, "train");
    auto& t = c.train;
    s.get("lr0", t.lr0);
    s.get("decay", t.decay);
    s.get("decay_every", t.decay_every);
    s.get("epochs", t.epochs);
    s.get("batch", t.batch);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("eps", t.eps);
    s.get("seed", t.seed);
    s.get("grad_clip", t.grad_clip);
    s.get("weight_decay", t.weight_decay);
    s.get("max_steps", t.max_steps);
    s.finish();
  }
  {
    Section s(j, "data");
    s.get("n", c.data.n);
    s.get("seed", c.data.seed);
    s.get("train_fraction", c.data.train_fraction);
    s.finish();
  }
  {
    Section s(j, "cost");
    s.get("lengths", c.cost.lengths);
    s.get("prefix_tokens", c.cost.prefix_tokens);
    s.get("trials", c.cost.trials);
    s.finish();
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  try {
    model.lm.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (infusion.d_modal < 1) throw ConfigError("infusion.d_modal must be positive");
  if (infusion.stride < 1) throw ConfigError("infusion.stride must be >= 1");
  if (task.name == Task::kMsa && infusion.d_modal % 2 != 0) {
    throw ConfigError("infusion.d_modal must be even for msa (two encoder heads)");
  }
  try {
    infusion.resolve(model.lm).validate(model.lm);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("infusion: ") + e.what());
  }
  for (const auto& m : task.modalities) {
    if (m != "acoustic" && m != "facial") throw ConfigError("task.modalities: unknown modality '" + m + "'");
  }
  if (task.classes < 2) throw ConfigError("task.classes must be >= 2");
  if (task.filler_tokens < 0) throw ConfigError("task.filler_tokens must be >= 0");
  if (!(train.lr0 >= 0.0)) throw ConfigError("train.lr0 must be >= 0");
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (train.decay_every < 1) throw ConfigError("train.decay_every must be >= 1");
  if (train.max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
  if (data.n < 2) throw ConfigError("data.n must be >= 2");
  if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0)) {
    throw ConfigError("data.train_fraction must be in (0, 1)");
  }
  for (int l : cost.lengths) {
    if (l < 1) throw ConfigError("cost.lengths must be positive");
  }
  if (cost.trials < 1) throw ConfigError("cost.trials must be >= 1");
}

json config_to_json(const RunConfig& c) {
  const LMConfig& lm = c.model.lm;
  json infusion_layers = c.infusion.layers == "explicit" ? json(c.infusion.explicit_layers) : json(c.infusion.layers);
  return json{
      {"model",
       {{"preset", c.model.preset},
        {"n_layers", lm.n_layers},
        {"d_model", lm.d_model},
        {"n_heads", lm.n_heads},
        {"d_ff", lm.d_ff},
        {"vocab", lm.vocab},
        {"max_seq", lm.max_seq},
        {"learned_positions", lm.learned_positions},
        {"attn_scale_mode", to_string(lm.scale_mode)},
        {"seed", c.model.seed}}},
      {"infusion",
       {{"layers", infusion_layers},
        {"stride", c.infusion.stride},
        {"enable_kv", c.infusion.enable_kv},
        {"enable_ff", c.infusion.enable_ff},
        {"enable_rescale", c.infusion.enable_rescale},
        {"gate_init", c.infusion.gate_init},
        {"rescale_pooling", to_string(c.infusion.pooling)},
        {"d_modal", c.infusion.d_modal}}},
      {"task",
       {{"name", to_string(c.task.name)},
        {"schema", to_string(c.task.schema)},
        {"modalities", c.task.modalities},
        {"classes", c.task.classes},
        {"filler_tokens", c.task.filler_tokens}}},
      {"train",
       {{"lr0", c.train.lr0},
        {"decay", c.train.decay},
        {"decay_every", c.train.decay_every},
        {"epochs", c.train.epochs},
        {"batch", c.train.batch},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"seed", c.train.seed},
        {"grad_clip", c.train.grad_clip},
        {"weight_decay", c.train.weight_decay},
        {"max_steps", c.train.max_steps}}},
      {"data", {{"n", c.data.n}, {"seed", c.data.seed}, {"train_fraction", c.data.train_fraction}}},
      {"cost", {{"lengths", c.cost.lengths}, {"prefix_tokens", c.cost.prefix_tokens}, {"trials", c.cost.trials}}}};
}

RunConfig load_config(const std::string& path) {
  json j;
  try {
    j = read_json(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

std::vector<int> parse_int_range(const std::string& spec) {
  auto to_int = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("invalid integer '" + s + "' in range '" + spec + "'");
    }
  };
  std::vector<int> out;
  const auto dots = spec.find("..");
  if (dots == std::string::npos) {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_int(item));
  } else {
    const int lo = to_int(spec.substr(0, dots));
    std::string rest = spec.substr(dots + 2);
    int step = 0;
    if (const auto colon = rest.find(':'); colon != std::string::npos) {
      step = to_int(rest.substr(colon + 1));
      rest = rest.substr(0, colon);
      if (step < 1) throw ConfigError("range step must be positive in '" + spec + "'");
    }
    const int hi = to_int(rest);
    if (lo < 1 || hi < lo) throw ConfigError("invalid range '" + spec + "'");
    for (int v = lo; v <= hi; v = step > 0 ? v + step : v * 2) out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty range '" + spec + "'");
  return out;
}

}  // namespace mit
