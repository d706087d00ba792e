#include "scedit/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "scedit/errors.hpp"

namespace scedit {

namespace {

using nlohmann::json;

class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    out = convert<T>(*it, path_ + "." + key);
  }

  template <class T>
  void require(const char* key, T& out) {
    if (!doc_.contains(key)) throw ConfigError(path_ + "." + key + ": required key missing");
    get(key, out);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.contains(key)) throw ConfigError(path_ + "." + key + ": unknown key");
    }
  }

 private:
  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) throw ConfigError(where + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else {
      if (!v.is_array()) throw ConfigError(where + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* schedule_name(BetaSchedule s) {
  return s == BetaSchedule::kLinear ? "linear" : "scaled_linear";
}

const char* mode_name(TunerMode m) {
  switch (m) {
    case TunerMode::kNone:
      return "none";
    case TunerMode::kSc:
      return "sc";
    case TunerMode::kCsc:
      return "csc";
  }
  return "?";
}

}  // namespace

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "linear_adapter") return AdapterKind::kLinear;
  if (name == "conv_adapter") return AdapterKind::kConv;
  if (name == "single_conv") return AdapterKind::kSingleConv;
  throw ConfigError("unknown adapter kind '" + name + "' (expected linear_adapter, conv_adapter or single_conv)");
}

const char* adapter_kind_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kLinear:
      return "linear_adapter";
    case AdapterKind::kConv:
      return "conv_adapter";
    case AdapterKind::kSingleConv:
      return "single_conv";
  }
  return "?";
}

NoiseSchedule DiffusionConfig::make() const { return make_schedule(num_steps, beta_start, beta_end, schedule); }

DdimOptions DiffusionConfig::ddim() const {
  DdimOptions o;
  o.steps = sample_steps;
  o.guide_scale = guide_scale;
  o.eta = eta;
  o.seed = seed;
  return o;
}

RunConfig parse_run_config(const json& doc) {
  RunConfig cfg;
  Section root(doc, "config");
  if (const json* j = root.child("model")) {
    Section s(*j, "model");
    auto& m = cfg.model;
    s.get("in_channels", m.in_channels);
    s.get("levels", m.levels);
    s.get("base_channels", m.base_channels);
    s.get("channel_mult", m.channel_mult);
    s.get("blocks_per_level", m.blocks_per_level);
    s.get("attn_levels", m.attn_levels);
    s.get("mid_attention", m.mid_attention);
    s.get("num_labels", m.num_labels);
    s.get("time_embed_dim", m.time_embed_dim);
    s.get("norm_groups", m.norm_groups);
    s.get("seed", m.seed);
    s.finish();
  }
  if (const json* j = root.child("diffusion")) {
    Section s(*j, "diffusion");
    auto& d = cfg.diffusion;
    s.get("num_steps", d.num_steps);
    s.get("beta_start", d.beta_start);
    s.get("beta_end", d.beta_end);
    std::string sched = schedule_name(d.schedule);
    s.get("schedule", sched);
    if (sched == "linear") {
      d.schedule = BetaSchedule::kLinear;
    } else if (sched == "scaled_linear") {
      d.schedule = BetaSchedule::kScaledLinear;
    } else {
      throw ConfigError("diffusion.schedule: expected linear or scaled_linear, got '" + sched + "'");
    }
    s.get("sample_steps", d.sample_steps);
    s.get("guide_scale", d.guide_scale);
    s.get("eta", d.eta);
    s.get("seed", d.seed);
    s.finish();
  }
  if (const json* j = root.child("tuner")) {
    Section s(*j, "tuner");
    auto& t = cfg.tuner;
    std::string mode = mode_name(t.mode);
    s.get("mode", mode);
    if (mode == "none") {
      t.mode = TunerMode::kNone;
    } else if (mode == "sc") {
      t.mode = TunerMode::kSc;
    } else if (mode == "csc") {
      t.mode = TunerMode::kCsc;
    } else {
      throw ConfigError("tuner.mode: expected none, sc or csc, got '" + mode + "'");
    }
    std::string kind = adapter_kind_name(t.tuner.kind);
    s.get("adapter", kind);
    try {
      t.tuner.kind = parse_adapter_kind(kind);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("tuner.adapter: ") + e.what());
    }
    s.get("hidden_ratio", t.tuner.hidden_ratio);
    s.get("active_indexes", t.tuner.active_indexes);
    s.get("conv_kernel", t.tuner.conv_kernel);
    s.get("scale", t.tuner.scale);
    std::string form = t.tuner.csc_form == CscForm::kEquation ? "equation" : "scaled_input";
    s.get("csc_form", form);
    if (form == "equation") {
      t.tuner.csc_form = CscForm::kEquation;
    } else if (form == "scaled_input") {
      t.tuner.csc_form = CscForm::kScaledInput;
    } else {
      throw ConfigError("tuner.csc_form: expected equation or scaled_input, got '" + form + "'");
    }
    s.get("hint_channels", t.tuner.hint_channels);
    s.get("conditions", t.conditions);
    for (std::size_t i = 0; i < t.conditions.size(); ++i) {
      try {
        condition_channels(t.conditions[i]);
      } catch (const ConfigError& e) {
        throw ConfigError("tuner.conditions[" + std::to_string(i) + "]: " + e.what());
      }
    }
    s.get("alphas", t.alphas);
    s.get("seed", t.seed);
    s.finish();
    if (t.mode == TunerMode::kCsc && t.conditions.empty()) {
      throw ConfigError("tuner.conditions: csc mode needs at least one condition type");
    }
  }
  if (const json* j = root.child("train")) {
    Section s(*j, "train");
    auto& t = cfg.train;
    s.get("lr", t.lr);
    s.get("weight_decay", t.weight_decay);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("adam_eps", t.adam_eps);
    s.get("batch_size", t.batch_size);
    s.get("steps", t.steps);
    s.get("seed", t.seed);
    s.get("freeze_backbone", t.freeze_backbone);
    s.get("cfg_dropout", t.cfg_dropout);
    s.get("decouple_encoder", t.decouple_encoder);
    s.get("blank_conditions", t.blank_conditions);
    s.finish();
  }
  if (const json* j = root.child("data")) {
    Section s(*j, "data");
    auto& d = cfg.data;
    s.get("dir", d.dir);
    s.get("count", d.count);
    s.get("val_count", d.val_count);
    s.get("size", d.size);
    s.get("seed", d.seed);
    s.finish();
  }
  if (const json* j = root.child("io")) {
    Section s(*j, "io");
    auto& io = cfg.io;
    s.get("out_dir", io.out_dir);
    s.get("base_checkpoint", io.base_checkpoint);
    s.get("tuner_checkpoint", io.tuner_checkpoint);
    s.get("log_every", io.log_every);
    s.get("checkpoint_every", io.checkpoint_every);
    s.finish();
  }
  root.finish();

  cfg.model.validate();
  cfg.train.validate();
  cfg.diffusion.make();
  if (cfg.diffusion.sample_steps < 1 || cfg.diffusion.sample_steps > cfg.diffusion.num_steps) {
    throw ConfigError("diffusion.sample_steps must be in [1, num_steps]");
  }
  if (cfg.data.count < 1) throw ConfigError("data.count must be >= 1");
  if (cfg.data.val_count < 0) throw ConfigError("data.val_count must be >= 0");
  if (cfg.io.log_every < 0 || cfg.io.checkpoint_every < 0) {
    throw ConfigError("io.log_every and io.checkpoint_every must be >= 0");
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(doc);
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  const auto& m = cfg.model;
  j["model"] = {{"in_channels", m.in_channels},
                {"levels", m.levels},
                {"base_channels", m.base_channels},
                {"channel_mult", m.channel_mult},
                {"blocks_per_level", m.blocks_per_level},
                {"attn_levels", m.attn_levels},
                {"mid_attention", m.mid_attention},
                {"num_labels", m.num_labels},
                {"time_embed_dim", m.time_embed_dim},
                {"norm_groups", m.norm_groups},
                {"seed", m.seed}};
  const auto& d = cfg.diffusion;
  j["diffusion"] = {{"num_steps", d.num_steps},
                    {"beta_start", d.beta_start},
                    {"beta_end", d.beta_end},
                    {"schedule", schedule_name(d.schedule)},
                    {"sample_steps", d.sample_steps},
                    {"guide_scale", d.guide_scale},
                    {"eta", d.eta},
                    {"seed", d.seed}};
  const auto& t = cfg.tuner;
  j["tuner"] = {{"mode", mode_name(t.mode)},
                {"adapter", adapter_kind_name(t.tuner.kind)},
                {"hidden_ratio", t.tuner.hidden_ratio},
                {"active_indexes", t.tuner.active_indexes},
                {"conv_kernel", t.tuner.conv_kernel},
                {"scale", t.tuner.scale},
                {"csc_form", t.tuner.csc_form == CscForm::kEquation ? "equation" : "scaled_input"},
                {"hint_channels", t.tuner.hint_channels},
                {"conditions", t.conditions},
                {"alphas", t.alphas},
                {"seed", t.seed}};
  const auto& tr = cfg.train;
  j["train"] = {{"lr", tr.lr},
                {"weight_decay", tr.weight_decay},
                {"beta1", tr.beta1},
                {"beta2", tr.beta2},
                {"adam_eps", tr.adam_eps},
                {"batch_size", tr.batch_size},
                {"steps", tr.steps},
                {"seed", tr.seed},
                {"freeze_backbone", tr.freeze_backbone},
                {"cfg_dropout", tr.cfg_dropout},
                {"decouple_encoder", tr.decouple_encoder},
                {"blank_conditions", tr.blank_conditions}};
  const auto& da = cfg.data;
  j["data"] = {{"dir", da.dir}, {"count", da.count}, {"val_count", da.val_count}, {"size", da.size}, {"seed", da.seed}};
  const auto& io = cfg.io;
  j["io"] = {{"out_dir", io.out_dir},
             {"base_checkpoint", io.base_checkpoint},
             {"tuner_checkpoint", io.tuner_checkpoint},
             {"log_every", io.log_every},
             {"checkpoint_every", io.checkpoint_every}};
  return j;
}

void apply_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("SCEDIT_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("SCEDIT_SEED: not an unsigned integer: '") + env + "'");
  cfg.train.seed = v;
  cfg.diffusion.seed = v;
}

}  // namespace scedit
