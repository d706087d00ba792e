#include "scedit/tuners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "scedit/errors.hpp"
#include "scedit/ops.hpp"

namespace scedit {

void TunerConfig::validate(int num_skips) const {
  if (hidden_ratio < 1) throw ConfigError("tuner.hidden_ratio must be >= 1");
  if (kind != AdapterKind::kLinear && conv_kernel != 1 && conv_kernel != 3) {
    throw ConfigError("tuner.conv_kernel must be 1 or 3");
  }
  if (!std::isfinite(scale)) throw ConfigError("tuner.scale must be finite");
  if (hint_channels < 1) throw ConfigError("tuner.hint_channels must be >= 1");
  for (int j : active_indexes) {
    if (j < 0 || j >= num_skips) {
      throw ConfigError("tuner.active_indexes: " + std::to_string(j) + " outside [0, " +
                        std::to_string(num_skips) + ")");
    }
  }
}

bool TunerConfig::is_active(int j) const {
  return active_indexes.empty() ||
         std::find(active_indexes.begin(), active_indexes.end(), j) != active_indexes.end();
}

std::vector<int> TunerConfig::resolved_indexes(int num_skips) const {
  std::vector<int> out;
  for (int j = 0; j < num_skips; ++j) {
    if (is_active(j)) out.push_back(j);
  }
  return out;
}

int hidden_width(int channels, int hidden_ratio) { return std::max(1, channels / hidden_ratio); }

Adapter Adapter::make(int channels, const TunerConfig& cfg, std::mt19937_64& rng, DType dtype) {
  Adapter a;
  a.kind = cfg.kind;
  const int h = hidden_width(channels, cfg.hidden_ratio);
  switch (cfg.kind) {
    case AdapterKind::kLinear:
      a.down = nn::Conv2d::make(channels, h, 1, 1, rng, Init::kDefault, dtype);
      a.up = nn::Conv2d::make(h, channels, 1, 1, rng, Init::kZero, dtype);
      break;
    case AdapterKind::kConv:
      a.down = nn::Conv2d::make(channels, h, cfg.conv_kernel, 1, rng, Init::kDefault, dtype);
      a.up = nn::Conv2d::make(h, channels, cfg.conv_kernel, 1, rng, Init::kZero, dtype);
      break;
    case AdapterKind::kSingleConv:
      a.up = nn::Conv2d::make(channels, channels, cfg.conv_kernel, 1, rng, Init::kZero, dtype);
      break;
  }
  return a;
}

void Adapter::collect(ParamList& out, const std::string& prefix) const {
  if (kind != AdapterKind::kSingleConv) down.collect(out, prefix + ".down", Partition::kTuner);
  up.collect(out, prefix + ".up", Partition::kTuner);
}

Tensor adapter_apply(const Adapter& tuner, const Tensor& x) {
  const int expected = tuner.kind == AdapterKind::kSingleConv ? tuner.up.in_channels()
                                                              : tuner.down.in_channels();
  if (x.rank() != 4 || x.dim(1) != expected) {
    throw ShapeError("adapter: input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(expected) + " channels");
  }
  if (tuner.kind == AdapterKind::kSingleConv) return tuner.up(x);
  Tensor h = tuner.down(x);
  if (tuner.activation == Activation::kGelu) h = ops::gelu(h);
  return tuner.up(h);
}

Tensor sc_tuner_apply(const Adapter& tuner, const Tensor& x) {
  return ops::add(adapter_apply(tuner, x), x);
}

std::int64_t adapter_param_count(int channels, const TunerConfig& cfg) {
  const std::int64_t d = channels;
  const std::int64_t h = hidden_width(channels, cfg.hidden_ratio);
  const std::int64_t k2 = static_cast<std::int64_t>(cfg.conv_kernel) * cfg.conv_kernel;
  switch (cfg.kind) {
    case AdapterKind::kLinear:
      return 2 * d * h + h + d;
    case AdapterKind::kConv:
      return 2 * d * h * k2 + h + d;
    case AdapterKind::kSingleConv:
      return d * d * k2 + d;
  }
  return 0;
}

std::int64_t count_params(std::span<const int> decoder_channels, const TunerConfig& cfg) {
  if (decoder_channels.empty()) throw ConfigError("count_params: empty layout");
  const int n = static_cast<int>(decoder_channels.size());
  cfg.validate(n);
  std::int64_t total = 0;
  for (int j : cfg.resolved_indexes(n)) total += adapter_param_count(decoder_channels[j], cfg);
  return total;
}

std::vector<int> sd15_layout() {
  std::vector<int> out(5, 1280);
  out.insert(out.end(), 3, 640);
  out.insert(out.end(), 4, 320);
  return out;
}

const Tensor& ConditionSet::get(const std::string& type) const {
  for (std::size_t i = 0; i < types.size(); ++i) {
    if (types[i] == type) return maps.at(i);
  }
  throw ConfigError("no condition map of type '" + type + "'");
}

int condition_channels(const std::string& type) {
  if (type == "edge") return 1;
  if (type == "color") return 3;
  if (type == "mask") return 4;
  throw ConfigError("unknown condition type '" + type + "' (expected edge, color or mask)");
}

HintEncoder HintEncoder::make(int in_channels, const std::vector<SkipInfo>& push_layout,
                              const std::vector<int>& active_push_indexes, int stem_channels,
                              int emb_dim, std::mt19937_64& rng, DType dtype) {
  if (push_layout.empty()) throw ConfigError("hint encoder: empty skip layout");
  HintEncoder e;
  e.layout_ = push_layout;
  const int c0 = push_layout[0].channels;
  e.stem_.push_back(nn::Conv2d::make(in_channels, stem_channels, 3, 1, rng, Init::kDefault, dtype));
  e.stem_.push_back(nn::Conv2d::make(stem_channels, stem_channels, 3, 1, rng, Init::kDefault, dtype));
  e.stem_.push_back(nn::Conv2d::make(stem_channels, c0, 3, 1, rng, Init::kDefault, dtype));
  int prev_channels = c0;
  int prev_height = push_layout[0].height;
  for (const auto& info : push_layout) {
    const int stride = info.height < prev_height ? 2 : 1;
    e.blocks_.push_back(
        nn::Conv2d::make(prev_channels, info.channels, 3, stride, rng, Init::kDefault, dtype));
    e.emb_proj_.push_back(nn::Linear::make(emb_dim, info.channels, rng, Init::kDefault, dtype));
    prev_channels = info.channels;
    prev_height = info.height;
  }
  for (int i : active_push_indexes) {
    const int c = push_layout.at(static_cast<std::size_t>(i)).channels;
    e.zero_convs_.emplace(i, nn::Conv2d::make(c, c, 1, 1, rng, Init::kZero, dtype));
  }
  return e;
}

std::vector<Tensor> HintEncoder::operator()(const Tensor& hint, const Tensor& emb) const {
  const auto& first = layout_.front();
  if (hint.rank() != 4 || hint.dim(1) != in_channels() || hint.dim(2) != first.height ||
      hint.dim(3) != first.width) {
    throw ShapeError("hint: got " + shape_str(hint.shape()) + ", expected [N, " +
                     std::to_string(in_channels()) + ", " + std::to_string(first.height) + ", " +
                     std::to_string(first.width) + "]");
  }
  Tensor h = hint;
  for (std::size_t i = 0; i < stem_.size(); ++i) {
    h = stem_[i](h);
    if (i + 1 < stem_.size()) h = ops::silu(h);
  }
  const Tensor emb_act = ops::silu(emb);
  std::vector<Tensor> out(layout_.size());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = ops::silu(ops::add_channel_bias(blocks_[i](h), emb_proj_[i](emb_act)));
    auto it = zero_convs_.find(static_cast<int>(i));
    if (it != zero_convs_.end()) out[i] = it->second(h);
  }
  return out;
}

void HintEncoder::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < stem_.size(); ++i) {
    stem_[i].collect(out, prefix + ".stem." + std::to_string(i), Partition::kHint);
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, prefix + ".block." + std::to_string(i), Partition::kHint);
    emb_proj_[i].collect(out, prefix + ".block." + std::to_string(i) + ".emb", Partition::kHint);
  }
  for (const auto& [i, conv] : zero_convs_) {
    conv.collect(out, prefix + ".zero." + std::to_string(i), Partition::kHint);
  }
}

std::vector<Tensor> hint_encode(const HintEncoder& encoder, const Tensor& hint, const Tensor& emb) {
  auto feats = encoder(hint, emb);
  std::reverse(feats.begin(), feats.end());
  return feats;
}

namespace {

std::vector<SkipInfo> reversed(const std::vector<SkipInfo>& push_layout) {
  return {push_layout.rbegin(), push_layout.rend()};
}

void check_alphas(const std::vector<double>& alphas, std::size_t branches) {
  if (alphas.size() != branches) {
    throw ConfigError("expected " + std::to_string(branches) + " branch weights, got " +
                      std::to_string(alphas.size()));
  }
  double sum = 0.0;
  for (double a : alphas) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("branch weights must be finite and >= 0");
    sum += a;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("branch weights sum to " + std::to_string(sum) + ", expected 1");
  }
}

}  // namespace

TunerStack TunerStack::sc(const std::vector<SkipInfo>& push_layout, const TunerConfig& cfg,
                          std::uint64_t seed, DType dtype) {
  TunerStack s;
  s.cfg_ = cfg;
  s.decoder_layout_ = reversed(push_layout);
  const int n = static_cast<int>(push_layout.size());
  cfg.validate(n);
  std::mt19937_64 rng(seed);
  ConditionBranch branch;
  for (int j : cfg.resolved_indexes(n)) {
    branch.tuners.emplace(j, Adapter::make(s.decoder_layout_[j].channels, cfg, rng, dtype));
  }
  s.branches_.push_back(std::move(branch));
  s.alphas_ = {1.0};
  s.active_ = cfg.resolved_indexes(n);
  return s;
}

TunerStack TunerStack::csc(const std::vector<SkipInfo>& push_layout, const TunerConfig& cfg,
                           const std::vector<std::string>& conditions, int emb_dim,
                           std::uint64_t seed, DType dtype) {
  if (conditions.empty()) throw ConfigError("csc tuner needs at least one condition type");
  TunerStack s;
  s.cfg_ = cfg;
  s.controllable_ = true;
  s.decoder_layout_ = reversed(push_layout);
  const int n = static_cast<int>(push_layout.size());
  cfg.validate(n);
  const auto active = cfg.resolved_indexes(n);
  std::vector<int> active_push;
  for (int j : active) active_push.push_back(n - 1 - j);
  std::sort(active_push.begin(), active_push.end());
  std::mt19937_64 rng(seed);
  for (const auto& type : conditions) {
    ConditionBranch branch;
    branch.condition = type;
    branch.hint = HintEncoder::make(condition_channels(type), push_layout, active_push,
                                    cfg.hint_channels, emb_dim, rng, dtype);
    for (int j : active) {
      branch.tuners.emplace(j, Adapter::make(s.decoder_layout_[j].channels, cfg, rng, dtype));
    }
    s.branches_.push_back(std::move(branch));
  }
  s.alphas_.assign(conditions.size(), 1.0 / static_cast<double>(conditions.size()));
  s.active_ = active;
  return s;
}

TunerStack TunerStack::compose(const std::vector<TunerStack>& singles) {
  if (singles.empty()) throw ConfigError("compose: no tuner stacks given");
  TunerStack s;
  s.cfg_ = singles.front().cfg_;
  s.controllable_ = true;
  s.decoder_layout_ = singles.front().decoder_layout_;
  s.active_ = singles.front().active_;
  for (std::size_t i = 0; i < singles.size(); ++i) {
    const auto& one = singles[i];
    if (!one.controllable_) throw ConfigError("compose: stack " + std::to_string(i) + " is not a csc tuner");
    if (one.decoder_layout_ != s.decoder_layout_ || one.active_ != s.active_ ||
        one.cfg_.kind != s.cfg_.kind || one.cfg_.csc_form != s.cfg_.csc_form ||
        one.cfg_.scale != s.cfg_.scale) {
      throw ConfigError("compose: stack " + std::to_string(i) + " has a different layout or config");
    }
    s.branches_.insert(s.branches_.end(), one.branches_.begin(), one.branches_.end());
  }
  s.alphas_.assign(s.branches_.size(), 1.0 / static_cast<double>(s.branches_.size()));
  return s;
}

void TunerStack::set_active_indexes(std::vector<int> indexes) {
  std::sort(indexes.begin(), indexes.end());
  indexes.erase(std::unique(indexes.begin(), indexes.end()), indexes.end());
  for (int j : indexes) {
    if (!branches_.front().tuners.contains(j)) {
      throw ConfigError("no tuner installed at index " + std::to_string(j));
    }
  }
  active_ = std::move(indexes);
}

void TunerStack::set_alphas(std::vector<double> alphas) {
  check_alphas(alphas, branches_.size());
  alphas_ = std::move(alphas);
}

void blend_conditions(TunerStack& stack, std::span<const double> raw) {
  if (static_cast<int>(raw.size()) != stack.num_branches()) {
    throw ConfigError("blend: expected " + std::to_string(stack.num_branches()) + " weights, got " +
                      std::to_string(raw.size()));
  }
  double sum = 0.0;
  for (double a : raw) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("blend: weights must be finite and >= 0");
    sum += a;
  }
  if (sum == 0.0) throw ConfigError("blend: all weights are zero");
  std::vector<double> alphas(raw.begin(), raw.end());
  for (double& a : alphas) a /= sum;
  stack.set_alphas(std::move(alphas));
}

EncodedConditions TunerStack::encode_conditions(const ConditionSet& conds, const Tensor& emb) const {
  EncodedConditions out;
  if (!controllable_) return out;
  for (const auto& branch : branches_) {
    out.push_back(hint_encode(*branch.hint, conds.get(branch.condition), emb));
  }
  return out;
}

Tensor TunerStack::apply(int j, const Tensor& skip, const EncodedConditions* encoded) const {
  if (!std::binary_search(active_.begin(), active_.end(), j)) return skip;
  if (!controllable_) return sc_tuner_apply(branches_.front().tuners.at(j), skip);
  if (encoded == nullptr || encoded->size() != branches_.size()) {
    throw ConfigError("csc tuner: encoded conditions missing for " +
                      std::to_string(branches_.size()) + " branches");
  }
  std::vector<Tensor> conds;
  conds.reserve(branches_.size());
  for (const auto& per_branch : *encoded) conds.push_back(per_branch.at(static_cast<std::size_t>(j)));
  return csc_tuner_apply(*this, j, skip, conds);
}

Tensor csc_tuner_apply(const TunerStack& stack, int j, const Tensor& x, std::span<const Tensor> conds) {
  if (!stack.controllable()) throw ConfigError("csc_tuner_apply: stack has no condition branches");
  const auto& branches = stack.branches();
  if (conds.size() != branches.size()) {
    throw ConfigError("csc_tuner_apply: " + std::to_string(conds.size()) + " conditions for " +
                      std::to_string(branches.size()) + " branches");
  }
  check_alphas(stack.alphas(), branches.size());
  const double s = stack.config().scale;
  const bool outer = stack.config().csc_form == CscForm::kEquation;
  Tensor acc;
  for (std::size_t m = 0; m < branches.size(); ++m) {
    const double alpha = stack.alphas()[m];
    if (alpha == 0.0) continue;
    if (conds[m].shape() != x.shape()) {
      throw ShapeError("csc_tuner_apply: condition " + std::to_string(m) + " has shape " +
                       shape_str(conds[m].shape()) + ", skip " + std::to_string(j) + " has " +
                       shape_str(x.shape()));
    }
    const Tensor c = s == 1.0 ? conds[m] : ops::mul_scalar(conds[m], s);
    Tensor branch = adapter_apply(branches[m].tuners.at(j), ops::add(x, c));
    if (outer) branch = ops::add(branch, c);
    if (alpha != 1.0) branch = ops::mul_scalar(branch, alpha);
    acc = acc.defined() ? ops::add(acc, branch) : branch;
  }
  return ops::add(acc, x);
}

ParamList TunerStack::parameters() const {
  ParamList out;
  for (std::size_t m = 0; m < branches_.size(); ++m) {
    const auto& branch = branches_[m];
    const std::string prefix = controllable_ ? "csc." + std::to_string(m) : std::string("sc");
    if (branch.hint) branch.hint->collect(out, prefix + ".hint");
    for (const auto& [j, tuner] : branch.tuners) tuner.collect(out, prefix + ".tuner." + std::to_string(j));
  }
  return out;
}

void TunerStack::to(DType dtype) { convert_params(parameters(), dtype); }

Tensor decode_with_tuners(const UNet& unet, const Tensor& bottleneck, SkipBundle skips,
                          const Tensor& emb, const TunerStack* stack,
                          const EncodedConditions* encoded, DecodeTrace* trace) {
  SkipEditor editor;
  if (stack != nullptr) {
    editor = [stack, encoded](int j, const Tensor& skip) { return stack->apply(j, skip, encoded); };
  }
  return unet.decode(bottleneck, std::move(skips), emb, editor, trace);
}

Tensor ScEditModel::predict_noise(const Tensor& x_t, std::span<const int> steps,
                                  std::span<const int> labels, const ConditionSet* conds,
                                  bool decouple_encoder, DecodeTrace* trace) const {
  Tensor emb;
  EncodeResult enc;
  {
    std::optional<InferenceGuard> frozen;
    if (decouple_encoder) frozen.emplace();
    emb = unet_->embed(steps, labels);
    enc = unet_->encode(x_t, emb);
  }
  EncodedConditions encoded;
  if (stack_ != nullptr && stack_->controllable()) {
    if (conds == nullptr) throw ConfigError("csc tuner needs condition maps");
    encoded = stack_->encode_conditions(*conds, emb);
  }
  return decode_with_tuners(*unet_, enc.bottleneck, std::move(enc.skips), emb, stack_, &encoded, trace);
}

NoiseModel ScEditModel::noise_model(const ConditionSet* conds) const {
  return [this, conds](const Tensor& x_t, std::span<const int> steps, std::span<const int> labels) {
    return predict_noise(x_t, steps, labels, conds, true);
  };
}

}  // namespace scedit
