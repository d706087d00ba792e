#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scedit/diffusion.hpp"
#include "scedit/nn.hpp"
#include "scedit/unet.hpp"

namespace scedit {

enum class AdapterKind {
  kLinear,      // W_up gelu(W_down x), applied per spatial position (1x1)
  kConv,        // same with k x k convolutions ("dual conv")
  kSingleConv,  // one full-width k x k convolution
};

// How condition features enter a CSC tuner.
//   kEquation:    sum_m a_m (T_m(x + s c_m) + s c_m) + x
//   kScaledInput: sum_m a_m T_m(x + s c_m) + x
enum class CscForm { kEquation, kScaledInput };

enum class Activation { kGelu, kIdentity };

struct TunerConfig {
  AdapterKind kind = AdapterKind::kLinear;
  int hidden_ratio = 1;
  // Decoder indexes j that receive a tuner. Empty means every index.
  std::vector<int> active_indexes{};
  int conv_kernel = 3;
  // Hint strength multiplier applied to c_m.
  double scale = 1.0;
  CscForm csc_form = CscForm::kEquation;
  // Width of the hint stem.
  int hint_channels = 16;

  void validate(int num_skips) const;
  bool is_active(int j) const;
  std::vector<int> resolved_indexes(int num_skips) const;
};

int hidden_width(int channels, int hidden_ratio);

// Skip-connection tuner op T(x) = W_up phi(W_down x). W_up starts at zero.
struct Adapter {
  AdapterKind kind = AdapterKind::kLinear;
  Activation activation = Activation::kGelu;
  nn::Conv2d down;  // unused for kSingleConv
  nn::Conv2d up;

  static Adapter make(int channels, const TunerConfig& cfg, std::mt19937_64& rng,
                      DType dtype = DType::kF32);
  int channels() const { return up.out_channels(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// T(x).
Tensor adapter_apply(const Adapter& tuner, const Tensor& x);
// T(x) + x.
Tensor sc_tuner_apply(const Adapter& tuner, const Tensor& x);

// Exact element count an adapter on `channels` allocates.
std::int64_t adapter_param_count(int channels, const TunerConfig& cfg);

// Total tuner parameters for skip channels listed in decoder order
// (j = 0 deepest). Throws ConfigError for an empty layout.
std::int64_t count_params(std::span<const int> decoder_channels, const TunerConfig& cfg);

// SD v1.5 skip channels in decoder order.
std::vector<int> sd15_layout();

// Condition maps at model input resolution, values in [-1, 1]. One map per
// condition type; each is [N, C_m, H, W].
struct ConditionSet {
  std::vector<std::string> types;
  std::vector<Tensor> maps;

  std::size_t size() const { return maps.size(); }
  const Tensor& get(const std::string& type) const;
};

// Input channels of a condition map for a known condition type.
int condition_channels(const std::string& type);

// Cascade dense-convolution hint encoder: stride-1 stem, then one block per
// encoder skip (stride 2 where the skip resolution halves), each followed by
// a zero-initialized 1x1 projection onto the skip's channels.
class HintEncoder {
 public:
  static HintEncoder make(int in_channels, const std::vector<SkipInfo>& push_layout,
                          const std::vector<int>& active_push_indexes, int stem_channels,
                          int emb_dim, std::mt19937_64& rng, DType dtype = DType::kF32);

  // Features c_i in encoder push order; undefined for inactive positions.
  std::vector<Tensor> operator()(const Tensor& hint, const Tensor& emb) const;
  void collect(ParamList& out, const std::string& prefix) const;
  int in_channels() const { return stem_[0].in_channels(); }

 private:
  std::vector<nn::Conv2d> stem_;
  std::vector<nn::Conv2d> blocks_;
  std::vector<nn::Linear> emb_proj_;
  std::map<int, nn::Conv2d> zero_convs_;
  std::vector<SkipInfo> layout_;
};

// hint_encode: per-decoder-index features for one condition map
// (reverses the push order, so entry j matches the skip decoder j consumes).
std::vector<Tensor> hint_encode(const HintEncoder& encoder, const Tensor& hint, const Tensor& emb);

struct ConditionBranch {
  std::string condition;
  std::optional<HintEncoder> hint;
  std::map<int, Adapter> tuners;  // keyed by decoder index j
};

// Per branch, per decoder index j.
using EncodedConditions = std::vector<std::vector<Tensor>>;

// All tuners installed on one U-Net. An SC stack has a single branch
// without a hint encoder; a CSC stack has one branch per condition.
class TunerStack {
 public:
  // push_layout: encoder push order, as produced by skip_layout().
  static TunerStack sc(const std::vector<SkipInfo>& push_layout, const TunerConfig& cfg,
                       std::uint64_t seed, DType dtype = DType::kF32);
  static TunerStack csc(const std::vector<SkipInfo>& push_layout, const TunerConfig& cfg,
                        const std::vector<std::string>& conditions, int emb_dim,
                        std::uint64_t seed, DType dtype = DType::kF32);
  // Merges single-condition CSC stacks into one multi-condition stack with
  // uniform weights. Parameters are shared with the inputs.
  static TunerStack compose(const std::vector<TunerStack>& singles);

  bool controllable() const { return controllable_; }
  const TunerConfig& config() const { return cfg_; }
  int num_branches() const { return static_cast<int>(branches_.size()); }
  const std::vector<ConditionBranch>& branches() const { return branches_; }
  std::vector<ConditionBranch>& branches() { return branches_; }
  // Skip metadata in decoder order (j = 0 deepest).
  const std::vector<SkipInfo>& decoder_layout() const { return decoder_layout_; }
  // Indexes whose installed tuner currently edits its skip.
  std::vector<int> active_indexes() const { return active_; }
  // Restricts editing to a subset of the installed indexes; parameters of
  // deactivated tuners stay allocated.
  void set_active_indexes(std::vector<int> indexes);

  const std::vector<double>& alphas() const { return alphas_; }
  // Installs weights that already sum to one (within 1e-9).
  void set_alphas(std::vector<double> alphas);

  // Hint features for every branch from the matching condition map.
  EncodedConditions encode_conditions(const ConditionSet& conds, const Tensor& emb) const;

  // Edited skip for decoder index j; returns skip unchanged when no tuner is
  // installed at j.
  Tensor apply(int j, const Tensor& skip, const EncodedConditions* encoded) const;

  ParamList parameters() const;
  void to(DType dtype);

 private:
  TunerConfig cfg_;
  bool controllable_ = false;
  std::vector<SkipInfo> decoder_layout_;
  std::vector<ConditionBranch> branches_;
  std::vector<double> alphas_;
  std::vector<int> active_;
};

// Normalizes raw non-negative weights to sum 1 and installs them. Throws
// ConfigError for a length mismatch, negative entries or all zeros.
void blend_conditions(TunerStack& stack, std::span<const double> raw);

// Multi-condition skip edit for decoder index j with M condition features.
Tensor csc_tuner_apply(const TunerStack& stack, int j, const Tensor& x,
                       std::span<const Tensor> conds);

// Decoder pass where tuner j edits skip j (when installed).
Tensor decode_with_tuners(const UNet& unet, const Tensor& bottleneck, SkipBundle skips,
                          const Tensor& emb, const TunerStack* stack,
                          const EncodedConditions* encoded, DecodeTrace* trace = nullptr);

// A frozen U-Net with an optional tuner stack.
class ScEditModel {
 public:
  ScEditModel(const UNet& unet, const TunerStack* stack) : unet_(&unet), stack_(stack) {}

  const UNet& unet() const { return *unet_; }
  const TunerStack* stack() const { return stack_; }

  // With decouple_encoder the embedding and encoder run in inference mode so
  // no backward node exists upstream of the skips.
  Tensor predict_noise(const Tensor& x_t, std::span<const int> steps, std::span<const int> labels,
                       const ConditionSet* conds, bool decouple_encoder = true,
                       DecodeTrace* trace = nullptr) const;

  // Sampling adapter; conds must hold maps for the whole sampling batch.
  NoiseModel noise_model(const ConditionSet* conds) const;

 private:
  const UNet* unet_;
  const TunerStack* stack_;
};

}  // namespace scedit
