#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "scedit/nn.hpp"
#include "scedit/tensor.hpp"

namespace scedit {

struct UNetConfig {
  int in_channels = 3;
  int levels = 3;
  int base_channels = 16;
  std::vector<int> channel_mult{1, 2, 2};
  int blocks_per_level = 1;
  std::vector<int> attn_levels{};
  bool mid_attention = true;
  // 0 = unconditional. Otherwise row num_labels of the table is the null
  // label used for classifier-free guidance.
  int num_labels = 0;
  int time_embed_dim = 64;
  int norm_groups = 8;
  std::uint64_t seed = 0;

  void validate() const;
  int level_channels(int level) const { return base_channels * channel_mult.at(level); }
};

struct SkipInfo {
  int channels = 0;
  int height = 0;
  int width = 0;
  bool operator==(const SkipInfo&) const = default;
};

// Skip outputs in encoder push order for an input of the given size.
std::vector<SkipInfo> skip_layout(const UNetConfig& cfg, int height, int width);
// Number of skip connections N (equal to encoder and decoder block counts).
int skip_count(const UNetConfig& cfg);

// Encoder features awaiting the decoder. Entries are pushed in encoder order;
// the decoder pops from the back, so decoder index j = 0 receives the
// deepest output.
class SkipBundle {
 public:
  void push(Tensor t);
  Tensor pop();
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  // Metadata in push order.
  std::vector<SkipInfo> layout() const;
  // Same bundle with every tensor detached from history.
  SkipBundle detached() const;

 private:
  std::vector<Tensor> tensors_;
};

struct EncodeResult {
  Tensor bottleneck;
  SkipBundle skips;
};

// Receives decoder index j and the raw skip x_{N-j}; returns what is
// concatenated into decoder block j.
using SkipEditor = std::function<Tensor(int j, const Tensor& skip)>;

struct DecodeTrace {
  // g_1..g_N, the output of every decoder block.
  std::vector<Tensor> block_outputs;
};

namespace unet_detail {

struct ResBlock {
  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::Linear emb_proj;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  std::optional<nn::Conv2d> shortcut;

  static ResBlock make(int in, int out, int emb_dim, int groups, std::mt19937_64& rng, DType dtype);
  Tensor operator()(const Tensor& x, const Tensor& emb_act) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct AttnBlock {
  nn::GroupNorm norm;
  nn::Conv2d q, k, v, proj;

  static AttnBlock make(int channels, int groups, std::mt19937_64& rng, DType dtype);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// conv_in, a residual block (+attention), or a stride-2 downsample.
struct EncoderBlock {
  std::optional<nn::Conv2d> conv;
  std::optional<ResBlock> res;
  std::optional<AttnBlock> attn;
  Tensor operator()(const Tensor& x, const Tensor& emb_act) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Residual block over [skip; g] with optional attention and upsampling.
struct DecoderBlock {
  ResBlock res;
  std::optional<AttnBlock> attn;
  std::optional<nn::Conv2d> upsample;
  int skip_channels = 0;
  Tensor operator()(const Tensor& x, const Tensor& emb_act) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace unet_detail

// Encoder / mid / decoder U-Net predicting noise, with sinusoidal time
// embedding and an optional learned label embedding added to it.
class UNet {
 public:
  explicit UNet(UNetConfig cfg, DType dtype = DType::kF32);

  const UNetConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }
  int num_skips() const { return static_cast<int>(encoder_.size()); }

  // Embedding vector per sample. labels may be empty (all null); -1 is the
  // null label. Throws ConfigError for an id >= num_labels.
  Tensor embed(std::span<const int> timesteps, std::span<const int> labels) const;

  EncodeResult encode(const Tensor& x, const Tensor& emb) const;

  Tensor decode(const Tensor& bottleneck, SkipBundle skips, const Tensor& emb,
                const SkipEditor& editor = {}, DecodeTrace* trace = nullptr) const;

  Tensor predict_noise(const Tensor& x_t, std::span<const int> timesteps,
                       std::span<const int> labels = {}) const;

  ParamList parameters() const;
  void to(DType dtype);

  std::vector<SkipInfo> skip_layout(int height, int width) const {
    return scedit::skip_layout(cfg_, height, width);
  }

 private:
  UNetConfig cfg_;
  DType dtype_;
  nn::Linear time1_, time2_;
  std::optional<Tensor> label_table_;
  std::vector<unet_detail::EncoderBlock> encoder_;
  unet_detail::ResBlock mid1_, mid2_;
  std::optional<unet_detail::AttnBlock> mid_attn_;
  std::vector<unet_detail::DecoderBlock> decoder_;
  nn::GroupNorm out_norm_;
  nn::Conv2d out_conv_;
};

// Sinusoidal features [len(timesteps), dim].
Tensor timestep_features(std::span<const int> timesteps, int dim, DType dtype);

}  // namespace scedit
