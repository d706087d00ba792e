#include "scedit/unet.hpp"

#include <algorithm>
#include <cmath>

#include "scedit/ops.hpp"

namespace scedit {

void UNetConfig::validate() const {
  if (in_channels <= 0) throw ConfigError("model.in_channels must be positive");
  if (levels <= 0) throw ConfigError("model.levels must be positive");
  if (base_channels <= 0) throw ConfigError("model.base_channels must be positive");
  if (static_cast<int>(channel_mult.size()) != levels) {
    throw ConfigError("model.channel_mult needs one entry per level (" + std::to_string(levels) +
                      "), got " + std::to_string(channel_mult.size()));
  }
  for (int m : channel_mult) {
    if (m <= 0) throw ConfigError("model.channel_mult entries must be positive");
  }
  if (blocks_per_level <= 0) throw ConfigError("model.blocks_per_level must be positive");
  for (int l : attn_levels) {
    if (l < 0 || l >= levels) throw ConfigError("model.attn_levels entry out of range");
  }
  if (num_labels < 0) throw ConfigError("model.num_labels must be >= 0");
  if (time_embed_dim <= 0 || time_embed_dim % 2) {
    throw ConfigError("model.time_embed_dim must be positive and even");
  }
  if (norm_groups <= 0) throw ConfigError("model.norm_groups must be positive");
}

std::vector<SkipInfo> skip_layout(const UNetConfig& cfg, int height, int width) {
  cfg.validate();
  std::vector<SkipInfo> out;
  int h = height, w = width;
  out.push_back({cfg.level_channels(0), h, w});
  for (int l = 0; l < cfg.levels; ++l) {
    for (int b = 0; b < cfg.blocks_per_level; ++b) out.push_back({cfg.level_channels(l), h, w});
    if (l + 1 < cfg.levels) {
      h /= 2;
      w /= 2;
      out.push_back({cfg.level_channels(l), h, w});
    }
  }
  return out;
}

int skip_count(const UNetConfig& cfg) {
  return 1 + cfg.levels * cfg.blocks_per_level + (cfg.levels - 1);
}

void SkipBundle::push(Tensor t) { tensors_.push_back(std::move(t)); }

Tensor SkipBundle::pop() {
  if (tensors_.empty()) throw ShapeError("SkipBundle::pop on empty bundle");
  Tensor t = std::move(tensors_.back());
  tensors_.pop_back();
  return t;
}

std::vector<SkipInfo> SkipBundle::layout() const {
  std::vector<SkipInfo> out;
  for (const auto& t : tensors_) {
    out.push_back({static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3))});
  }
  return out;
}

SkipBundle SkipBundle::detached() const {
  SkipBundle b;
  for (const auto& t : tensors_) b.push(t.detach());
  return b;
}

Tensor timestep_features(std::span<const int> timesteps, int dim, DType dtype) {
  const int half = dim / 2;
  std::vector<double> values(timesteps.size() * static_cast<std::size_t>(dim));
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[n] * freq;
      values[n * dim + i] = std::cos(arg);
      values[n * dim + half + i] = std::sin(arg);
    }
  }
  return Tensor::from_vector({static_cast<std::int64_t>(timesteps.size()), dim}, values, dtype);
}

namespace unet_detail {

ResBlock ResBlock::make(int in, int out, int emb_dim, int groups, std::mt19937_64& rng, DType dtype) {
  ResBlock r;
  r.norm1 = nn::GroupNorm::make(in, groups, dtype);
  r.conv1 = nn::Conv2d::make(in, out, 3, 1, rng, Init::kDefault, dtype);
  r.emb_proj = nn::Linear::make(emb_dim, out, rng, Init::kDefault, dtype);
  r.norm2 = nn::GroupNorm::make(out, groups, dtype);
  r.conv2 = nn::Conv2d::make(out, out, 3, 1, rng, Init::kDefault, dtype);
  if (in != out) r.shortcut = nn::Conv2d::make(in, out, 1, 1, rng, Init::kDefault, dtype);
  return r;
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& emb_act) const {
  Tensor h = conv1(ops::silu(norm1(x)));
  h = ops::add_channel_bias(h, emb_proj(emb_act));
  h = conv2(ops::silu(norm2(h)));
  return ops::add(shortcut ? (*shortcut)(x) : x, h);
}

void ResBlock::collect(ParamList& out, const std::string& prefix) const {
  const auto p = Partition::kBackbone;
  norm1.collect(out, prefix + ".norm1", p);
  conv1.collect(out, prefix + ".conv1", p);
  emb_proj.collect(out, prefix + ".emb_proj", p);
  norm2.collect(out, prefix + ".norm2", p);
  conv2.collect(out, prefix + ".conv2", p);
  if (shortcut) shortcut->collect(out, prefix + ".shortcut", p);
}

AttnBlock AttnBlock::make(int channels, int groups, std::mt19937_64& rng, DType dtype) {
  AttnBlock a;
  a.norm = nn::GroupNorm::make(channels, groups, dtype);
  a.q = nn::Conv2d::make(channels, channels, 1, 1, rng, Init::kDefault, dtype);
  a.k = nn::Conv2d::make(channels, channels, 1, 1, rng, Init::kDefault, dtype);
  a.k.bias = Tensor();
  a.v = nn::Conv2d::make(channels, channels, 1, 1, rng, Init::kDefault, dtype);
  a.proj = nn::Conv2d::make(channels, channels, 1, 1, rng, Init::kDefault, dtype);
  return a;
}

Tensor AttnBlock::operator()(const Tensor& x) const {
  Tensor h = norm(x);
  return ops::add(x, proj(ops::attention_self(q(h), k(h), v(h))));
}

void AttnBlock::collect(ParamList& out, const std::string& prefix) const {
  const auto p = Partition::kBackbone;
  norm.collect(out, prefix + ".norm", p);
  q.collect(out, prefix + ".q", p);
  k.collect(out, prefix + ".k", p);
  v.collect(out, prefix + ".v", p);
  proj.collect(out, prefix + ".proj", p);
}

Tensor EncoderBlock::operator()(const Tensor& x, const Tensor& emb_act) const {
  if (conv) return (*conv)(x);
  Tensor h = (*res)(x, emb_act);
  if (attn) h = (*attn)(h);
  return h;
}

void EncoderBlock::collect(ParamList& out, const std::string& prefix) const {
  if (conv) conv->collect(out, prefix + ".conv", Partition::kBackbone);
  if (res) res->collect(out, prefix + ".res");
  if (attn) attn->collect(out, prefix + ".attn");
}

Tensor DecoderBlock::operator()(const Tensor& x, const Tensor& emb_act) const {
  Tensor h = res(x, emb_act);
  if (attn) h = (*attn)(h);
  if (upsample) h = (*upsample)(ops::nearest_upsample2x(h));
  return h;
}

void DecoderBlock::collect(ParamList& out, const std::string& prefix) const {
  res.collect(out, prefix + ".res");
  if (attn) attn->collect(out, prefix + ".attn");
  if (upsample) upsample->collect(out, prefix + ".upsample", Partition::kBackbone);
}

}  // namespace unet_detail

UNet::UNet(UNetConfig cfg, DType dtype) : cfg_(std::move(cfg)), dtype_(dtype) {
  using namespace unet_detail;
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const int E = cfg_.time_embed_dim;
  const int G = cfg_.norm_groups;
  auto has_attn = [&](int level) {
    return std::find(cfg_.attn_levels.begin(), cfg_.attn_levels.end(), level) != cfg_.attn_levels.end();
  };

  time1_ = nn::Linear::make(E, E, rng, Init::kDefault, dtype);
  time2_ = nn::Linear::make(E, E, rng, Init::kDefault, dtype);
  if (cfg_.num_labels > 0) {
    label_table_ = Tensor::randn({cfg_.num_labels + 1, E}, rng, 1.0, dtype);
  }

  std::vector<int> skip_channels;
  EncoderBlock conv_in;
  conv_in.conv = nn::Conv2d::make(cfg_.in_channels, cfg_.level_channels(0), 3, 1, rng, Init::kDefault, dtype);
  encoder_.push_back(std::move(conv_in));
  skip_channels.push_back(cfg_.level_channels(0));
  int ch = cfg_.level_channels(0);
  for (int l = 0; l < cfg_.levels; ++l) {
    const int out = cfg_.level_channels(l);
    for (int b = 0; b < cfg_.blocks_per_level; ++b) {
      EncoderBlock blk;
      blk.res = ResBlock::make(ch, out, E, G, rng, dtype);
      if (has_attn(l)) blk.attn = AttnBlock::make(out, G, rng, dtype);
      encoder_.push_back(std::move(blk));
      ch = out;
      skip_channels.push_back(ch);
    }
    if (l + 1 < cfg_.levels) {
      EncoderBlock down;
      down.conv = nn::Conv2d::make(ch, ch, 3, 2, rng, Init::kDefault, dtype);
      encoder_.push_back(std::move(down));
      skip_channels.push_back(ch);
    }
  }

  mid1_ = ResBlock::make(ch, ch, E, G, rng, dtype);
  if (cfg_.mid_attention) mid_attn_ = AttnBlock::make(ch, G, rng, dtype);
  mid2_ = ResBlock::make(ch, ch, E, G, rng, dtype);

  for (int l = cfg_.levels - 1; l >= 0; --l) {
    const int out = cfg_.level_channels(l);
    for (int b = 0; b <= cfg_.blocks_per_level; ++b) {
      const int skip_ch = skip_channels.back();
      skip_channels.pop_back();
      DecoderBlock blk{ResBlock::make(ch + skip_ch, out, E, G, rng, dtype), std::nullopt,
                       std::nullopt, skip_ch};
      if (has_attn(l)) blk.attn = AttnBlock::make(out, G, rng, dtype);
      if (b == cfg_.blocks_per_level && l > 0) {
        blk.upsample = nn::Conv2d::make(out, out, 3, 1, rng, Init::kDefault, dtype);
      }
      decoder_.push_back(std::move(blk));
      ch = out;
    }
  }

  out_norm_ = nn::GroupNorm::make(ch, G, dtype);
  out_conv_ = nn::Conv2d::make(ch, cfg_.in_channels, 3, 1, rng, Init::kDefault, dtype);
}

Tensor UNet::embed(std::span<const int> timesteps, std::span<const int> labels) const {
  Tensor emb = time2_(ops::silu(time1_(timestep_features(timesteps, cfg_.time_embed_dim, dtype_))));
  if (!labels.empty() && labels.size() != timesteps.size()) {
    throw ShapeError("embed: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(timesteps.size()) + " timesteps");
  }
  for (int id : labels) {
    if (id >= cfg_.num_labels) {
      throw ConfigError("label id " + std::to_string(id) + " >= num_labels " +
                        std::to_string(cfg_.num_labels));
    }
  }
  if (cfg_.num_labels > 0) {
    std::vector<int> ids(timesteps.size(), cfg_.num_labels);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= 0) ids[i] = labels[i];
    }
    emb = ops::add(emb, ops::embedding(*label_table_, ids));
  }
  return emb;
}

EncodeResult UNet::encode(const Tensor& x, const Tensor& emb) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
    throw ShapeError("encode: input has shape " + shape_str(x.shape()) + ", expected [N," +
                     std::to_string(cfg_.in_channels) + ",H,W]");
  }
  const std::int64_t div = std::int64_t{1} << (cfg_.levels - 1);
  if (x.dim(2) % div || x.dim(3) % div) {
    throw ConfigError("encode: spatial size " + std::to_string(x.dim(2)) + "x" +
                      std::to_string(x.dim(3)) + " not divisible by " + std::to_string(div));
  }
  Tensor emb_act = ops::silu(emb);
  EncodeResult r;
  Tensor h = x;
  for (const auto& blk : encoder_) {
    h = blk(h, emb_act);
    r.skips.push(h);
  }
  h = mid1_(h, emb_act);
  if (mid_attn_) h = (*mid_attn_)(h);
  r.bottleneck = mid2_(h, emb_act);
  return r;
}

Tensor UNet::decode(const Tensor& bottleneck, SkipBundle skips, const Tensor& emb,
                    const SkipEditor& editor, DecodeTrace* trace) const {
  if (static_cast<int>(skips.size()) != num_skips()) {
    throw ShapeError("decode: expected " + std::to_string(num_skips()) + " skips, got " +
                     std::to_string(skips.size()));
  }
  Tensor emb_act = ops::silu(emb);
  Tensor g = bottleneck;
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    Tensor skip = skips.pop();
    if (editor) skip = editor(static_cast<int>(j), skip);
    if (skip.dim(1) != decoder_[j].skip_channels) {
      throw ShapeError("decode: skip at index " + std::to_string(j) + " has " +
                       std::to_string(skip.dim(1)) + " channels, expected " +
                       std::to_string(decoder_[j].skip_channels));
    }
    const Tensor parts[] = {skip, g};
    g = decoder_[j](ops::concat_channels(parts), emb_act);
    if (trace) trace->block_outputs.push_back(g);
  }
  return out_conv_(ops::silu(out_norm_(g)));
}

Tensor UNet::predict_noise(const Tensor& x_t, std::span<const int> timesteps,
                           std::span<const int> labels) const {
  if (static_cast<std::int64_t>(timesteps.size()) != x_t.dim(0)) {
    throw ShapeError("predict_noise: " + std::to_string(timesteps.size()) +
                     " timesteps for batch of " + std::to_string(x_t.dim(0)));
  }
  Tensor emb = embed(timesteps, labels);
  auto enc = encode(x_t, emb);
  return decode(enc.bottleneck, std::move(enc.skips), emb);
}

ParamList UNet::parameters() const {
  ParamList out;
  time1_.collect(out, "unet.time.0", Partition::kBackbone);
  time2_.collect(out, "unet.time.1", Partition::kBackbone);
  if (label_table_) out.push_back({"unet.label_table", *label_table_, Partition::kBackbone});
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    encoder_[i].collect(out, "unet.enc." + std::to_string(i));
  }
  mid1_.collect(out, "unet.mid.0");
  if (mid_attn_) mid_attn_->collect(out, "unet.mid.attn");
  mid2_.collect(out, "unet.mid.1");
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    decoder_[j].collect(out, "unet.dec." + std::to_string(j));
  }
  out_norm_.collect(out, "unet.out.norm", Partition::kBackbone);
  out_conv_.collect(out, "unet.out.conv", Partition::kBackbone);
  return out;
}

void UNet::to(DType dtype) {
  convert_params(parameters(), dtype);
  dtype_ = dtype;
}

}  // namespace scedit
