#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "scedit/ops.hpp"
#include "scedit/tensor.hpp"
#include "scedit/unet.hpp"

namespace scedit::testing {

// Two levels, 8 base channels, attention and labels enabled.
inline UNetConfig tiny_unet_config() {
  UNetConfig cfg;
  cfg.in_channels = 2;
  cfg.levels = 2;
  cfg.base_channels = 8;
  cfg.channel_mult = {1, 2};
  cfg.blocks_per_level = 1;
  cfg.attn_levels = {1};
  cfg.mid_attention = true;
  cfg.num_labels = 3;
  cfg.time_embed_dim = 8;
  cfg.norm_groups = 4;
  cfg.seed = 11;
  return cfg;
}

// The model size used by the training and sampling tests.
inline UNetConfig toy_unet_config() {
  UNetConfig cfg;
  cfg.in_channels = 3;
  cfg.levels = 3;
  cfg.base_channels = 16;
  cfg.channel_mult = {1, 2, 2};
  cfg.blocks_per_level = 1;
  cfg.num_labels = 12;
  cfg.time_embed_dim = 64;
  cfg.norm_groups = 8;
  cfg.seed = 3;
  return cfg;
}

// SD v1.5 block structure with channels divided by 80: skips {4x4, 8x3, 16x5}.
inline UNetConfig sd_like_config() {
  UNetConfig cfg;
  cfg.in_channels = 4;
  cfg.levels = 4;
  cfg.base_channels = 4;
  cfg.channel_mult = {1, 2, 4, 4};
  cfg.blocks_per_level = 2;
  cfg.mid_attention = false;
  cfg.num_labels = 0;
  cfg.time_embed_dim = 16;
  cfg.norm_groups = 4;
  return cfg;
}

// sum(out * r) with a fixed random r, so every output entry matters.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor r = Tensor::uniform(out.shape(), rng, -1.0, 1.0, out.dtype());
  return ops::sum(ops::mul(out, r));
}

struct PrimitiveCase {
  std::string name;
  ops::PrimitiveKind kind;
  std::vector<Tensor> inputs;  // f64
  ops::PrimitiveAttrs attrs;
  double eps = 1e-5;
};

inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
  using K = ops::PrimitiveKind;
  std::mt19937_64 rng(seed);
  auto rnd = [&](Shape s, double sd = 1.0) { return Tensor::randn(std::move(s), rng, sd, DType::kF64); };
  std::vector<PrimitiveCase> out;
  out.push_back({"conv2d k3 s1", K::kConv2d, {rnd({2, 3, 8, 8}), rnd({4, 3, 3, 3}, 0.3), rnd({4})}, {}, 1e-4});
  out.push_back({"conv2d k3 s2", K::kConv2d, {rnd({2, 3, 8, 8}), rnd({4, 3, 3, 3}, 0.3), rnd({4})}, {.stride = 2}, 1e-4});
  out.push_back({"conv2d k1", K::kConv2d, {rnd({2, 4, 6, 6}), rnd({3, 4, 1, 1}, 0.5), rnd({3})}, {}, 1e-4});
  out.push_back({"linear", K::kLinear, {rnd({4, 8}), rnd({5, 8}, 0.4), rnd({5})}, {}, 1e-5});
  out.push_back({"group_norm", K::kGroupNorm, {rnd({2, 8, 4, 4}), rnd({8}), rnd({8})}, {.groups = 4}, 1e-4});
  out.push_back({"silu", K::kSilu, {rnd({2, 3, 4, 4})}, {}, 1e-5});
  out.push_back({"gelu", K::kGelu, {rnd({2, 3, 4, 4})}, {}, 1e-5});
  out.push_back({"add", K::kAdd, {rnd({2, 3, 4, 4}), rnd({2, 3, 4, 4})}, {}, 1e-5});
  out.push_back({"mul_scalar", K::kMulScalar, {rnd({2, 3, 4, 4})}, {.scalar = -1.7}, 1e-5});
  out.push_back({"concat_channels", K::kConcatChannels, {rnd({2, 4, 4, 4}), rnd({2, 2, 4, 4})}, {}, 1e-5});
  out.push_back({"avgpool2x", K::kAvgPool2x, {rnd({2, 3, 8, 8})}, {}, 1e-5});
  out.push_back({"nearest_upsample2x", K::kNearestUpsample2x, {rnd({2, 3, 4, 4})}, {}, 1e-5});
  out.push_back({"attention_self", K::kAttentionSelf, {rnd({2, 4, 4, 4}), rnd({2, 4, 4, 4}), rnd({2, 4, 4, 4})}, {}, 1e-4});
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto va = a.to_vector();
  const auto vb = b.to_vector();
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

}  // namespace scedit::testing
