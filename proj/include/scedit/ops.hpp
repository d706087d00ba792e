#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "scedit/tensor.hpp"

namespace scedit::ops {

// NCHW input, OIHW weight, optional [O] bias. Same padding (k/2); k is odd.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride = 1);

// x [N, in], weight [out, in], optional bias [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Per-sample normalization over channel groups with per-channel affine.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor silu(const Tensor& x);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double s);

// x [N, C, H, W] plus bias [N, C] broadcast over space.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor concat_channels(std::span<const Tensor> parts);

Tensor avgpool2x(const Tensor& x);
Tensor nearest_upsample2x(const Tensor& x);

// Single-head softmax attention over flattened spatial positions. q, k, v
// are [N, C, H, W]; logits are scaled by 1/sqrt(C).
Tensor attention_self(const Tensor& q, const Tensor& k, const Tensor& v);

// Rows of table [V, D] selected by ids -> [len(ids), D].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// mean((a - b)^2) over all elements.
Tensor mse_loss(const Tensor& a, const Tensor& b);

// Scalar GELU (tanh form) and its derivative, shared with kernels.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

enum class PrimitiveKind {
  kConv2d,
  kLinear,
  kGroupNorm,
  kSilu,
  kGelu,
  kAdd,
  kMulScalar,
  kConcatChannels,
  kAvgPool2x,
  kNearestUpsample2x,
  kAttentionSelf,
};

struct PrimitiveAttrs {
  int stride = 1;
  int groups = 1;
  double eps = 1e-5;
  double scalar = 1.0;
};

// Throws ConfigError for an unknown name.
PrimitiveKind parse_primitive(std::string_view name);
std::string_view primitive_name(PrimitiveKind kind);
std::span<const PrimitiveKind> all_primitives();

// Uniform entry point over the primitive set. Operand order:
//   conv2d: x, weight[, bias]      linear: x, weight[, bias]
//   group_norm: x, gamma, beta     attention_self: q, k, v
//   add: a, b                      concat_channels: any number of parts
//   others: x
Tensor primitive_forward(PrimitiveKind kind, std::span<const Tensor> inputs,
                         const PrimitiveAttrs& attrs = {});

}  // namespace scedit::ops
