#include "scedit/nn.hpp"

#include <cmath>
#include <numeric>

#include "scedit/ops.hpp"

namespace scedit {

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::kBackbone:
      return "backbone";
    case Partition::kTuner:
      return "tuner";
    case Partition::kHint:
      return "hint";
  }
  return "?";
}

std::int64_t total_elements(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

void convert_params(const ParamList& params, DType dtype) {
  for (const auto& p : params) {
    auto* impl = p.tensor.impl();
    if (impl->dtype == dtype) continue;
    Tensor converted = p.tensor.to(dtype);
    impl->f32 = std::move(converted.impl()->f32);
    impl->f64 = std::move(converted.impl()->f64);
    impl->dtype = dtype;
    impl->grad = Tensor();
  }
}

void set_trainable(const ParamList& params, bool flag) {
  for (const auto& p : params) {
    Tensor handle = p.tensor;
    handle.set_requires_grad(flag);
  }
}

namespace nn {

Conv2d Conv2d::make(int in, int out, int kernel, int stride, std::mt19937_64& rng, Init init,
                    DType dtype) {
  Conv2d c;
  c.stride = stride;
  if (init == Init::kZero) {
    c.weight = Tensor::zeros({out, in, kernel, kernel}, dtype);
    c.bias = Tensor::zeros({out}, dtype);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    c.weight = Tensor::uniform({out, in, kernel, kernel}, rng, -bound, bound, dtype);
    c.bias = Tensor::uniform({out}, rng, -bound, bound, dtype);
  }
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride); }

void Conv2d::collect(ParamList& out, const std::string& prefix, Partition p) const {
  out.push_back({prefix + ".weight", weight, p});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, p});
}

Linear Linear::make(int in, int out, std::mt19937_64& rng, Init init, DType dtype) {
  Linear l;
  if (init == Init::kZero) {
    l.weight = Tensor::zeros({out, in}, dtype);
    l.bias = Tensor::zeros({out}, dtype);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    l.weight = Tensor::uniform({out, in}, rng, -bound, bound, dtype);
    l.bias = Tensor::uniform({out}, rng, -bound, bound, dtype);
  }
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(ParamList& out, const std::string& prefix, Partition p) const {
  out.push_back({prefix + ".weight", weight, p});
  out.push_back({prefix + ".bias", bias, p});
}

GroupNorm GroupNorm::make(int channels, int groups, DType dtype) {
  GroupNorm g;
  g.groups = std::gcd(channels, std::max(1, groups));
  g.gamma = Tensor::full({channels}, 1.0, dtype);
  g.beta = Tensor::zeros({channels}, dtype);
  return g;
}

Tensor GroupNorm::operator()(const Tensor& x) const {
  return ops::group_norm(x, groups, gamma, beta);
}

void GroupNorm::collect(ParamList& out, const std::string& prefix, Partition p) const {
  out.push_back({prefix + ".gamma", gamma, p});
  out.push_back({prefix + ".beta", beta, p});
}

}  // namespace nn
}  // namespace scedit
