#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "scedit/tensor.hpp"

namespace scedit {

// Which part of the system owns a parameter; stored per checkpoint entry.
enum class Partition : std::uint8_t { kBackbone = 0, kTuner = 1, kHint = 2 };

const char* partition_name(Partition p);

struct NamedParam {
  std::string name;
  Tensor tensor;
  Partition partition = Partition::kBackbone;
};

using ParamList = std::vector<NamedParam>;

std::int64_t total_elements(const ParamList& params);

// Converts every parameter in place; all handles observe the new dtype.
void convert_params(const ParamList& params, DType dtype);

void set_trainable(const ParamList& params, bool flag);

enum class Init { kDefault, kZero };

namespace nn {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias, or all zeros.
struct Conv2d {
  Tensor weight;
  Tensor bias;
  int stride = 1;

  static Conv2d make(int in, int out, int kernel, int stride, std::mt19937_64& rng,
                     Init init = Init::kDefault, DType dtype = DType::kF32);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, Partition p) const;
  int in_channels() const { return static_cast<int>(weight.dim(1)); }
  int out_channels() const { return static_cast<int>(weight.dim(0)); }
};

struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear make(int in, int out, std::mt19937_64& rng, Init init = Init::kDefault,
                     DType dtype = DType::kF32);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, Partition p) const;
};

struct GroupNorm {
  Tensor gamma;
  Tensor beta;
  int groups = 1;

  // groups is reduced to gcd(channels, groups) so any width is accepted.
  static GroupNorm make(int channels, int groups, DType dtype = DType::kF32);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, Partition p) const;
};

}  // namespace nn
}  // namespace scedit
