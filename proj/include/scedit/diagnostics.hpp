#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "scedit/diffusion.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"

namespace scedit {

inline constexpr int kHistogramBins = 64;
inline constexpr double kHistogramLo = -5.0;
inline constexpr double kHistogramHi = 5.0;

struct BlockStats {
  int block = 0;
  SkipInfo shape;  // channels/height/width of the block output
  double variance = 0.0;
  // Values below/above the range land in the first/last bin.
  std::array<std::int64_t, kHistogramBins> histogram{};
};

struct AblationReport {
  // Per decoder index j: true when skip j was kept.
  std::vector<bool> keep;
  std::vector<BlockStats> blocks;
  // Variance of the final decoder block output per sample.
  std::vector<double> final_variance;
  DecodeTrace trace;
  Tensor output;

  // "1" / "0" per decoder index, j = 0 first.
  std::string mask_bits() const;
};

// Probe inputs for one forward pass.
struct ProbeBatch {
  Tensor x_t;
  std::vector<int> steps;
  std::vector<int> labels;
  const ConditionSet* conds = nullptr;
};

// Noises clean images to timestep t with N(0, I) noise drawn from `seed`.
ProbeBatch make_probe(const Tensor& x0, int t, const NoiseSchedule& schedule, std::uint64_t seed);

// Runs the model with skips at dropped indexes replaced by zeros (after the
// tuner edit, if a stack is given). `keep` lists retained decoder indexes.
// Records history according to the current grad mode.
AblationReport ablate_skips(const UNet& unet, const ProbeBatch& probe, std::span<const int> keep,
                            const TunerStack* stack = nullptr);

std::vector<int> all_indexes(int num_skips);

double variance_f64(const Tensor& t);

// Columns: mask,block,channels,height,width,variance,h00..h63.
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationReport> reports);

// PNGs named mask-<bits>_block-<j>_ch-<c>.png for the first `max_channels`
// channels of sample 0 of every decoder block.
void dump_feature_maps(const std::filesystem::path& dir, const AblationReport& report, int max_channels);

struct EfficiencyReport {
  std::int64_t trainable_params = 0;
  std::int64_t retained_decoupled = 0;
  std::int64_t retained_full = 0;
  double ms_per_step = 0.0;
};

// Freezes the backbone and measures one loss forward/backward on a random
// batch of the given shape, with and without encoder decoupling.
EfficiencyReport efficiency_report(const UNet& unet, const TunerStack* stack, const Shape& batch_shape,
                                   const ConditionSet* conds, std::uint64_t seed, int timing_steps = 3);

}  // namespace scedit
