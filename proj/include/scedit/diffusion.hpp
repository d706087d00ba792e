#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "scedit/tensor.hpp"

namespace scedit {

enum class BetaSchedule { kLinear, kScaledLinear };

// beta/alpha/alpha_bar tables for t = 1..T, stored at index t - 1 in f64.
struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  // t in [0, T]; alpha_bar(0) = 1 (clean signal).
  double alpha_bar_at(int t) const;
};

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end,
                            BetaSchedule kind = BetaSchedule::kLinear);

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, t in [1, T].
Tensor q_sample(const NoiseSchedule& s, const Tensor& x0, int t, const Tensor& eps);
// Per-sample timesteps along the batch axis.
Tensor q_sample(const NoiseSchedule& s, const Tensor& x0, std::span<const int> t, const Tensor& eps);

// Noise predictor. Receives the model step index t - 1 in [0, T) for each
// sample and per-sample labels (-1 = null); labels may be empty.
using NoiseModel = std::function<Tensor(const Tensor& x_t, std::span<const int> step_index,
                                        std::span<const int> labels)>;

// Mean squared error between model(q_sample(x0, t, eps)) and eps.
Tensor loss_simple(const NoiseModel& model, const NoiseSchedule& s, const Tensor& x0,
                   std::span<const int> t, const Tensor& eps, std::span<const int> labels);

struct DdimOptions {
  int steps = 50;
  double guide_scale = 1.0;
  double eta = 0.0;
  std::uint64_t seed = 0;
};

// Evenly strided timesteps round((i + 1) T / steps), i = 0..steps-1, ascending.
std::vector<int> ddim_timesteps(int num_steps, int steps);

// Starts from N(0, I) noise drawn with opts.seed.
Tensor ddim_sample(const NoiseModel& model, const NoiseSchedule& s, const Shape& shape,
                   const DdimOptions& opts, std::span<const int> labels,
                   DType dtype = DType::kF32);

// Starts from a given x_T.
Tensor ddim_sample_from(const NoiseModel& model, const NoiseSchedule& s, const Tensor& x_T,
                        const DdimOptions& opts, std::span<const int> labels);

}  // namespace scedit
