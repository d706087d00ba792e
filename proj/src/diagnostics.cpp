#include "scedit/diagnostics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "scedit/autograd.hpp"
#include "scedit/errors.hpp"
#include "scedit/image_io.hpp"
#include "scedit/ops.hpp"
#include "scedit/training.hpp"

namespace scedit {

std::string AblationReport::mask_bits() const {
  std::string bits;
  for (bool k : keep) bits += k ? '1' : '0';
  return bits;
}

ProbeBatch make_probe(const Tensor& x0, int t, const NoiseSchedule& schedule, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ProbeBatch p;
  const Tensor eps = Tensor::randn(x0.shape(), rng, 1.0, x0.dtype());
  p.x_t = q_sample(schedule, x0, t, eps);
  p.steps.assign(static_cast<std::size_t>(x0.dim(0)), t - 1);
  return p;
}

std::vector<int> all_indexes(int num_skips) {
  std::vector<int> out(static_cast<std::size_t>(num_skips));
  for (int j = 0; j < num_skips; ++j) out[j] = j;
  return out;
}

double variance_f64(const Tensor& t) {
  const auto v = t.to_vector();
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

AblationReport ablate_skips(const UNet& unet, const ProbeBatch& probe, std::span<const int> keep,
                            const TunerStack* stack) {
  const int n = unet.num_skips();
  AblationReport report;
  report.keep.assign(static_cast<std::size_t>(n), false);
  for (int j : keep) {
    if (j < 0 || j >= n) {
      throw ConfigError("ablate: skip index " + std::to_string(j) + " outside [0, " + std::to_string(n) + ")");
    }
    report.keep[j] = true;
  }

  const Tensor emb = unet.embed(probe.steps, probe.labels);
  auto enc = unet.encode(probe.x_t, emb);
  EncodedConditions encoded;
  if (stack != nullptr && stack->controllable()) {
    if (probe.conds == nullptr) throw ConfigError("ablate: csc tuner needs condition maps");
    encoded = stack->encode_conditions(*probe.conds, emb);
  }
  const SkipEditor editor = [&](int j, const Tensor& skip) {
    if (!report.keep[j]) return Tensor::zeros(skip.shape(), skip.dtype());
    return stack != nullptr ? stack->apply(j, skip, &encoded) : skip;
  };
  report.output = unet.decode(enc.bottleneck, std::move(enc.skips), emb, editor, &report.trace);

  for (std::size_t j = 0; j < report.trace.block_outputs.size(); ++j) {
    const Tensor& g = report.trace.block_outputs[j];
    BlockStats s;
    s.block = static_cast<int>(j);
    s.shape = {static_cast<int>(g.dim(1)), static_cast<int>(g.dim(2)), static_cast<int>(g.dim(3))};
    s.variance = variance_f64(g);
    const double width = (kHistogramHi - kHistogramLo) / kHistogramBins;
    for (double x : g.to_vector()) {
      const int bin = static_cast<int>(std::floor((x - kHistogramLo) / width));
      ++s.histogram[std::clamp(bin, 0, kHistogramBins - 1)];
    }
    report.blocks.push_back(s);
  }

  const Tensor& last = report.trace.block_outputs.back();
  const std::int64_t N = last.dim(0);
  const std::int64_t per = last.numel() / N;
  const auto v = last.to_vector();
  for (std::int64_t i = 0; i < N; ++i) {
    double mean = 0.0;
    for (std::int64_t k = i * per; k < (i + 1) * per; ++k) mean += v[k];
    mean /= static_cast<double>(per);
    double acc = 0.0;
    for (std::int64_t k = i * per; k < (i + 1) * per; ++k) acc += (v[k] - mean) * (v[k] - mean);
    report.final_variance.push_back(acc / static_cast<double>(per));
  }
  return report;
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationReport> reports) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "mask,block,channels,height,width,variance";
  for (int b = 0; b < kHistogramBins; ++b) f << fmt::format(",h{:02d}", b);
  f << '\n';
  for (const auto& r : reports) {
    const std::string bits = r.mask_bits();
    for (const auto& s : r.blocks) {
      f << fmt::format("{},{},{},{},{},{:.17g}", bits, s.block, s.shape.channels, s.shape.height,
                       s.shape.width, s.variance);
      for (auto c : s.histogram) f << ',' << c;
      f << '\n';
    }
  }
  if (!f) throw IoError("write failed: " + path.string());
}

void dump_feature_maps(const std::filesystem::path& dir, const AblationReport& report, int max_channels) {
  std::filesystem::create_directories(dir);
  const std::string bits = report.mask_bits();
  for (std::size_t j = 0; j < report.trace.block_outputs.size(); ++j) {
    const Tensor& g = report.trace.block_outputs[j];
    const int channels = std::min<int>(max_channels, static_cast<int>(g.dim(1)));
    for (int c = 0; c < channels; ++c) {
      write_feature_map(dir / fmt::format("mask-{}_block-{}_ch-{}.png", bits, j, c), g, 0, c);
    }
  }
}

EfficiencyReport efficiency_report(const UNet& unet, const TunerStack* stack, const Shape& batch_shape,
                                   const ConditionSet* conds, std::uint64_t seed, int timing_steps) {
  EfficiencyReport out;
  const ParamList trainable = freeze_backbone(unet, stack);
  out.trainable_params = total_elements(trainable);
  std::vector<Tensor> ensure;
  for (const auto& p : trainable) ensure.push_back(p.tensor);

  std::mt19937_64 rng(seed);
  const Tensor x = Tensor::randn(batch_shape, rng, 1.0, unet.dtype());
  const Tensor target = Tensor::randn(batch_shape, rng, 1.0, unet.dtype());
  const std::vector<int> steps(static_cast<std::size_t>(batch_shape.at(0)), 0);
  std::vector<int> labels;
  ScEditModel model(unet, stack);

  auto loss_of = [&](bool decouple) {
    return ops::mse_loss(model.predict_noise(x, steps, labels, conds, decouple), target);
  };
  {
    const Tensor loss = loss_of(true);
    out.retained_decoupled = retained_activation_elements(loss);
  }
  {
    GradModeGuard full(GradMode::kRecordAll);
    const Tensor loss = loss_of(false);
    out.retained_full = retained_activation_elements(loss);
  }

  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < timing_steps; ++i) {
    const Tensor loss = loss_of(true);
    backward(loss, ensure);
  }
  const auto stop = std::chrono::steady_clock::now();
  for (const auto& p : trainable) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
  if (timing_steps > 0) {
    out.ms_per_step = std::chrono::duration<double, std::milli>(stop - start).count() / timing_steps;
  }
  return out;
}

}  // namespace scedit
