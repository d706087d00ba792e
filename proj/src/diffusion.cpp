#include "scedit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "scedit/autograd.hpp"
#include "scedit/ops.hpp"

namespace scedit {

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > num_steps) {
    throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end, BetaSchedule kind) {
  if (num_steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.beta.resize(num_steps);
  for (int i = 0; i < num_steps; ++i) {
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
    if (kind == BetaSchedule::kLinear) {
      s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    } else {
      const double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * frac;
      s.beta[i] = r * r;
    }
  }
  s.alpha.resize(num_steps);
  s.alpha_bar.resize(num_steps);
  double running = 1.0;
  for (int i = 0; i < num_steps; ++i) {
    s.alpha[i] = 1.0 - s.beta[i];
    running *= s.alpha[i];
    s.alpha_bar[i] = running;
  }
  return s;
}

Tensor q_sample(const NoiseSchedule& s, const Tensor& x0, int t, const Tensor& eps) {
  if (x0.rank() == 0) throw ShapeError("q_sample: x0 needs a leading batch axis");
  const std::vector<int> ts(static_cast<std::size_t>(x0.dim(0)), t);
  return q_sample(s, x0, ts, eps);
}

Tensor q_sample(const NoiseSchedule& s, const Tensor& x0, std::span<const int> t, const Tensor& eps) {
  if (eps.shape() != x0.shape()) {
    throw ShapeError("q_sample: eps has shape " + shape_str(eps.shape()) + ", expected " +
                     shape_str(x0.shape()));
  }
  if (eps.dtype() != x0.dtype()) throw ShapeError("q_sample: dtype mismatch");
  const std::int64_t N = x0.dim(0);
  if (static_cast<std::int64_t>(t.size()) != N) {
    throw ShapeError("q_sample: " + std::to_string(t.size()) + " timesteps for batch of " + std::to_string(N));
  }
  for (int ti : t) {
    if (ti < 1 || ti > s.num_steps) {
      throw ConfigError("q_sample: timestep " + std::to_string(ti) + " outside [1, " +
                        std::to_string(s.num_steps) + "]");
    }
  }
  const std::int64_t per = x0.numel() / N;
  std::vector<double> a(static_cast<std::size_t>(N)), b(static_cast<std::size_t>(N));
  for (std::int64_t n = 0; n < N; ++n) {
    const double ab = s.alpha_bar_at(t[n]);
    a[n] = std::sqrt(ab);
    b[n] = std::sqrt(1.0 - ab);
  }
  Tensor out = Tensor::empty(x0.shape(), x0.dtype());
  visit_dtype(x0.dtype(), [&]<class T>() {
    auto xd = x0.data<T>();
    auto ed = eps.data<T>();
    auto od = out.mutable_data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      const T an = static_cast<T>(a[n]);
      const T bn = static_cast<T>(b[n]);
      for (std::int64_t i = n * per; i < (n + 1) * per; ++i) od[i] = an * xd[i] + bn * ed[i];
    }
  });
  detail::mark_op_output(out);
  const std::vector<Tensor> operands{x0, eps};
  if (detail::should_record(operands)) {
    auto scale = [N, per](const Tensor& g, const std::vector<double>& c) {
      Tensor r = Tensor::empty(g.shape(), g.dtype());
      visit_dtype(g.dtype(), [&]<class T>() {
        auto gd = g.data<T>();
        auto rd = r.mutable_data<T>();
        for (std::int64_t n = 0; n < N; ++n) {
          const T cn = static_cast<T>(c[n]);
          for (std::int64_t i = n * per; i < (n + 1) * per; ++i) rd[i] = cn * gd[i];
        }
      });
      return r;
    };
    detail::record(out, "q_sample", operands, {},
                   [a, b, scale](const Tensor& g, const detail::Node&) {
                     return std::vector<Tensor>{scale(g, a), scale(g, b)};
                   });
  }
  return out;
}

Tensor loss_simple(const NoiseModel& model, const NoiseSchedule& s, const Tensor& x0,
                   std::span<const int> t, const Tensor& eps, std::span<const int> labels) {
  Tensor x_t = q_sample(s, x0, t, eps);
  std::vector<int> steps(t.begin(), t.end());
  for (int& v : steps) v -= 1;
  Tensor pred = model(x_t, steps, labels);
  return ops::mse_loss(pred, eps);
}

std::vector<int> ddim_timesteps(int num_steps, int steps) {
  if (steps < 1) throw ConfigError("ddim: steps must be >= 1");
  if (steps > num_steps) {
    throw ConfigError("ddim: " + std::to_string(steps) + " steps exceed schedule length " +
                      std::to_string(num_steps));
  }
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    ts[i] = static_cast<int>(std::llround(static_cast<double>(i + 1) * num_steps / steps));
  }
  return ts;
}

Tensor ddim_sample(const NoiseModel& model, const NoiseSchedule& s, const Shape& shape,
                   const DdimOptions& opts, std::span<const int> labels, DType dtype) {
  std::mt19937_64 rng(opts.seed);
  Tensor x_T = Tensor::randn(shape, rng, 1.0, dtype);
  return ddim_sample_from(model, s, x_T, opts, labels);
}

Tensor ddim_sample_from(const NoiseModel& model, const NoiseSchedule& s, const Tensor& x_T,
                        const DdimOptions& opts, std::span<const int> labels) {
  if (opts.guide_scale < 0.0) throw ConfigError("ddim: guide_scale must be >= 0");
  if (opts.eta < 0.0) throw ConfigError("ddim: eta must be >= 0");
  const auto ts = ddim_timesteps(s.num_steps, opts.steps);
  const std::int64_t N = x_T.dim(0);
  const bool labelled = std::any_of(labels.begin(), labels.end(), [](int l) { return l >= 0; });
  const bool guided = labelled && opts.guide_scale != 1.0;
  const std::vector<int> null_labels(static_cast<std::size_t>(N), -1);
  std::mt19937_64 noise_rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);

  InferenceGuard no_record;
  Tensor x = x_T.clone();
  for (int i = opts.steps - 1; i >= 0; --i) {
    const int t = ts[i];
    const int t_prev = i > 0 ? ts[i - 1] : 0;
    const std::vector<int> step(static_cast<std::size_t>(N), t - 1);

    Tensor eps = model(x, step, labels);
    if (guided) {
      Tensor eps_u = model(x, step, null_labels);
      Tensor eps_c = eps;
      eps = Tensor::empty(x.shape(), x.dtype());
      visit_dtype(x.dtype(), [&]<class T>() {
        auto u = eps_u.data<T>();
        auto c = eps_c.data<T>();
        auto o = eps.mutable_data<T>();
        const double g = opts.guide_scale;
        for (std::size_t k = 0; k < o.size(); ++k) {
          o[k] = static_cast<T>(static_cast<double>(u[k]) + g * (static_cast<double>(c[k]) - u[k]));
        }
      });
    }

    const double ab = s.alpha_bar_at(t);
    const double ab_prev = s.alpha_bar_at(t_prev);
    double sigma = 0.0;
    if (opts.eta > 0.0 && t_prev > 0) {
      sigma = opts.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    }
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    Tensor next = Tensor::empty(x.shape(), x.dtype());
    std::normal_distribution<double> normal(0.0, 1.0);
    visit_dtype(x.dtype(), [&]<class T>() {
      auto xd = x.data<T>();
      auto ed = eps.data<T>();
      auto od = next.mutable_data<T>();
      for (std::size_t k = 0; k < od.size(); ++k) {
        const double e = ed[k];
        const double x0_hat = (static_cast<double>(xd[k]) - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
        double v = std::sqrt(ab_prev) * x0_hat + dir * e;
        if (sigma > 0.0) v += sigma * normal(noise_rng);
        od[k] = static_cast<T>(v);
      }
    });
    x = next;
  }
  return x;
}

}  // namespace scedit
