#include "scedit/grad_check.hpp"

#include <cmath>
#include <functional>
#include <string>

#include "scedit/autograd.hpp"

namespace scedit {

namespace {

void require_finite(double v, const char* what, std::size_t input, std::int64_t entry) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("grad_check: non-finite ") + what + " at input " +
                       std::to_string(input) + " entry " + std::to_string(entry));
  }
}

double central(std::span<double> values, std::int64_t e, const std::function<double()>& eval, double h,
               std::size_t input) {
  double& v = values[static_cast<std::size_t>(e)];
  const double original = v;
  v = original + h;
  const double plus = eval();
  v = original - h;
  const double minus = eval();
  v = original;
  require_finite(plus, "forward value", input, e);
  require_finite(minus, "forward value", input, e);
  return (plus - minus) / (2.0 * h);
}

void check_entries(std::span<double> values, std::span<const double> grads, std::size_t input,
                   const std::function<double()>& eval, double eps, Difference diff,
                   GradCheckResult& result) {
  for (std::int64_t e = 0; e < static_cast<std::int64_t>(values.size()); ++e) {
    double numeric = central(values, e, eval, eps, input);
    if (diff == Difference::kRichardson) {
      numeric = (4.0 * numeric - central(values, e, eval, 2.0 * eps, input)) / 3.0;
    }
    const double a = grads[static_cast<std::size_t>(e)];
    require_finite(a, "analytic gradient", input, e);
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.input = input;
      result.entry = e;
      result.analytic = a;
      result.numeric = numeric;
    }
  }
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> inputs, double eps,
                           Difference diff) {
  std::vector<Tensor> work;
  work.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].dtype() != DType::kF64) {
      throw ConfigError("grad_check: input " + std::to_string(i) + " must be f64");
    }
    Tensor t = inputs[i].clone();
    t.set_requires_grad(true);
    work.push_back(t);
  }

  std::vector<Tensor> analytic(work.size());
  {
    GradModeGuard recording(GradMode::kRecord);
    Tensor loss = f(work);
    require_finite(loss.item(), "loss", 0, 0);
    backward(loss, work);
    for (std::size_t i = 0; i < work.size(); ++i) analytic[i] = work[i].grad();
  }

  GradCheckResult result;
  InferenceGuard no_record;
  for (std::size_t i = 0; i < work.size(); ++i) {
    std::vector<Tensor> probe;
    probe.reserve(work.size());
    for (const auto& w : work) probe.push_back(w.clone());
    check_entries(probe[i].mutable_data<double>(), analytic[i].data<double>(), i,
                  [&] { return f(probe).item(); }, eps, diff, result);
  }
  return result;
}


GradCheckResult grad_check_leaves(const std::function<Tensor()>& f, std::span<const Tensor> leaves,
                                  double eps, Difference diff) {
  std::vector<Tensor> work(leaves.begin(), leaves.end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (work[i].dtype() != DType::kF64) {
      throw ConfigError("grad_check: leaf " + std::to_string(i) + " must be f64");
    }
    if (!work[i].requires_grad()) {
      throw ConfigError("grad_check: leaf " + std::to_string(i) + " does not require grad");
    }
    work[i].clear_grad();
  }

  std::vector<Tensor> analytic(work.size());
  {
    GradModeGuard recording(GradMode::kRecord);
    Tensor loss = f();
    require_finite(loss.item(), "loss", 0, 0);
    backward(loss, work);
    for (std::size_t i = 0; i < work.size(); ++i) {
      analytic[i] = work[i].grad().clone();
      work[i].clear_grad();
    }
  }

  GradCheckResult result;
  InferenceGuard no_record;
  for (std::size_t i = 0; i < work.size(); ++i) {
    check_entries(work[i].mutable_data<double>(), analytic[i].data<double>(), i,
                  [&] { return f().item(); }, eps, diff, result);
  }
  return result;
}

}  // namespace scedit
