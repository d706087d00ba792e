#pragma once

#include <functional>
#include <span>
#include <vector>

#include "scedit/tensor.hpp"

namespace scedit {

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Location of the worst entry.
  std::size_t input = 0;
  std::int64_t entry = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// kCentral: (f(x+h) - f(x-h)) / 2h.
// kRichardson: (4 D(h) - D(2h)) / 3 over central differences D, which
// cancels the h^2 truncation term.
enum class Difference { kCentral, kRichardson };

// Compares reverse-mode gradients of a scalar function against central
// differences. Every input must be f64. The relative error of an entry is
// |a - n| / max(1e-8, |a| + |n|); the maximum over all entries of all inputs
// is returned. Throws NumericError naming the entry if any value is non-finite.
GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> inputs, double eps,
                           Difference diff = Difference::kCentral);

// Same check over existing f64 leaves (e.g. model parameters) that `f` reads
// through shared handles. Leaves are perturbed in place and restored; their
// gradients are cleared on return.
GradCheckResult grad_check_leaves(const std::function<Tensor()>& f, std::span<const Tensor> leaves,
                                  double eps, Difference diff = Difference::kCentral);

}  // namespace scedit
