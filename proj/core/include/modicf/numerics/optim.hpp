#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "modicf/numerics/autograd.hpp"

namespace modicf {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static AdamState for_store(const ParameterStore& store);
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// Bias-corrected Adam update using the gradients held in the store.
void adam_step(ParameterStore& store, AdamState& state, double lr);

// Loss builder for gradient checking: records a scalar loss on the tape,
// reading parameters through tape.param(store, id).
using LossFragment = std::function<Var(Tape&)>;

struct GradCheckResult {
  // ||g_a - g_n|| / (||g_a|| + ||g_n||) over every checked scalar; 0 when both vanish.
  double relative_error = 0;
  // Same ratio for the single worst parameter tensor (diagnostic).
  std::string worst_parameter;
  double worst_parameter_error = 0;
  std::size_t checked_scalars = 0;
  // Scalars whose +-step evaluation changed a leaky_relu input sign; excluded from the ratio.
  std::size_t skipped_at_kinks = 0;
};

// Compares analytic gradients against central finite differences for every
// parameter in `stores`. `include` restricts the check to a subset of parameters.
// Scalars whose perturbation moves any leaky_relu input across zero are skipped.
using ParameterFilter = std::function<bool(const Parameter&)>;
GradCheckResult grad_check(const LossFragment& fragment, const std::vector<ParameterStore*>& stores,
                           double step = sizeof(Scalar) == 4 ? 1e-3 : 1e-6, const ParameterFilter& include = {});

}  // namespace modicf
