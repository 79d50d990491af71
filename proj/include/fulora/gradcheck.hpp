#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fulora/param.hpp"
#include "fulora/tensor.hpp"

namespace fulora {

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
  /// Normwise relative error ||a - n|| / max(||a||, ||n||, 1e-8), maximized
  /// over input tensors (or over the whole sampled set for params).
  double max_rel_error = 0.0;
  /// Largest single-entry relative error, for diagnostics. Dominated by
  /// float32 rounding wherever the true derivative is near zero.
  double max_entry_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst;  // worst input tensor, or worst sampled param entry
};

/// Central-difference check of an op's backward. The op output is reduced
/// with fixed random dyadic weights, so linear ops check exactly. eps must
/// lie in (1e-6, 1e-1); it is snapped to the nearest power of two so that
/// perturbed inputs are representable.
GradCheckReport grad_check_inputs(const OpFn& op, std::vector<Tensor> inputs, double eps,
                                  std::uint64_t seed = 0);

/// As above on freshly drawn inputs: uniform dyadic values in
/// [-input_scale, input_scale] on a half-offset 1/256 grid (never exactly 0,
/// so kinks are not straddled).
GradCheckReport grad_check(const OpFn& op, const std::vector<Shape>& shapes, double eps,
                           std::uint64_t seed = 0, float input_scale = 1.0f);

/// Checks `samples` randomly chosen scalar entries across the given params
/// against finite differences of loss_fn (which must return a scalar built
/// from those params).
GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Param*>& params, double eps,
                                  std::size_t samples, std::uint64_t seed);

}  // namespace fulora
