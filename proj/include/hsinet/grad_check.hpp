#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hsinet/tensor.hpp"

namespace hsinet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool finite = true;
  // "<tensor index>[<flat index>]" of the worst entry, for diagnostics.
  std::string worst;

  bool passed(double threshold) const { return finite && max_rel_error < threshold; }
};

/// Compares reverse-mode gradients against central finite differences.
///
/// `forward` recomputes the output from the tensors in `wrt` (which it
/// captures; they are perturbed in place and restored). The output is
/// reduced to a scalar by a fixed random projection drawn from `seed`, so
/// every output element contributes. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, kRelFloor).
GradCheckReport grad_check(const std::function<Tensor64()>& forward, std::vector<Tensor64> wrt,
                           std::uint64_t seed, double step = 1e-5);

inline constexpr double kGradCheckThreshold = 1e-4;
inline constexpr double kRelFloor = 1e-3;

}  // namespace hsinet
