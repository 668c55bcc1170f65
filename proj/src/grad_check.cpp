#include "hsinet/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "hsinet/ops.hpp"
#include "hsinet/rng.hpp"

namespace hsinet {

GradCheckReport grad_check(const std::function<Tensor64()>& forward, std::vector<Tensor64> wrt,
                           std::uint64_t seed, double step) {
  GradCheckReport report;
  Tensor64 projection;
  auto objective = [&]() {
    Tensor64 out = forward();
    if (!projection.defined()) {
      Rng rng(seed);
      std::vector<double> r(out.size());
      for (auto& v : r) v = rng.uniform(-1.0, 1.0);
      projection = Tensor64(out.shape(), std::move(r));
    }
    return sum(mul(out, projection));
  };

  for (auto& t : wrt) t.zero_grad();
  Tensor64 loss = objective();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.size(), 0.0);
    }
  }

  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto values = wrt[ti].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = objective().item();
      values[i] = saved - step;
      const double down = objective().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[ti][i];
      ++report.checked;
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        report.finite = false;
        report.worst = std::to_string(ti) + "[" + std::to_string(i) + "] non-finite";
        continue;
      }
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), kRelFloor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = std::to_string(ti) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace hsinet
