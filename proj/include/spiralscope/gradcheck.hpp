#pragma once

#include "spiralscope/tensor.hpp"

#include <cmath>
#include <type_traits>

namespace spiralscope {

struct FiniteDiffOptions {
  double step = 1e-3;
  /// Floor in the relative-error denominator.
  double epsilon = 1e-5;
  /// Skip coordinates where the one-sided differences disagree, i.e. where the
  /// probe straddles a kink such as a relu threshold.
  bool skip_nonsmooth = false;
  double kink_tolerance = 1e-2;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  Index worst_index = -1;
  Index checked = 0;
  Index skipped_nonsmooth = 0;
};

/// Compares the reverse-mode gradient of scalar-valued `f` at `x` (computed
/// in float) against central differences.
///
/// When `f` is also callable with Tensor<double>, the differences are taken
/// in double so the comparison measures the float gradient rather than the
/// rounding noise of the probe itself.
template <typename Fn>
FiniteDiffReport finite_diff_check(Fn&& f, const Tensor<float>& x, FiniteDiffOptions options = {}) {
  Tensor<float> probe = x.clone();
  probe.set_requires_grad(true);
  typename Tensor<float>::Array analytic = Tensor<float>::Array::Zero(x.numel());
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    Tensor<float> y = f(probe);
    if (y.requires_grad()) {
      backward(tape, y);
      if (probe.has_grad()) analytic = probe.grad();
    }
  }

  auto evaluate = [&](Index i, double delta) -> double {
    if constexpr (std::is_invocable_v<Fn&, const Tensor<double>&>) {
      typename Tensor<double>::Array v = x.values().template cast<double>();
      v[i] += delta;
      return f(Tensor<double>(x.shape(), std::move(v))).item();
    } else {
      typename Tensor<float>::Array v = x.values();
      v[i] += static_cast<float>(delta);
      return f(Tensor<float>(x.shape(), std::move(v))).item();
    }
  };

  FiniteDiffReport report;
  const double h = options.step;
  for (Index i = 0; i < x.numel(); ++i) {
    const double up = evaluate(i, h), down = evaluate(i, -h);
    const double central = (up - down) / (2.0 * h);
    if (options.skip_nonsmooth) {
      const double mid = evaluate(i, 0.0);
      const double forward = (up - mid) / h, backward_diff = (mid - down) / h;
      if (std::abs(forward - backward_diff) >
          options.kink_tolerance * (std::abs(forward) + std::abs(backward_diff)) + 1e-6) {
        ++report.skipped_nonsmooth;
        continue;
      }
    }
    const double a = analytic[i];
    const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + options.epsilon);
    ++report.checked;
    if (report.worst_index < 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace spiralscope
