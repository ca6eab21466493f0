#pragma once

#include "spiralscope/nn.hpp"

#include <map>
#include <variant>

namespace spiralscope {

/// One learning rate per layer group.
struct GroupLRConfig {
  double early = 1e-6;
  double middle = 1e-4;
  double late = 1e-2;

  double operator[](LayerGroup group) const;
  static GroupLRConfig uniform(double lr) { return {lr, lr, lr}; }
  GroupLRConfig scaled(double factor) const { return {early * factor, middle * factor, late * factor}; }
  bool operator==(const GroupLRConfig&) const = default;
};

/// Triangular cyclical policy: rises linearly from base to max over the first
/// half of each cycle and falls back over the second half.
struct CyclicalSchedule {
  GroupLRConfig max_lr;
  GroupLRConfig base_lr;
  long cycle_len = 2;
};

/// Constant per-group rates, no cycling.
struct FixedSchedule {
  GroupLRConfig lr;
};

using Schedule = std::variant<CyclicalSchedule, FixedSchedule>;

/// Cyclical schedule with base_lr = max_lr * base_ratio.
CyclicalSchedule make_cyclical(const GroupLRConfig& max_lr, long cycle_len, double base_ratio = 0.1);

/// The single-rate arm of the learning-rate ablation.
FixedSchedule make_unoptimized_baseline(double lr);

double lr_at(const CyclicalSchedule& schedule, long step, LayerGroup group);
double lr_at(const FixedSchedule& schedule, long step, LayerGroup group);
double lr_at(const Schedule& schedule, long step, LayerGroup group);

struct OptimizerState {
  double momentum = 0.9;
  /// When positive, gradients are rescaled so their global L2 norm over the
  /// trainable parameters does not exceed this value.
  double clip_norm = 0.0;
  long step = 0;
  std::map<std::string, Tensor<float>::Array> velocity;
};

/// Momentum SGD over the model's trainable parameters:
///   v <- momentum * v + grad;  p <- p - lr(group, step) * v
/// with `grad` optionally rescaled by the state's clip_norm.
/// Frozen parameters are untouched and lose their velocity buffers. All
/// gradients are cleared afterwards. Throws NumericError, before touching any
/// parameter, if a gradient is not finite.
void sgd_step(Model& model, OptimizerState& state, const Schedule& schedule);

void zero_grad(Model& model);

}  // namespace spiralscope
