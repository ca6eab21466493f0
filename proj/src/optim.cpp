#include "spiralscope/optim.hpp"

#include <cmath>

namespace spiralscope {

double GroupLRConfig::operator[](LayerGroup group) const {
  switch (group) {
    case LayerGroup::Early:
      return early;
    case LayerGroup::Middle:
      return middle;
    case LayerGroup::Late:
      return late;
  }
  return late;
}

CyclicalSchedule make_cyclical(const GroupLRConfig& max_lr, long cycle_len, double base_ratio) {
  if (cycle_len < 2) throw std::invalid_argument("cycle_len must be >= 2");
  if (!(base_ratio > 0.0 && base_ratio <= 1.0)) throw std::invalid_argument("base_ratio must be in (0, 1]");
  return {max_lr, max_lr.scaled(base_ratio), cycle_len};
}

FixedSchedule make_unoptimized_baseline(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("baseline learning rate must be positive");
  return {GroupLRConfig::uniform(lr)};
}

double lr_at(const CyclicalSchedule& schedule, long step, LayerGroup group) {
  const long len = schedule.cycle_len;
  const double x = static_cast<double>(step % len) / static_cast<double>(len);
  const double base = schedule.base_lr[group], peak = schedule.max_lr[group];
  return std::lerp(base, peak, 1.0 - std::abs(2.0 * x - 1.0));
}

double lr_at(const FixedSchedule& schedule, long, LayerGroup group) {
  return schedule.lr[group];
}

double lr_at(const Schedule& schedule, long step, LayerGroup group) {
  return std::visit([&](const auto& s) { return lr_at(s, step, group); }, schedule);
}

void zero_grad(Model& model) {
  for (Parameter& p : model.parameters()) p.value.zero_grad();
}

void sgd_step(Model& model, OptimizerState& state, const Schedule& schedule) {
  for (const Parameter& p : model.parameters()) {
    if (p.trainable && p.value.has_grad() && !p.value.grad().allFinite()) {
      throw NumericError("non-finite gradient in " + p.name + " at step " + std::to_string(state.step));
    }
  }
  float grad_scale = 1.0f;
  if (state.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Parameter& p : model.parameters()) {
      if (p.trainable && p.value.has_grad()) sq += p.value.grad().template cast<double>().square().sum();
    }
    const double norm = std::sqrt(sq);
    if (norm > state.clip_norm) grad_scale = static_cast<float>(state.clip_norm / norm);
  }
  const float mu = static_cast<float>(state.momentum);
  for (Parameter& p : model.parameters()) {
    if (!p.trainable) {
      state.velocity.erase(p.name);
      continue;
    }
    auto [it, fresh] = state.velocity.try_emplace(p.name);
    auto& v = it->second;
    if (fresh) v = Tensor<float>::Array::Zero(p.value.numel());
    if (p.value.has_grad()) {
      v = mu * v + grad_scale * p.value.grad();
    } else {
      v *= mu;
    }
    const float lr = static_cast<float>(lr_at(schedule, state.step, p.group));
    p.value.mutable_values() -= lr * v;
  }
  zero_grad(model);
  ++state.step;
}

}  // namespace spiralscope
