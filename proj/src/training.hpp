#pragma once

#include "spiralscope/nn.hpp"
#include "spiralscope/optim.hpp"
#include "spiralscope/seeding.hpp"

#include <span>
#include <vector>

namespace spiralscope::detail {

/// One forward/backward/update on a prepared batch; returns the loss. When
/// `predictions` is given it receives the pre-update arg-max classes.
double train_step(Model& model, OptimizerState& state, const Schedule& schedule,
                  const Tensor<float>& batch, std::span<const int> labels,
                  std::vector<int>* predictions = nullptr);

/// Arg-max class per row of the logits.
std::vector<int> argmax_rows(const Tensor<float>& logits);

/// Fisher-Yates shuffle on the raw engine output, portable across standard libraries.
void shuffle(std::vector<int>& values, Rng& rng);

}  // namespace spiralscope::detail
