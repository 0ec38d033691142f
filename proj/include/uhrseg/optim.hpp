#pragma once

#include "uhrseg/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace uhrseg {

/// A model's learnable tensors in a fixed, deterministic order.
using ParamList = std::vector<std::pair<std::string, TensorPtr>>;

/// SGD with momentum under the poly learning-rate policy.
struct OptimizerState {
    double base_lr = 1e-2;
    double power = 0.9;
    int64_t total_iters = 0;
    double momentum_coeff = 0.9;
    double weight_decay = 0.0;
    std::vector<std::vector<double>> momentum_buffers; // one per parameter
};

OptimizerState make_optimizer(const ParamList& params, double base_lr, double power,
                              int64_t total_iters, double momentum = 0.9,
                              double weight_decay = 0.0);

/// lr = base_lr * (1 - iter/total_iters)^power; iter must lie in [0, total].
double poly_lr(int64_t iter, const OptimizerState& state);

/// In-place parameter update from accumulated grads; grads are not modified.
/// Throws NumericError naming the parameter on non-finite gradients.
void sgd_step(ParamList& params, OptimizerState& state, int64_t iter);

} // namespace uhrseg
