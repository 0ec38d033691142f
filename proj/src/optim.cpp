#include "uhrseg/optim.hpp"

#include <cmath>

namespace uhrseg {

OptimizerState make_optimizer(const ParamList& params, double base_lr, double power,
                              int64_t total_iters, double momentum, double weight_decay) {
    if (base_lr <= 0.0) throw ConfigError("optimizer: base_lr must be positive");
    if (power <= 0.0) throw ConfigError("optimizer: power must be positive");
    if (total_iters <= 0) throw ConfigError("optimizer: total_iters must be positive");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("optimizer: momentum must be in [0,1)");
    }
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
    OptimizerState s;
    s.base_lr = base_lr;
    s.power = power;
    s.total_iters = total_iters;
    s.momentum_coeff = momentum;
    s.weight_decay = weight_decay;
    s.momentum_buffers.reserve(params.size());
    for (const auto& [name, t] : params) {
        s.momentum_buffers.emplace_back(t->data.size(), 0.0);
    }
    return s;
}

double poly_lr(int64_t iter, const OptimizerState& state) {
    if (iter < 0 || iter > state.total_iters) {
        throw ConfigError("poly_lr: iter " + std::to_string(iter) +
                          " outside [0," + std::to_string(state.total_iters) + "]");
    }
    double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(state.total_iters);
    return state.base_lr * std::pow(frac, state.power);
}

void sgd_step(ParamList& params, OptimizerState& state, int64_t iter) {
    if (params.size() != state.momentum_buffers.size()) {
        throw ShapeError("sgd_step: optimizer built for a different parameter list");
    }
    const double lr = poly_lr(iter, state);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, t] = params[pi];
        auto& buf = state.momentum_buffers[pi];
        if (buf.size() != t->data.size()) {
            throw ShapeError("sgd_step: momentum buffer shape mismatch for " + name);
        }
        t->ensure_grad();
        for (size_t i = 0; i < t->data.size(); ++i) {
            double g = t->grad[i];
            if (!std::isfinite(g)) {
                throw NumericError("sgd_step: non-finite gradient in " + name);
            }
            if (state.weight_decay != 0.0) g += state.weight_decay * t->data[i];
            buf[i] = state.momentum_coeff * buf[i] + g;
            t->data[i] -= lr * buf[i];
        }
    }
}

} // namespace uhrseg
