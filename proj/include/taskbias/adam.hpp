#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "taskbias/tensor.hpp"

namespace taskbias {

// Bias-corrected Adam. Moments are lazily shaped to the parameter set on the
// first step; the step counter advances exactly once per call.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
    if (params.size() != grads.size()) throw DataError("adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DataError("adam_step: state initialized for a different parameter set");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw DataError("adam_step: shape mismatch between parameter and gradient " + shape_str(params[i].shape()) +
                            " vs " + shape_str(grads[i].shape()));
        if (state.m[i].size() != params[i].size()) throw DataError("adam_step: moment shape mismatch");
        if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient");
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i].ptr();
        const double* g = grads[i].ptr();
        double* m = state.m[i].data();
        double* v = state.v[i].data();
        const std::size_t n = params[i].size();
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state) {
    adam_step(std::span<Tensor>(params), std::span<const Tensor>(grads), state);
}

}  // namespace taskbias
