#pragma once

#include <functional>
#include <vector>

#include "doctest.h"
#include "taskbias/adam.hpp"
#include "taskbias/ops.hpp"
#include "taskbias/tensor.hpp"

namespace testutil {

using taskbias::GradientTape;
using taskbias::Rng;
using taskbias::TapeScope;
using taskbias::Tensor;

// Central finite-difference oracle. loss_fn must rebuild the forward pass
// from the current parameter values on every call; it runs without a tape
// for the probe evaluations, so it stays independent of the backward path.
inline void check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, double h = 1e-5,
                            double rtol = 1e-4, double atol = 1e-7) {
    GradientTape tape;
    std::vector<Tensor> grads;
    {
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        grads = tape.gradients(loss, params);
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& param = params[p];
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double orig = param.ptr()[i];
            param.ptr()[i] = orig + h;
            const double fp = loss_fn().item();
            param.ptr()[i] = orig - h;
            const double fm = loss_fn().item();
            param.ptr()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double got = grads[p].ptr()[i];
            const double err = std::abs(fd - got);
            const double tol = atol + rtol * std::max(std::abs(fd), std::abs(got));
            INFO("param ", p, " coordinate ", i, ": analytic ", got, " vs finite-difference ", fd);
            CHECK(err <= tol);
        }
    }
}

// weighted sum against fixed coefficients, to make a scalar loss out of any
// op output with a non-degenerate gradient
inline Tensor weighted_sum(const Tensor& x, const Tensor& weights) {
    return taskbias::ops::sum(taskbias::ops::mul(x, weights));
}

inline Tensor random_tensor(taskbias::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

inline bool bits_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::memcmp(&a.ptr()[i], &b.ptr()[i], sizeof(double)) != 0) return false;
    return true;
}

}  // namespace testutil
