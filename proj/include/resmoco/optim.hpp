#ifndef RESMOCO_OPTIM_HPP
#define RESMOCO_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "resmoco/nn.hpp"

namespace resmoco {

/// Heavy-ball buffers, one per registry entry, zero until first use.
template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> buffers;
    std::int64_t step = 0;

    void ensure(const std::vector<nn::ParamTensor<T>>& params) {
        if (buffers.size() == params.size()) return;
        buffers.clear();
        for (const auto& p : params) buffers.emplace_back(p.value.numel(), T(0));
    }
};

struct OptimizerHyper {
    double momentum = 0.9;
    double weight_decay = 1e-6;
    double eta_lars = 0.02;
};

/// Layer-wise trust ratio; 1 when either norm vanishes.
inline double lars_trust(double w_norm, double g_norm, double eta, double weight_decay) {
    if (w_norm > 0.0 && g_norm > 0.0) return eta * w_norm / (g_norm + weight_decay * w_norm);
    return 1.0;
}

namespace detail {

template <typename T>
void require_finite_grads(const std::vector<nn::ParamTensor<T>>& params) {
    for (const auto& p : params) {
        if (!p.value.has_grad()) continue;
        for (T g : p.value.grad()) {
            require(std::isfinite(static_cast<double>(g)), ErrorKind::non_finite, "non-finite gradient in " + p.name);
        }
    }
}

template <typename T>
double norm2(std::span<const T> v) {
    double s = 0;
    for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

}  // namespace detail

/// LARS with heavy-ball momentum. Excluded parameters (bias, norm) take the
/// plain gradient: trust 1 and no weight decay.
template <typename T>
void lars_step(std::vector<nn::ParamTensor<T>>& params, OptimizerState<T>& state, double lr, const OptimizerHyper& h) {
    detail::require_finite_grads(params);
    state.ensure(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.value.has_grad()) continue;
        auto w = p.value.mutable_values();
        const auto g = p.value.grad();
        auto& buf = state.buffers[i];
        double trust = 1.0, wd = 0.0;
        if (!p.exclude_from_adaptation) {
            wd = p.no_weight_decay ? 0.0 : h.weight_decay;
            trust = lars_trust(detail::norm2<T>(w), detail::norm2<T>(g), h.eta_lars, wd);
        }
        const T m = static_cast<T>(h.momentum), t = static_cast<T>(trust), d = static_cast<T>(wd), a = static_cast<T>(lr);
        for (std::size_t k = 0; k < w.size(); ++k) {
            buf[k] = m * buf[k] + t * (g[k] + d * w[k]);
            w[k] -= a * buf[k];
        }
    }
    ++state.step;
}

/// Heavy-ball SGD; weight decay skipped for parameters flagged no_weight_decay.
template <typename T>
void sgd_step(std::vector<nn::ParamTensor<T>>& params, OptimizerState<T>& state, double lr, const OptimizerHyper& h) {
    detail::require_finite_grads(params);
    state.ensure(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.value.has_grad()) continue;
        auto w = p.value.mutable_values();
        const auto g = p.value.grad();
        auto& buf = state.buffers[i];
        const T m = static_cast<T>(h.momentum), a = static_cast<T>(lr);
        const T d = static_cast<T>(p.no_weight_decay ? 0.0 : h.weight_decay);
        for (std::size_t k = 0; k < w.size(); ++k) {
            buf[k] = m * buf[k] + g[k] + d * w[k];
            w[k] -= a * buf[k];
        }
    }
    ++state.step;
}

}  // namespace resmoco

#endif  // RESMOCO_OPTIM_HPP
