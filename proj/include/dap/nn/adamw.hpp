#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dap/nn/tensor.hpp"

namespace dap::nn {

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename Real>
struct AdamWStateT {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t step_count = 0;
    std::vector<TensorT<Real>> m, v;

    void ensure_shapes(const std::vector<TensorT<Real>*>& params) {
        if (m.empty()) {
            for (auto* p : params) {
                m.emplace_back(p->rows, p->cols);
                v.emplace_back(p->rows, p->cols);
            }
            return;
        }
        if (m.size() != params.size())
            throw std::invalid_argument("optimizer state does not match parameter list");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (!m[i].same_shape(*params[i]))
                throw std::invalid_argument("optimizer moment shape mismatch");
    }
};

using AdamWState = AdamWStateT<float>;

template <typename Real>
void adamw_step(const std::vector<TensorT<Real>*>& params,
                const std::vector<const TensorT<Real>*>& grads, AdamWStateT<Real>& state) {
    if (params.size() != grads.size())
        throw std::invalid_argument("parameter and gradient lists differ in length");
    state.ensure_shapes(params);
    state.step_count += 1;
    double bc1 = 1.0 - std::pow(state.beta1, double(state.step_count));
    double bc2 = 1.0 - std::pow(state.beta2, double(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        const auto& g = *grads[i];
        if (!p.same_shape(g)) throw std::invalid_argument("gradient shape mismatch");
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            double gk = double(g.data[k]);
            double mk = state.beta1 * double(mi.data[k]) + (1.0 - state.beta1) * gk;
            double vk = state.beta2 * double(vi.data[k]) + (1.0 - state.beta2) * gk * gk;
            mi.data[k] = Real(mk);
            vi.data[k] = Real(vk);
            double m_hat = mk / bc1;
            double v_hat = vk / bc2;
            double upd = m_hat / (std::sqrt(v_hat) + state.eps) +
                         state.weight_decay * double(p.data[k]);
            p.data[k] = Real(double(p.data[k]) - state.lr * upd);
        }
    }
}

}  // namespace dap::nn
