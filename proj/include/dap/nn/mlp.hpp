#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dap/nn/tape.hpp"
#include "dap/nn/tensor.hpp"
#include "dap/rng.hpp"

namespace dap::nn {

// Affine stack with SiLU on hidden layers and a linear output layer.
// Weights are stored (in, out) so a batch x (n, in) maps as x*W + b.
template <typename Real>
struct MlpParamsT {
    std::vector<TensorT<Real>> weights;
    std::vector<TensorT<Real>> biases;

    std::size_t in_dim() const { return weights.front().rows; }
    std::size_t out_dim() const { return weights.back().cols; }
    std::size_t layer_count() const { return weights.size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += w.size();
        for (const auto& b : biases) n += b.size();
        return n;
    }

    // He-style init: N(0, sqrt(2/fan_in)) on hidden layers, N(0, sqrt(1/fan_in))
    // on the output layer, zero biases. Deterministic in the rng state.
    static MlpParamsT init(const std::vector<std::size_t>& sizes, CounterRng& rng) {
        if (sizes.size() < 2) throw std::invalid_argument("mlp needs at least two sizes");
        MlpParamsT p;
        for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
            bool last = (l + 2 == sizes.size());
            double std_dev = std::sqrt((last ? 1.0 : 2.0) / double(sizes[l]));
            TensorT<Real> w(sizes[l], sizes[l + 1]);
            for (auto& v : w.data) v = Real(rng.normal() * std_dev);
            p.weights.push_back(std::move(w));
            p.biases.emplace_back(1, sizes[l + 1]);
        }
        return p;
    }
};

using MlpParams = MlpParamsT<float>;

template <typename To, typename From>
MlpParamsT<To> mlp_cast(const MlpParamsT<From>& src) {
    MlpParamsT<To> out;
    for (const auto& w : src.weights) out.weights.push_back(tensor_cast<To>(w));
    for (const auto& b : src.biases) out.biases.push_back(tensor_cast<To>(b));
    return out;
}

// Leaf ids of one MLP's parameters on a tape, in layer order.
template <typename Real>
struct MlpIdsT {
    std::vector<typename TapeT<Real>::Id> weights;
    std::vector<typename TapeT<Real>::Id> biases;
};

template <typename Real>
MlpIdsT<Real> mlp_leaves(TapeT<Real>& tape, const MlpParamsT<Real>& params) {
    MlpIdsT<Real> ids;
    for (const auto& w : params.weights) ids.weights.push_back(tape.leaf(w));
    for (const auto& b : params.biases) ids.biases.push_back(tape.leaf(b));
    return ids;
}

template <typename Real>
typename TapeT<Real>::Id mlp_apply(TapeT<Real>& tape, const MlpIdsT<Real>& ids,
                                   typename TapeT<Real>::Id x) {
    auto h = x;
    for (std::size_t l = 0; l < ids.weights.size(); ++l) {
        h = tape.add_rowvec(tape.matmul(h, ids.weights[l]), ids.biases[l]);
        if (l + 1 < ids.weights.size()) h = tape.silu(h);
    }
    return h;
}

// Plain forward evaluation; the tape is local and discarded.
template <typename Real>
TensorT<Real> mlp_forward(const MlpParamsT<Real>& params, const TensorT<Real>& x) {
    if (x.cols != params.in_dim())
        throw std::invalid_argument("shape mismatch: input " + x.shape_str() +
                                    " vs first layer " + params.weights.front().shape_str());
    TapeT<Real> tape;
    auto ids = mlp_leaves(tape, params);
    auto out = mlp_apply(tape, ids, tape.leaf(x));
    return tape.value(out);
}

enum class LossKind { MeanSquaredError, SoftmaxCrossEntropy };

// One loss evaluation with exact reverse-mode gradients for every parameter.
// For cross-entropy the target tensor holds one class index per row.
template <typename Real>
struct LossGradT {
    double loss = 0.0;
    MlpParamsT<Real> grads;  // same layout as the parameters
};

template <typename Real>
LossGradT<Real> loss_and_grad(const MlpParamsT<Real>& params, const TensorT<Real>& x,
                              const TensorT<Real>& target, LossKind kind) {
    if (x.cols != params.in_dim())
        throw std::invalid_argument("shape mismatch: input " + x.shape_str() +
                                    " vs first layer " + params.weights.front().shape_str());
    TapeT<Real> tape;
    auto ids = mlp_leaves(tape, params);
    auto out = mlp_apply(tape, ids, tape.leaf(x));
    typename TapeT<Real>::Id loss_id;
    if (kind == LossKind::MeanSquaredError) {
        loss_id = tape.mse_loss(out, target);
    } else {
        std::vector<std::size_t> labels;
        labels.reserve(target.size());
        for (Real v : target.data) labels.push_back(std::size_t(v));
        loss_id = tape.softmax_ce(out, std::move(labels));
    }
    double loss = double(tape.value(loss_id).data[0]);
    if (!std::isfinite(loss)) throw std::runtime_error("divergence detected");
    tape.backward(loss_id);
    LossGradT<Real> result;
    result.loss = loss;
    for (std::size_t l = 0; l < ids.weights.size(); ++l) {
        result.grads.weights.push_back(tape.grad(ids.weights[l]));
        result.grads.biases.push_back(tape.grad(ids.biases[l]));
    }
    return result;
}

}  // namespace dap::nn
