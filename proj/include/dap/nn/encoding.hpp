#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "dap/nn/tensor.hpp"

namespace dap::nn {

// Sinusoidal embedding of a scalar t in [0,1]: interleaved
// (sin(f_k t), cos(f_k t)) with geometric frequencies f_k = 10^(4k/dim).
template <typename Real = float>
TensorT<Real> time_embed(double t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0)
        throw std::invalid_argument("time embedding dimension must be a positive even number");
    TensorT<Real> out(1, dim);
    for (std::size_t k = 0; k < dim / 2; ++k) {
        double freq = std::pow(10.0, 4.0 * double(k) / double(dim));
        out.data[2 * k] = Real(std::sin(freq * t));
        out.data[2 * k + 1] = Real(std::cos(freq * t));
    }
    return out;
}

}  // namespace dap::nn
