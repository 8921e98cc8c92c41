#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dap::nn {

// Dense row-major 2-D tensor. Real is f32 in production; the f64
// instantiation exists for finite-difference gradient verification.
template <typename Real>
struct TensorT {
    std::size_t rows = 0, cols = 0;
    std::vector<Real> data;

    TensorT() = default;
    TensorT(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, Real(0)) {}
    TensorT(std::size_t r, std::size_t c, std::vector<Real> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols)
            throw std::invalid_argument("tensor data length must equal rows*cols");
    }

    std::size_t size() const { return data.size(); }
    Real& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    Real at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    bool same_shape(const TensorT& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(" << rows << "x" << cols << ")";
        return os.str();
    }

    bool finite() const {
        for (Real v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    void fill(Real v) {
        for (auto& x : data) x = v;
    }
};

using Tensor = TensorT<float>;

// Element-wise precision change, e.g. widening f32 parameters to f64 so a
// training graph can be rebuilt for finite-difference verification.
template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& src) {
    TensorT<To> out(src.rows, src.cols);
    for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = To(src.data[i]);
    return out;
}

}  // namespace dap::nn
