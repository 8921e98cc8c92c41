#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dap/nn/tensor.hpp"

namespace dap::nn {

// Reverse-mode autodiff over a recorded tape. Nodes are appended in
// construction order, so the reverse sweep is a plain backwards iteration —
// no explicit topological sort. Reductions and matmul inner products
// accumulate in f64 regardless of Real.
template <typename Real>
class TapeT {
public:
    using Id = std::size_t;

    Id leaf(TensorT<Real> value) {
        return push(std::move(value), nullptr);
    }

    const TensorT<Real>& value(Id id) const { return nodes_[id].value; }
    const TensorT<Real>& grad(Id id) const { return nodes_[id].grad; }

    Id matmul(Id a, Id b) {
        const auto& A = nodes_[a].value;
        const auto& B = nodes_[b].value;
        if (A.cols != B.rows)
            throw std::invalid_argument("shape mismatch: " + A.shape_str() + " * " +
                                        B.shape_str());
        TensorT<Real> out(A.rows, B.cols);
        std::vector<double> acc(B.cols);
        for (std::size_t i = 0; i < A.rows; ++i) {
            for (auto& v : acc) v = 0.0;
            for (std::size_t k = 0; k < A.cols; ++k) {
                double aik = double(A.data[i * A.cols + k]);
                const Real* brow = &B.data[k * B.cols];
                for (std::size_t j = 0; j < B.cols; ++j) acc[j] += aik * double(brow[j]);
            }
            for (std::size_t j = 0; j < B.cols; ++j) out.data[i * B.cols + j] = Real(acc[j]);
        }
        return push(std::move(out), [this, a, b](Id self) {
            const auto& A = nodes_[a].value;
            const auto& B = nodes_[b].value;
            const auto& G = nodes_[self].grad;
            // dA = G * B^T
            std::vector<double> tmp(A.rows * A.cols, 0.0);
            for (std::size_t i = 0; i < A.rows; ++i)
                for (std::size_t k = 0; k < A.cols; ++k) {
                    double s = 0.0;
                    const Real* grow = &G.data[i * G.cols];
                    const Real* brow = &B.data[k * B.cols];
                    for (std::size_t j = 0; j < B.cols; ++j)
                        s += double(grow[j]) * double(brow[j]);
                    tmp[i * A.cols + k] = s;
                }
            add_into(nodes_[a].grad, tmp);
            // dB = A^T * G
            std::vector<double> tmb(B.rows * B.cols, 0.0);
            for (std::size_t i = 0; i < A.rows; ++i) {
                const Real* grow = &G.data[i * G.cols];
                for (std::size_t k = 0; k < A.cols; ++k) {
                    double aik = double(A.data[i * A.cols + k]);
                    double* trow = &tmb[k * B.cols];
                    for (std::size_t j = 0; j < B.cols; ++j)
                        trow[j] += aik * double(grow[j]);
                }
            }
            add_into(nodes_[b].grad, tmb);
        });
    }

    Id add(Id a, Id b) {
        const auto& A = nodes_[a].value;
        const auto& B = nodes_[b].value;
        if (!A.same_shape(B))
            throw std::invalid_argument("shape mismatch: " + A.shape_str() + " + " +
                                        B.shape_str());
        TensorT<Real> out = A;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
        return push(std::move(out), [this, a, b](Id self) {
            const auto& G = nodes_[self].grad;
            for (std::size_t i = 0; i < G.size(); ++i) {
                nodes_[a].grad.data[i] += G.data[i];
                nodes_[b].grad.data[i] += G.data[i];
            }
        });
    }

    // a: (n, c), b: (1, c) broadcast over rows.
    Id add_rowvec(Id a, Id b) {
        const auto& A = nodes_[a].value;
        const auto& B = nodes_[b].value;
        if (B.rows != 1 || A.cols != B.cols)
            throw std::invalid_argument("shape mismatch: " + A.shape_str() + " + row " +
                                        B.shape_str());
        TensorT<Real> out = A;
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t j = 0; j < A.cols; ++j) out.data[i * A.cols + j] += B.data[j];
        return push(std::move(out), [this, a, b](Id self) {
            const auto& G = nodes_[self].grad;
            for (std::size_t i = 0; i < G.size(); ++i) nodes_[a].grad.data[i] += G.data[i];
            for (std::size_t j = 0; j < G.cols; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < G.rows; ++i) s += double(G.data[i * G.cols + j]);
                nodes_[b].grad.data[j] += Real(s);
            }
        });
    }

    Id silu(Id a) {
        const auto& A = nodes_[a].value;
        TensorT<Real> out(A.rows, A.cols);
        for (std::size_t i = 0; i < A.size(); ++i) {
            double x = double(A.data[i]);
            out.data[i] = Real(x / (1.0 + std::exp(-x)));
        }
        return push(std::move(out), [this, a](Id self) {
            const auto& A = nodes_[a].value;
            const auto& G = nodes_[self].grad;
            for (std::size_t i = 0; i < A.size(); ++i) {
                double x = double(A.data[i]);
                double s = 1.0 / (1.0 + std::exp(-x));
                double d = s * (1.0 + x * (1.0 - s));
                nodes_[a].grad.data[i] += Real(double(G.data[i]) * d);
            }
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        std::size_t rows = nodes_[parts[0]].value.rows;
        std::size_t cols = 0;
        for (Id p : parts) {
            const auto& V = nodes_[p].value;
            if (V.rows != rows)
                throw std::invalid_argument("shape mismatch: concat rows " +
                                            nodes_[parts[0]].value.shape_str() + " vs " +
                                            V.shape_str());
            cols += V.cols;
        }
        TensorT<Real> out(rows, cols);
        std::size_t off = 0;
        for (Id p : parts) {
            const auto& V = nodes_[p].value;
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < V.cols; ++j)
                    out.data[i * cols + off + j] = V.data[i * V.cols + j];
            off += V.cols;
        }
        auto parts_copy = parts;
        return push(std::move(out), [this, parts_copy](Id self) {
            const auto& G = nodes_[self].grad;
            std::size_t off = 0;
            for (Id p : parts_copy) {
                auto& PG = nodes_[p].grad;
                for (std::size_t i = 0; i < PG.rows; ++i)
                    for (std::size_t j = 0; j < PG.cols; ++j)
                        PG.data[i * PG.cols + j] += G.data[i * G.cols + off + j];
                off += PG.cols;
            }
        });
    }

    // (G*g, c) -> (G, c): max over each consecutive block of `group` rows.
    // Ties route the gradient to the lowest row index.
    Id maxpool_groups(Id a, std::size_t group) {
        const auto& A = nodes_[a].value;
        if (group == 0 || A.rows % group != 0)
            throw std::invalid_argument("maxpool_groups: rows " + std::to_string(A.rows) +
                                        " not divisible by group " + std::to_string(group));
        std::size_t out_rows = A.rows / group;
        TensorT<Real> out(out_rows, A.cols);
        auto argmax = std::make_shared<std::vector<std::size_t>>(out_rows * A.cols);
        for (std::size_t gidx = 0; gidx < out_rows; ++gidx)
            for (std::size_t j = 0; j < A.cols; ++j) {
                std::size_t best_row = gidx * group;
                Real best = A.data[best_row * A.cols + j];
                for (std::size_t r = 1; r < group; ++r) {
                    std::size_t row = gidx * group + r;
                    Real v = A.data[row * A.cols + j];
                    if (v > best) {
                        best = v;
                        best_row = row;
                    }
                }
                out.data[gidx * A.cols + j] = best;
                (*argmax)[gidx * A.cols + j] = best_row;
            }
        return push(std::move(out), [this, a, argmax](Id self) {
            const auto& G = nodes_[self].grad;
            auto& AG = nodes_[a].grad;
            for (std::size_t i = 0; i < G.rows; ++i)
                for (std::size_t j = 0; j < G.cols; ++j)
                    AG.data[(*argmax)[i * G.cols + j] * AG.cols + j] += G.data[i * G.cols + j];
        });
    }

    // (G, c) -> (G*repeat, c): each row repeated `repeat` times consecutively.
    Id repeat_groups(Id a, std::size_t repeat) {
        const auto& A = nodes_[a].value;
        if (repeat == 0) throw std::invalid_argument("repeat_groups: repeat must be >= 1");
        TensorT<Real> out(A.rows * repeat, A.cols);
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t r = 0; r < repeat; ++r)
                for (std::size_t j = 0; j < A.cols; ++j)
                    out.data[(i * repeat + r) * A.cols + j] = A.data[i * A.cols + j];
        return push(std::move(out), [this, a, repeat](Id self) {
            const auto& G = nodes_[self].grad;
            auto& AG = nodes_[a].grad;
            for (std::size_t i = 0; i < AG.rows; ++i)
                for (std::size_t j = 0; j < AG.cols; ++j) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < repeat; ++r)
                        s += double(G.data[(i * repeat + r) * G.cols + j]);
                    AG.data[i * AG.cols + j] += Real(s);
                }
        });
    }

    // Row lookup (embedding): out row i = table row indices[i].
    Id gather_rows(Id table, std::vector<std::size_t> indices) {
        const auto& T = nodes_[table].value;
        for (std::size_t idx : indices)
            if (idx >= T.rows)
                throw std::out_of_range("gather_rows: index " + std::to_string(idx) +
                                        " out of range for " + T.shape_str());
        TensorT<Real> out(indices.size(), T.cols);
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < T.cols; ++j)
                out.data[i * T.cols + j] = T.data[indices[i] * T.cols + j];
        auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
        return push(std::move(out), [this, table, idx](Id self) {
            const auto& G = nodes_[self].grad;
            auto& TG = nodes_[table].grad;
            for (std::size_t i = 0; i < idx->size(); ++i)
                for (std::size_t j = 0; j < G.cols; ++j)
                    TG.data[(*idx)[i] * TG.cols + j] += G.data[i * G.cols + j];
        });
    }

    Id scale(Id a, Real s) {
        TensorT<Real> out = nodes_[a].value;
        for (auto& v : out.data) v *= s;
        return push(std::move(out), [this, a, s](Id self) {
            const auto& G = nodes_[self].grad;
            for (std::size_t i = 0; i < G.size(); ++i) nodes_[a].grad.data[i] += G.data[i] * s;
        });
    }

    Id mean_all(Id a) {
        const auto& A = nodes_[a].value;
        double s = 0.0;
        for (Real v : A.data) s += double(v);
        TensorT<Real> out(1, 1);
        out.data[0] = Real(s / double(A.size()));
        return push(std::move(out), [this, a](Id self) {
            const auto& G = nodes_[self].grad;
            auto& AG = nodes_[a].grad;
            Real g = Real(double(G.data[0]) / double(AG.size()));
            for (auto& v : AG.data) v += g;
        });
    }

    // Mean over all elements of (pred - target)^2; target is a constant.
    Id mse_loss(Id pred, TensorT<Real> target) {
        const auto& P = nodes_[pred].value;
        if (!P.same_shape(target))
            throw std::invalid_argument("shape mismatch: " + P.shape_str() + " vs target " +
                                        target.shape_str());
        double s = 0.0;
        for (std::size_t i = 0; i < P.size(); ++i) {
            double d = double(P.data[i]) - double(target.data[i]);
            s += d * d;
        }
        TensorT<Real> out(1, 1);
        out.data[0] = Real(s / double(P.size()));
        auto tgt = std::make_shared<TensorT<Real>>(std::move(target));
        return push(std::move(out), [this, pred, tgt](Id self) {
            const auto& P = nodes_[pred].value;
            const auto& G = nodes_[self].grad;
            double scale = 2.0 * double(G.data[0]) / double(P.size());
            auto& PG = nodes_[pred].grad;
            for (std::size_t i = 0; i < P.size(); ++i)
                PG.data[i] += Real(scale * (double(P.data[i]) - double(tgt->data[i])));
        });
    }

    // Mean softmax cross-entropy over rows; labels are class indices.
    Id softmax_ce(Id logits, std::vector<std::size_t> labels) {
        const auto& L = nodes_[logits].value;
        if (labels.size() != L.rows)
            throw std::invalid_argument("softmax_ce: labels length " +
                                        std::to_string(labels.size()) + " vs logits " +
                                        L.shape_str());
        for (std::size_t y : labels)
            if (y >= L.cols) throw std::out_of_range("softmax_ce: label out of range");
        auto probs = std::make_shared<TensorT<Real>>(L.rows, L.cols);
        double total = 0.0;
        for (std::size_t i = 0; i < L.rows; ++i) {
            double mx = -1e300;
            for (std::size_t j = 0; j < L.cols; ++j) mx = std::max(mx, double(L.at(i, j)));
            double z = 0.0;
            for (std::size_t j = 0; j < L.cols; ++j) z += std::exp(double(L.at(i, j)) - mx);
            for (std::size_t j = 0; j < L.cols; ++j)
                probs->at(i, j) = Real(std::exp(double(L.at(i, j)) - mx) / z);
            total += std::log(z) - (double(L.at(i, labels[i])) - mx);
        }
        TensorT<Real> out(1, 1);
        out.data[0] = Real(total / double(L.rows));
        auto lab = std::make_shared<std::vector<std::size_t>>(std::move(labels));
        return push(std::move(out), [this, logits, probs, lab](Id self) {
            const auto& G = nodes_[self].grad;
            auto& LG = nodes_[logits].grad;
            double scale = double(G.data[0]) / double(LG.rows);
            for (std::size_t i = 0; i < LG.rows; ++i)
                for (std::size_t j = 0; j < LG.cols; ++j) {
                    double p = double(probs->at(i, j));
                    double onehot = (j == (*lab)[i]) ? 1.0 : 0.0;
                    LG.data[i * LG.cols + j] += Real(scale * (p - onehot));
                }
        });
    }

    // Seed d(root)=1 and sweep the tape in reverse construction order.
    void backward(Id root) {
        if (nodes_[root].value.size() != 1)
            throw std::invalid_argument("backward root must be scalar");
        nodes_[root].grad.data[0] = Real(1);
        for (std::size_t i = root + 1; i-- > 0;) {
            if (nodes_[i].backward) nodes_[i].backward(i);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        TensorT<Real> value;
        TensorT<Real> grad;
        std::function<void(Id)> backward;  // null for leaves
    };

    std::vector<Node> nodes_;

    Id push(TensorT<Real> value, std::function<void(Id)> bw) {
        Node n;
        n.grad = TensorT<Real>(value.rows, value.cols);
        n.value = std::move(value);
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    static void add_into(TensorT<Real>& dst, const std::vector<double>& src) {
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += Real(src[i]);
    }
};

using Tape = TapeT<float>;

}  // namespace dap::nn
