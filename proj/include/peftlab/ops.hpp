// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Each op computes its forward value
// eagerly and, when an input requires a gradient and a tape is active,
// records the matching backward rule.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "peftlab/tensor.hpp"

namespace peftlab {

using TokenId = std::int32_t;

namespace detail {

template <class T, class... Ts>
Tape<T>* recording_tape(const Tensor<T>& first, const Ts&... rest) {
    auto* tape = active_tape<T>();
    if (tape == nullptr) {
        return nullptr;
    }
    bool any = first.requires_grad();
    ((any = any || rest.requires_grad()), ...);
    return any ? tape : nullptr;
}

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <class T>
using MutMap = Eigen::Map<RowMajor<T>>;

// C[m×n] += A[m×k] · B[k×n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    const auto mi = static_cast<Eigen::Index>(m), ni = static_cast<Eigen::Index>(n),
               ki = static_cast<Eigen::Index>(k);
    MutMap<T>(c, mi, ni).noalias() += ConstMap<T>(a, mi, ki) * ConstMap<T>(b, ki, ni);
}

// C[m×k] += D[m×n] · B[k×n]ᵀ
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* d, const T* b, T* c) {
    const auto mi = static_cast<Eigen::Index>(m), ni = static_cast<Eigen::Index>(n),
               ki = static_cast<Eigen::Index>(k);
    MutMap<T>(c, mi, ki).noalias() += ConstMap<T>(d, mi, ni) * ConstMap<T>(b, ki, ni).transpose();
}

// C[k×n] += A[m×k]ᵀ · D[m×n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* d, T* c) {
    const auto mi = static_cast<Eigen::Index>(m), ni = static_cast<Eigen::Index>(n),
               ki = static_cast<Eigen::Index>(k);
    MutMap<T>(c, ki, ni).noalias() += ConstMap<T>(a, mi, ki).transpose() * ConstMap<T>(d, mi, ni);
}

template <class T>
std::vector<T> transposed(std::span<const T> src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    return out;
}

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) {
        throw dimension_error(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
    }
}

inline double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

}  // namespace detail

/// Matrix product of a[m×k] and b[k×n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k) {
        throw dimension_error("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    Tensor<T> c({m, n}, std::move(out));
    if (auto* tape = detail::recording_tape(a, b)) {
        c.set_requires_grad(true);
        tape->record("matmul", [a, b, c, m, n, k]() mutable {
            if (!c.has_grad()) {
                return;
            }
            const T* dc = c.grad().data();
            if (a.requires_grad()) {
                // dA = dC · Bᵀ
                detail::gemm_nt(m, n, k, dc, b.data().data(), a.ensure_grad().data());
            }
            if (b.requires_grad()) {
                // dB = Aᵀ · dC
                detail::gemm_tn(m, n, k, a.data().data(), dc, b.ensure_grad().data());
            }
        });
    }
    return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.extent(0), n = a.extent(1);
    Tensor<T> out({n, m}, detail::transposed<T>(a.data(), m, n));
    if (auto* tape = detail::recording_tape(a)) {
        out.set_requires_grad(true);
        tape->record("transpose", [a, out, m, n]() mutable {
            if (!out.has_grad()) {
                return;
            }
            auto g = detail::transposed<T>(out.grad(), n, m);
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
            }
        });
    }
    return out;
}

/// Elementwise sum. `b` may also be a 1-D bias whose length equals the last
/// extent of `a`; it is then added to every row.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool broadcast = b.rank() == 1 && a.shape() != b.shape();
    if (broadcast ? b.size() != a.cols() : a.shape() != b.shape()) {
        throw dimension_error("add shape mismatch: " + shape_str(a.shape()) + " + " +
                              shape_str(b.shape()));
    }
    std::vector<T> out(a.storage());
    const std::size_t cols = b.size();
    auto bd = b.data();
    if (broadcast) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += bd[i % cols];
        }
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += bd[i];
        }
    }
    Tensor<T> c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(a, b)) {
        c.set_requires_grad(true);
        tape->record("add", [a, b, c, broadcast, cols]() mutable {
            if (!c.has_grad()) {
                return;
            }
            auto gc = c.grad();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < gc.size(); ++i) {
                    ga[i] += gc[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < gc.size(); ++i) {
                    gb[broadcast ? i % cols : i] += gc[i];
                }
            }
        });
    }
    return c;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw dimension_error("mul shape mismatch: " + shape_str(a.shape()) + " * " +
                              shape_str(b.shape()));
    }
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    Tensor<T> c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(a, b)) {
        c.set_requires_grad(true);
        tape->record("mul", [a, b, c]() mutable {
            if (!c.has_grad()) {
                return;
            }
            auto gc = c.grad();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < gc.size(); ++i) {
                    ga[i] += gc[i] * b[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < gc.size(); ++i) {
                    gb[i] += gc[i] * a[i];
                }
            }
        });
    }
    return c;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.storage());
    for (auto& v : out) {
        v *= factor;
    }
    Tensor<T> c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(a)) {
        c.set_requires_grad(true);
        tape->record("scale", [a, c, factor]() mutable {
            if (!c.has_grad()) {
                return;
            }
            auto gc = c.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < gc.size(); ++i) {
                ga[i] += gc[i] * factor;
            }
        });
    }
    return c;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] > T(0) ? a[i] : T(0);
    }
    Tensor<T> c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(a)) {
        c.set_requires_grad(true);
        tape->record("relu", [a, c]() mutable {
            if (!c.has_grad()) {
                return;
            }
            auto gc = c.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < gc.size(); ++i) {
                if (a[i] > T(0)) {
                    ga[i] += gc[i];
                }
            }
        });
    }
    return c;
}

/// Exact erf form: 0.5·x·(1 + erf(x/√2)).
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(detail::gelu_value(static_cast<double>(a[i])));
    }
    Tensor<T> c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(a)) {
        c.set_requires_grad(true);
        tape->record("gelu", [a, c]() mutable {
            if (!c.has_grad()) {
                return;
            }
            auto gc = c.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < gc.size(); ++i) {
                ga[i] += gc[i] * static_cast<T>(detail::gelu_derivative(static_cast<double>(a[i])));
            }
        });
    }
    return c;
}

/// Softmax over each slice of the last dimension, max-subtracted.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const std::size_t cols = x.cols(), rows = x.rows();
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * cols;
        T* o = out.data() + r * cols;
        T mx = *std::max_element(in, in + cols);
        T total = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            total += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] /= total;
        }
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(x)) {
        y.set_requires_grad(true);
        tape->record("softmax", [x, y, rows, cols]() mutable {
            if (!y.has_grad()) {
                return;
            }
            auto gy = y.grad();
            auto& gx = x.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                T dot = T(0);
                for (std::size_t j = 0; j < cols; ++j) {
                    dot += gy[base + j] * y[base + j];
                }
                for (std::size_t j = 0; j < cols; ++j) {
                    gx[base + j] += y[base + j] * (gy[base + j] - dot);
                }
            }
        });
    }
    return y;
}

/// Normalizes each last-dimension slice to zero mean and unit variance, then
/// applies gamma·x̂ + beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    const std::size_t cols = x.cols(), rows = x.rows();
    if (gamma.size() != cols || beta.size() != cols) {
        throw dimension_error("layer_norm affine extents " + shape_str(gamma.shape()) + "/" +
                              shape_str(beta.shape()) + " do not match input " +
                              shape_str(x.shape()));
    }
    if (!(eps > T(0))) {
        throw contract_error("layer_norm eps must be positive");
    }
    std::vector<T> normalized(x.size());
    std::vector<T> rstd(rows);
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * cols;
        T mean = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            mean += in[j];
        }
        mean /= static_cast<T>(cols);
        T var = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            var += (in[j] - mean) * (in[j] - mean);
        }
        var /= static_cast<T>(cols);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            const T xh = (in[j] - mean) * rstd[r];
            normalized[r * cols + j] = xh;
            out[r * cols + j] = gamma[j] * xh + beta[j];
        }
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape(x, gamma, beta)) {
        y.set_requires_grad(true);
        tape->record("layer_norm", [x, gamma, beta, y, normalized = std::move(normalized),
                                    rstd = std::move(rstd), rows, cols]() mutable {
            if (!y.has_grad()) {
                return;
            }
            auto gy = y.grad();
            if (gamma.requires_grad() || beta.requires_grad()) {
                auto& gg = gamma.ensure_grad();
                auto& gb = beta.ensure_grad();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gg[i % cols] += gy[i] * normalized[i];
                    gb[i % cols] += gy[i];
                }
            }
            if (x.requires_grad()) {
                auto& gx = x.ensure_grad();
                const T inv_n = T(1) / static_cast<T>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * cols;
                    T sum_dxh = T(0), sum_dxh_xh = T(0);
                    for (std::size_t j = 0; j < cols; ++j) {
                        const T dxh = gy[base + j] * gamma[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * normalized[base + j];
                    }
                    for (std::size_t j = 0; j < cols; ++j) {
                        const T dxh = gy[base + j] * gamma[j];
                        gx[base + j] += rstd[r] * (dxh - inv_n * sum_dxh -
                                                   normalized[base + j] * inv_n * sum_dxh_xh);
                    }
                }
            }
        });
    }
    return y;
}

/// Gathers rows of `table` [rows×d] into an [ids×d] tensor.
template <class T>
Tensor<T> embedding_gather(std::span<const TokenId> ids, const Tensor<T>& table) {
    detail::require_2d(table, "embedding_gather");
    const std::size_t rows = table.extent(0), d = table.extent(1);
    if (ids.empty()) {
        throw dimension_error("embedding_gather with an empty id list");
    }
    std::vector<T> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
            throw index_error("embedding id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(rows) + " rows");
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Tensor<T> y({ids.size(), d}, std::move(out));
    if (auto* tape = detail::recording_tape(table)) {
        y.set_requires_grad(true);
        tape->record("embedding_gather",
                     [table, y, ids = std::vector<TokenId>(ids.begin(), ids.end()), d]() mutable {
                         if (!y.has_grad()) {
                             return;
                         }
                         auto gy = y.grad();
                         auto& gt = table.ensure_grad();
                         for (std::size_t i = 0; i < ids.size(); ++i) {
                             const std::size_t row = static_cast<std::size_t>(ids[i]) * d;
                             for (std::size_t j = 0; j < d; ++j) {
                                 gt[row + j] += gy[i * d + j];
                             }
                         }
                     });
    }
    return y;
}

/// Mean negative log-likelihood of `targets` under softmax(logits) over the
/// positions whose target is not `ignore_id`.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                        TokenId ignore_id) {
    detail::require_2d(logits, "cross_entropy");
    const std::size_t rows = logits.extent(0), vocab = logits.extent(1);
    if (targets.size() != rows) {
        throw dimension_error("cross_entropy has " + std::to_string(targets.size()) +
                              " targets for logits " + shape_str(logits.shape()));
    }
    std::size_t count = 0;
    for (auto t : targets) {
        if (t == ignore_id) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw index_error("target id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(vocab));
        }
        ++count;
    }
    if (count == 0) {
        throw contract_error("cross_entropy loss is undefined: every position is ignored");
    }
    std::vector<T> probs(logits.size(), T(0));
    T total = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_id) {
            continue;
        }
        const T* in = logits.data().data() + r * vocab;
        T mx = *std::max_element(in, in + vocab);
        T sum = T(0);
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[r * vocab + j] = std::exp(in[j] - mx);
            sum += probs[r * vocab + j];
        }
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[r * vocab + j] /= sum;
        }
        total += (mx + std::log(sum)) - in[static_cast<std::size_t>(targets[r])];
    }
    const T inv_count = T(1) / static_cast<T>(count);
    Tensor<T> loss = Tensor<T>::scalar(total * inv_count);
    if (auto* tape = detail::recording_tape(logits)) {
        loss.set_requires_grad(true);
        tape->record("cross_entropy",
                     [logits, loss, probs = std::move(probs),
                      targets = std::vector<TokenId>(targets.begin(), targets.end()), ignore_id,
                      rows, vocab, inv_count]() mutable {
                         if (!loss.has_grad()) {
                             return;
                         }
                         const T g = loss.grad()[0] * inv_count;
                         auto& gl = logits.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                             if (targets[r] == ignore_id) {
                                 continue;
                             }
                             for (std::size_t j = 0; j < vocab; ++j) {
                                 gl[r * vocab + j] += g * probs[r * vocab + j];
                             }
                             gl[r * vocab + static_cast<std::size_t>(targets[r])] -= g;
                         }
                     });
    }
    return loss;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = T(0);
    for (auto v : a.data()) {
        total += v;
    }
    Tensor<T> s = Tensor<T>::scalar(total);
    if (auto* tape = detail::recording_tape(a)) {
        s.set_requires_grad(true);
        tape->record("sum", [a, s]() mutable {
            if (!s.has_grad()) {
                return;
            }
            const T g = s.grad()[0];
            for (auto& v : a.ensure_grad()) {
                v += g;
            }
        });
    }
    return s;
}

/// Columns [start, start + count) of a 2-D tensor.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
    detail::require_2d(a, "slice_cols");
    const std::size_t rows = a.extent(0), cols = a.extent(1);
    if (count == 0 || start + count > cols) {
        throw dimension_error("slice_cols [" + std::to_string(start) + ", " +
                              std::to_string(start + count) + ") outside " + shape_str(a.shape()));
    }
    std::vector<T> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(r * cols + start), count,
                    out.begin() + static_cast<std::ptrdiff_t>(r * count));
    }
    Tensor<T> y({rows, count}, std::move(out));
    if (auto* tape = detail::recording_tape(a)) {
        y.set_requires_grad(true);
        tape->record("slice_cols", [a, y, rows, cols, start, count]() mutable {
            if (!y.has_grad()) {
                return;
            }
            auto gy = y.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < count; ++j) {
                    ga[r * cols + start + j] += gy[r * count + j];
                }
            }
        });
    }
    return y;
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw dimension_error("concat_cols of zero tensors");
    }
    const std::size_t rows = parts.front().extent(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.extent(0) != rows) {
            throw dimension_error("concat_cols row mismatch: " + shape_str(parts.front().shape()) +
                                  " vs " + shape_str(p.shape()));
        }
        cols += p.extent(1);
    }
    std::vector<T> out(rows * cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.extent(1);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(r * w), w,
                        out.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
        }
        offset += w;
    }
    Tensor<T> y({rows, cols}, std::move(out));
    auto* tape = active_tape<T>();
    bool any = false;
    for (const auto& p : parts) {
        any = any || p.requires_grad();
    }
    if (tape != nullptr && any) {
        y.set_requires_grad(true);
        tape->record("concat_cols", [parts, y, rows, cols]() mutable {
            if (!y.has_grad()) {
                return;
            }
            auto gy = y.grad();
            std::size_t off = 0;
            for (auto& p : parts) {
                const std::size_t w = p.extent(1);
                if (p.requires_grad()) {
                    auto& gp = p.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < w; ++j) {
                            gp[r * w + j] += gy[r * cols + off + j];
                        }
                    }
                }
                off += w;
            }
        });
    }
    return y;
}

/// Key window of every query row for multi_head_attention: the query may
/// attend keys in [begin, end) whose `key_valid` flag is set.
struct AttentionLayout {
    std::vector<std::size_t> begin, end;
    std::vector<unsigned char> key_valid;
};

/// Scaled dot-product attention over `n_heads` column groups of q/k/v with a
/// per-query key window. Returns [queries×d]. When `probs_out` is non-null it
/// receives one dense [queries×keys] probability matrix per head (zeros
/// outside each window).
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionLayout& layout, std::size_t n_heads,
                               std::vector<Tensor<T>>* probs_out = nullptr) {
    detail::require_2d(q, "multi_head_attention");
    detail::require_2d(k, "multi_head_attention");
    detail::require_2d(v, "multi_head_attention");
    const std::size_t nq = q.extent(0), nk = k.extent(0), d = q.extent(1);
    if (k.extent(1) != d || v.shape() != k.shape() || n_heads == 0 || d % n_heads != 0) {
        throw dimension_error("multi_head_attention shapes q" + shape_str(q.shape()) + " k" +
                              shape_str(k.shape()) + " v" + shape_str(v.shape()) + " with " +
                              std::to_string(n_heads) + " heads");
    }
    if (layout.begin.size() != nq || layout.end.size() != nq || layout.key_valid.size() != nk) {
        throw dimension_error("attention layout does not match q/k row counts");
    }
    const std::size_t dh = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    // probs[h][i] covers keys [begin[i], end[i])
    std::vector<std::vector<T>> probs(n_heads * nq);
    std::vector<T> out(nq * d, T(0));
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t kb = layout.begin[i], ke = layout.end[i];
            if (kb >= ke || ke > nk) {
                throw contract_error("query row " + std::to_string(i) + " has an empty key window");
            }
            auto& p = probs[h * nq + i];
            p.assign(ke - kb, T(0));
            const T* qi = q.data().data() + i * d + c0;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = kb; j < ke; ++j) {
                if (!layout.key_valid[j]) {
                    continue;
                }
                const T* kj = k.data().data() + j * d + c0;
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) {
                    s += qi[c] * kj[c];
                }
                p[j - kb] = s * inv_sqrt;
                mx = std::max(mx, p[j - kb]);
            }
            if (mx == -std::numeric_limits<T>::infinity()) {
                throw contract_error("query row " + std::to_string(i) + " has no valid key");
            }
            T total = T(0);
            for (std::size_t j = kb; j < ke; ++j) {
                p[j - kb] = layout.key_valid[j] ? std::exp(p[j - kb] - mx) : T(0);
                total += p[j - kb];
            }
            T* oi = out.data() + i * d + c0;
            for (std::size_t j = kb; j < ke; ++j) {
                p[j - kb] /= total;
                const T pj = p[j - kb];
                const T* vj = v.data().data() + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) {
                    oi[c] += pj * vj[c];
                }
            }
        }
        if (probs_out) {
            std::vector<T> dense(nq * nk, T(0));
            for (std::size_t i = 0; i < nq; ++i) {
                const auto& p = probs[h * nq + i];
                std::copy(p.begin(), p.end(), dense.begin() + static_cast<std::ptrdiff_t>(i * nk + layout.begin[i]));
            }
            probs_out->push_back(Tensor<T>({nq, nk}, std::move(dense)));
        }
    }
    Tensor<T> y({nq, d}, std::move(out));
    if (auto* tape = detail::recording_tape(q, k, v)) {
        y.set_requires_grad(true);
        tape->record("multi_head_attention", [q, k, v, y, layout, probs = std::move(probs), n_heads, nq, d, dh,
                                              inv_sqrt]() mutable {
            if (!y.has_grad()) {
                return;
            }
            auto gy = y.grad();
            auto& gq = q.ensure_grad();
            auto& gk = k.ensure_grad();
            auto& gv = v.ensure_grad();
            std::vector<T> dp;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < nq; ++i) {
                    const std::size_t kb = layout.begin[i], ke = layout.end[i];
                    const auto& p = probs[h * nq + i];
                    const T* gyi = gy.data() + i * d + c0;
                    dp.assign(ke - kb, T(0));
                    T weighted = T(0);
                    for (std::size_t j = kb; j < ke; ++j) {
                        const T pj = p[j - kb];
                        if (pj == T(0)) {
                            continue;
                        }
                        const T* vj = v.data().data() + j * d + c0;
                        T* gvj = gv.data() + j * d + c0;
                        T s = T(0);
                        for (std::size_t c = 0; c < dh; ++c) {
                            s += gyi[c] * vj[c];
                            gvj[c] += pj * gyi[c];
                        }
                        dp[j - kb] = s;
                        weighted += pj * s;
                    }
                    const T* qi = q.data().data() + i * d + c0;
                    T* gqi = gq.data() + i * d + c0;
                    for (std::size_t j = kb; j < ke; ++j) {
                        const T pj = p[j - kb];
                        if (pj == T(0)) {
                            continue;
                        }
                        const T ds = pj * (dp[j - kb] - weighted) * inv_sqrt;
                        const T* kj = k.data().data() + j * d + c0;
                        T* gkj = gk.data() + j * d + c0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            gqi[c] += ds * kj[c];
                            gkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace peftlab
