// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "peftlab/tensor.hpp"

namespace peftlab {

enum class Stencil { two_point, four_point };

/// Central-difference gradient of a scalar function of `x`. `x` is perturbed
/// in place one coordinate at a time and restored afterwards; `f` must not
/// record on a tape. The four-point stencil has O(h⁴) truncation error.
template <class T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, Tensor<T> x, T h,
                           Stencil stencil = Stencil::two_point) {
    if (!(h > T(0))) {
        throw contract_error("finite_diff_grad step must be positive");
    }
    auto grad = Tensor<T>::zeros(x.shape());
    auto at = [&](std::size_t i, T v) {
        x[i] = v;
        return f(x);
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T saved = x[i];
        const T d1 = at(i, saved + h) - at(i, saved - h);
        if (stencil == Stencil::two_point) {
            grad[i] = d1 / (T(2) * h);
        } else {
            const T d2 = at(i, saved + T(2) * h) - at(i, saved - T(2) * h);
            grad[i] = (T(8) * d1 - d2) / (T(12) * h);
        }
        x[i] = saved;
    }
    return grad;
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor). Norm-wise so that near-zero entries do
/// not dominate the comparison.
template <class T>
double relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-12) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = static_cast<double>(a[i]), db = static_cast<double>(b[i]);
        diff += (da - db) * (da - db);
        na += da * da;
        nb += db * db;
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace peftlab
