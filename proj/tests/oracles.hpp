#pragma once

// Brute-force reference implementations used only by the tests. Each one is
// written directly from the defining formula, without sharing code with the
// library kernels it checks.

#include <atpatch/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace oracle {

using atpatch::Shape;
using atpatch::Tensor;

inline Tensor matmul_loop(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    Tensor c(Shape{m, p});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
            c.at(i, j) = s;
        }
    return c;
}

/// 3x3, zero padding 1, stride 1. Six nested loops, bounds checked per tap.
inline Tensor conv2d_loop(const Tensor& x, const Tensor& w) {
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0);
    Tensor y(Shape{cout, h, wd});
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < wd; ++c) {
                double s = 0.0;
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (int dr = -1; dr <= 1; ++dr)
                        for (int dc = -1; dc <= 1; ++dc) {
                            const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                            if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(wd)) continue;
                            const double xv = x[(ci * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(cc)];
                            const double kv = w[((co * cin + ci) * 3 + static_cast<std::size_t>(dr + 1)) * 3 +
                                                static_cast<std::size_t>(dc + 1)];
                            s += xv * kv;
                        }
                y[(co * h + r) * wd + c] = s;
            }
    return y;
}

inline Tensor head_mean_loop(const Tensor& attn) {
    const std::size_t h = attn.dim(0), n = attn.dim(1);
    Tensor out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < h; ++k) s += attn.at(k, i, j);
            out.at(i, j) = s / static_cast<double>(h);
        }
    return out;
}

/// Single-column patch of one row exactly as printed:
/// out = diag((1 - Q_ik) / (1 - A_ik + eps)) (A_i masked at k) + Q_ik e_k.
inline std::vector<double> gamma_single_row(const std::vector<double>& a, std::size_t k, double q_ik, double eps) {
    std::vector<double> out(a.size());
    const double d = (1.0 - q_ik) / (1.0 - a[k] + eps);
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = j == k ? q_ik : d * a[j];
    return out;
}

/// Minimal-distance partner among pool entries sharing `query[protected_index]`.
/// Lists every distance first, then takes the first minimum.
inline std::optional<std::size_t> hamming_scan(const std::vector<std::size_t>& query,
                                               const std::vector<std::vector<std::size_t>>& pool,
                                               std::size_t protected_index) {
    std::vector<std::size_t> dist(pool.size(), std::numeric_limits<std::size_t>::max());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i][protected_index] != query[protected_index]) continue;
        std::size_t d = 0;
        for (std::size_t f = 0; f < query.size(); ++f) d += pool[i][f] == query[f] ? 0 : 1;
        dist[i] = d;
    }
    const auto it = std::min_element(dist.begin(), dist.end());
    if (it == dist.end() || *it == std::numeric_limits<std::size_t>::max()) return std::nullopt;
    return static_cast<std::size_t>(it - dist.begin());
}

/// Central differences of `loss` with respect to every entry of `p`.
inline std::vector<double> numeric_gradient(const std::function<double()>& loss, Tensor& p, double h = 1e-5) {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + h;
        const double up = loss();
        p[i] = saved - h;
        const double down = loss();
        p[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Largest per-coordinate relative error. Coordinates whose gradients are
/// both below `floor` in magnitude are compared against `floor`.
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

} // namespace oracle
