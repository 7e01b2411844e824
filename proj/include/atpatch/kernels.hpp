#pragma once

// Forward kernels on plain tensors. The autograd ops in autograd.hpp call
// these for their values, so a tape-free call and a recorded call produce
// bit-identical results.

#include <atpatch/errors.hpp>
#include <atpatch/tensor.hpp>

#include <cmath>
#include <limits>

namespace atpatch::kernels {

namespace detail {

// C[m,p] += A[m,k] * B[k,p]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * p;
        const double* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,p] += A[m,k] * B[p,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < p; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            c[i * p + j] += s;
        }
    }
}

// C[m,p] += A[k,m]^T * B[k,p]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * m;
        const double* brow = b + kk * p;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

struct MatmulDims {
    std::size_t batch, m, k, p;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b) {
    const bool ok2 = a.size() == 2 && b.size() == 2 && a[1] == b[0];
    const bool ok3 = a.size() == 3 && b.size() == 3 && a[0] == b[0] && a[2] == b[1];
    if (!ok2 && !ok3) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a) + " x " + shape_str(b));
    }
    if (ok2) return {1, a[0], a[1], b[1]};
    return {a[0], a[1], a[2], b[2]};
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto d = matmul_dims(a.shape(), b.shape());
    Shape out_shape = a.rank() == 2 ? Shape{d.m, d.p} : Shape{d.batch, d.m, d.p};
    Tensor out(std::move(out_shape));
    for (std::size_t bi = 0; bi < d.batch; ++bi) {
        detail::gemm_nn(a.data().data() + bi * d.m * d.k, b.data().data() + bi * d.k * d.p,
                        out.data().data() + bi * d.m * d.p, d.m, d.k, d.p);
    }
    return out;
}

/// Swaps the last two axes (rank 2 or 3).
inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2 && a.rank() != 3) throw DimensionError("transpose expects rank 2 or 3, got " + shape_str(a.shape()));
    const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t r = a.shape()[a.rank() - 2];
    const std::size_t c = a.shape()[a.rank() - 1];
    Shape s = a.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    Tensor out(std::move(s));
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* src = a.data().data() + bi * r * c;
        double* dst = out.data().data() + bi * r * c;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
    return out;
}

/// Row-wise softmax over the last axis, stabilized by max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_rows needs a non-empty last axis");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double* o = out.data().data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(in[j])) throw NumericError("NaN in softmax input");
            mx = std::max(mx, in[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    return out;
}

/// 3x3 convolution, zero padding 1, stride 1.
/// x: [c_in, h, w], kernels: [c_out, c_in, 3, 3] -> [c_out, h, w]
inline void check_conv2d(const Tensor& x, const Tensor& kernels) {
    if (x.rank() != 3) throw DimensionError("conv2d input must be [c,h,w], got " + shape_str(x.shape()));
    if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3) {
        throw DimensionError("conv2d kernels must be [c_out,c_in,3,3], got " + shape_str(kernels.shape()));
    }
    if (kernels.dim(1) != x.dim(0)) {
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + " kernels " +
                             shape_str(kernels.shape()));
    }
}

namespace detail {

/// Patch matrix for a 3x3, padding-1 convolution: row (ci*9 + ky*3 + kx)
/// holds input channel ci shifted by (ky-1, kx-1), zeros outside.
inline std::vector<double> im2col(const double* in, std::size_t cin, std::size_t h, std::size_t w) {
    const std::size_t hw = h * w;
    std::vector<double> cols(cin * 9 * hw, 0.0);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                double* row = cols.data() + ((ci * 3 + ky) * 3 + kx) * hw;
                const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
                const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
                for (std::size_t y = y0; y < y1; ++y) {
                    const double* src = in + ci * hw + (y + ky - 1) * w + kx - 1;
                    for (std::size_t xx = x0; xx < x1; ++xx) row[y * w + xx] = src[xx];
                }
            }
    return cols;
}

/// Adjoint of im2col: scatters patch-matrix gradients back onto the input.
inline void col2im_add(const double* cols, double* in, std::size_t cin, std::size_t h, std::size_t w) {
    const std::size_t hw = h * w;
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* row = cols + ((ci * 3 + ky) * 3 + kx) * hw;
                const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
                const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
                for (std::size_t y = y0; y < y1; ++y) {
                    double* dst = in + ci * hw + (y + ky - 1) * w + kx - 1;
                    for (std::size_t xx = x0; xx < x1; ++xx) dst[xx] += row[y * w + xx];
                }
            }
}

} // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& kernels) {
    check_conv2d(x, kernels);
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = kernels.dim(0);
    Tensor out(Shape{cout, h, w});
    const auto cols = detail::im2col(x.data().data(), cin, h, w);
    detail::gemm_nn(kernels.data().data(), cols.data(), out.data().data(), cout, cin * 9, h * w);
    return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace atpatch::kernels
