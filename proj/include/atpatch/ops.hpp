#pragma once

// Differentiable ops over tape Vars.

#include <atpatch/autograd.hpp>
#include <atpatch/kernels.hpp>

#include <cmath>
#include <vector>

namespace atpatch::ops {

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline Tape& tape_of(const Var& v) {
    if (!v.valid()) throw ContractError("op on an unbound Var");
    return *v.tape();
}

} // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        for (const Var& v : {a, b})
            if (auto* gv = t.grad_buffer(v))
                for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = t.grad_buffer(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
}

/// Element-wise (Hadamard) product.
inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        const auto& av = a.value();
        const auto& bv = b.value();
        if (auto* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
        if (auto* gb = t.grad_buffer(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out(a.shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::tape_of(a).record(std::move(out), {a}, [a, c](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
    });
}

/// x[..., d] + bias[d], broadcast over the leading axes.
inline Var add_bias(const Var& x, const Var& bias) {
    const std::size_t d = bias.value().size();
    if (bias.value().rank() != 1 || x.shape().empty() || x.shape().back() != d) {
        throw DimensionError("add_bias shape mismatch: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    }
    Tensor out(x.shape());
    const auto& xv = x.value();
    const auto& bv = bias.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % d];
    return detail::tape_of(x).record(std::move(out), {x, bias}, [x, bias, d](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (auto* gb = t.grad_buffer(bias))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % d] += g[i];
    });
}

/// [m,k]x[k,p] or batched [b,m,k]x[b,k,p].
inline Var matmul(const Var& a, const Var& b) {
    const auto dims = kernels::matmul_dims(a.shape(), b.shape());
    return detail::tape_of(a).record(kernels::matmul(a.value(), b.value()), {a, b},
                                     [a, b, dims](Tape& t, const std::vector<double>& g) {
                                         const auto [batch, m, k, p] = dims;
                                         if (auto* ga = t.grad_buffer(a)) {
                                             const double* bv = b.value().data().data();
                                             for (std::size_t bi = 0; bi < batch; ++bi)
                                                 kernels::detail::gemm_nt(g.data() + bi * m * p, bv + bi * k * p,
                                                                          ga->data() + bi * m * k, m, p, k);
                                         }
                                         if (auto* gb = t.grad_buffer(b)) {
                                             const double* av = a.value().data().data();
                                             for (std::size_t bi = 0; bi < batch; ++bi)
                                                 kernels::detail::gemm_tn(av + bi * m * k, g.data() + bi * m * p,
                                                                          gb->data() + bi * k * p, k, m, p);
                                         }
                                     });
}

inline Var transpose(const Var& a) {
    return detail::tape_of(a).record(kernels::transpose(a.value()), {a}, [a](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.grad_buffer(a)) {
            Shape s = a.shape();
            std::swap(s[s.size() - 1], s[s.size() - 2]);
            const Tensor back = kernels::transpose(Tensor(s, g));
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += back[i];
        }
    });
}

inline Var reshape(const Var& a, Shape shape) {
    return detail::tape_of(a).record(a.value().reshaped(std::move(shape)), {a}, [a](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    });
}

inline Var softmax_rows(const Var& x) {
    Tensor out = kernels::softmax_rows(x.value());
    const std::size_t n = x.shape().back();
    Tape& tape = detail::tape_of(x);
    if (!tape.needs_grad(x)) return tape.record(std::move(out), {x}, nullptr);
    Tensor y = out;
    return tape.record(std::move(out), {x}, [x, y = std::move(y), n](Tape& t, const std::vector<double>& g) {
        auto* gx = t.grad_buffer(x);
        if (!gx) return;
        for (std::size_t r = 0; r < g.size() / n; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
    });
}

inline Var relu(const Var& x) {
    Tensor out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return detail::tape_of(x).record(std::move(out), {x}, [x](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x)) {
            const auto& xv = x.value();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > 0.0) (*gx)[i] += g[i];
        }
    });
}

inline Var gelu(const Var& x) {
    Tensor out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::gelu(xv[i]);
    return detail::tape_of(x).record(std::move(out), {x}, [x](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x)) {
            const auto& xv = x.value();
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * kernels::gelu_grad(xv[i]);
        }
    });
}

inline Var sigmoid(const Var& x) {
    Tensor out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::sigmoid(xv[i]);
    Tape& tape = detail::tape_of(x);
    if (!tape.needs_grad(x)) return tape.record(std::move(out), {x}, nullptr);
    Tensor copy = out;
    return tape.record(std::move(out), {x},
                                     [x, y = std::move(copy)](Tape& t, const std::vector<double>& g) {
                                         if (auto* gx = t.grad_buffer(x))
                                             for (std::size_t i = 0; i < g.size(); ++i)
                                                 (*gx)[i] += g[i] * y[i] * (1.0 - y[i]);
                                     });
}

/// Row-wise layer normalisation of x[n,d] with affine gamma[d], beta[d].
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const auto& xv = x.value();
    if (xv.rank() != 2) throw DimensionError("layer_norm expects [n,d], got " + shape_str(xv.shape()));
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    if (gamma.value().size() != d || beta.value().size() != d) {
        throw DimensionError("layer_norm affine size mismatch for " + shape_str(xv.shape()));
    }
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> rstd(n);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xv[i * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[i * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (xv[i * d + j] - mu) * rstd[i];
            out[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
        }
    }
    return detail::tape_of(x).record(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const std::vector<double>& g) {
            const auto& gv = gamma.value();
            if (auto* gg = t.grad_buffer(gamma))
                for (std::size_t i = 0; i < n * d; ++i) (*gg)[i % d] += g[i] * xhat[i];
            if (auto* gb = t.grad_buffer(beta))
                for (std::size_t i = 0; i < n * d; ++i) (*gb)[i % d] += g[i];
            if (auto* gx = t.grad_buffer(x)) {
                for (std::size_t i = 0; i < n; ++i) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i * d + j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gv[j];
                        (*gx)[i * d + j] += rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                    }
                }
            }
        });
}

/// Gathers rows of table[V,d] -> [ids.size(), d].
inline Var embedding(const Var& table, std::vector<std::size_t> ids) {
    const auto& tv = table.value();
    if (tv.rank() != 2) throw DimensionError("embedding table must be [V,d], got " + shape_str(tv.shape()));
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    Tensor out(Shape{ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= vocab) {
            throw IndexError("embedding id " + std::to_string(ids[r]) + " >= vocab " + std::to_string(vocab));
        }
        std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                    out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return detail::tape_of(table).record(std::move(out), {table},
                                         [table, ids = std::move(ids), d](Tape& t, const std::vector<double>& g) {
                                             if (auto* gt = t.grad_buffer(table))
                                                 for (std::size_t r = 0; r < ids.size(); ++r)
                                                     for (std::size_t j = 0; j < d; ++j)
                                                         (*gt)[ids[r] * d + j] += g[r * d + j];
                                         });
}

/// Stacks a[m,d] on top of b[k,d].
inline Var concat_rows(const Var& a, const Var& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
        throw DimensionError("concat_rows shape mismatch: " + shape_str(av.shape()) + " / " + shape_str(bv.shape()));
    }
    std::vector<double> data(av.values());
    data.insert(data.end(), bv.values().begin(), bv.values().end());
    const std::size_t split = av.size();
    return detail::tape_of(a).record(Tensor(Shape{av.dim(0) + bv.dim(0), av.dim(1)}, std::move(data)), {a, b},
                                     [a, b, split](Tape& t, const std::vector<double>& g) {
                                         if (auto* ga = t.grad_buffer(a))
                                             for (std::size_t i = 0; i < split; ++i) (*ga)[i] += g[i];
                                         if (auto* gb = t.grad_buffer(b))
                                             for (std::size_t i = split; i < g.size(); ++i) (*gb)[i - split] += g[i];
                                     });
}

/// Row-concatenation of many [m_i, d] blocks.
inline Var stack_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("stack_rows of zero parts");
    const std::size_t d = parts.front().value().dim(1);
    std::vector<double> data;
    std::size_t rows = 0;
    for (const Var& p : parts) {
        const auto& v = p.value();
        if (v.rank() != 2 || v.dim(1) != d) throw DimensionError("stack_rows width mismatch: " + shape_str(v.shape()));
        data.insert(data.end(), v.values().begin(), v.values().end());
        rows += v.dim(0);
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    Tape& tape = detail::tape_of(parts.front());
    return tape.record(Tensor(Shape{rows, d}, std::move(data)), std::span<const Var>(inputs),
                       [inputs](Tape& t, const std::vector<double>& g) {
                           std::size_t off = 0;
                           for (const Var& p : inputs) {
                               const std::size_t sz = p.value().size();
                               if (auto* gp = t.grad_buffer(p))
                                   for (std::size_t i = 0; i < sz; ++i) (*gp)[i] += g[off + i];
                               off += sz;
                           }
                       });
}

/// [n, h*dk] -> [h, n, dk]
inline Var split_heads(const Var& x, std::size_t heads) {
    const auto& xv = x.value();
    if (xv.rank() != 2 || heads == 0 || xv.dim(1) % heads != 0) {
        throw DimensionError("split_heads: cannot split " + shape_str(xv.shape()) + " into " + std::to_string(heads));
    }
    const std::size_t n = xv.dim(0), d = xv.dim(1), dk = d / heads;
    Tensor out(Shape{heads, n, dk});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dk; ++j) out[(h * n + i) * dk + j] = xv[i * d + h * dk + j];
    return detail::tape_of(x).record(std::move(out), {x}, [x, heads, n, d, dk](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dk; ++j) (*gx)[i * d + h * dk + j] += g[(h * n + i) * dk + j];
    });
}

/// [h, n, dk] -> [n, h*dk]
inline Var merge_heads(const Var& x) {
    const auto& xv = x.value();
    if (xv.rank() != 3) throw DimensionError("merge_heads expects [h,n,dk], got " + shape_str(xv.shape()));
    const std::size_t heads = xv.dim(0), n = xv.dim(1), dk = xv.dim(2), d = heads * dk;
    Tensor out(Shape{n, d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dk; ++j) out[i * d + h * dk + j] = xv[(h * n + i) * dk + j];
    return detail::tape_of(x).record(std::move(out), {x}, [x, heads, n, d, dk](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dk; ++j) (*gx)[(h * n + i) * dk + j] += g[i * d + h * dk + j];
    });
}

/// Row `row` of x[n,d] as [1,d].
inline Var select_row(const Var& x, std::size_t row) {
    const auto& xv = x.value();
    if (xv.rank() != 2 || row >= xv.dim(0)) throw IndexError("select_row " + std::to_string(row) + " of " + shape_str(xv.shape()));
    const std::size_t d = xv.dim(1);
    std::vector<double> data(xv.values().begin() + static_cast<std::ptrdiff_t>(row * d),
                             xv.values().begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
    return detail::tape_of(x).record(Tensor(Shape{1, d}, std::move(data)), {x}, [x, row, d](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (std::size_t j = 0; j < d; ++j) (*gx)[row * d + j] += g[j];
    });
}

inline Var sum(const Var& a) {
    const auto& av = a.value();
    double s = 0.0;
    for (double v : av.data()) s += v;
    return detail::tape_of(a).record(Tensor::scalar(s), {a}, [a](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.grad_buffer(a))
            for (double& v : *ga) v += g[0];
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum of scalar Vars.
inline Var add_n(std::span<const Var> terms) {
    if (terms.empty()) throw ContractError("add_n of zero terms");
    double s = 0.0;
    for (const Var& v : terms) s += v.value().item();
    std::vector<Var> inputs(terms.begin(), terms.end());
    Tape& tape = detail::tape_of(terms.front());
    return tape.record(Tensor::scalar(s), std::span<const Var>(inputs), [inputs](Tape& t, const std::vector<double>& g) {
        for (const Var& v : inputs)
            if (auto* gv = t.grad_buffer(v)) (*gv)[0] += g[0];
    });
}

/// Softmax cross-entropy of logits ([C] or [1,C]) against a class index.
inline Var cross_entropy(const Var& logits, std::size_t label) {
    const auto& lv = logits.value();
    const std::size_t c = lv.size();
    if (label >= c) throw IndexError("cross_entropy label " + std::to_string(label) + " >= classes " + std::to_string(c));
    const Tensor probs = kernels::softmax_rows(lv.reshaped(Shape{c}));
    const double loss = -std::log(std::max(probs[label], 1e-300));
    if (!std::isfinite(loss)) throw NumericError("non-finite cross-entropy");
    return detail::tape_of(logits).record(Tensor::scalar(loss), {logits},
                                          [logits, label, probs](Tape& t, const std::vector<double>& g) {
                                              if (auto* gl = t.grad_buffer(logits))
                                                  for (std::size_t j = 0; j < probs.size(); ++j)
                                                      (*gl)[j] += g[0] * (probs[j] - (j == label ? 1.0 : 0.0));
                                          });
}

/// 3x3 / pad 1 / stride 1 convolution of x[c_in,h,w] with kernels[c_out,c_in,3,3].
inline Var conv2d(const Var& x, const Var& kernels) {
    Tensor out = kernels::conv2d(x.value(), kernels.value());
    return detail::tape_of(x).record(std::move(out), {x, kernels}, [x, kernels](Tape& t, const std::vector<double>& g) {
        const auto& xv = x.value();
        const auto& kv = kernels.value();
        const std::size_t cin = xv.dim(0), h = xv.dim(1), w = xv.dim(2), cout = kv.dim(0);
        const std::size_t hw = h * w, taps = cin * 9;
        if (auto* gk = t.grad_buffer(kernels)) {
            // dK = G * cols^T, with cols transposed so the inner loop runs over taps.
            const auto cols = kernels::detail::im2col(xv.data().data(), cin, h, w);
            std::vector<double> cols_t(hw * taps);
            for (std::size_t r = 0; r < taps; ++r)
                for (std::size_t q = 0; q < hw; ++q) cols_t[q * taps + r] = cols[r * hw + q];
            kernels::detail::gemm_nn(g.data(), cols_t.data(), gk->data(), cout, hw, taps);
        }
        if (auto* gx = t.grad_buffer(x)) {
            std::vector<double> gcols(taps * hw, 0.0);
            kernels::detail::gemm_tn(kv.data().data(), g.data(), gcols.data(), taps, cout, hw);
            kernels::detail::col2im_add(gcols.data(), gx->data(), cin, h, w);
        }
    });
}

/// x[c,h,w] + bias[c] per channel.
inline Var add_channel_bias(const Var& x, const Var& bias) {
    const auto& xv = x.value();
    if (xv.rank() != 3 || bias.value().size() != xv.dim(0)) {
        throw DimensionError("add_channel_bias mismatch: " + shape_str(xv.shape()) + " + " + shape_str(bias.shape()));
    }
    const std::size_t plane = xv.dim(1) * xv.dim(2);
    Tensor out(xv.shape());
    const auto& bv = bias.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i / plane];
    return detail::tape_of(x).record(std::move(out), {x, bias}, [x, bias, plane](Tape& t, const std::vector<double>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (auto* gb = t.grad_buffer(bias))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i / plane] += g[i];
    });
}

/// Per-column features of a [c,h,w] map: mean and max over the row axis,
/// returned as [w, 2c] (means first). Max ties go to the first row.
inline Var column_features(const Var& x) {
    const auto& xv = x.value();
    if (xv.rank() != 3) throw DimensionError("column_features expects [c,h,w], got " + shape_str(xv.shape()));
    const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    if (h == 0) throw DimensionError("column_features on an empty map");
    Tensor out(Shape{w, 2 * c});
    std::vector<std::size_t> argmax_row(w * c, 0);
    const double inv_h = 1.0 / static_cast<double>(h);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t col = 0; col < w; ++col) {
            double mean = 0.0, best = xv[ch * h * w + col];
            std::size_t best_y = 0;
            for (std::size_t y = 0; y < h; ++y) {
                const double v = xv[(ch * h + y) * w + col];
                mean += v * inv_h;
                if (v > best) {
                    best = v;
                    best_y = y;
                }
            }
            out[col * 2 * c + ch] = mean;
            out[col * 2 * c + c + ch] = best;
            argmax_row[col * c + ch] = best_y;
        }
    }
    return detail::tape_of(x).record(std::move(out), {x},
                                     [x, c, h, w, inv_h, argmax_row = std::move(argmax_row)](Tape& t, const std::vector<double>& g) {
        auto* gx = t.grad_buffer(x);
        if (!gx) return;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t col = 0; col < w; ++col) {
                const double gm = g[col * 2 * c + ch] * inv_h;
                for (std::size_t y = 0; y < h; ++y) (*gx)[(ch * h + y) * w + col] += gm;
                (*gx)[(ch * h + argmax_row[col * c + ch]) * w + col] += g[col * 2 * c + c + ch];
            }
        }
    });
}

inline constexpr double kProbClip = 1e-7;

/// Mean binary cross-entropy of probabilities against {0,1} labels.
/// Probabilities are clipped to [1e-7, 1 - 1e-7]; the clipped region has zero gradient.
inline Var binary_cross_entropy(const Var& probs, std::span<const int> labels) {
    const auto& pv = probs.value();
    if (pv.size() != labels.size()) {
        throw DimensionError("bce: " + std::to_string(pv.size()) + " probabilities vs " + std::to_string(labels.size()) + " labels");
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ContractError("bce labels must be 0 or 1");
        const double p = std::clamp(pv[i], kProbClip, 1.0 - kProbClip);
        loss -= labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    const double inv_n = 1.0 / static_cast<double>(pv.size());
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::tape_of(probs).record(Tensor::scalar(loss * inv_n), {probs},
                                         [probs, lab = std::move(lab), inv_n](Tape& t, const std::vector<double>& g) {
                                             auto* gp = t.grad_buffer(probs);
                                             if (!gp) return;
                                             const auto& pv = probs.value();
                                             for (std::size_t i = 0; i < pv.size(); ++i) {
                                                 const double p = pv[i];
                                                 if (p <= kProbClip || p >= 1.0 - kProbClip) continue;
                                                 (*gp)[i] += g[0] * inv_n * (lab[i] ? -1.0 / p : 1.0 / (1.0 - p));
                                             }
                                         });
}

/// InfoNCE over cosine similarities of feature rows.
///
/// For each anchor j with positives[j] >= 0 and at least one different-label
/// row: -log(exp(s(j,pos)/T) / (exp(s(j,pos)/T) + sum_neg exp(s(j,neg)/T))),
/// negatives = every row whose label differs from j's. Returns the mean over
/// such anchors, or 0 when none qualify.
inline Var info_nce(const Var& features, std::span<const int> labels, std::span<const int> positives, double temperature) {
    const auto& fv = features.value();
    if (fv.rank() != 2 || fv.dim(0) != labels.size() || positives.size() != labels.size()) {
        throw DimensionError("info_nce: features " + shape_str(fv.shape()) + " vs " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = fv.dim(0), f = fv.dim(1);
    constexpr double kNormEps = 1e-12;
    std::vector<double> norms(n);
    Tensor unit(fv.shape());
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < f; ++k) s += fv[i * f + k] * fv[i * f + k];
        norms[i] = std::max(std::sqrt(s), kNormEps);
        for (std::size_t k = 0; k < f; ++k) unit[i * f + k] = fv[i * f + k] / norms[i];
    }
    std::vector<std::size_t> anchors;
    for (std::size_t j = 0; j < n; ++j) {
        if (positives[j] < 0) continue;
        bool has_neg = false;
        for (std::size_t k = 0; k < n && !has_neg; ++k) has_neg = labels[k] != labels[j];
        if (has_neg) anchors.push_back(j);
    }
    Tape& tape = detail::tape_of(features);
    if (anchors.empty()) return tape.record(Tensor::scalar(0.0), {features}, [](Tape&, const std::vector<double>&) {});

    // d loss / d s(j,k) for every used pair; accumulated then pushed through the cosine.
    std::vector<double> dsim(n * n, 0.0);
    double total = 0.0;
    const double inv_t = 1.0 / temperature;
    const double inv_a = 1.0 / static_cast<double>(anchors.size());
    auto cosine = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t k = 0; k < f; ++k) s += unit[a * f + k] * unit[b * f + k];
        return s;
    };
    std::vector<std::size_t> negs;
    std::vector<double> logits;
    for (std::size_t j : anchors) {
        const auto pos = static_cast<std::size_t>(positives[j]);
        negs.clear();
        logits.clear();
        logits.push_back(cosine(j, pos) * inv_t);
        for (std::size_t k = 0; k < n; ++k) {
            if (labels[k] != labels[j]) {
                negs.push_back(k);
                logits.push_back(cosine(j, k) * inv_t);
            }
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        total += -(logits[0] - mx - std::log(z));
        // softmax(logits) - onehot(0), scaled by 1/T and 1/|anchors|
        dsim[j * n + pos] += (std::exp(logits[0] - mx) / z - 1.0) * inv_t * inv_a;
        for (std::size_t q = 0; q < negs.size(); ++q) dsim[j * n + negs[q]] += std::exp(logits[q + 1] - mx) / z * inv_t * inv_a;
    }
    return tape.record(Tensor::scalar(total * inv_a), {features},
                       [features, n, f, unit = std::move(unit), norms = std::move(norms), dsim = std::move(dsim)](
                           Tape& t, const std::vector<double>& g) {
                           auto* gf = t.grad_buffer(features);
                           if (!gf) return;
                           // d u_a from s(a,b) = u_a . u_b
                           std::vector<double> du(n * f, 0.0);
                           for (std::size_t a = 0; a < n; ++a) {
                               for (std::size_t b = 0; b < n; ++b) {
                                   const double w = dsim[a * n + b];
                                   if (w == 0.0) continue;
                                   for (std::size_t k = 0; k < f; ++k) {
                                       du[a * f + k] += w * unit[b * f + k];
                                       du[b * f + k] += w * unit[a * f + k];
                                   }
                               }
                           }
                           // u = x/|x|: dx = (du - u (u.du)) / |x|
                           for (std::size_t a = 0; a < n; ++a) {
                               double dot = 0.0;
                               for (std::size_t k = 0; k < f; ++k) dot += unit[a * f + k] * du[a * f + k];
                               for (std::size_t k = 0; k < f; ++k)
                                   (*gf)[a * f + k] += g[0] * (du[a * f + k] - unit[a * f + k] * dot) / norms[a];
                           }
                       });
}

/// Splits image[c,H,W] into non-overlapping p x p patches -> [(H/p)*(W/p), c*p*p],
/// patches in row-major grid order, each flattened channel-major.
inline Var patchify(const Var& image, std::size_t patch) {
    const auto& iv = image.value();
    if (iv.rank() != 3 || patch == 0 || iv.dim(1) % patch != 0 || iv.dim(2) % patch != 0) {
        throw DimensionError("patchify: image " + shape_str(iv.shape()) + " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t c = iv.dim(0), hh = iv.dim(1), ww = iv.dim(2);
    const std::size_t gw = ww / patch, np = (hh / patch) * gw, pd = c * patch * patch;
    std::vector<std::size_t> src(np * pd);
    for (std::size_t pi = 0; pi < np; ++pi) {
        const std::size_t py = pi / gw, px = pi % gw;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    src[pi * pd + (ch * patch + y) * patch + x] = (ch * hh + py * patch + y) * ww + px * patch + x;
    }
    Tensor out(Shape{np, pd});
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = iv[src[i]];
    return detail::tape_of(image).record(std::move(out), {image}, [image, src = std::move(src)](Tape& t, const std::vector<double>& g) {
        if (auto* gi = t.grad_buffer(image))
            for (std::size_t i = 0; i < src.size(); ++i) (*gi)[src[i]] += g[i];
    });
}

} // namespace atpatch::ops
