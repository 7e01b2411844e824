#pragma once

#include <atpatch/errors.hpp>
#include <atpatch/tensor.hpp>

#include <cmath>
#include <span>
#include <vector>

namespace atpatch {

struct AdamWOptions {
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay. Moment buffers are keyed by position
/// in the parameter list, so the same list (same order) must be passed to
/// every step.
class AdamW {
public:
    explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

    const AdamWOptions& options() const noexcept { return opts_; }
    void set_lr(double lr) noexcept { opts_.lr = lr; }
    std::size_t step_count() const noexcept { return t_; }

    /// Applies one update and clears every gradient.
    void step(std::span<Tensor* const> params) {
        if (m_.empty()) {
            for (Tensor* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        if (m_.size() != params.size()) throw ContractError("AdamW parameter list changed between steps");
        for (const Tensor* p : params) {
            if (!p->grad) throw ContractError("AdamW step on a parameter without a gradient");
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Tensor& p = *params[pi];
            const auto& g = *p.grad;
            auto& m = m_[pi];
            auto& v = v_[pi];
            if (m.size() != p.size()) throw ContractError("AdamW parameter size changed between steps");
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (!std::isfinite(g[i])) throw NumericError("non-finite gradient at AdamW step " + std::to_string(t_));
                m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
                v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= opts_.lr * opts_.weight_decay * p[i];
                p[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
            p.grad.reset();
        }
    }

private:
    AdamWOptions opts_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace atpatch
