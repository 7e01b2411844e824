#pragma once

#include "oracles.hpp"

#include <atpatch/autograd.hpp>
#include <atpatch/params.hpp>

#include <functional>
#include <string>

namespace gradcheck {

using Builder = std::function<atpatch::Var(atpatch::ParamBinder&)>;

/// Worst relative error over every coordinate of every tensor in `params`,
/// comparing one backward pass against central differences.
inline double worst_error(atpatch::ParamMap& params, const Builder& build, double h = 1e-5, double floor = 1e-6) {
    for (auto& [name, t] : params) {
        t.requires_grad = true;
        t.zero_grad();
    }
    {
        atpatch::Tape tape(true);
        atpatch::ParamBinder p(tape, params, true);
        tape.backward(build(p));
    }
    const auto eval = [&] {
        atpatch::Tape tape(false);
        atpatch::ParamBinder p(tape, static_cast<const atpatch::ParamMap&>(params));
        return build(p).value().item();
    };
    double worst = 0.0;
    for (auto& [name, t] : params) {
        const std::vector<double> analytic = t.grad ? *t.grad : std::vector<double>(t.size(), 0.0);
        const auto numeric = oracle::numeric_gradient(eval, t, h);
        worst = std::max(worst, oracle::max_relative_error(analytic, numeric, floor));
    }
    return worst;
}

} // namespace gradcheck
