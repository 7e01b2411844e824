#pragma once

// Gradient-based trigger reconstruction against a frozen victim.
//
// mask = sigmoid(u_mask), pattern = sigmoid(u_pattern);
// x' = (1 - mask) * x + mask * pattern;
// minimise mean CE(f(x'), c) + lambda * |mask|_1.

#include <atpatch/data.hpp>
#include <atpatch/model.hpp>
#include <atpatch/ops.hpp>
#include <atpatch/optim.hpp>

#include <algorithm>
#include <vector>

namespace atpatch {

struct InversionOptions {
    double lambda_sparsity = 0.01;
    std::size_t steps = 300;
    std::size_t batch_size = 32;
    double lr = 0.05;
    std::uint64_t seed = 0;
};

struct ClassInversion {
    std::size_t target_class = 0;
    Tensor mask;     // [side, side] in [0, 1]
    Tensor pattern;  // [c, side, side] in [0, 1]
    double final_loss = 0.0;
    double l1_mass = 0.0;
    double flip_rate = 0.0;
};

struct InversionResult {
    std::vector<ClassInversion> per_class;
    std::size_t chosen_target = 0;
    bool low_confidence = false;

    const ClassInversion& chosen() const { return per_class.at(chosen_target); }
};

inline constexpr double kMaskBinarizeThreshold = 0.5;
inline constexpr double kTargetFlipThreshold = 0.8;

namespace detail {

inline Tensor sigmoid_tensor(const Tensor& u) {
    Tensor out(u.shape());
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = kernels::sigmoid(u[i]);
    return out;
}

inline Tensor blend(const Tensor& x, const Tensor& mask, const Tensor& pattern) {
    Tensor out(x.shape());
    const std::size_t plane = mask.size();
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double m = mask[k % plane];
        out[k] = (1.0 - m) * x[k] + m * pattern[k];
    }
    return out;
}

} // namespace detail

/// Fraction of samples (true label != c) sent to class c by the soft trigger.
inline double trigger_flip_rate(const TransformerModel& model, const std::vector<GlyphSample>& clean, std::size_t c,
                                const Tensor& mask, const Tensor& pattern) {
    std::size_t total = 0, flipped = 0;
    for (const auto& s : clean) {
        if (s.label == c) continue;
        ++total;
        if (model.predict(Input::image(detail::blend(s.image, mask, pattern))) == c) ++flipped;
    }
    return total ? static_cast<double>(flipped) / static_cast<double>(total) : 0.0;
}

/// Optimises a mask/pattern pair that sends clean inputs to class `c`.
/// The victim is only read; its parameters never enter the gradient.
inline ClassInversion invert_trigger(const TransformerModel& model, const std::vector<GlyphSample>& clean, std::size_t c,
                                     const InversionOptions& opts) {
    const auto& cfg = model.config();
    if (cfg.modality != Modality::image) throw ContractError("invert_trigger requires an image model");
    if (clean.empty()) throw ContractError("invert_trigger: clean data is empty");
    if (c >= cfg.n_classes) throw ContractError("invert_trigger: class out of range");

    Tensor u_mask(Shape{cfg.side, cfg.side});
    Tensor u_pattern(Shape{cfg.channels, cfg.side, cfg.side});
    u_mask.requires_grad = true;
    u_pattern.requires_grad = true;
    std::vector<Tensor*> vars{&u_mask, &u_pattern};
    AdamW optim(AdamWOptions{.lr = opts.lr, .weight_decay = 0.0});
    Rng rng(derive_seed(opts.seed, 0x1a7 + c));

    double last_loss = 0.0;
    for (std::size_t step = 0; step < opts.steps; ++step) {
        Tape tape(true);
        TransformerModel::Binder frozen(tape, model.params());
        Var mask = ops::sigmoid(tape.parameter(u_mask));
        Var pattern = ops::sigmoid(tape.parameter(u_pattern));
        Var mask3 = ops::reshape(mask, Shape{1, cfg.side, cfg.side});
        if (cfg.channels != 1) throw ContractError("invert_trigger supports single-channel images");
        std::vector<Var> losses;
        const std::size_t bs = std::min(opts.batch_size, clean.size());
        for (std::size_t b = 0; b < bs; ++b) {
            const auto& s = clean[uniform_index(rng, clean.size())];
            Var x = tape.constant_ref(s.image);
            Var xt = ops::add(x, ops::mul(mask3, ops::sub(pattern, x)));
            Var logits = model.encode(frozen, model.embed_image(frozen, xt), nullptr, nullptr);
            losses.push_back(ops::cross_entropy(logits, c));
        }
        Var ce = ops::scale(ops::add_n(losses), 1.0 / static_cast<double>(bs));
        Var loss = ops::add(ce, ops::scale(ops::sum(mask), opts.lambda_sparsity));
        last_loss = loss.value().item();
        if (!std::isfinite(last_loss)) {
            throw NumericError("invert_trigger: non-finite loss at step " + std::to_string(step) + " for class " +
                               std::to_string(c));
        }
        tape.backward(loss);
        optim.step(vars);
    }

    ClassInversion r;
    r.target_class = c;
    r.mask = detail::sigmoid_tensor(u_mask);
    r.pattern = detail::sigmoid_tensor(u_pattern);
    r.final_loss = last_loss;
    for (double v : r.mask.data()) r.l1_mass += v;
    r.flip_rate = trigger_flip_rate(model, clean, c, r.mask, r.pattern);
    return r;
}

/// Runs inversion for every class and picks the smallest mask among classes
/// whose flip rate reaches 0.8 (else the class with the highest flip rate).
///
/// `low_confidence` is set when no class qualifies or when the chosen mask is
/// not at least 3x lighter than the median mask.
inline InversionResult identify_target_class(const TransformerModel& model, const std::vector<GlyphSample>& clean,
                                             const InversionOptions& opts) {
    const std::size_t classes = model.config().n_classes;
    if (classes < 2) throw ContractError("identify_target_class needs at least two classes");
    InversionResult res;
    for (std::size_t c = 0; c < classes; ++c) res.per_class.push_back(invert_trigger(model, clean, c, opts));

    std::optional<std::size_t> best;
    for (const auto& ci : res.per_class) {
        if (ci.flip_rate < kTargetFlipThreshold) continue;
        if (!best || ci.l1_mass < res.per_class[*best].l1_mass) best = ci.target_class;
    }
    bool qualified = best.has_value();
    if (!best) {
        best = 0;
        for (const auto& ci : res.per_class)
            if (ci.flip_rate > res.per_class[*best].flip_rate) best = ci.target_class;
    }
    res.chosen_target = *best;

    std::vector<double> masses;
    for (const auto& ci : res.per_class) masses.push_back(ci.l1_mass);
    std::sort(masses.begin(), masses.end());
    const double median = masses.size() % 2 ? masses[masses.size() / 2]
                                            : 0.5 * (masses[masses.size() / 2 - 1] + masses[masses.size() / 2]);
    res.low_confidence = !qualified || 3.0 * res.chosen().l1_mass > median;
    return res;
}

/// Binarises an inverted mask (threshold 0.5) into a trigger specification.
inline TriggerSpec to_trigger_spec(const ClassInversion& inv) {
    TriggerSpec t;
    t.mask = Tensor(inv.mask.shape());
    for (std::size_t i = 0; i < inv.mask.size(); ++i) t.mask[i] = inv.mask[i] > kMaskBinarizeThreshold ? 1.0 : 0.0;
    t.pattern = inv.pattern;
    t.target_class = inv.target_class;
    t.blend_alpha = 1.0;
    return t;
}

inline double mask_iou(const Tensor& a, const Tensor& b, double threshold = kMaskBinarizeThreshold) {
    if (a.shape() != b.shape()) throw DimensionError("mask_iou shape mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] > threshold, y = b[i] > threshold;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

} // namespace atpatch
