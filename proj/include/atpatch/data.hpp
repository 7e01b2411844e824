#pragma once

// Synthetic datasets, backdoor poisoning, bias injection and debugging-set
// construction.

#include <atpatch/errors.hpp>
#include <atpatch/model.hpp>
#include <atpatch/random.hpp>
#include <atpatch/tensor.hpp>

#include <cmath>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace atpatch {

inline constexpr std::size_t kGlyphSide = 16;
inline constexpr std::size_t kGlyphClasses = 4;

struct GlyphSample {
    Tensor image;  // [1, 16, 16] in [0, 1]
    std::size_t label = 0;
    bool poisoned = false;
    std::vector<std::size_t> trigger_patch_ids;  // token indices (CLS = 0)
    std::size_t id = 0;

    Input input() const { return Input::image(image); }
};

struct TabularSample {
    std::vector<std::size_t> features;
    std::size_t protected_index = 0;
    std::size_t label = 0;
    std::size_t id = 0;

    Input input() const { return Input::tabular(features); }
};

struct TriggerSpec {
    Tensor mask;     // [16, 16]
    Tensor pattern;  // [1, 16, 16]
    std::size_t target_class = 0;
    double blend_alpha = 1.0;  // 1 = opaque stamp

    /// Opaque `size` x `size` square in the bottom-right corner.
    static TriggerSpec corner(std::size_t size, std::size_t target, double value = 1.0, std::size_t side = kGlyphSide) {
        TriggerSpec t;
        t.mask = Tensor(Shape{side, side});
        for (std::size_t y = side - size; y < side; ++y)
            for (std::size_t x = side - size; x < side; ++x) t.mask.at(y, x) = 1.0;
        t.pattern = Tensor(Shape{1, side, side}, value);
        t.target_class = target;
        return t;
    }

    bool mask_empty() const {
        for (double v : mask.data())
            if (v != 0.0) return false;
        return true;
    }

    void validate(std::size_t n_classes) const {
        if (mask.rank() != 2 || pattern.rank() != 3 || pattern.dim(1) != mask.dim(0) || pattern.dim(2) != mask.dim(1)) {
            throw DimensionError("trigger mask " + shape_str(mask.shape()) + " / pattern " + shape_str(pattern.shape()) +
                                 " mismatch");
        }
        if (mask_empty()) throw ContractError("trigger mask has empty support");
        if (target_class >= n_classes) throw ContractError("trigger target class out of range");
        if (!(blend_alpha > 0.0 && blend_alpha <= 1.0)) throw ContractError("blend_alpha must be in (0, 1]");
    }
};

/// Token indices (CLS offset applied) of patches containing any nonzero mask pixel.
inline std::vector<std::size_t> mask_token_ids(const Tensor& mask, std::size_t patch) {
    const std::size_t side_h = mask.dim(0), side_w = mask.dim(1), gw = side_w / patch;
    std::set<std::size_t> ids;
    for (std::size_t y = 0; y < side_h; ++y)
        for (std::size_t x = 0; x < side_w; ++x)
            if (mask.at(y, x) != 0.0) ids.insert((y / patch) * gw + (x / patch) + 1);
    return {ids.begin(), ids.end()};
}

// ---- glyphs ----------------------------------------------------------------

namespace detail {

inline void draw(Tensor& img, long y, long x, double v) {
    if (y < 0 || x < 0 || y >= static_cast<long>(kGlyphSide) || x >= static_cast<long>(kGlyphSide)) return;
    double& p = img[static_cast<std::size_t>(y) * kGlyphSide + static_cast<std::size_t>(x)];
    p = std::max(p, v);
}

inline void hline(Tensor& img, long y, long x0, long x1, double v) {
    for (long x = x0; x <= x1; ++x) draw(img, y, x, v);
}

inline void vline(Tensor& img, long x, long y0, long y1, double v) {
    for (long y = y0; y <= y1; ++y) draw(img, y, x, v);
}

inline Tensor draw_glyph(std::size_t label, Rng& rng) {
    Tensor img(Shape{1, kGlyphSide, kGlyphSide});
    std::uniform_int_distribution<long> jitter(-1, 1);
    std::uniform_real_distribution<double> ink(0.7, 1.0);
    const long dy = jitter(rng), dx = jitter(rng);
    const double v = ink(rng);
    switch (label) {
    case 0:  // horizontal bars
        hline(img, 4 + dy, 2 + dx, 11 + dx, v);
        hline(img, 9 + dy, 2 + dx, 11 + dx, v);
        break;
    case 1:  // vertical bars
        vline(img, 4 + dx, 2 + dy, 11 + dy, v);
        vline(img, 9 + dx, 2 + dy, 11 + dy, v);
        break;
    case 2:  // cross
        hline(img, 6 + dy, 2 + dx, 11 + dx, v);
        vline(img, 6 + dx, 2 + dy, 11 + dy, v);
        break;
    default: {  // ring
        const double cy = 6.5 + static_cast<double>(dy), cx = 6.5 + static_cast<double>(dx);
        for (long y = 0; y < static_cast<long>(kGlyphSide); ++y) {
            for (long x = 0; x < static_cast<long>(kGlyphSide); ++x) {
                const double r = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
                if (std::abs(r - 4.0) < 0.7) draw(img, y, x, v);
            }
        }
        break;
    }
    }
    return img;
}

} // namespace detail

/// Procedural 16x16 glyphs in four balanced classes (horizontal bars,
/// vertical bars, cross, ring) with additive uniform noise in [0, 0.2].
inline std::vector<GlyphSample> gen_glyphs(std::size_t count, std::uint64_t seed, std::size_t id_offset = 0) {
    if (count == 0) throw ContractError("gen_glyphs: count must be >= 1");
    Rng rng(derive_seed(seed, 0x61f));
    std::vector<std::size_t> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = i % kGlyphClasses;
    std::shuffle(labels.begin(), labels.end(), rng);
    std::uniform_real_distribution<double> noise(0.0, 0.2);
    std::vector<GlyphSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        GlyphSample s;
        s.label = labels[i];
        s.image = detail::draw_glyph(s.label, rng);
        for (double& p : s.image.data()) p = std::min(1.0, p + noise(rng));
        s.id = id_offset + i;
        out.push_back(std::move(s));
    }
    return out;
}

/// x' = (1 - a*M) * x + a*M * pattern. An all-zero mask leaves the sample untouched.
inline GlyphSample apply_trigger(const GlyphSample& x, const TriggerSpec& t, std::size_t patch = 4) {
    if (t.mask.rank() != 2 || x.image.rank() != 3 || x.image.dim(1) != t.mask.dim(0) || x.image.dim(2) != t.mask.dim(1) ||
        t.pattern.shape() != x.image.shape()) {
        throw DimensionError("apply_trigger: image " + shape_str(x.image.shape()) + ", mask " + shape_str(t.mask.shape()) +
                             ", pattern " + shape_str(t.pattern.shape()));
    }
    if (t.mask_empty()) return x;
    GlyphSample out = x;
    const std::size_t plane = t.mask.size();
    for (std::size_t c = 0; c < x.image.dim(0); ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            const double m = t.blend_alpha * t.mask[i];
            const std::size_t k = c * plane + i;
            out.image[k] = (1.0 - m) * x.image[k] + m * t.pattern[k];
        }
    }
    out.poisoned = true;
    out.trigger_patch_ids = mask_token_ids(t.mask, patch);
    return out;
}

/// Triggers floor(rate * count) uniformly chosen samples and relabels them to the target.
inline std::vector<GlyphSample> poison_dataset(const std::vector<GlyphSample>& data, const TriggerSpec& t, double rate,
                                               std::uint64_t seed, std::size_t patch = 4) {
    if (!(rate > 0.0 && rate < 1.0)) throw ContractError("poison rate must lie in (0, 1)");
    t.validate(kGlyphClasses);
    std::vector<GlyphSample> out = data;
    Rng rng(derive_seed(seed, 0x9015));
    const auto order = shuffled_indices(data.size(), rng);
    const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(data.size())));
    for (std::size_t i = 0; i < count; ++i) {
        GlyphSample& s = out[order[i]];
        s = apply_trigger(s, t, patch);
        s.label = t.target_class;
    }
    return out;
}

// ---- tabular ---------------------------------------------------------------

inline const std::vector<std::size_t>& tabular_vocab() {
    static const std::vector<std::size_t> vocab{2, 4, 4, 4, 4, 4};
    return vocab;
}

/// Unbiased ground-truth rule over the non-protected features.
inline std::size_t tabular_rule(const std::vector<std::size_t>& f) {
    const std::size_t score = f[1] + f[2] + f[3] + f[4] + f[5];
    return score >= 8 ? 1 : 0;
}

/// Six categorical features (feature 0 protected and binary, the rest vocab 4).
/// Labels follow `tabular_rule`, then with probability `bias_strength` are
/// replaced by the protected value.
inline std::vector<TabularSample> gen_tabular_biased(std::size_t count, double bias_strength, std::uint64_t seed,
                                                     std::size_t id_offset = 0) {
    if (!(bias_strength >= 0.0 && bias_strength <= 1.0)) throw ContractError("bias_strength must lie in [0, 1]");
    Rng rng(derive_seed(seed, 0x7ab));
    const auto& vocab = tabular_vocab();
    std::vector<TabularSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        TabularSample s;
        s.features.resize(vocab.size());
        for (std::size_t f = 0; f < vocab.size(); ++f) s.features[f] = uniform_index(rng, vocab[f]);
        s.label = tabular_rule(s.features);
        if (uniform01(rng) < bias_strength) s.label = s.features[0];
        s.id = id_offset + i;
        out.push_back(std::move(s));
    }
    return out;
}

/// Every variant of `x` with the protected feature set to another value of `values`.
inline std::vector<TabularSample> enumerate_perturbations(const TabularSample& x, const std::vector<std::size_t>& values) {
    if (values.size() < 2) throw ContractError("protected value set needs at least two values");
    const std::size_t current = x.features.at(x.protected_index);
    if (std::find(values.begin(), values.end(), current) == values.end()) {
        throw ContractError("sample's protected value is not in the permissible set");
    }
    std::vector<TabularSample> out;
    for (std::size_t v : values) {
        if (v == current) continue;
        TabularSample p = x;
        p.features[x.protected_index] = v;
        out.push_back(std::move(p));
    }
    return out;
}

inline std::size_t hamming_distance(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (a.size() != b.size()) throw DimensionError("hamming_distance on different lengths");
    std::size_t d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i] ? 1 : 0;
    return d;
}

/// Index into `pool` of the sample with the same protected value as `query`
/// and minimal Hamming distance; ties go to the lowest index.
inline std::optional<std::size_t> nearest_by_hamming(const TabularSample& query, const std::vector<TabularSample>& pool) {
    std::optional<std::size_t> best;
    std::size_t best_d = 0;
    const std::size_t pv = query.features.at(query.protected_index);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].features.at(query.protected_index) != pv) continue;
        const std::size_t d = hamming_distance(query.features, pool[i].features);
        if (!best || d < best_d) {
            best = i;
            best_d = d;
        }
    }
    return best;
}

// ---- debugging sets --------------------------------------------------------

enum class DebugKind { backdoor, unfairness };

inline std::string to_string(DebugKind k) { return k == DebugKind::backdoor ? "backdoor" : "unfairness"; }

struct DebugPair {
    Input clean;
    Input compromised;
    std::vector<std::size_t> anomalous_columns;
    std::size_t clean_id = 0;
    std::size_t compromised_id = 0;
};

struct DebuggingSet {
    DebugKind kind = DebugKind::backdoor;
    std::vector<DebugPair> pairs;
    std::vector<Input> clean_pool;
    std::vector<std::size_t> clean_pool_ids;
    std::size_t requested = 0;
    std::vector<std::string> warnings;

    void validate(std::size_t token_count) const {
        for (const auto& p : pairs) {
            if (p.anomalous_columns.empty()) throw ContractError("debugging pair without anomalous columns");
            for (auto c : p.anomalous_columns)
                if (c >= token_count) throw IndexError("anomalous column " + std::to_string(c) + " out of range");
        }
    }
};

/// Pairs (x, trigger(x)) for clean samples whose triggered version the model
/// sends to the target class. Samples already labelled with the target are skipped.
inline DebuggingSet build_backdoor_debugset(const TransformerModel& model, const std::vector<GlyphSample>& clean,
                                            const TriggerSpec& trigger, std::size_t size) {
    trigger.validate(model.config().n_classes);
    DebuggingSet ds;
    ds.kind = DebugKind::backdoor;
    ds.requested = size;
    const std::size_t patch = model.config().patch;
    for (const auto& x : clean) {
        if (ds.pairs.size() >= size) break;
        if (x.label == trigger.target_class) continue;
        GlyphSample xt = apply_trigger(x, trigger, patch);
        if (model.predict(xt.input()) != trigger.target_class) continue;
        ds.pairs.push_back({x.input(), xt.input(), xt.trigger_patch_ids, x.id, x.id});
        ds.clean_pool.push_back(x.input());
        ds.clean_pool_ids.push_back(x.id);
    }
    if (ds.pairs.size() < size) {
        ds.warnings.push_back("partial debugging set: " + std::to_string(ds.pairs.size()) + " of " +
                              std::to_string(size) + " triggered samples reached the target class");
    }
    ds.validate(model.config().token_count());
    return ds;
}

inline std::vector<std::size_t> protected_values_of(const ModelConfig& cfg, std::size_t protected_index = 0) {
    std::vector<std::size_t> v(cfg.vocab_sizes.at(protected_index));
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

/// Divergent-swap filter plus minimum-Hamming pairing with non-divergent samples.
///
/// Each perturbation x' whose prediction differs from f(x) becomes a
/// compromised sample; its partner is the closest non-divergent sample with
/// the same protected value (falling back to the unperturbed x when no such
/// sample exists).
inline DebuggingSet build_bias_debugset(const TransformerModel& model, const std::vector<TabularSample>& data,
                                        std::size_t max_pairs = std::numeric_limits<std::size_t>::max()) {
    if (data.empty()) throw ContractError("build_bias_debugset: empty data");
    const std::size_t pidx = data.front().protected_index;
    const auto values = protected_values_of(model.config(), pidx);
    std::vector<TabularSample> fair;
    std::vector<std::pair<const TabularSample*, TabularSample>> flips;
    for (const auto& x : data) {
        const std::size_t fx = model.predict(x.input());
        bool divergent = false;
        for (auto& xp : enumerate_perturbations(x, values)) {
            if (model.predict(xp.input()) != fx) {
                divergent = true;
                flips.emplace_back(&x, std::move(xp));
            }
        }
        if (!divergent) fair.push_back(x);
    }
    if (flips.empty()) throw ContractError("no divergent samples: model already fair at this sample budget");
    DebuggingSet ds;
    ds.kind = DebugKind::unfairness;
    ds.requested = std::min(max_pairs, flips.size());
    std::set<std::size_t> pooled;
    for (const auto& [orig, xp] : flips) {
        if (ds.pairs.size() >= max_pairs) break;
        const TabularSample* partner = orig;
        if (auto idx = nearest_by_hamming(xp, fair)) {
            partner = &fair[*idx];
        } else {
            ds.warnings.push_back("no fair sample shares the protected value of sample " + std::to_string(xp.id) +
                                  "; paired with its unperturbed original");
        }
        ds.pairs.push_back({partner->input(), xp.input(), {pidx + 1}, partner->id, xp.id});
        if (pooled.insert(partner->id).second) {
            ds.clean_pool.push_back(partner->input());
            ds.clean_pool_ids.push_back(partner->id);
        }
    }
    ds.validate(model.config().token_count());
    return ds;
}

} // namespace atpatch
