#pragma once

// Benign reference, the column replace-and-rescale operator, and the
// detector-gated hot-fix forward pass.

#include <atpatch/detector.hpp>
#include <atpatch/model.hpp>
#include <atpatch/serialize.hpp>

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <vector>

namespace atpatch {

inline constexpr double kPatchEps = 1e-8;

/// Mean clean attention per layer, averaged over samples and heads.
struct BenignReference {
    std::vector<Tensor> per_layer;  // [n, n] each
    std::size_t sample_count = 0;

    std::size_t layer_count() const noexcept { return per_layer.size(); }
    std::size_t token_count() const { return per_layer.empty() ? 0 : per_layer.front().dim(0); }

    const Tensor& layer(std::size_t l) const {
        if (l >= per_layer.size()) throw IndexError("reference layer " + std::to_string(l) + " out of range");
        return per_layer[l];
    }

    void save(const std::filesystem::path& dir) const {
        ParamMap tensors;
        for (std::size_t l = 0; l < per_layer.size(); ++l) tensors.emplace("q" + std::to_string(l), per_layer[l]);
        save_tensor_dir(dir, tensors);
        std::ofstream os(dir / "meta.json");
        if (!os) throw IoError("cannot write " + (dir / "meta.json").string());
        os << nlohmann::json{{"layers", per_layer.size()}, {"n", token_count()}, {"sample_count", sample_count}}.dump(2)
           << '\n';
    }

    static BenignReference load(const std::filesystem::path& dir) {
        std::ifstream is(dir / "meta.json");
        if (!is) throw IoError("cannot open " + (dir / "meta.json").string());
        const auto meta = nlohmann::json::parse(is);
        const auto tensors = load_tensor_dir(dir);
        BenignReference r;
        r.sample_count = meta.at("sample_count").get<std::size_t>();
        const auto layers = meta.at("layers").get<std::size_t>();
        const auto n = meta.at("n").get<std::size_t>();
        for (std::size_t l = 0; l < layers; ++l) {
            auto it = tensors.find("q" + std::to_string(l));
            if (it == tensors.end()) throw IoError("reference in " + dir.string() + " lacks layer " + std::to_string(l));
            if (it->second.shape() != Shape{n, n}) throw IoError("reference layer has wrong shape in " + dir.string());
            r.per_layer.push_back(it->second);
        }
        return r;
    }
};

inline BenignReference build_benign_reference(const TransformerModel& victim, std::span<const Input> pool) {
    if (pool.empty()) throw ContractError("build_benign_reference: clean pool is empty");
    const auto& cfg = victim.config();
    const std::size_t n = cfg.token_count();
    BenignReference r;
    r.per_layer.assign(cfg.n_layers, Tensor(Shape{n, n}));
    for (const auto& x : pool) {
        const auto fr = victim.forward_collect(x);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const Tensor& m = fr.trace.maps[l];
            auto acc = r.per_layer[l].data();
            for (std::size_t i = 0; i < m.size(); ++i) acc[i % (n * n)] += m[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(pool.size() * cfg.n_heads);
    for (auto& q : r.per_layer)
        for (auto& v : q.data()) v *= inv;
    r.sample_count = pool.size();
    return r;
}

namespace detail {

inline void check_columns(std::span<const std::size_t> cols, std::size_t n) {
    if (cols.empty()) throw ContractError("patch: anomalous column set is empty");
    for (auto k : cols)
        if (k >= n) throw IndexError("patch column " + std::to_string(k) + " out of range for n=" + std::to_string(n));
}

inline void check_patch_shapes(const Tensor& attn, const Tensor& q) {
    if (attn.rank() != 3 || attn.dim(1) != attn.dim(2)) {
        throw DimensionError("patch expects [heads,n,n], got " + shape_str(attn.shape()));
    }
    if (q.shape() != Shape{attn.dim(1), attn.dim(1)}) {
        throw DimensionError("reference shape " + shape_str(q.shape()) + " does not match map " + shape_str(attn.shape()));
    }
}

} // namespace detail

/// Joint replace-and-rescale: columns in K take the reference values
/// Q[i,k]; every other entry of row i is multiplied by
///   (1 - sum_K Q[i,k]) / (1 - sum_K A[i,k] + eps),
/// identically for every head.
inline Tensor patch_attention(const Tensor& attn, std::span<const std::size_t> cols, const Tensor& q,
                              double eps = kPatchEps) {
    detail::check_patch_shapes(attn, q);
    const std::size_t heads = attn.dim(0), n = attn.dim(1);
    detail::check_columns(cols, n);
    std::vector<char> in_k(n, 0);
    for (auto k : cols) in_k[k] = 1;

    std::vector<double> q_mass(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k)
            if (in_k[k]) q_mass[i] += q[i * n + k];
        if (q_mass[i] >= 1.0) {
            throw ContractError("patch infeasible: reference mass " + std::to_string(q_mass[i]) + " >= 1 in row " +
                                std::to_string(i));
        }
    }

    Tensor out(attn.shape());
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* a = attn.data().data() + (h * n + i) * n;
            double* o = out.data().data() + (h * n + i) * n;
            double a_mass = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                if (in_k[k]) a_mass += a[k];
            const double keep = 1.0 - q_mass[i];
            const double factor = keep / (1.0 - a_mass + eps);
            double rest = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (in_k[j]) {
                    o[j] = q[i * n + j];
                } else {
                    o[j] = std::max(0.0, a[j] * factor);
                    rest += o[j];
                }
            }
            // Degenerate rows where K held nearly all of the mass.
            if (std::abs(rest - keep) > 1e-6) {
                const std::size_t others = n - cols.size();
                if (rest > 1e-300) {
                    const double fix = keep / rest;
                    for (std::size_t j = 0; j < n; ++j)
                        if (!in_k[j]) o[j] *= fix;
                } else if (others > 0) {
                    for (std::size_t j = 0; j < n; ++j)
                        if (!in_k[j]) o[j] = keep / static_cast<double>(others);
                }
            }
        }
    }
    return out;
}

/// Overwrites columns in K with Q and leaves the rest untouched (rows no longer sum to 1).
inline Tensor replace_columns(const Tensor& attn, std::span<const std::size_t> cols, const Tensor& q) {
    detail::check_patch_shapes(attn, q);
    const std::size_t heads = attn.dim(0), n = attn.dim(1);
    detail::check_columns(cols, n);
    Tensor out = attn;
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (auto k : cols) out[(h * n + i) * n + k] = q[i * n + k];
    return out;
}

enum class HotfixMode { streaming, two_pass };

/// full: detector + rescaling patch. wo_det: 1-3 random columns per map with
/// the rescaling patch. wo_rec: detector + plain column replacement.
enum class PatchPolicy { full, wo_det, wo_rec };

inline std::string to_string(HotfixMode m) { return m == HotfixMode::streaming ? "streaming" : "two_pass"; }

inline HotfixMode hotfix_mode_from_string(const std::string& s) {
    if (s == "streaming") return HotfixMode::streaming;
    if (s == "two_pass" || s == "two-pass") return HotfixMode::two_pass;
    throw ContractError("unknown mode '" + s + "' (expected streaming or two_pass)");
}

inline std::string to_string(PatchPolicy p) {
    switch (p) {
    case PatchPolicy::full: return "full";
    case PatchPolicy::wo_det: return "wo_det";
    case PatchPolicy::wo_rec: return "wo_rec";
    }
    return "full";
}

struct HotfixDiagnostics {
    AnomalySet anomalies;
    bool patched = false;
    double detect_ms = 0.0;  // scoring and thresholding
    double patch_ms = 0.0;   // applying the operator
    double total_ms = 0.0;
};

struct HotfixResult {
    std::size_t label = 0;
    Tensor logits;
    HotfixDiagnostics diagnostics;
};

/// Detector-gated patched inference over a fixed victim. The victim,
/// detector and reference are only read. With the wo_det policy the column
/// draws advance an internal seeded generator, so results depend on call order.
class HotFixer {
public:
    HotFixer(const TransformerModel& victim, const Detector& detector, const BenignReference& qref, double tau,
             HotfixMode mode = HotfixMode::streaming, PatchPolicy policy = PatchPolicy::full, std::uint64_t seed = 0)
        : victim_(victim), detector_(detector), qref_(qref), tau_(tau), mode_(mode), policy_(policy), rng_(seed) {
        const std::size_t n = victim.config().token_count();
        if (detector.config().token_count != n) throw ContractError("hotfix: detector was built for another token count");
        if (qref.layer_count() != victim.config().n_layers || qref.token_count() != n) {
            throw ContractError("hotfix: benign reference does not match the victim");
        }
    }

    double tau() const noexcept { return tau_; }
    HotfixMode mode() const noexcept { return mode_; }
    PatchPolicy policy() const noexcept { return policy_; }

    HotfixResult predict(const Input& x) {
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        HotfixResult r;
        auto& diag = r.diagnostics;

        if (mode_ == HotfixMode::streaming) {
            AttentionHook hook = [&](std::size_t layer, const Tensor& computed) -> std::optional<Tensor> {
                auto cols = select_columns(layer, computed, diag);
                if (cols.empty()) return std::nullopt;
                return apply(computed, layer, cols, diag);
            };
            r.logits = victim_.forward_hooked(x, hook).logits;
        } else {
            auto first = victim_.forward_collect(x);
            std::vector<std::vector<std::size_t>> cols(first.trace.maps.size());
            bool any = false;
            for (std::size_t l = 0; l < cols.size(); ++l) {
                cols[l] = select_columns(l, first.trace.maps[l], diag);
                any = any || !cols[l].empty();
            }
            if (!any) {
                r.logits = std::move(first.logits);
            } else {
                std::vector<std::optional<Tensor>> patched(cols.size());
                for (std::size_t l = 0; l < cols.size(); ++l)
                    if (!cols[l].empty()) patched[l] = apply(first.trace.maps[l], l, cols[l], diag);
                AttentionHook hook = [&](std::size_t layer, const Tensor&) { return patched[layer]; };
                r.logits = victim_.forward_hooked(x, hook).logits;
            }
        }
        r.label = argmax(r.logits.data());
        diag.total_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        return r;
    }

private:
    std::vector<std::size_t> select_columns(std::size_t layer, const Tensor& map, HotfixDiagnostics& diag) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> cols;
        if (policy_ == PatchPolicy::wo_det) {
            const std::size_t n = map.dim(1);
            const std::size_t c = 1 + uniform_index(rng_, 3);
            auto order = shuffled_indices(n, rng_);
            cols.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(c, n)));
            std::sort(cols.begin(), cols.end());
        } else {
            cols = flag_columns(detector_.score(aggregate_heads(map)), tau_);
        }
        for (auto c : cols) diag.anomalies.cells.emplace(layer, c);
        diag.detect_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return cols;
    }

    Tensor apply(const Tensor& map, std::size_t layer, std::span<const std::size_t> cols, HotfixDiagnostics& diag) const {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor out = policy_ == PatchPolicy::wo_rec ? replace_columns(map, cols, qref_.layer(layer))
                                                    : patch_attention(map, cols, qref_.layer(layer));
        diag.patched = true;
        diag.patch_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

    const TransformerModel& victim_;
    const Detector& detector_;
    const BenignReference& qref_;
    double tau_;
    HotfixMode mode_;
    PatchPolicy policy_;
    Rng rng_;
};

/// Single-call convenience wrapper around HotFixer with the full policy.
inline HotfixResult hotfix_predict(const Input& x, const TransformerModel& victim, const Detector& detector,
                                   const BenignReference& qref, double tau, HotfixMode mode = HotfixMode::streaming) {
    HotFixer fixer(victim, detector, qref, tau, mode);
    return fixer.predict(x);
}

} // namespace atpatch
