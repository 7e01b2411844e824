#pragma once

// Accuracy, attack success rate, unfairness, and strict map-level detector counts.

#include <atpatch/data.hpp>
#include <atpatch/detector.hpp>
#include <atpatch/hotpatch.hpp>

#include <functional>
#include <span>
#include <vector>

namespace atpatch {

using Predictor = std::function<std::size_t(const Input&)>;

inline Predictor model_predictor(const TransformerModel& m) {
    return [&m](const Input& x) { return m.predict(x); };
}

inline Predictor hotfix_predictor(HotFixer& fixer) {
    return [&fixer](const Input& x) { return fixer.predict(x).label; };
}

inline double eval_accuracy(const Predictor& f, std::span<const LabeledInput> test) {
    if (test.empty()) throw ContractError("eval_accuracy: empty test set");
    std::size_t ok = 0;
    for (const auto& s : test) ok += f(s.input) == s.label ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(test.size());
}

/// Fraction of triggered samples sent to `target`; samples labelled `target` are skipped.
inline double eval_asr(const Predictor& f, std::span<const GlyphSample> triggered, std::size_t target) {
    std::size_t total = 0, hit = 0;
    for (const auto& s : triggered) {
        if (s.label == target) continue;
        ++total;
        hit += f(s.input()) == target ? 1 : 0;
    }
    if (total == 0) throw ContractError("eval_asr: no triggered samples outside the target class");
    return static_cast<double>(hit) / static_cast<double>(total);
}

/// Fraction of samples with at least one protected-value swap that changes the prediction.
inline double eval_uf(const Predictor& f, std::span<const TabularSample> test, const std::vector<std::size_t>& values) {
    if (test.empty()) throw ContractError("eval_uf: empty test set");
    std::size_t unfair = 0;
    for (const auto& x : test) {
        const std::size_t fx = f(x.input());
        for (const auto& xp : enumerate_perturbations(x, values)) {
            if (f(xp.input()) != fx) {
                ++unfair;
                break;
            }
        }
    }
    return static_cast<double>(unfair) / static_cast<double>(test.size());
}

struct DetectorMetrics {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double precision = 0.0, recall = 0.0, f1 = 0.0, fpr = 0.0, fnr = 0.0;

    void finalize() {
        const auto ratio = [](std::size_t a, std::size_t b) {
            return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
        };
        precision = ratio(tp, tp + fp);
        recall = ratio(tp, tp + fn);
        f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        fpr = ratio(fp, fp + tn);
        fnr = ratio(fn, fn + tp);
    }
};

/// Strict counting: a compromised map is a true positive only when the flagged
/// columns are exactly its anomalous columns; a clean map is a true negative
/// only when nothing is flagged.
inline DetectorMetrics strict_counts(std::span<const std::vector<double>> scores, std::span<const LabeledMap> maps,
                                     double tau) {
    if (scores.size() != maps.size()) throw DimensionError("strict_counts: score/map count mismatch");
    DetectorMetrics m;
    for (std::size_t s = 0; s < maps.size(); ++s) {
        const auto& labels = maps[s].labels;
        bool exact = true, any = false;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            const bool flagged = scores[s][j] > tau;
            any = any || flagged;
            exact = exact && (flagged == (labels[j] == 1));
        }
        if (maps[s].compromised) {
            (exact ? m.tp : m.fn) += 1;
        } else {
            (any ? m.fp : m.tn) += 1;
        }
    }
    m.finalize();
    return m;
}

inline std::vector<std::vector<double>> score_maps(const Detector& det, std::span<const LabeledMap> maps) {
    std::vector<std::vector<double>> out;
    out.reserve(maps.size());
    for (const auto& m : maps) out.push_back(det.score(m.map));
    return out;
}

inline DetectorMetrics eval_detector_strict(const Detector& det, std::span<const LabeledMap> maps, double tau) {
    const auto scores = score_maps(det, maps);
    return strict_counts(scores, maps, tau);
}

struct SweepPoint {
    double tau = 0.0;
    DetectorMetrics metrics;
};

/// Strict metrics over a grid of thresholds (scores computed once).
inline std::vector<SweepPoint> detector_threshold_sweep(const Detector& det, std::span<const LabeledMap> maps,
                                                        std::span<const double> taus) {
    const auto scores = score_maps(det, maps);
    std::vector<SweepPoint> out;
    for (double t : taus) out.push_back({t, strict_counts(scores, maps, t)});
    return out;
}

} // namespace atpatch
