#include "oracles.hpp"

#include <atpatch/data.hpp>
#include <atpatch/hotpatch.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

using namespace atpatch;

namespace {

Tensor random_stochastic(Shape shape, Rng& rng) {
    Tensor t(shape);
    const std::size_t n = shape.back();
    for (std::size_t r = 0; r < t.size() / n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += t[r * n + j] = uniform01(rng) + 1e-3;
        for (std::size_t j = 0; j < n; ++j) t[r * n + j] /= s;
    }
    return t;
}

std::vector<Input> glyph_inputs(std::size_t count, std::uint64_t seed) {
    std::vector<Input> out;
    for (const auto& s : gen_glyphs(count, seed)) out.push_back(s.input());
    return out;
}

/// Detector whose output bias pins every column score near 0 or 1.
Detector pinned_detector(double bias, std::uint64_t seed) {
    Detector det(DetectorConfig{}, seed);
    det.params().at("mlp2.bias")[0] = bias;
    return det;
}

double row_sum(const Tensor& t, std::size_t row) {
    const std::size_t n = t.shape().back();
    return std::accumulate(t.data().begin() + static_cast<std::ptrdiff_t>(row * n),
                           t.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * n), 0.0);
}

} // namespace

TEST(BenignReference, OneSampleOneHeadIsThatMap) {
    ModelConfig cfg = ModelConfig::glyph_default();
    cfg.n_heads = 1;
    TransformerModel m(cfg, 1);
    const auto pool = glyph_inputs(1, 1);
    const auto q = build_benign_reference(m, pool);
    const auto trace = m.forward_collect(pool[0]).trace;
    ASSERT_EQ(q.layer_count(), 2u);
    for (std::size_t l = 0; l < 2; ++l) EXPECT_TRUE(q.layer(l).same_values(trace.maps[l].reshaped(Shape{17, 17})));
    EXPECT_THROW(q.layer(2), IndexError);
}

TEST(BenignReference, TwoSamplesAverage) {
    ModelConfig cfg = ModelConfig::glyph_default();
    cfg.n_heads = 1;
    TransformerModel m(cfg, 2);
    const auto pool = glyph_inputs(2, 2);
    const auto q = build_benign_reference(m, pool);
    const Tensor p = m.forward_collect(pool[0]).trace.maps[1];
    const Tensor r = m.forward_collect(pool[1]).trace.maps[1];
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(q.layer(1)[i], (p[i] + r[i]) / 2.0, 1e-15);
}

TEST(BenignReference, RowsSumToOne) {
    TransformerModel m(ModelConfig::glyph_default(), 3);
    const auto q = build_benign_reference(m, glyph_inputs(20, 3));
    EXPECT_EQ(q.sample_count, 20u);
    for (const auto& layer : q.per_layer)
        for (std::size_t i = 0; i < 17; ++i) EXPECT_NEAR(row_sum(layer, i), 1.0, 1e-6);
    EXPECT_THROW(build_benign_reference(m, {}), ContractError);
}

TEST(BenignReference, SaveLoadRoundTrip) {
    TransformerModel m(ModelConfig::glyph_default(), 4);
    const auto q = build_benign_reference(m, glyph_inputs(4, 4));
    const auto dir = std::filesystem::temp_directory_path() / "atpatch_test_qref";
    std::filesystem::remove_all(dir);
    q.save(dir);
    const auto back = BenignReference::load(dir);
    EXPECT_EQ(back.sample_count, 4u);
    for (std::size_t l = 0; l < 2; ++l) EXPECT_TRUE(back.layer(l).same_values(q.layer(l)));
    std::filesystem::remove(dir / "meta.json");
    EXPECT_THROW(BenignReference::load(dir), IoError);
    std::filesystem::remove_all(dir);
}

TEST(Patch, SingleColumnExample) {
    // The row of interest is row 0 of a 2x2 map.
    const Tensor a(Shape{1, 2, 2}, std::vector<double>{0.7, 0.3, 0.5, 0.5});
    const Tensor q(Shape{2, 2}, std::vector<double>{0.2, 0.8, 0.2, 0.8});
    const std::vector<std::size_t> k{0};
    const Tensor out = patch_attention(a, k, q, 0.0);
    EXPECT_DOUBLE_EQ(out[0], 0.2);
    EXPECT_NEAR(out[1], 0.8, 1e-15);
}

TEST(Patch, TwoColumnExample) {
    Tensor a(Shape{1, 3, 3}, 1.0 / 3.0);
    a[0] = 0.5;
    a[1] = 0.3;
    a[2] = 0.2;
    Tensor q(Shape{3, 3}, 1.0 / 3.0);
    q[0] = 0.1;
    q[1] = 0.1;
    q[2] = 0.8;
    const std::vector<std::size_t> k{0, 1};
    const Tensor out = patch_attention(a, k, q, 0.0);
    EXPECT_DOUBLE_EQ(out[0], 0.1);
    EXPECT_DOUBLE_EQ(out[1], 0.1);
    EXPECT_NEAR(out[2], 0.8, 1e-15);
}

TEST(Patch, RejectsBadColumnSets) {
    Rng rng(5);
    const Tensor a = random_stochastic(Shape{2, 4, 4}, rng);
    const Tensor q = random_stochastic(Shape{4, 4}, rng);
    EXPECT_THROW(patch_attention(a, {}, q), ContractError);
    const std::vector<std::size_t> bad{4};
    EXPECT_THROW(patch_attention(a, bad, q), IndexError);
    const std::vector<std::size_t> all{0, 1, 2, 3};
    try {
        patch_attention(a, all, q);
        FAIL() << "expected an infeasible patch";
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("row 0"), std::string::npos) << e.what();
    }
    EXPECT_THROW(patch_attention(a, std::vector<std::size_t>{0}, Tensor(Shape{3, 3})), DimensionError);
}

TEST(Patch, InvariantsOnRandomMaps) {
    Rng rng(6);
    constexpr std::size_t n = 17, heads = 2;
    constexpr double eps = 1e-8;
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor a = random_stochastic(Shape{heads, n, n}, rng);
        const Tensor q = random_stochastic(Shape{n, n}, rng);
        auto order = shuffled_indices(n, rng);
        std::vector<std::size_t> k(order.begin(), order.begin() + 1 + static_cast<std::ptrdiff_t>(uniform_index(rng, 3)));
        const Tensor out = patch_attention(a, k, q, eps);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t row = h * n + i;
                ASSERT_NEAR(row_sum(out, row), 1.0, 1e-5);
                std::optional<double> factor;
                for (std::size_t j = 0; j < n; ++j) {
                    const bool in_k = std::find(k.begin(), k.end(), j) != k.end();
                    if (in_k) {
                        ASSERT_EQ(out[row * n + j], q.at(i, j));
                    } else {
                        const double f = out[row * n + j] / a[row * n + j];
                        if (!factor) factor = f;
                        ASSERT_NEAR(f, *factor, 1e-9);
                    }
                }
                if (k.size() == 1) {
                    const std::vector<double> in(a.data().begin() + static_cast<std::ptrdiff_t>(row * n),
                                                 a.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * n));
                    const auto ref = oracle::gamma_single_row(in, k[0], q.at(i, k[0]), eps);
                    for (std::size_t j = 0; j < n; ++j) ASSERT_NEAR(out[row * n + j], ref[j], 1e-15);
                }
            }
    }
}

TEST(Patch, ColumnReplacementBreaksRowSums) {
    Rng rng(7);
    const Tensor a = random_stochastic(Shape{1, 5, 5}, rng);
    const Tensor q = random_stochastic(Shape{5, 5}, rng);
    const std::vector<std::size_t> k{2};
    const Tensor out = replace_columns(a, k, q);
    std::size_t broken = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(out.at(0, i, 2), q.at(i, 2));
        EXPECT_EQ(out.at(0, i, 0), a.at(0, i, 0));
        broken += std::abs(row_sum(out, i) - 1.0) > 1e-9 ? 1 : 0;
    }
    EXPECT_GT(broken, 0u);
}

TEST(Mode, ParsesNames) {
    EXPECT_EQ(hotfix_mode_from_string("streaming"), HotfixMode::streaming);
    EXPECT_EQ(hotfix_mode_from_string("two-pass"), HotfixMode::two_pass);
    EXPECT_THROW(hotfix_mode_from_string("lazy"), ContractError);
}

class HotFixerTest : public ::testing::Test {
protected:
    TransformerModel victim{ModelConfig::glyph_default(), 8};
    std::vector<Input> inputs = glyph_inputs(12, 8);
    BenignReference qref = build_benign_reference(victim, glyph_inputs(10, 9));
};

TEST_F(HotFixerTest, SilentDetectorIsBitExactBypass) {
    const Detector silent = pinned_detector(-50.0, 1);
    for (auto mode : {HotfixMode::streaming, HotfixMode::two_pass}) {
        HotFixer fixer(victim, silent, qref, 0.1, mode);
        for (const auto& x : inputs) {
            const auto r = fixer.predict(x);
            EXPECT_FALSE(r.diagnostics.patched);
            EXPECT_TRUE(r.diagnostics.anomalies.empty());
            EXPECT_TRUE(r.logits.same_values(victim.logits(x)));
        }
    }
}

TEST_F(HotFixerTest, TauOneAlwaysBypasses) {
    const Detector loud = pinned_detector(50.0, 2);
    for (const auto& x : inputs) {
        const auto r = hotfix_predict(x, victim, loud, qref, 1.0);
        EXPECT_FALSE(r.diagnostics.patched);
        EXPECT_TRUE(r.logits.same_values(victim.logits(x)));
    }
}

TEST_F(HotFixerTest, VictimParametersNeverChange) {
    const ParamMap before = victim.params();
    const Detector det(DetectorConfig{}, 3);
    HotFixer fixer(victim, det, qref, 0.1, HotfixMode::streaming, PatchPolicy::wo_det, 3);
    for (const auto& x : inputs) (void)fixer.predict(x);
    for (const auto& [name, t] : before) EXPECT_TRUE(victim.params().at(name).same_values(t)) << name;
}

TEST_F(HotFixerTest, RandomColumnsPatchEveryLayer) {
    const Detector det(DetectorConfig{}, 4);
    for (auto mode : {HotfixMode::streaming, HotfixMode::two_pass}) {
        HotFixer fixer(victim, det, qref, 0.1, mode, PatchPolicy::wo_det, 4);
        const auto r = fixer.predict(inputs[0]);
        EXPECT_TRUE(r.diagnostics.patched);
        std::set<std::size_t> layers;
        for (const auto& [l, c] : r.diagnostics.anomalies.cells) layers.insert(l);
        EXPECT_EQ(layers.size(), 2u);
        EXPECT_GE(r.diagnostics.total_ms, 0.0);
    }
}

TEST_F(HotFixerTest, TwoPassPatchesTheRecordedMaps) {
    // With a fixed column set, the two-pass result equals a forward pass with
    // the first-pass maps patched and passed as overrides.
    const Detector det(DetectorConfig{}, 5);
    HotFixer fixer(victim, det, qref, 0.1, HotfixMode::two_pass, PatchPolicy::wo_det, 5);
    const auto r = fixer.predict(inputs[1]);

    Rng rng(5);
    const auto first = victim.forward_collect(inputs[1]);
    AttentionOverride o;
    for (std::size_t l = 0; l < 2; ++l) {
        const std::size_t c = 1 + uniform_index(rng, 3);
        auto order = shuffled_indices(17, rng);
        std::vector<std::size_t> cols(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(c));
        std::sort(cols.begin(), cols.end());
        o.per_layer.push_back(patch_attention(first.trace.maps[l], cols, qref.layer(l)));
    }
    EXPECT_TRUE(r.logits.same_values(victim.forward_collect(inputs[1], o).logits));
}

TEST_F(HotFixerTest, RejectsMismatchedArtifacts) {
    const Detector det(DetectorConfig{}, 6);
    BenignReference short_ref = qref;
    short_ref.per_layer.pop_back();
    EXPECT_THROW(HotFixer(victim, det, short_ref, 0.1), ContractError);
    DetectorConfig tab;
    tab.token_count = 7;
    const Detector other(tab, 6);
    EXPECT_THROW(HotFixer(victim, other, qref, 0.1), ContractError);
}
