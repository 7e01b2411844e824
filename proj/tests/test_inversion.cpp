#include <atpatch/inversion.hpp>
#include <atpatch/io.hpp>

#include <gtest/gtest.h>

using namespace atpatch;

namespace {

std::vector<LabeledInput> labeled_glyphs(const std::vector<GlyphSample>& data) {
    std::vector<LabeledInput> out;
    for (const auto& s : data) out.push_back({s.input(), s.label});
    return out;
}

} // namespace

TEST(Inversion, ZeroStepsLeavesHalfMask) {
    TransformerModel m(ModelConfig::glyph_default(), 1);
    const auto clean = gen_glyphs(8, 1);
    const auto r = invert_trigger(m, clean, 0, InversionOptions{.steps = 0});
    for (double v : r.mask.data()) EXPECT_EQ(v, 0.5);
    for (double v : r.pattern.data()) EXPECT_EQ(v, 0.5);
    EXPECT_DOUBLE_EQ(r.l1_mass, 128.0);
}

TEST(Inversion, ConstantModelNeedsNoMaskWithoutSparsity) {
    TransformerModel m(ModelConfig::glyph_default(), 2);
    m.params().at("head.bias")[2] = 100.0;
    const auto clean = gen_glyphs(16, 2);
    const auto r = invert_trigger(m, clean, 2, InversionOptions{.lambda_sparsity = 0.0, .steps = 5, .batch_size = 4});
    EXPECT_LT(r.final_loss, 1e-6);
    EXPECT_DOUBLE_EQ(r.flip_rate, 1.0);
}

TEST(Inversion, VictimIsNotModified) {
    TransformerModel m(ModelConfig::glyph_default(), 3);
    const ParamMap before = m.params();
    (void)invert_trigger(m, gen_glyphs(8, 3), 1, InversionOptions{.steps = 3, .batch_size = 4});
    for (const auto& [name, t] : before) {
        EXPECT_TRUE(m.params().at(name).same_values(t)) << name;
        EXPECT_FALSE(m.params().at(name).grad) << name;
    }
}

TEST(Inversion, RunsOncePerClass) {
    ModelConfig cfg = ModelConfig::glyph_default();
    cfg.n_classes = 2;
    TransformerModel m(cfg, 4);
    const auto r = identify_target_class(m, gen_glyphs(8, 4), InversionOptions{.steps = 2, .batch_size = 4});
    ASSERT_EQ(r.per_class.size(), 2u);
    EXPECT_EQ(r.per_class[0].target_class, 0u);
    EXPECT_EQ(r.per_class[1].target_class, 1u);
    EXPECT_LT(r.chosen_target, 2u);
}

TEST(Inversion, RejectsBadInputs) {
    TransformerModel m(ModelConfig::glyph_default(), 5);
    EXPECT_THROW(invert_trigger(m, {}, 0, {}), ContractError);
    EXPECT_THROW(invert_trigger(m, gen_glyphs(4, 5), 4, {}), ContractError);
    TransformerModel tab(ModelConfig::tabular_default(), 5);
    EXPECT_THROW(invert_trigger(tab, gen_glyphs(4, 5), 0, {}), ContractError);
}

TEST(Inversion, CleanModelIsLowConfidence) {
    TransformerModel m(ModelConfig::glyph_default(), 6);
    train_victim(m, labeled_glyphs(gen_glyphs(600, 6)), TrainOptions{.epochs = 8, .seed = 7});
    const auto r = identify_target_class(m, gen_glyphs(100, 8), InversionOptions{.lambda_sparsity = 0.1, .steps = 150});
    EXPECT_TRUE(r.low_confidence);
}

TEST(Binarize, ThresholdAtHalf) {
    ClassInversion ci;
    ci.target_class = 3;
    ci.mask = Tensor(Shape{2, 2}, std::vector<double>{0.2, 0.5, 0.51, 0.9});
    ci.pattern = Tensor(Shape{1, 2, 2}, 0.7);
    const auto t = to_trigger_spec(ci);
    EXPECT_EQ(t.mask.values(), (std::vector<double>{0, 0, 1, 1}));
    EXPECT_EQ(t.target_class, 3u);
}

TEST(MaskIou, OverlapArithmetic) {
    const Tensor a(Shape{2, 2}, std::vector<double>{1, 1, 0, 0});
    const Tensor b(Shape{2, 2}, std::vector<double>{1, 0, 1, 0});
    EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(mask_iou(Tensor(Shape{2, 2}), Tensor(Shape{2, 2})), 0.0);
}

TEST(Io, InversionRoundTrip) {
    TransformerModel m(ModelConfig::glyph_default(), 9);
    const auto r = identify_target_class(m, gen_glyphs(8, 9), InversionOptions{.steps = 1, .batch_size = 2});
    const auto dir = fs::temp_directory_path() / "atpatch_test_inversion";
    fs::remove_all(dir);
    save_inversion(dir, r);
    const auto back = load_inversion(dir);
    EXPECT_EQ(back.chosen_target, r.chosen_target);
    EXPECT_EQ(back.low_confidence, r.low_confidence);
    ASSERT_EQ(back.per_class.size(), r.per_class.size());
    EXPECT_TRUE(back.chosen().mask.same_values(r.chosen().mask));

    save_trigger(dir / "trigger", to_trigger_spec(r.chosen()));
    const auto t = load_trigger(dir / "trigger");
    EXPECT_TRUE(t.mask.same_values(to_trigger_spec(r.chosen()).mask));
    fs::remove_all(dir);
}
