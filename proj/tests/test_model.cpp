#include <atpatch/data.hpp>
#include <atpatch/model.hpp>

#include <gtest/gtest.h>

#include <filesystem>

using namespace atpatch;

namespace {

Input glyph_input(std::uint64_t seed) { return gen_glyphs(1, seed).front().input(); }

Tensor uniform_map(std::size_t heads, std::size_t n) {
    return Tensor(Shape{heads, n, n}, 1.0 / static_cast<double>(n));
}

} // namespace

TEST(ModelConfig, TokenCounts) {
    EXPECT_EQ(ModelConfig::glyph_default().token_count(), 17u);
    EXPECT_EQ(ModelConfig::tabular_default().token_count(), 7u);
}

TEST(ModelConfig, RejectsBadShapes) {
    ModelConfig c;
    c.d_model = 30;
    c.n_heads = 4;
    EXPECT_THROW(c.validate(), ContractError);
    c = ModelConfig{};
    c.patch = 5;
    EXPECT_THROW(c.validate(), ContractError);
    c = ModelConfig::tabular_default();
    c.vocab_sizes.clear();
    EXPECT_THROW(c.validate(), ContractError);
}

TEST(ModelConfig, JsonRoundTrip) {
    for (const auto& c : {ModelConfig::glyph_default(), ModelConfig::tabular_default()}) {
        const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
        EXPECT_EQ(back.modality, c.modality);
        EXPECT_EQ(back.token_count(), c.token_count());
        EXPECT_EQ(back.vocab_sizes, c.vocab_sizes);
        EXPECT_EQ(back.n_layers, c.n_layers);
    }
}

TEST(Tokenize, ZeroImageAndWeightsGivePositions) {
    TransformerModel m(ModelConfig::glyph_default(), 1);
    for (auto name : {"embed.weight", "embed.bias", "cls"})
        for (auto& v : m.params().at(name).data()) v = 0.0;
    const Tensor tokens = m.tokenize(Input::image(Tensor(Shape{1, 16, 16})));
    EXPECT_TRUE(tokens.same_values(m.params().at("pos")));
}

TEST(Tokenize, TabularHasOneTokenPerFeaturePlusCls) {
    TransformerModel m(ModelConfig::tabular_default(), 2);
    EXPECT_EQ(m.tokenize(Input::tabular({1, 0, 3, 2, 1, 0})).shape(), (Shape{7, 32}));
    EXPECT_THROW(m.tokenize(Input::tabular({1, 0, 3})), DimensionError);
    EXPECT_THROW(m.tokenize(Input::tabular({2, 0, 0, 0, 0, 0})), DimensionError);
}

TEST(AttentionLayer, RowsAreStochastic) {
    TransformerModel m(ModelConfig::glyph_default(), 3);
    const auto out = m.attention_layer_forward(m.tokenize(glyph_input(3)), 0);
    ASSERT_EQ(out.map.shape(), (Shape{2, 17, 17}));
    for (std::size_t r = 0; r < 34; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 17; ++j) s += out.map[r * 17 + j];
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(AttentionLayer, RoundTrippedOverrideIsBitExact) {
    TransformerModel m(ModelConfig::glyph_default(), 4);
    const Tensor tokens = m.tokenize(glyph_input(4));
    const auto plain = m.attention_layer_forward(tokens, 1);
    const auto again = m.attention_layer_forward(tokens, 1, plain.map);
    EXPECT_TRUE(again.tokens.same_values(plain.tokens));
}

TEST(AttentionLayer, UniformOverrideAveragesValues) {
    TransformerModel m(ModelConfig::glyph_default(), 5);
    const auto out = m.attention_layer_forward(m.tokenize(glyph_input(5)), 0, uniform_map(2, 17));
    const std::size_t n = 17, d = 32;
    for (std::size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) mean += out.values.at(r, c);
        mean /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) EXPECT_NEAR(out.context.at(r, c), mean, 1e-12);
    }
}

TEST(AttentionLayer, OverrideIsValidated) {
    TransformerModel m(ModelConfig::glyph_default(), 6);
    const Tensor tokens = m.tokenize(glyph_input(6));
    EXPECT_THROW(m.attention_layer_forward(tokens, 0, uniform_map(2, 16)), DimensionError);
    Tensor bad = uniform_map(2, 17);
    bad[0] += 0.01;
    EXPECT_THROW(m.attention_layer_forward(tokens, 0, bad), ContractError);
    EXPECT_THROW(m.attention_layer_forward(tokens, 2), IndexError);
}

TEST(ForwardCollect, EmptyOverridesMatchPlainForward) {
    TransformerModel m(ModelConfig::glyph_default(), 7);
    const Input x = glyph_input(7);
    const auto r = m.forward_collect(x);
    EXPECT_TRUE(r.logits.same_values(m.logits(x)));
    ASSERT_EQ(r.trace.maps.size(), 2u);
    for (const auto& map : r.trace.maps) EXPECT_EQ(map.shape(), (Shape{2, 17, 17}));
}

TEST(ForwardCollect, OverrideChangesDownstreamMaps) {
    TransformerModel m(ModelConfig::glyph_default(), 8);
    const Input x = glyph_input(8);
    const auto plain = m.forward_collect(x);
    AttentionOverride o;
    o.per_layer = {uniform_map(2, 17), std::nullopt};
    const auto patched = m.forward_collect(x, o);
    EXPECT_TRUE(patched.trace.maps[0].same_values(uniform_map(2, 17)));
    EXPECT_FALSE(patched.trace.maps[1].same_values(plain.trace.maps[1]));
}

TEST(Training, ZeroEpochsKeepsInitialisation) {
    TransformerModel m(ModelConfig::glyph_default(), 9);
    const ParamMap before = m.params();
    const auto data = gen_glyphs(8, 9);
    std::vector<LabeledInput> train;
    for (const auto& s : data) train.push_back({s.input(), s.label});
    train_victim(m, train, TrainOptions{.epochs = 0});
    for (const auto& [name, t] : before) EXPECT_TRUE(m.params().at(name).same_values(t)) << name;
}

TEST(Training, LearnsCleanGlyphs) {
    std::vector<LabeledInput> train, test;
    for (const auto& s : gen_glyphs(600, 10)) train.push_back({s.input(), s.label});
    for (const auto& s : gen_glyphs(200, 11, 1000)) test.push_back({s.input(), s.label});
    TransformerModel m(ModelConfig::glyph_default(), 12);
    const auto log = train_victim(m, train, TrainOptions{.epochs = 8, .seed = 13});
    ASSERT_EQ(log.epochs.size(), 8u);
    EXPECT_LT(log.epochs.back().mean_loss, log.epochs.front().mean_loss);
    std::size_t ok = 0;
    for (const auto& s : test) ok += m.predict(s.input) == s.label ? 1 : 0;
    EXPECT_GE(static_cast<double>(ok) / static_cast<double>(test.size()), 0.85);
}

TEST(Training, RejectsOutOfRangeLabels) {
    TransformerModel m(ModelConfig::glyph_default(), 14);
    std::vector<LabeledInput> train{{glyph_input(1), 9}};
    EXPECT_THROW(train_victim(m, train, {}), ContractError);
}

TEST(Persistence, SaveLoadKeepsLogits) {
    const auto dir = std::filesystem::temp_directory_path() / "atpatch_test_model";
    std::filesystem::remove_all(dir);
    TransformerModel m(ModelConfig::tabular_default(), 15);
    m.save(dir);
    const auto back = TransformerModel::load(dir);
    const Input x = Input::tabular({0, 1, 2, 3, 0, 1});
    EXPECT_TRUE(back.logits(x).same_values(m.logits(x)));
    std::filesystem::remove(dir / "layer0.wq.atpt");
    EXPECT_THROW(TransformerModel::load(dir), IoError);
    std::filesystem::remove_all(dir);
}

TEST(ZeroColumn, RenormalisesRows) {
    const Tensor map(Shape{1, 2, 3}, std::vector<double>{0.5, 0.25, 0.25, 0.0, 1.0, 0.0});
    const Tensor z = zero_attention_column(map, 1);
    EXPECT_DOUBLE_EQ(z[0], 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(z[1], 0.0);
    EXPECT_DOUBLE_EQ(z[2], 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(z[3], 0.5);
    EXPECT_DOUBLE_EQ(z[5], 0.5);
}

TEST(ZeroColumn, AllZeroColumnIsANoOp) {
    const Tensor map(Shape{1, 2, 2}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
    EXPECT_TRUE(zero_attention_column(map, 1).same_values(map));
}

TEST(ZeroColumn, ProbeChecksColumnRange) {
    TransformerModel m(ModelConfig::glyph_default(), 16);
    std::vector<Input> xs{glyph_input(1), glyph_input(2)};
    EXPECT_THROW(zero_column_probe(m, xs, 17), IndexError);
    const double kept = zero_column_probe(m, xs, 3);
    EXPECT_GE(kept, 0.0);
    EXPECT_LE(kept, 1.0);
}
