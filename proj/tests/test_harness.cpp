#include <atpatch/metrics.hpp>
#include <atpatch/pipeline.hpp>

#include <gtest/gtest.h>

#include <fstream>

using namespace atpatch;

namespace {

std::size_t protected_value(const Input& x) { return x.categories().at(0); }

std::vector<TabularSample> tabular(std::size_t count, std::uint64_t seed) {
    return gen_tabular_biased(count, 0.0, seed);
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(is, line);) out.push_back(line);
    return out;
}

} // namespace

TEST(Accuracy, PerfectAndConstantPredictors) {
    const auto data = gen_glyphs(400, 1);
    const auto test = labeled(data);
    std::size_t i = 0;
    const Predictor oracle = [&](const Input&) { return test[i++].label; };
    EXPECT_EQ(eval_accuracy(oracle, test), 1.0);
    const Predictor constant = [](const Input&) { return std::size_t{2}; };
    EXPECT_NEAR(eval_accuracy(constant, test), 0.25, 0.05);
    EXPECT_THROW(eval_accuracy(constant, std::vector<LabeledInput>{}), ContractError);
}

TEST(AttackSuccess, SkipsTargetLabelledSamples) {
    auto data = gen_glyphs(40, 2);
    const Predictor never = [](const Input&) { return std::size_t{3}; };
    const Predictor always = [](const Input&) { return std::size_t{0}; };
    for (auto& s : data)
        if (s.label == 3) s.label = 1;
    EXPECT_EQ(eval_asr(never, data, 0), 0.0);
    EXPECT_EQ(eval_asr(always, data, 0), 1.0);
    for (auto& s : data) s.label = 0;
    EXPECT_THROW(eval_asr(always, data, 0), ContractError);
}

TEST(Unfairness, BlindAndEchoPredictors) {
    const auto test = tabular(300, 3);
    const auto values = protected_values_of(ModelConfig::tabular_default());
    const Predictor blind = [](const Input& x) { return x.categories().at(1) % 2; };
    const Predictor echo = [](const Input& x) { return protected_value(x); };
    EXPECT_EQ(eval_uf(blind, test, values), 0.0);
    EXPECT_EQ(eval_uf(echo, test, values), 1.0);
    EXPECT_THROW(eval_uf(echo, std::vector<TabularSample>{}, values), ContractError);
}

TEST(StrictCounts, OracleScoresArePerfect) {
    std::vector<LabeledMap> maps;
    std::vector<std::vector<double>> scores;
    for (int k = 0; k < 10; ++k) {
        const bool bad = k % 2 == 1;
        std::vector<int> labels(5, 0);
        if (bad) labels[static_cast<std::size_t>(k % 5)] = 1;
        maps.push_back({Tensor(Shape{5, 5}, 0.2), labels, bad, 0});
        std::vector<double> s(5, 0.01);
        for (std::size_t j = 0; j < 5; ++j)
            if (labels[j]) s[j] = 0.99;
        scores.push_back(s);
    }
    const auto m = strict_counts(scores, maps, 0.1);
    EXPECT_EQ(m.tp, 5u);
    EXPECT_EQ(m.tn, 5u);
    EXPECT_EQ(m.f1, 1.0);
    EXPECT_EQ(m.fpr, 0.0);
    EXPECT_EQ(m.fnr, 0.0);

    for (auto& s : scores) s[4] = 0.5;
    const auto noisy = strict_counts(scores, maps, 0.1);
    EXPECT_EQ(noisy.fpr, 1.0);
    EXPECT_EQ(noisy.tp, 1u);  // only the map whose anomaly sits in column 4
}

TEST(StrictCounts, F1MatchesPrecisionAndRecall) {
    DetectorMetrics m;
    m.tp = 7;
    m.fp = 3;
    m.fn = 2;
    m.tn = 8;
    m.finalize();
    EXPECT_DOUBLE_EQ(m.precision, 0.7);
    EXPECT_DOUBLE_EQ(m.recall, 7.0 / 9.0);
    EXPECT_DOUBLE_EQ(m.f1, 2.0 * 7 / (2.0 * 7 + 3 + 2));
    EXPECT_DOUBLE_EQ(m.fpr, 3.0 / 11.0);
    EXPECT_DOUBLE_EQ(m.fnr, 2.0 / 9.0);
}

TEST(RunConfig, JsonRoundTrip) {
    RunConfig c = RunConfig::backdoor_default();
    c.seeds = {4, 5};
    c.data.debug_pairs = 123;
    c.detector.tau = 0.25;
    c.mode = HotfixMode::two_pass;
    const RunConfig back = nlohmann::json(c).get<RunConfig>();
    EXPECT_EQ(back.seeds, c.seeds);
    EXPECT_EQ(back.data.debug_pairs, 123u);
    EXPECT_EQ(back.tau(), 0.25);
    EXPECT_EQ(back.mode, HotfixMode::two_pass);
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
}

TEST(RunConfig, MissingKeysKeepScenarioDefaults) {
    const RunConfig c = nlohmann::json{{"scenario", "unfairness"}}.get<RunConfig>();
    EXPECT_EQ(c.victim.modality, Modality::tabular);
    EXPECT_EQ(c.detector.token_count, 7u);
}

TEST(RunConfig, RejectsInconsistentSettings) {
    RunConfig c;
    c.seeds.clear();
    EXPECT_THROW(c.validate(), ContractError);
    c = RunConfig{};
    c.detector.token_count = 7;
    EXPECT_THROW(c.validate(), ContractError);
    c = RunConfig{};
    c.victim = ModelConfig::tabular_default();
    c.detector.token_count = 7;
    EXPECT_THROW(c.validate(), ContractError);
    EXPECT_THROW((nlohmann::json{{"scenario", "weather"}}.get<RunConfig>()), ContractError);
    EXPECT_THROW((nlohmann::json{{"mode", "lazy"}}.get<RunConfig>()), ContractError);
}

TEST(Splits, EvaluationIdsAreDisjoint) {
    RunConfig c;
    c.data.train_size = 100;
    c.data.test_size = 50;
    c.data.debug_pool_size = 60;
    c.data.inversion_pool_size = 20;
    c.data.heldout_pool_size = 30;
    const auto s = make_glyph_splits(c, 1);
    std::set<std::size_t> ids;
    for (const auto* set : {&s.train, &s.debug_pool, &s.inversion_pool, &s.heldout_pool})
        for (const auto& x : *set) ids.insert(x.id);
    for (const auto& x : s.test) EXPECT_EQ(ids.count(x.id), 0u);
    ASSERT_EQ(s.triggered.size(), s.test.size());
    EXPECT_EQ(s.triggered.front().label, s.test.front().label);

    auto leaky = s.test;
    EXPECT_THROW(assert_disjoint(leaky, {&s.test}), ContractError);
}

TEST(Splits, SameSeedSameData) {
    RunConfig c = RunConfig::unfairness_default();
    c.data.train_size = 40;
    c.data.test_size = 20;
    c.data.debug_pool_size = 20;
    c.data.heldout_pool_size = 20;
    const auto a = make_tabular_splits(c, 9), b = make_tabular_splits(c, 9);
    ASSERT_EQ(a.train.size(), b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].features, b.train[i].features);
}

TEST(Ablation, RandomColumnPolicyIsReproducible) {
    TransformerModel victim(ModelConfig::glyph_default(), 1);
    const Detector det(DetectorConfig{}, 1);
    std::vector<Input> pool;
    for (const auto& s : gen_glyphs(8, 1)) pool.push_back(s.input());
    const auto qref = build_benign_reference(victim, pool);
    const auto run = [&] {
        HotFixer fixer(victim, det, qref, 0.1, HotfixMode::streaming, PatchPolicy::wo_det, 77);
        std::vector<std::vector<double>> out;
        for (const auto& x : pool) out.push_back(fixer.predict(x).logits.values());
        return out;
    };
    EXPECT_EQ(run(), run());
}

TEST(Reports, JsonlAppendsOneObjectPerLine) {
    const auto dir = fs::temp_directory_path() / "atpatch_test_reports";
    fs::remove_all(dir);
    MetricsReport r;
    r.seed = 3;
    r.acc_before = 0.9;
    r.asr_after = 0.05;
    append_jsonl(dir / "reports" / "metrics.jsonl", to_json(r));
    append_jsonl(dir / "reports" / "metrics.jsonl", to_json(r));
    const auto lines = read_lines(dir / "reports" / "metrics.jsonl");
    ASSERT_EQ(lines.size(), 2u);
    const auto j = nlohmann::json::parse(lines[1]);
    EXPECT_EQ(j.at("seed"), 3);
    EXPECT_EQ(j.at("asr_after"), 0.05);
    EXPECT_FALSE(j.contains("uf_after"));

    write_csv(dir / "plots-data" / "t.csv", {"a", "b"}, {{"1", "2"}, {fmt(0.5), fmt(1e-12)}});
    EXPECT_EQ(read_lines(dir / "plots-data" / "t.csv"), (std::vector<std::string>{"a,b", "1,2", "0.5,1e-12"}));
    fs::remove_all(dir);
}

TEST(Latency, ReportsMediansOverRequestedSamples) {
    TransformerModel victim(ModelConfig::glyph_default(), 2);
    Detector det(DetectorConfig{}, 2);
    det.params().at("mlp2.bias")[0] = -50.0;
    std::vector<Input> pool;
    for (const auto& s : gen_glyphs(5, 2)) pool.push_back(s.input());
    const auto qref = build_benign_reference(victim, pool);
    HotFixer fixer(victim, det, qref, 0.1);
    const auto r = bench_latency(victim, fixer, pool, 20);
    EXPECT_EQ(r.samples, 20u);
    EXPECT_GT(r.base_ms, 0.0);
    EXPECT_GE(r.detect_and_patch_ms, r.detect_only_ms);
    EXPECT_EQ(median({3.0, 1.0, 2.0, 10.0}), 2.5);
}
