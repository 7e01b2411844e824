#pragma once

// End-to-end experiment plumbing: run configuration, data splits with
// disjoint sample ids, the defence pipeline steps, and metric reports.

#include <atpatch/detector.hpp>
#include <atpatch/hotpatch.hpp>
#include <atpatch/inversion.hpp>
#include <atpatch/io.hpp>
#include <atpatch/metrics.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace atpatch {

enum class Scenario { backdoor, unfairness };

inline std::string to_string(Scenario s) { return s == Scenario::backdoor ? "backdoor" : "unfairness"; }

inline Scenario scenario_from_string(const std::string& s) {
    if (s == "backdoor") return Scenario::backdoor;
    if (s == "unfairness") return Scenario::unfairness;
    throw ContractError("unknown scenario '" + s + "' (expected backdoor or unfairness)");
}

struct DataParams {
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    std::size_t debug_pool_size = 1800;
    std::size_t debug_pairs = 800;
    std::size_t inversion_pool_size = 200;
    std::size_t heldout_pool_size = 800;
    std::size_t heldout_pairs = 150;
    double poison_rate = 0.1;
    std::size_t trigger_size = 2;
    std::size_t target_class = 0;
    double bias_strength = 0.5;
};

/// Where the backdoor debugging set gets its trigger from.
enum class DebugTrigger { inverted, planted };

struct RunConfig {
    Scenario scenario = Scenario::backdoor;
    std::vector<std::uint64_t> seeds{1};
    ModelConfig victim = ModelConfig::glyph_default();
    DataParams data;
    TrainOptions victim_training{.epochs = 20};
    DetectorConfig detector;
    DetectorTrainOptions detector_training{.batch_size = 4};
    InversionOptions inversion{.lambda_sparsity = 0.1};
    DebugTrigger debug_trigger = DebugTrigger::inverted;
    HotfixMode mode = HotfixMode::streaming;
    std::string out_dir = "out";

    static RunConfig backdoor_default() { return RunConfig{}; }

    static RunConfig unfairness_default() {
        RunConfig c;
        c.scenario = Scenario::unfairness;
        c.victim = ModelConfig::tabular_default();
        c.data.train_size = 4000;
        c.data.test_size = 1000;
        c.data.debug_pool_size = 2000;
        c.data.debug_pairs = 1000;
        c.data.heldout_pool_size = 1000;
        c.detector.token_count = c.victim.token_count();
        return c;
    }

    double tau() const noexcept { return detector.tau; }

    void validate() const {
        if (seeds.empty()) throw ContractError("run config: seeds must be nonempty");
        victim.validate();
        detector.validate();
        if (detector.token_count != victim.token_count()) {
            throw ContractError("run config: detector token_count " + std::to_string(detector.token_count) +
                                " does not match the victim (" + std::to_string(victim.token_count()) + ")");
        }
        if (scenario == Scenario::backdoor && victim.modality != Modality::image) {
            throw ContractError("run config: the backdoor scenario needs an image victim");
        }
        if (scenario == Scenario::unfairness && victim.modality != Modality::tabular) {
            throw ContractError("run config: the unfairness scenario needs a tabular victim");
        }
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    const auto& d = c.data;
    j = nlohmann::json{
        {"scenario", to_string(c.scenario)},
        {"seeds", c.seeds},
        {"victim", c.victim},
        {"data",
         {{"train_size", d.train_size},
          {"test_size", d.test_size},
          {"debug_pool_size", d.debug_pool_size},
          {"debug_pairs", d.debug_pairs},
          {"inversion_pool_size", d.inversion_pool_size},
          {"heldout_pool_size", d.heldout_pool_size},
          {"heldout_pairs", d.heldout_pairs},
          {"poison_rate", d.poison_rate},
          {"trigger_size", d.trigger_size},
          {"target_class", d.target_class},
          {"bias_strength", d.bias_strength}}},
        {"victim_training",
         {{"epochs", c.victim_training.epochs},
          {"batch_size", c.victim_training.batch_size},
          {"lr", c.victim_training.lr},
          {"weight_decay", c.victim_training.weight_decay}}},
        {"detector", c.detector},
        {"detector_training",
         {{"epochs", c.detector_training.epochs},
          {"batch_size", c.detector_training.batch_size},
          {"lr", c.detector_training.lr},
          {"weight_decay", c.detector_training.weight_decay}}},
        {"inversion",
         {{"lambda_sparsity", c.inversion.lambda_sparsity},
          {"steps", c.inversion.steps},
          {"batch_size", c.inversion.batch_size},
          {"lr", c.inversion.lr}}},
        {"debug_trigger", c.debug_trigger == DebugTrigger::inverted ? "inverted" : "planted"},
        {"mode", to_string(c.mode)},
        {"out_dir", c.out_dir}};
}

/// Missing keys keep the defaults of the named scenario.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
    const Scenario s = scenario_from_string(j.value("scenario", std::string("backdoor")));
    c = s == Scenario::backdoor ? RunConfig::backdoor_default() : RunConfig::unfairness_default();
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("victim")) c.victim = j.at("victim").get<ModelConfig>();
    if (j.contains("data")) {
        const auto& d = j.at("data");
        auto& o = c.data;
        o.train_size = d.value("train_size", o.train_size);
        o.test_size = d.value("test_size", o.test_size);
        o.debug_pool_size = d.value("debug_pool_size", o.debug_pool_size);
        o.debug_pairs = d.value("debug_pairs", o.debug_pairs);
        o.inversion_pool_size = d.value("inversion_pool_size", o.inversion_pool_size);
        o.heldout_pool_size = d.value("heldout_pool_size", o.heldout_pool_size);
        o.heldout_pairs = d.value("heldout_pairs", o.heldout_pairs);
        o.poison_rate = d.value("poison_rate", o.poison_rate);
        o.trigger_size = d.value("trigger_size", o.trigger_size);
        o.target_class = d.value("target_class", o.target_class);
        o.bias_strength = d.value("bias_strength", o.bias_strength);
    }
    if (j.contains("victim_training")) {
        const auto& t = j.at("victim_training");
        auto& o = c.victim_training;
        o.epochs = t.value("epochs", o.epochs);
        o.batch_size = t.value("batch_size", o.batch_size);
        o.lr = t.value("lr", o.lr);
        o.weight_decay = t.value("weight_decay", o.weight_decay);
    }
    if (j.contains("detector")) {
        c.detector = j.at("detector").get<DetectorConfig>();
    } else {
        c.detector.token_count = c.victim.token_count();
    }
    if (j.contains("detector_training")) {
        const auto& t = j.at("detector_training");
        auto& o = c.detector_training;
        o.epochs = t.value("epochs", o.epochs);
        o.batch_size = t.value("batch_size", o.batch_size);
        o.lr = t.value("lr", o.lr);
        o.weight_decay = t.value("weight_decay", o.weight_decay);
    }
    if (j.contains("inversion")) {
        const auto& t = j.at("inversion");
        auto& o = c.inversion;
        o.lambda_sparsity = t.value("lambda_sparsity", o.lambda_sparsity);
        o.steps = t.value("steps", o.steps);
        o.batch_size = t.value("batch_size", o.batch_size);
        o.lr = t.value("lr", o.lr);
    }
    const std::string trig = j.value("debug_trigger", std::string("inverted"));
    if (trig != "inverted" && trig != "planted") throw ContractError("debug_trigger must be inverted or planted");
    c.debug_trigger = trig == "inverted" ? DebugTrigger::inverted : DebugTrigger::planted;
    c.mode = hotfix_mode_from_string(j.value("mode", to_string(c.mode)));
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
}

inline RunConfig load_run_config(const fs::path& path) { return read_json(path).get<RunConfig>(); }

// ---- data splits -------------------------------------------------------------

/// Id ranges per split; evaluation ids never overlap training or debugging ids.
inline constexpr std::size_t kTrainIds = 0;
inline constexpr std::size_t kTestIds = 1'000'000;
inline constexpr std::size_t kDebugIds = 2'000'000;
inline constexpr std::size_t kInversionIds = 3'000'000;
inline constexpr std::size_t kHeldoutIds = 4'000'000;

template <class Sample>
inline void assert_disjoint(const std::vector<Sample>& eval, const std::vector<const std::vector<Sample>*>& others) {
    std::set<std::size_t> ids;
    for (const auto* set : others)
        for (const auto& s : *set) ids.insert(s.id);
    for (const auto& s : eval)
        if (ids.count(s.id)) throw ContractError("evaluation sample " + std::to_string(s.id) + " leaks from another split");
}

struct GlyphSplits {
    std::vector<GlyphSample> train;      // poisoned
    std::vector<GlyphSample> test;       // clean
    std::vector<GlyphSample> triggered;  // test with the planted trigger
    std::vector<GlyphSample> debug_pool;
    std::vector<GlyphSample> inversion_pool;
    std::vector<GlyphSample> heldout_pool;
    TriggerSpec planted;
};

inline TriggerSpec planted_trigger(const RunConfig& cfg) {
    return TriggerSpec::corner(cfg.data.trigger_size, cfg.data.target_class, 1.0, cfg.victim.side);
}

inline GlyphSplits make_glyph_splits(const RunConfig& cfg, std::uint64_t seed) {
    const auto& d = cfg.data;
    GlyphSplits s;
    s.planted = planted_trigger(cfg);
    const auto clean_train = gen_glyphs(d.train_size, derive_seed(seed, 1), kTrainIds);
    s.train = poison_dataset(clean_train, s.planted, d.poison_rate, derive_seed(seed, 2), cfg.victim.patch);
    s.test = gen_glyphs(d.test_size, derive_seed(seed, 3), kTestIds);
    for (const auto& x : s.test) s.triggered.push_back(apply_trigger(x, s.planted, cfg.victim.patch));
    s.debug_pool = gen_glyphs(d.debug_pool_size, derive_seed(seed, 4), kDebugIds);
    s.inversion_pool = gen_glyphs(d.inversion_pool_size, derive_seed(seed, 5), kInversionIds);
    s.heldout_pool = gen_glyphs(d.heldout_pool_size, derive_seed(seed, 6), kHeldoutIds);
    assert_disjoint(s.test, {&s.train, &s.debug_pool, &s.inversion_pool, &s.heldout_pool});
    return s;
}

struct TabularSplits {
    std::vector<TabularSample> train;
    std::vector<TabularSample> test;
    std::vector<TabularSample> debug_pool;
    std::vector<TabularSample> heldout_pool;
};

inline TabularSplits make_tabular_splits(const RunConfig& cfg, std::uint64_t seed) {
    const auto& d = cfg.data;
    TabularSplits s;
    s.train = gen_tabular_biased(d.train_size, d.bias_strength, derive_seed(seed, 1), kTrainIds);
    s.test = gen_tabular_biased(d.test_size, d.bias_strength, derive_seed(seed, 3), kTestIds);
    s.debug_pool = gen_tabular_biased(d.debug_pool_size, d.bias_strength, derive_seed(seed, 4), kDebugIds);
    s.heldout_pool = gen_tabular_biased(d.heldout_pool_size, d.bias_strength, derive_seed(seed, 6), kHeldoutIds);
    assert_disjoint(s.test, {&s.train, &s.debug_pool, &s.heldout_pool});
    return s;
}

template <class Sample>
inline std::vector<LabeledInput> labeled(const std::vector<Sample>& data) {
    std::vector<LabeledInput> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back({s.input(), s.label});
    return out;
}

template <class Sample>
inline std::vector<Input> inputs_of(const std::vector<Sample>& data) {
    std::vector<Input> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(s.input());
    return out;
}

// ---- pipeline steps ----------------------------------------------------------

inline TransformerModel train_scenario_victim(const RunConfig& cfg, std::uint64_t seed, std::span<const LabeledInput> train) {
    TransformerModel m(cfg.victim, derive_seed(seed, 10));
    TrainOptions opts = cfg.victim_training;
    opts.seed = derive_seed(seed, 11);
    train_victim(m, train, opts);
    return m;
}

inline InversionResult run_inversion(const RunConfig& cfg, std::uint64_t seed, const TransformerModel& victim,
                                     const std::vector<GlyphSample>& clean) {
    InversionOptions opts = cfg.inversion;
    opts.seed = derive_seed(seed, 20);
    return identify_target_class(victim, clean, opts);
}

inline Detector fit_detector(const RunConfig& cfg, std::uint64_t seed, const TransformerModel& victim,
                             const DebuggingSet& ds, DetectorTrainingLog* log = nullptr) {
    Detector det(cfg.detector, derive_seed(seed, 30));
    DetectorTrainOptions opts = cfg.detector_training;
    opts.seed = derive_seed(seed, 31);
    auto trained = train_detector(det, ds, victim, opts);
    if (log) *log = std::move(trained);
    return det;
}

/// Everything one seed of the defence produces.
struct DefenceArtifacts {
    std::optional<InversionResult> inversion;
    std::optional<TriggerSpec> debug_trigger;
    DebuggingSet debugset;
    Detector detector;
    BenignReference qref;
};

inline DefenceArtifacts build_backdoor_defence(const RunConfig& cfg, std::uint64_t seed, const TransformerModel& victim,
                                               const GlyphSplits& splits) {
    std::optional<InversionResult> inv;
    TriggerSpec trigger = splits.planted;
    if (cfg.debug_trigger == DebugTrigger::inverted) {
        inv = run_inversion(cfg, seed, victim, splits.inversion_pool);
        trigger = to_trigger_spec(inv->chosen());
        if (trigger.mask_empty()) throw ContractError("inverted trigger mask is empty after binarisation");
    }
    auto ds = build_backdoor_debugset(victim, splits.debug_pool, trigger, cfg.data.debug_pairs);
    if (ds.pairs.empty()) throw ContractError("backdoor debugging set is empty: the trigger never reaches its target");
    Detector det = fit_detector(cfg, seed, victim, ds);
    auto qref = build_benign_reference(victim, ds.clean_pool);
    return {std::move(inv), trigger, std::move(ds), std::move(det), std::move(qref)};
}

inline DefenceArtifacts build_fairness_defence(const RunConfig& cfg, std::uint64_t seed, const TransformerModel& victim,
                                               const TabularSplits& splits) {
    auto ds = build_bias_debugset(victim, splits.debug_pool, cfg.data.debug_pairs);
    Detector det = fit_detector(cfg, seed, victim, ds);
    auto qref = build_benign_reference(victim, ds.clean_pool);
    return {std::nullopt, std::nullopt, std::move(ds), std::move(det), std::move(qref)};
}

/// Balanced held-out labeled maps: one clean and one compromised map per pair and layer.
inline std::vector<LabeledMap> heldout_backdoor_maps(const RunConfig& cfg, const TransformerModel& victim,
                                                     const GlyphSplits& splits) {
    const auto ds = build_backdoor_debugset(victim, splits.heldout_pool, splits.planted, cfg.data.heldout_pairs);
    return extract_labeled_maps(victim, ds);
}

inline std::vector<LabeledMap> heldout_fairness_maps(const RunConfig& cfg, const TransformerModel& victim,
                                                     const TabularSplits& splits) {
    const auto ds = build_bias_debugset(victim, splits.heldout_pool, cfg.data.heldout_pairs);
    return extract_labeled_maps(victim, ds);
}

// ---- reports ------------------------------------------------------------------

struct LatencyReport {
    double base_ms = 0.0;
    double detect_only_ms = 0.0;
    double detect_and_patch_ms = 0.0;
    std::size_t samples = 0;
};

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    double acc = 0.0;
    double attack = 0.0;  // ASR for backdoor, UF for unfairness
};

struct MetricsReport {
    Scenario scenario = Scenario::backdoor;
    std::uint64_t seed = 0;
    std::string mode;
    double tau = 0.0;
    double acc_before = 0.0, acc_after = 0.0;
    std::optional<double> asr_before, asr_after, uf_before, uf_after;
    std::optional<DetectorMetrics> detector;
    std::optional<LatencyReport> latency;
    std::vector<AblationRow> ablation;
};

inline nlohmann::json detector_json(const DetectorMetrics& m) {
    return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"fpr", m.fpr}, {"fnr", m.fnr},
            {"tp", m.tp},               {"fp", m.fp},         {"tn", m.tn}, {"fn", m.fn}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j{{"scenario", to_string(r.scenario)}, {"seed", r.seed},         {"mode", r.mode},
                     {"tau", r.tau},                      {"acc_before", r.acc_before}, {"acc_after", r.acc_after}};
    if (r.asr_before) j["asr_before"] = *r.asr_before;
    if (r.asr_after) j["asr_after"] = *r.asr_after;
    if (r.uf_before) j["uf_before"] = *r.uf_before;
    if (r.uf_after) j["uf_after"] = *r.uf_after;
    if (r.detector) j["detector"] = detector_json(*r.detector);
    if (r.latency) {
        j["latency"] = {{"base_ms", r.latency->base_ms},
                        {"detect_only_ms", r.latency->detect_only_ms},
                        {"detect_and_patch_ms", r.latency->detect_and_patch_ms},
                        {"samples", r.latency->samples}};
    }
    return j;
}

/// Appends one JSON object per line.
inline void append_jsonl(const fs::path& path, const nlohmann::json& row) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::app);
    if (!os) throw IoError("cannot write " + path.string());
    os << row.dump() << '\n';
}

inline void write_csv(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    const auto line = [&os](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
        os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

// ---- evaluation -----------------------------------------------------------------

inline void eval_backdoor(MetricsReport& r, const TransformerModel& victim, HotFixer& fixer, const GlyphSplits& s) {
    const auto test = labeled(s.test);
    r.acc_before = eval_accuracy(model_predictor(victim), test);
    r.asr_before = eval_asr(model_predictor(victim), s.triggered, s.planted.target_class);
    r.acc_after = eval_accuracy(hotfix_predictor(fixer), test);
    r.asr_after = eval_asr(hotfix_predictor(fixer), s.triggered, s.planted.target_class);
}

inline void eval_fairness(MetricsReport& r, const TransformerModel& victim, HotFixer& fixer, const TabularSplits& s) {
    const auto test = labeled(s.test);
    const auto values = protected_values_of(victim.config(), s.test.front().protected_index);
    r.acc_before = eval_accuracy(model_predictor(victim), test);
    r.uf_before = eval_uf(model_predictor(victim), s.test, values);
    r.acc_after = eval_accuracy(hotfix_predictor(fixer), test);
    r.uf_after = eval_uf(hotfix_predictor(fixer), s.test, values);
}

/// Acc and ASR/UF for the full defence and both ablations on identical test data.
inline std::vector<AblationRow> run_ablation_rows(const RunConfig& cfg, std::uint64_t seed, const TransformerModel& victim,
                                                  const DefenceArtifacts& art, const std::vector<LabeledInput>& test,
                                                  const std::function<double(const Predictor&)>& attack) {
    std::vector<AblationRow> rows;
    for (auto policy : {PatchPolicy::full, PatchPolicy::wo_det, PatchPolicy::wo_rec}) {
        HotFixer fixer(victim, art.detector, art.qref, cfg.tau(), cfg.mode, policy, derive_seed(seed, 40));
        const auto f = hotfix_predictor(fixer);
        const double acc = eval_accuracy(f, test);
        rows.push_back({to_string(policy), seed, acc, attack(f)});
    }
    return rows;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Per-sample medians after a warm-up pass: plain forward, detector scoring
/// inside the hot-fix pass, and the full hot-fix pass.
inline LatencyReport bench_latency(const TransformerModel& victim, HotFixer& fixer, std::span<const Input> inputs,
                                   std::size_t min_samples = 1000) {
    if (inputs.empty()) throw ContractError("bench_latency: no inputs");
    using clock = std::chrono::steady_clock;
    const std::size_t warm = std::min<std::size_t>(inputs.size(), 20);
    for (std::size_t i = 0; i < warm; ++i) {
        (void)victim.logits(inputs[i]);
        (void)fixer.predict(inputs[i]);
    }
    std::vector<double> base, detect, total;
    const std::size_t count = std::max(min_samples, inputs.size());
    for (std::size_t i = 0; i < count; ++i) {
        const Input& x = inputs[i % inputs.size()];
        const auto t0 = clock::now();
        (void)victim.logits(x);
        base.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
        const auto r = fixer.predict(x);
        detect.push_back(r.diagnostics.detect_ms);
        total.push_back(r.diagnostics.total_ms);
    }
    return {median(base), median(detect), median(total), count};
}

} // namespace atpatch
