// Command-line front end. Each subcommand reads what earlier steps left under
// --out and writes its own artifacts next to them:
//
//   <out>/data/         generated splits
//   <out>/checkpoints/  victim, trigger, inversion, detector, reference
//   <out>/debugset/     paired clean/compromised samples
//   <out>/reports/      metrics.jsonl, one JSON object per row
//   <out>/plots-data/   one CSV per table

#include <atpatch/pipeline.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

using namespace atpatch;

namespace {

struct Options {
    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> tau;
    std::optional<std::string> mode;
    std::optional<std::string> out;
    std::optional<std::size_t> column;
};

struct Context {
    RunConfig cfg;
    std::uint64_t seed = 1;
    fs::path out;

    fs::path data(const std::string& name) const { return out / "data" / name; }
    fs::path checkpoint(const std::string& name) const { return out / "checkpoints" / name; }
    fs::path debugset() const { return out / "debugset"; }
    fs::path metrics() const { return out / "reports" / "metrics.jsonl"; }
    fs::path plot(const std::string& name) const { return out / "plots-data" / (name + ".csv"); }
    bool backdoor() const { return cfg.scenario == Scenario::backdoor; }
};

Context make_context(const Options& o) {
    Context c;
    if (o.config_path) {
        if (!fs::exists(*o.config_path)) throw IoError("config file not found: " + *o.config_path);
        c.cfg = load_run_config(*o.config_path);
    }
    if (o.seed) c.cfg.seeds = {*o.seed};
    if (o.tau) c.cfg.detector.tau = *o.tau;
    if (o.mode) c.cfg.mode = hotfix_mode_from_string(*o.mode);
    if (o.out) c.cfg.out_dir = *o.out;
    c.cfg.validate();
    c.seed = c.cfg.seeds.front();
    c.out = c.cfg.out_dir;
    return c;
}

void require(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) throw IoError(p.string() + " is missing; run '" + producer + "' first");
}

void note(const std::string& msg) { std::cout << msg << '\n'; }

// ---- loaders -----------------------------------------------------------------

TransformerModel load_victim(const Context& c) {
    require(c.checkpoint("victim"), "train-victim");
    return TransformerModel::load(c.checkpoint("victim"));
}

std::vector<GlyphSample> glyphs(const Context& c, const std::string& name) {
    require(c.data(name), "gen-data");
    return load_glyphs(c.data(name));
}

std::vector<TabularSample> rows(const Context& c, const std::string& name) {
    require(c.data(name), "gen-data");
    return load_tabular(c.data(name));
}

Detector load_detector(const Context& c) {
    require(c.checkpoint("detector"), "train-detector");
    return Detector::load(c.checkpoint("detector"));
}

BenignReference load_qref(const Context& c) {
    require(c.checkpoint("qref"), "build-qref");
    return BenignReference::load(c.checkpoint("qref"));
}

TriggerSpec planted(const Context& c) {
    require(c.data("planted_trigger"), "poison");
    return load_trigger(c.data("planted_trigger"));
}

void only_backdoor(const Context& c, const std::string& cmd) {
    if (!c.backdoor()) throw ContractError(cmd + " applies to the backdoor scenario only");
}

// ---- subcommands -------------------------------------------------------------

void gen_data(const Context& c) {
    if (c.backdoor()) {
        const auto s = make_glyph_splits(c.cfg, c.seed);
        save_glyphs(c.data("train"), gen_glyphs(c.cfg.data.train_size, derive_seed(c.seed, 1), kTrainIds));
        save_glyphs(c.data("test"), s.test);
        save_glyphs(c.data("debug_pool"), s.debug_pool);
        save_glyphs(c.data("inversion_pool"), s.inversion_pool);
        save_glyphs(c.data("heldout_pool"), s.heldout_pool);
    } else {
        const auto s = make_tabular_splits(c.cfg, c.seed);
        save_tabular(c.data("train"), s.train);
        save_tabular(c.data("test"), s.test);
        save_tabular(c.data("debug_pool"), s.debug_pool);
        save_tabular(c.data("heldout_pool"), s.heldout_pool);
    }
    note("wrote splits to " + (c.out / "data").string());
}

void poison(const Context& c) {
    only_backdoor(c, "poison");
    const TriggerSpec t = planted_trigger(c.cfg);
    const auto train = poison_dataset(glyphs(c, "train"), t, c.cfg.data.poison_rate, derive_seed(c.seed, 2), c.cfg.victim.patch);
    save_glyphs(c.data("train_poisoned"), train);
    save_trigger(c.data("planted_trigger"), t);
    std::vector<GlyphSample> triggered;
    for (const auto& x : glyphs(c, "test")) triggered.push_back(apply_trigger(x, t, c.cfg.victim.patch));
    save_glyphs(c.data("test_triggered"), triggered);
    std::size_t n = 0;
    for (const auto& x : train) n += x.poisoned ? 1 : 0;
    note("poisoned " + std::to_string(n) + " of " + std::to_string(train.size()) + " training samples");
}

void train_victim_cmd(const Context& c) {
    if (c.backdoor()) require(c.data("train_poisoned"), "poison");
    const auto train = c.backdoor() ? labeled(glyphs(c, "train_poisoned")) : labeled(rows(c, "train"));
    const auto t0 = std::chrono::steady_clock::now();
    TransformerModel m(c.cfg.victim, derive_seed(c.seed, 10));
    TrainOptions opts = c.cfg.victim_training;
    opts.seed = derive_seed(c.seed, 11);
    const auto log = train_victim(m, train, opts);
    m.save(c.checkpoint("victim"));
    std::vector<std::vector<std::string>> table;
    for (const auto& e : log.epochs) table.push_back({std::to_string(e.epoch), fmt(e.mean_loss), fmt(e.train_accuracy)});
    write_csv(c.plot("victim_training"), {"epoch", "mean_loss", "train_accuracy"}, table);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    append_jsonl(c.metrics(), {{"step", "train-victim"},
                               {"seed", c.seed},
                               {"train_accuracy", log.final_train_accuracy},
                               {"seconds", secs}});
    note("victim train accuracy " + fmt(log.final_train_accuracy));
}

void invert(const Context& c) {
    only_backdoor(c, "invert-trigger");
    const auto victim = load_victim(c);
    const auto r = run_inversion(c.cfg, c.seed, victim, glyphs(c, "inversion_pool"));
    save_inversion(c.checkpoint("inversion"), r);
    save_trigger(c.checkpoint("trigger"), to_trigger_spec(r.chosen()));
    std::vector<std::vector<std::string>> table;
    for (const auto& ci : r.per_class)
        table.push_back({std::to_string(ci.target_class), fmt(ci.l1_mass), fmt(ci.flip_rate), fmt(ci.final_loss)});
    write_csv(c.plot("inversion"), {"class", "l1_mass", "flip_rate", "final_loss"}, table);
    nlohmann::json row{{"step", "invert-trigger"},
                       {"seed", c.seed},
                       {"target", r.chosen_target},
                       {"low_confidence", r.low_confidence}};
    if (fs::exists(c.data("planted_trigger"))) row["mask_iou"] = mask_iou(r.chosen().mask, planted(c).mask);
    append_jsonl(c.metrics(), row);
    note("inverted target class " + std::to_string(r.chosen_target) + (r.low_confidence ? " (low confidence)" : ""));
}

void build_debugset_cmd(const Context& c) {
    const auto victim = load_victim(c);
    DebuggingSet ds;
    if (c.backdoor()) {
        TriggerSpec t;
        if (c.cfg.debug_trigger == DebugTrigger::inverted) {
            require(c.checkpoint("trigger"), "invert-trigger");
            t = load_trigger(c.checkpoint("trigger"));
            if (t.mask_empty())
                throw ContractError("the inverted trigger has an empty mask; train the victim longer, raise "
                                    "inversion.steps, or set \"debug_trigger\": \"planted\"");
        } else {
            t = planted(c);
        }
        ds = build_backdoor_debugset(victim, glyphs(c, "debug_pool"), t, c.cfg.data.debug_pairs);
    } else {
        ds = build_bias_debugset(victim, rows(c, "debug_pool"), c.cfg.data.debug_pairs);
    }
    for (const auto& w : ds.warnings) std::cerr << "warning: " << w << '\n';
    save_debugset(c.debugset(), ds);
    note("debugging set holds " + std::to_string(ds.pairs.size()) + " pairs");
}

void train_detector_cmd(const Context& c) {
    const auto victim = load_victim(c);
    require(c.debugset(), "build-debugset");
    const auto ds = load_debugset(c.debugset());
    DetectorTrainingLog log;
    const Detector det = fit_detector(c.cfg, c.seed, victim, ds, &log);
    det.save(c.checkpoint("detector"));
    std::vector<std::vector<std::string>> table;
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) table.push_back({std::to_string(e), fmt(log.epoch_loss[e])});
    write_csv(c.plot("detector_training"), {"epoch", "loss"}, table);
    note("detector trained for " + std::to_string(log.epoch_loss.size()) + " epochs");
}

void build_qref_cmd(const Context& c) {
    const auto victim = load_victim(c);
    require(c.debugset(), "build-debugset");
    const auto q = build_benign_reference(victim, load_debugset(c.debugset()).clean_pool);
    q.save(c.checkpoint("qref"));
    note("reference built from " + std::to_string(q.sample_count) + " clean samples");
}

std::vector<LabeledMap> heldout_maps(const Context& c, const TransformerModel& victim) {
    if (c.backdoor()) {
        const auto ds = build_backdoor_debugset(victim, glyphs(c, "heldout_pool"), planted(c), c.cfg.data.heldout_pairs);
        return extract_labeled_maps(victim, ds);
    }
    return extract_labeled_maps(victim, build_bias_debugset(victim, rows(c, "heldout_pool"), c.cfg.data.heldout_pairs));
}

void evaluate(const Context& c) {
    const auto victim = load_victim(c);
    const auto det = load_detector(c);
    const auto qref = load_qref(c);
    HotFixer fixer(victim, det, qref, c.cfg.tau(), c.cfg.mode);
    MetricsReport r;
    r.scenario = c.cfg.scenario;
    r.seed = c.seed;
    r.mode = to_string(c.cfg.mode);
    r.tau = c.cfg.tau();
    const Predictor before = model_predictor(victim), after = hotfix_predictor(fixer);
    if (c.backdoor()) {
        const auto test = labeled(glyphs(c, "test"));
        require(c.data("test_triggered"), "poison");
        const auto triggered = glyphs(c, "test_triggered");
        const std::size_t target = planted(c).target_class;
        r.acc_before = eval_accuracy(before, test);
        r.asr_before = eval_asr(before, triggered, target);
        r.acc_after = eval_accuracy(after, test);
        r.asr_after = eval_asr(after, triggered, target);
    } else {
        const auto test = rows(c, "test");
        const auto values = protected_values_of(victim.config(), test.front().protected_index);
        const auto lt = labeled(test);
        r.acc_before = eval_accuracy(before, lt);
        r.uf_before = eval_uf(before, test, values);
        r.acc_after = eval_accuracy(after, lt);
        r.uf_after = eval_uf(after, test, values);
    }
    r.detector = eval_detector_strict(det, heldout_maps(c, victim), c.cfg.tau());
    const auto j = to_json(r);
    append_jsonl(c.metrics(), j);
    const std::string attack = c.backdoor() ? "asr" : "uf";
    const auto& d = *r.detector;
    write_csv(c.plot("evaluate"),
              {"seed", "acc_before", "acc_after", attack + "_before", attack + "_after", "f1", "fpr", "fnr"},
              {{std::to_string(c.seed), fmt(r.acc_before), fmt(r.acc_after), fmt(j.at(attack + "_before")),
                fmt(j.at(attack + "_after")), fmt(d.f1), fmt(d.fpr), fmt(d.fnr)}});
    note(j.dump());
}

void ablate(const Context& c) {
    const auto victim = load_victim(c);
    require(c.debugset(), "build-debugset");
    DefenceArtifacts art{std::nullopt, std::nullopt, load_debugset(c.debugset()), load_detector(c), load_qref(c)};
    std::vector<AblationRow> table;
    if (c.backdoor()) {
        const auto triggered = glyphs(c, "test_triggered");
        const std::size_t target = planted(c).target_class;
        table = run_ablation_rows(c.cfg, c.seed, victim, art, labeled(glyphs(c, "test")),
                                  [&](const Predictor& f) { return eval_asr(f, triggered, target); });
    } else {
        const auto test = rows(c, "test");
        const auto values = protected_values_of(victim.config(), test.front().protected_index);
        table = run_ablation_rows(c.cfg, c.seed, victim, art, labeled(test),
                                  [&](const Predictor& f) { return eval_uf(f, test, values); });
    }
    const std::string attack = c.backdoor() ? "asr" : "uf";
    std::vector<std::vector<std::string>> csv;
    for (const auto& r : table) {
        append_jsonl(c.metrics(), {{"step", "ablate"}, {"variant", r.variant}, {"seed", r.seed}, {"acc", r.acc}, {attack, r.attack}});
        csv.push_back({r.variant, std::to_string(r.seed), fmt(r.acc), fmt(r.attack)});
        note(r.variant + " acc " + fmt(r.acc) + " " + attack + " " + fmt(r.attack));
    }
    write_csv(c.plot("ablation"), {"variant", "seed", "acc", attack}, csv);
}

void probe(const Context& c, std::optional<std::size_t> only) {
    only_backdoor(c, "probe-zero-column");
    const auto victim = load_victim(c);
    const std::size_t target = planted(c).target_class;
    std::vector<Input> attacked;
    for (const auto& s : glyphs(c, "test_triggered")) {
        if (s.label == target) continue;
        Input x = s.input();
        if (victim.predict(x) == target) attacked.push_back(std::move(x));
    }
    if (attacked.empty()) throw ContractError("probe-zero-column: the victim resists every triggered sample");
    const std::size_t n = victim.config().token_count();
    std::vector<std::vector<std::string>> csv;
    for (std::size_t col = 0; col < n; ++col) {
        if (only && col != *only) continue;
        const double alive = zero_column_probe(victim, attacked, col);
        append_jsonl(c.metrics(), {{"step", "probe-zero-column"}, {"seed", c.seed}, {"column", col}, {"alive", alive}});
        csv.push_back({std::to_string(col), fmt(alive)});
        note("column " + std::to_string(col) + ": attack survival " + fmt(alive));
    }
    write_csv(c.plot("zero_column"), {"column", "alive"}, csv);
}

void bench(const Context& c) {
    const auto victim = load_victim(c);
    const auto det = load_detector(c);
    const auto qref = load_qref(c);
    HotFixer fixer(victim, det, qref, c.cfg.tau(), c.cfg.mode);
    const auto inputs = c.backdoor() ? inputs_of(glyphs(c, "test_triggered")) : inputs_of(rows(c, "test"));
    const auto l = bench_latency(victim, fixer, inputs);
    append_jsonl(c.metrics(), {{"step", "bench-latency"},
                               {"seed", c.seed},
                               {"mode", to_string(c.cfg.mode)},
                               {"base_ms", l.base_ms},
                               {"detect_only_ms", l.detect_only_ms},
                               {"detect_and_patch_ms", l.detect_and_patch_ms},
                               {"samples", l.samples}});
    write_csv(c.plot("latency"), {"mode", "base_ms", "detect_only_ms", "detect_and_patch_ms"},
              {{to_string(c.cfg.mode), fmt(l.base_ms), fmt(l.detect_only_ms), fmt(l.detect_and_patch_ms)}});
    note("median ms: base " + fmt(l.base_ms) + ", detect " + fmt(l.detect_only_ms) + ", hot-fix " +
         fmt(l.detect_and_patch_ms));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-map hot-fixing for backdoored or biased transformers"};
    app.require_subcommand(1);
    Options o;

    // shared options may appear before or after the subcommand
    app.fallthrough();
    app.add_option("--config", o.config_path, "JSON run configuration");
    app.add_option("--seed", o.seed, "Seed (replaces the configured list)");
    app.add_option("--tau", o.tau, "Detector threshold")->check(CLI::Range(0.0, 1.0));
    app.add_option("--mode", o.mode, "streaming or two_pass");
    app.add_option("--out", o.out, "Output directory");

    const auto add = [&](const std::string& name, const std::string& help) { return app.add_subcommand(name, help); };

    const std::vector<std::pair<CLI::App*, std::function<void(const Context&)>>> commands{
        {add("gen-data", "Generate the dataset splits"), gen_data},
        {add("poison", "Stamp the planted trigger onto part of the training set"), poison},
        {add("train-victim", "Train the victim transformer"), train_victim_cmd},
        {add("invert-trigger", "Reverse-engineer the trigger from the victim"), invert},
        {add("build-debugset", "Pair clean and compromised samples"), build_debugset_cmd},
        {add("train-detector", "Train the attention anomaly detector"), train_detector_cmd},
        {add("build-qref", "Average clean attention into the benign reference"), build_qref_cmd},
        {add("evaluate", "Accuracy and ASR/UF before and after hot-fixing"), evaluate},
        {add("ablate", "Compare the full defence with both ablations"), ablate},
        {add("bench-latency", "Median per-sample latency of plain and hot-fixed inference"), bench},
    };
    auto* probe_cmd = add("probe-zero-column", "Zero one attention column and count surviving attacks");
    probe_cmd->add_option("--column", o.column, "Probe only this token column");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        const Context ctx = make_context(o);
        if (probe_cmd->parsed()) {
            probe(ctx, o.column);
        } else {
            for (const auto& [sub, run] : commands)
                if (sub->parsed()) run(ctx);
        }
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: invalid configuration: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
