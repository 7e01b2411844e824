#pragma once

// Small pre-norm transformer encoder whose attention maps can be recorded
// and replaced mid-inference.

#include <atpatch/autograd.hpp>
#include <atpatch/errors.hpp>
#include <atpatch/ops.hpp>
#include <atpatch/optim.hpp>
#include <atpatch/params.hpp>
#include <atpatch/random.hpp>
#include <atpatch/serialize.hpp>
#include <atpatch/tensor.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace atpatch {

enum class Modality { image, tabular };

inline std::string to_string(Modality m) { return m == Modality::image ? "image" : "tabular"; }

inline Modality modality_from_string(const std::string& s) {
    if (s == "image") return Modality::image;
    if (s == "tabular") return Modality::tabular;
    throw ContractError("unknown modality '" + s + "'");
}

struct ModelConfig {
    Modality modality = Modality::image;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 32;
    std::size_t mlp_ratio = 2;
    std::size_t n_classes = 4;
    // image modality
    std::size_t side = 16;
    std::size_t patch = 4;
    std::size_t channels = 1;
    // tabular modality
    std::vector<std::size_t> vocab_sizes;

    std::size_t n_features() const { return vocab_sizes.size(); }
    std::size_t head_dim() const { return d_model / n_heads; }

    /// Sequence length including the CLS token at index 0.
    std::size_t token_count() const {
        if (modality == Modality::image) return (side / patch) * (side / patch) + 1;
        return vocab_sizes.size() + 1;
    }

    void validate() const {
        if (n_layers == 0 || n_heads == 0 || d_model == 0 || mlp_ratio == 0 || n_classes < 2) {
            throw ContractError("model config: layers, heads, d_model, mlp_ratio must be positive and classes >= 2");
        }
        if (d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
        if (modality == Modality::image) {
            if (patch == 0 || side % patch != 0) throw ContractError("model config: side must be divisible by patch");
            if (channels == 0) throw ContractError("model config: channels must be positive");
        } else {
            if (vocab_sizes.empty()) throw ContractError("model config: tabular modality needs vocab_sizes");
            for (auto v : vocab_sizes)
                if (v == 0) throw ContractError("model config: zero vocab size");
        }
    }

    static ModelConfig glyph_default() { return ModelConfig{}; }

    static ModelConfig tabular_default() {
        ModelConfig c;
        c.modality = Modality::tabular;
        c.n_classes = 2;
        c.vocab_sizes = {2, 4, 4, 4, 4, 4};
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"modality", to_string(c.modality)},
                       {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"d_model", c.d_model},
                       {"mlp_ratio", c.mlp_ratio},
                       {"n_classes", c.n_classes}};
    if (c.modality == Modality::image) {
        j["image"] = {{"side", c.side}, {"patch", c.patch}, {"channels", c.channels}};
    } else {
        j["tabular"] = {{"n_features", c.vocab_sizes.size()}, {"vocab_sizes", c.vocab_sizes}};
    }
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.modality = modality_from_string(j.value("modality", std::string("image")));
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.n_classes = j.value("n_classes", c.modality == Modality::image ? std::size_t{4} : std::size_t{2});
    if (j.contains("image")) {
        const auto& im = j.at("image");
        c.side = im.value("side", c.side);
        c.patch = im.value("patch", c.patch);
        c.channels = im.value("channels", c.channels);
    }
    if (j.contains("tabular")) {
        c.vocab_sizes = j.at("tabular").at("vocab_sizes").get<std::vector<std::size_t>>();
        if (j.at("tabular").contains("n_features") &&
            j.at("tabular").at("n_features").get<std::size_t>() != c.vocab_sizes.size()) {
            throw ContractError("model config: n_features disagrees with vocab_sizes");
        }
    } else if (c.modality == Modality::tabular) {
        c.vocab_sizes = ModelConfig::tabular_default().vocab_sizes;
    }
    c.validate();
}

/// Raw model input: an image tensor [c, side, side] or per-feature category ids.
struct Input {
    std::variant<Tensor, std::vector<std::size_t>> data;

    static Input image(Tensor t) { return Input{std::move(t)}; }
    static Input tabular(std::vector<std::size_t> ids) { return Input{std::move(ids)}; }

    bool is_image() const noexcept { return std::holds_alternative<Tensor>(data); }
    const Tensor& pixels() const { return std::get<Tensor>(data); }
    const std::vector<std::size_t>& categories() const { return std::get<std::vector<std::size_t>>(data); }
};

struct LabeledInput {
    Input input;
    std::size_t label = 0;
};

/// Per-layer attention maps [heads, n, n] actually used during a forward pass.
struct AttentionTrace {
    std::vector<Tensor> maps;
    std::size_t token_count = 0;
};

/// Optional replacement map per layer.
struct AttentionOverride {
    std::vector<std::optional<Tensor>> per_layer;

    bool empty() const {
        for (const auto& m : per_layer)
            if (m) return false;
        return true;
    }
};

/// Called with each layer's freshly computed map; a returned tensor replaces
/// it for the A.V aggregation. The hook is trusted: no row-sum validation.
using AttentionHook = std::function<std::optional<Tensor>(std::size_t layer, const Tensor& computed)>;

inline void check_row_stochastic(const Tensor& map, double tol, const char* what) {
    const std::size_t n = map.shape().back();
    for (std::size_t r = 0; r < map.size() / n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = map[r * n + j];
            if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite entry");
            s += v;
        }
        if (std::abs(s - 1.0) > tol) {
            throw ContractError(std::string(what) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
        }
    }
}

struct LayerForward {
    Tensor tokens;   // [n, d] block output
    Tensor map;      // [heads, n, n] map used
    Tensor context;  // [n, d] merged A.V before the output projection
    Tensor values;   // [n, d] value projections
};

struct ForwardResult {
    Tensor logits;  // [n_classes]
    AttentionTrace trace;
};

struct TrainOptions {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;
};

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
};

struct TrainingLog {
    std::vector<EpochStats> epochs;
    double final_train_accuracy = 0.0;
};

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        init(seed);
    }

    TransformerModel(ModelConfig cfg, ParamMap params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
        check_param_shapes(TransformerModel(cfg_, 0).params_, params_);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const ParamMap& params() const noexcept { return params_; }
    ParamMap& params() noexcept { return params_; }

    std::vector<Tensor*> parameter_list() { return atpatch::parameter_list(params_); }

    // ---- tape-level graph construction -------------------------------------

    using Binder = ParamBinder;

    /// Image [c, side, side] -> tokens [n, d].
    Var embed_image(Binder& p, const Var& image) const {
        if (cfg_.modality != Modality::image) throw ContractError("embed_image on a tabular model");
        const Shape expect{cfg_.channels, cfg_.side, cfg_.side};
        if (image.shape() != expect) {
            throw DimensionError("image shape " + shape_str(image.shape()) + " does not match config " + shape_str(expect));
        }
        Var patches = ops::patchify(image, cfg_.patch);
        Var emb = ops::add_bias(ops::matmul(patches, p("embed.weight")), p("embed.bias"));
        return ops::add(ops::concat_rows(p("cls"), emb), p("pos"));
    }

    Var embed_tabular(Binder& p, const std::vector<std::size_t>& categories) const {
        if (cfg_.modality != Modality::tabular) throw ContractError("embed_tabular on an image model");
        if (categories.size() != cfg_.n_features()) {
            throw DimensionError("tabular sample has " + std::to_string(categories.size()) + " features, config expects " +
                                 std::to_string(cfg_.n_features()));
        }
        std::vector<std::size_t> ids(categories.size());
        std::size_t offset = 0;
        for (std::size_t f = 0; f < categories.size(); ++f) {
            if (categories[f] >= cfg_.vocab_sizes[f]) {
                throw DimensionError("feature " + std::to_string(f) + " category " + std::to_string(categories[f]) +
                                     " out of vocab " + std::to_string(cfg_.vocab_sizes[f]));
            }
            ids[f] = offset + categories[f];
            offset += cfg_.vocab_sizes[f];
        }
        Var emb = ops::embedding(p("embed.table"), std::move(ids));
        return ops::add(ops::concat_rows(p("cls"), emb), p("pos"));
    }

    Var embed(Binder& p, const Input& x) const {
        if (x.is_image()) return embed_image(p, p.tape().constant_ref(x.pixels()));
        return embed_tabular(p, x.categories());
    }

    struct BlockVars {
        Var out;
        Var context;
        Var values;
    };

    /// One encoder block. `used_map` receives the attention map consumed by A.V.
    BlockVars block(Binder& p, const Var& x, std::size_t layer, const AttentionHook* hook, Tensor* used_map) const {
        const std::string pre = "layer" + std::to_string(layer) + ".";
        const std::size_t n = cfg_.token_count();
        if (x.shape() != Shape{n, cfg_.d_model}) {
            throw DimensionError("block input " + shape_str(x.shape()) + ", expected " + shape_str(Shape{n, cfg_.d_model}));
        }
        Var h = ops::layer_norm(x, p(pre + "ln1.gamma"), p(pre + "ln1.beta"));
        Var q = ops::add_bias(ops::matmul(h, p(pre + "wq")), p(pre + "bq"));
        Var k = ops::add_bias(ops::matmul(h, p(pre + "wk")), p(pre + "bk"));
        Var v = ops::add_bias(ops::matmul(h, p(pre + "wv")), p(pre + "bv"));
        Var qh = ops::split_heads(q, cfg_.n_heads);
        Var kh = ops::split_heads(k, cfg_.n_heads);
        Var vh = ops::split_heads(v, cfg_.n_heads);
        Var scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())));
        Var attn = ops::softmax_rows(scores);
        if (hook && *hook) {
            if (auto replacement = (*hook)(layer, attn.value())) {
                if (replacement->shape() != attn.shape()) {
                    throw DimensionError("attention override shape " + shape_str(replacement->shape()) + ", expected " +
                                         shape_str(attn.shape()));
                }
                attn = p.tape().constant(std::move(*replacement));
            }
        }
        if (used_map) *used_map = attn.value();
        Var ctx = ops::merge_heads(ops::matmul(attn, vh));
        Var attn_out = ops::add_bias(ops::matmul(ctx, p(pre + "wo")), p(pre + "bo"));
        Var x1 = ops::add(x, attn_out);
        Var h2 = ops::layer_norm(x1, p(pre + "ln2.gamma"), p(pre + "ln2.beta"));
        Var m = ops::gelu(ops::add_bias(ops::matmul(h2, p(pre + "w1")), p(pre + "b1")));
        m = ops::add_bias(ops::matmul(m, p(pre + "w2")), p(pre + "b2"));
        return {ops::add(x1, m), ctx, v};
    }

    /// Tokens -> logits [1, n_classes].
    Var encode(Binder& p, Var x, const AttentionHook* hook, AttentionTrace* trace) const {
        if (trace) {
            trace->maps.assign(cfg_.n_layers, Tensor{});
            trace->token_count = cfg_.token_count();
        }
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            x = block(p, x, l, hook, trace ? &trace->maps[l] : nullptr).out;
        }
        Var hf = ops::layer_norm(x, p("final.ln.gamma"), p("final.ln.beta"));
        Var cls = ops::select_row(hf, 0);
        return ops::add_bias(ops::matmul(cls, p("head.weight")), p("head.bias"));
    }

    // ---- inference ---------------------------------------------------------

    Tensor tokenize(const Input& x) const {
        Tape tape(false);
        Binder p(tape, params_);
        return embed(p, x).value();
    }

    /// Runs block `layer` on explicit tokens, optionally with a replacement map.
    /// The override must be [heads, n, n] with rows summing to 1 within 1e-5.
    LayerForward attention_layer_forward(const Tensor& tokens, std::size_t layer,
                                         const std::optional<Tensor>& override_map = std::nullopt) const {
        if (layer >= cfg_.n_layers) throw IndexError("layer " + std::to_string(layer) + " out of range");
        if (override_map) validate_override(*override_map);
        Tape tape(false);
        Binder p(tape, params_);
        AttentionHook hook;
        if (override_map) hook = [&](std::size_t, const Tensor&) { return std::optional<Tensor>(*override_map); };
        LayerForward out;
        auto bv = block(p, tape.constant_ref(tokens), layer, &hook, &out.map);
        out.tokens = bv.out.value();
        out.context = bv.context.value();
        out.values = bv.values.value();
        return out;
    }

    Tensor logits(const Input& x) const {
        Tape tape(false);
        Binder p(tape, params_);
        return flat(encode(p, embed(p, x), nullptr, nullptr).value());
    }

    std::size_t predict(const Input& x) const { return argmax(logits(x).data()); }

    /// Forward pass with an arbitrary hook; records the maps used at every layer.
    ForwardResult forward_hooked(const Input& x, const AttentionHook& hook) const {
        Tape tape(false);
        Binder p(tape, params_);
        ForwardResult r;
        r.logits = flat(encode(p, embed(p, x), &hook, &r.trace).value());
        return r;
    }

    /// Full forward with per-layer overrides (validated); layers after an
    /// override see the recomputed downstream features.
    ForwardResult forward_collect(const Input& x, const AttentionOverride& overrides = {}) const {
        if (overrides.per_layer.size() > cfg_.n_layers) throw ContractError("more overrides than layers");
        for (const auto& m : overrides.per_layer)
            if (m) validate_override(*m);
        AttentionHook hook;
        if (!overrides.empty()) {
            hook = [&](std::size_t layer, const Tensor&) -> std::optional<Tensor> {
                if (layer < overrides.per_layer.size() && overrides.per_layer[layer]) return *overrides.per_layer[layer];
                return std::nullopt;
            };
        }
        return forward_hooked(x, hook);
    }

    void validate_override(const Tensor& map) const {
        const Shape expect{cfg_.n_heads, cfg_.token_count(), cfg_.token_count()};
        if (map.shape() != expect) {
            throw DimensionError("attention override shape " + shape_str(map.shape()) + ", expected " + shape_str(expect));
        }
        check_row_stochastic(map, 1e-5, "attention override");
    }

    // ---- persistence -------------------------------------------------------

    void save(const std::filesystem::path& dir) const {
        save_tensor_dir(dir, params_);
        std::ofstream os(dir / "config.json");
        if (!os) throw IoError("cannot write " + (dir / "config.json").string());
        os << nlohmann::json(cfg_).dump(2) << '\n';
    }

    static TransformerModel load(const std::filesystem::path& dir) {
        std::ifstream is(dir / "config.json");
        if (!is) throw IoError("cannot open " + (dir / "config.json").string());
        ModelConfig cfg = nlohmann::json::parse(is).get<ModelConfig>();
        return TransformerModel(std::move(cfg), load_tensor_dir(dir));
    }

private:
    static Tensor flat(const Tensor& t) { return t.reshaped(Shape{t.size()}); }

    void add_param(const std::string& name, Tensor t) {
        t.requires_grad = true;
        params_.emplace(name, std::move(t));
    }

    void init(std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t d = cfg_.d_model, n = cfg_.token_count(), hidden = d * cfg_.mlp_ratio;
        auto linear = [&](std::size_t fan_in, std::size_t fan_out) {
            return random_normal(Shape{fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
        };
        if (cfg_.modality == Modality::image) {
            const std::size_t pd = cfg_.channels * cfg_.patch * cfg_.patch;
            add_param("embed.weight", linear(pd, d));
            add_param("embed.bias", Tensor(Shape{d}));
        } else {
            std::size_t vocab = 0;
            for (auto v : cfg_.vocab_sizes) vocab += v;
            add_param("embed.table", random_normal(Shape{vocab, d}, 1.0, rng));
        }
        add_param("cls", random_normal(Shape{1, d}, 0.02, rng));
        add_param("pos", random_normal(Shape{n, d}, 1.0, rng));
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            add_param(pre + "ln1.gamma", Tensor(Shape{d}, 1.0));
            add_param(pre + "ln1.beta", Tensor(Shape{d}));
            for (const char* w : {"wq", "wk", "wv", "wo"}) add_param(pre + w, linear(d, d));
            for (const char* b : {"bq", "bk", "bv", "bo"}) add_param(pre + b, Tensor(Shape{d}));
            add_param(pre + "ln2.gamma", Tensor(Shape{d}, 1.0));
            add_param(pre + "ln2.beta", Tensor(Shape{d}));
            add_param(pre + "w1", linear(d, hidden));
            add_param(pre + "b1", Tensor(Shape{hidden}));
            add_param(pre + "w2", linear(hidden, d));
            add_param(pre + "b2", Tensor(Shape{d}));
        }
        add_param("final.ln.gamma", Tensor(Shape{d}, 1.0));
        add_param("final.ln.beta", Tensor(Shape{d}));
        add_param("head.weight", linear(d, cfg_.n_classes));
        add_param("head.bias", Tensor(Shape{cfg_.n_classes}));
    }

    ModelConfig cfg_;
    ParamMap params_;
};

/// Cross-entropy training with AdamW over shuffled mini-batches.
inline TrainingLog train_victim(TransformerModel& model, std::span<const LabeledInput> data, const TrainOptions& opts) {
    if (data.empty()) throw ContractError("train_victim: empty training set");
    for (const auto& s : data)
        if (s.label >= model.config().n_classes) throw ContractError("train_victim: label out of range");
    TrainingLog log;
    if (opts.epochs == 0) return log;
    Rng rng(derive_seed(opts.seed, 0x7a11));
    AdamW optim(AdamWOptions{.lr = opts.lr, .weight_decay = opts.weight_decay});
    auto params = model.parameter_list();
    const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto order = shuffled_indices(data.size(), rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = data[order[i]];
                Tape tape(true);
                TransformerModel::Binder p(tape, model.params(), true);
                Var logits = model.encode(p, model.embed(p, s.input), nullptr, nullptr);
                Var loss = ops::cross_entropy(logits, s.label);
                const double lv = loss.value().item();
                if (!std::isfinite(lv)) {
                    throw NumericError("train_victim: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(step) + " (lr=" + std::to_string(opts.lr) + ")");
                }
                loss_sum += lv;
                if (argmax(logits.value().data()) == s.label) ++correct;
                tape.backward(ops::scale(loss, inv_b));
            }
            optim.step(params);
            ++step;
        }
        log.epochs.push_back({epoch, loss_sum / static_cast<double>(data.size()),
                              static_cast<double>(correct) / static_cast<double>(data.size())});
    }
    log.final_train_accuracy = log.epochs.back().train_accuracy;
    return log;
}

/// Zeroes `column` of every row and renormalises the row over the remaining
/// columns. Rows that put all their mass on `column` become uniform elsewhere.
inline Tensor zero_attention_column(const Tensor& map, std::size_t column) {
    const std::size_t n = map.shape().back();
    if (column >= n) throw IndexError("column " + std::to_string(column) + " >= " + std::to_string(n));
    Tensor out = map;
    for (std::size_t r = 0; r < map.size() / n; ++r) {
        double* row = out.data().data() + r * n;
        const double rest = 1.0 - row[column];
        if (row[column] == 0.0) continue;
        row[column] = 0.0;
        if (rest > 0.0) {
            for (std::size_t j = 0; j < n; ++j) row[j] /= rest;
        } else {
            for (std::size_t j = 0; j < n; ++j)
                if (j != column) row[j] = 1.0 / static_cast<double>(n - 1);
        }
    }
    return out;
}

/// Fraction of `samples` whose prediction survives zeroing `column` in every
/// layer's attention map.
inline double zero_column_probe(const TransformerModel& model, std::span<const Input> samples, std::size_t column) {
    const std::size_t n = model.config().token_count();
    if (column >= n) throw IndexError("probe column " + std::to_string(column) + " >= token count " + std::to_string(n));
    if (samples.empty()) throw ContractError("zero_column_probe: no samples");
    const AttentionHook hook = [column](std::size_t, const Tensor& a) -> std::optional<Tensor> {
        return zero_attention_column(a, column);
    };
    std::size_t kept = 0;
    for (const auto& x : samples) {
        const std::size_t before = model.predict(x);
        const std::size_t after = argmax(model.forward_hooked(x, hook).logits.data());
        if (before == after) ++kept;
    }
    return static_cast<double>(kept) / static_cast<double>(samples.size());
}

} // namespace atpatch
