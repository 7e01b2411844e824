#pragma once

// Over-attention detector: head-averaged attention map -> 2-layer CNN ->
// per-column mean and max pooling -> shared MLP -> sigmoid, one probability per column.

#include <atpatch/data.hpp>
#include <atpatch/model.hpp>
#include <atpatch/ops.hpp>
#include <atpatch/optim.hpp>
#include <atpatch/params.hpp>

#include <json.hpp>

#include <array>
#include <set>
#include <span>
#include <utility>
#include <vector>

namespace atpatch {

struct DetectorConfig {
    std::size_t token_count = 17;
    std::array<std::size_t, 2> conv_channels{8, 16};
    std::size_t column_feature_dim = 32;
    std::size_t mlp_hidden = 32;
    double tau = 0.1;
    double lambda_contrast = 1.0;
    double temperature = 0.1;

    void validate() const {
        if (token_count < 2) throw ContractError("detector config: token_count must be >= 2");
        if (!(tau > 0.0 && tau < 1.0)) throw ContractError("detector config: tau must lie in (0, 1)");
        if (lambda_contrast < 0.0) throw ContractError("detector config: lambda must be >= 0");
        if (temperature <= 0.0) throw ContractError("detector config: temperature must be > 0");
        if (column_feature_dim != 2 * conv_channels[1]) {
            throw ContractError("detector config: column_feature_dim must be twice the last conv width");
        }
    }
};

inline void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = nlohmann::json{{"token_count", c.token_count},       {"conv_channels", c.conv_channels},
                       {"column_feature_dim", c.column_feature_dim}, {"mlp_hidden", c.mlp_hidden},
                       {"tau", c.tau},                       {"lambda_contrast", c.lambda_contrast},
                       {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, DetectorConfig& c) {
    c = DetectorConfig{};
    c.token_count = j.value("token_count", c.token_count);
    c.conv_channels = j.value("conv_channels", c.conv_channels);
    c.column_feature_dim = j.value("column_feature_dim", c.column_feature_dim);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.tau = j.value("tau", c.tau);
    c.lambda_contrast = j.value("lambda_contrast", c.lambda_contrast);
    c.temperature = j.value("temperature", c.temperature);
    c.validate();
}

/// Per-layer column anomaly probabilities.
struct AnomalyScores {
    std::vector<std::vector<double>> per_layer;
};

/// Flagged (layer, column) cells.
struct AnomalySet {
    std::set<std::pair<std::size_t, std::size_t>> cells;

    bool empty() const noexcept { return cells.empty(); }
    std::size_t size() const noexcept { return cells.size(); }

    std::vector<std::size_t> columns(std::size_t layer) const {
        std::vector<std::size_t> out;
        for (const auto& [l, c] : cells)
            if (l == layer) out.push_back(c);
        return out;
    }
};

/// Mean over the head axis: [h, n, n] -> [n, n].
inline Tensor aggregate_heads(const Tensor& attn) {
    if (attn.rank() != 3 || attn.dim(0) == 0) throw DimensionError("aggregate_heads expects [h,n,n], got " + shape_str(attn.shape()));
    const std::size_t h = attn.dim(0), nn = attn.dim(1) * attn.dim(2);
    Tensor out(Shape{attn.dim(1), attn.dim(2)});
    for (std::size_t head = 0; head < h; ++head)
        for (std::size_t i = 0; i < nn; ++i) out[i] += attn[head * nn + i];
    const double inv = 1.0 / static_cast<double>(h);
    for (auto& v : out.data()) v *= inv;
    return out;
}

/// Anchor -> index of one uniformly drawn other column with the same label (-1 if none).
inline std::vector<int> sample_positives(std::span<const int> labels, Rng& rng) {
    std::vector<std::vector<int>> by_label(2);
    for (std::size_t i = 0; i < labels.size(); ++i) by_label.at(static_cast<std::size_t>(labels[i])).push_back(static_cast<int>(i));
    std::vector<int> pos(labels.size(), -1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& group = by_label[static_cast<std::size_t>(labels[i])];
        if (group.size() < 2) continue;
        std::size_t k = uniform_index(rng, group.size() - 1);
        if (group[k] == static_cast<int>(i)) k = group.size() - 1;  // skip self
        pos[i] = group[k];
    }
    return pos;
}

/// BCE over all columns plus lambda * InfoNCE over the column features.
/// The contrastive term is omitted when lambda == 0 or the batch holds a single label.
inline Var delta_loss(const Var& scores, const Var& features, std::span<const int> labels, double lambda,
                      std::span<const int> positives, double temperature) {
    for (int l : labels)
        if (l != 0 && l != 1) throw ContractError("delta_loss labels must be 0 or 1");
    Var bce = ops::binary_cross_entropy(scores, labels);
    if (lambda == 0.0) return bce;
    const bool mixed = std::any_of(labels.begin(), labels.end(), [&](int l) { return l != labels.front(); });
    if (!mixed) return bce;
    return ops::add(bce, ops::scale(ops::info_nce(features, labels, positives, temperature), lambda));
}

struct DetectorOutput {
    Var scores;    // [n]
    Var features;  // [n, column_feature_dim]
};

class Detector {
public:
    Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        init(seed);
    }

    Detector(DetectorConfig cfg, ParamMap params) : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
        check_param_shapes(Detector(cfg_, 0).params_, params_);
    }

    const DetectorConfig& config() const noexcept { return cfg_; }
    DetectorConfig& config() noexcept { return cfg_; }
    const ParamMap& params() const noexcept { return params_; }
    ParamMap& params() noexcept { return params_; }

    /// Graph for one head-aggregated map M [n, n].
    DetectorOutput forward(ParamBinder& p, const Var& map) const {
        const std::size_t n = cfg_.token_count;
        if (map.shape() != Shape{n, n}) {
            throw DimensionError("detector input " + shape_str(map.shape()) + ", expected " + shape_str(Shape{n, n}));
        }
        // Scaled so that uniform attention reads as 1.
        Var x = ops::scale(ops::reshape(map, Shape{1, n, n}), static_cast<double>(n));
        x = ops::relu(ops::add_channel_bias(ops::conv2d(x, p("conv1.kernel")), p("conv1.bias")));
        x = ops::relu(ops::add_channel_bias(ops::conv2d(x, p("conv2.kernel")), p("conv2.bias")));
        Var feats = ops::column_features(x);
        Var h = ops::relu(ops::add_bias(ops::matmul(feats, p("mlp1.weight")), p("mlp1.bias")));
        Var logit = ops::add_bias(ops::matmul(h, p("mlp2.weight")), p("mlp2.bias"));
        return {ops::reshape(ops::sigmoid(logit), Shape{n}), feats};
    }

    /// Column probabilities and column features for M [n, n].
    std::pair<std::vector<double>, Tensor> score_with_features(const Tensor& map) const {
        Tape tape(false);
        ParamBinder p(tape, params_);
        auto out = forward(p, tape.constant_ref(map));
        return {out.scores.value().values(), out.features.value()};
    }

    std::vector<double> score(const Tensor& map) const { return score_with_features(map).first; }

    /// Scores every layer of a trace (heads averaged first).
    AnomalyScores score_trace(const AttentionTrace& trace) const {
        AnomalyScores s;
        for (const auto& m : trace.maps) s.per_layer.push_back(score(aggregate_heads(m)));
        return s;
    }

    void save(const std::filesystem::path& dir) const {
        save_tensor_dir(dir, params_);
        std::ofstream os(dir / "config.json");
        if (!os) throw IoError("cannot write " + (dir / "config.json").string());
        os << nlohmann::json(cfg_).dump(2) << '\n';
    }

    static Detector load(const std::filesystem::path& dir) {
        std::ifstream is(dir / "config.json");
        if (!is) throw IoError("cannot open " + (dir / "config.json").string());
        auto cfg = nlohmann::json::parse(is).get<DetectorConfig>();
        return Detector(cfg, load_tensor_dir(dir));
    }

private:
    void add(const std::string& name, Tensor t) {
        t.requires_grad = true;
        params_.emplace(name, std::move(t));
    }

    void init(std::uint64_t seed) {
        Rng rng(seed);
        const auto [c1, c2] = cfg_.conv_channels;
        add("conv1.kernel", random_normal(Shape{c1, 1, 3, 3}, std::sqrt(2.0 / 9.0), rng));
        add("conv1.bias", Tensor(Shape{c1}));
        add("conv2.kernel", random_normal(Shape{c2, c1, 3, 3}, std::sqrt(2.0 / (9.0 * static_cast<double>(c1))), rng));
        add("conv2.bias", Tensor(Shape{c2}));
        add("mlp1.weight", random_normal(Shape{2 * c2, cfg_.mlp_hidden}, std::sqrt(1.0 / static_cast<double>(c2)), rng));
        add("mlp1.bias", Tensor(Shape{cfg_.mlp_hidden}));
        add("mlp2.weight", random_normal(Shape{cfg_.mlp_hidden, 1}, std::sqrt(1.0 / static_cast<double>(cfg_.mlp_hidden)), rng));
        add("mlp2.bias", Tensor(Shape{1}));
    }

    DetectorConfig cfg_;
    ParamMap params_;
};

/// Columns whose probability is strictly above tau.
inline std::vector<std::size_t> flag_columns(std::span<const double> scores, double tau) {
    std::vector<std::size_t> cols;
    for (std::size_t j = 0; j < scores.size(); ++j)
        if (scores[j] > tau) cols.push_back(j);
    return cols;
}

inline AnomalySet localize(const AnomalyScores& scores, double tau) {
    AnomalySet k;
    for (std::size_t l = 0; l < scores.per_layer.size(); ++l)
        for (auto j : flag_columns(scores.per_layer[l], tau)) k.cells.emplace(l, j);
    return k;
}

/// Flagged cells for every layer of a trace.
inline AnomalySet localize(const AttentionTrace& trace, const Detector& detector, double tau) {
    if (trace.token_count != 0 && trace.token_count != detector.config().token_count) {
        throw DimensionError("detector token count does not match trace");
    }
    return localize(detector.score_trace(trace), tau);
}

/// A head-aggregated map with per-column labels.
struct LabeledMap {
    Tensor map;  // [n, n]
    std::vector<int> labels;
    bool compromised = false;
    std::size_t layer = 0;
};

/// Every layer's head-averaged map for each clean (all-zero labels) and
/// compromised (1 at the anomalous columns) debugging sample.
inline std::vector<LabeledMap> extract_labeled_maps(const TransformerModel& victim, const DebuggingSet& ds) {
    const std::size_t n = victim.config().token_count();
    std::vector<LabeledMap> out;
    for (const auto& pair : ds.pairs) {
        for (int which = 0; which < 2; ++which) {
            const bool bad = which == 1;
            const auto fr = victim.forward_collect(bad ? pair.compromised : pair.clean);
            std::vector<int> labels(n, 0);
            if (bad)
                for (auto c : pair.anomalous_columns) labels.at(c) = 1;
            for (std::size_t l = 0; l < fr.trace.maps.size(); ++l) {
                out.push_back({aggregate_heads(fr.trace.maps[l]), labels, bad, l});
            }
        }
    }
    return out;
}

struct DetectorTrainOptions {
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
};

struct DetectorTrainingLog {
    std::vector<double> epoch_loss;
};

/// Trains on labeled maps with AdamW. Positives are resampled per batch.
inline DetectorTrainingLog train_detector_on_maps(Detector& det, const std::vector<LabeledMap>& maps,
                                                  const DetectorTrainOptions& opts) {
    if (maps.empty()) throw ContractError("train_detector: no training maps");
    if (std::none_of(maps.begin(), maps.end(), [](const LabeledMap& m) { return m.compromised; })) {
        throw ContractError("train_detector: debugging set has no compromised samples");
    }
    DetectorTrainingLog log;
    if (opts.epochs == 0) return log;
    Rng rng(derive_seed(opts.seed, 0xde7));
    AdamW optim(AdamWOptions{.lr = opts.lr, .weight_decay = opts.weight_decay});
    auto params = parameter_list(det.params());
    const auto& cfg = det.config();
    const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto order = shuffled_indices(maps.size(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            Tape tape(true);
            ParamBinder p(tape, det.params(), true);
            std::vector<Var> scores, feats;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                const auto& m = maps[order[i]];
                auto out = det.forward(p, tape.constant_ref(m.map));
                scores.push_back(ops::reshape(out.scores, Shape{cfg.token_count, 1}));
                feats.push_back(out.features);
                labels.insert(labels.end(), m.labels.begin(), m.labels.end());
            }
            Var all_scores = ops::reshape(ops::stack_rows(scores), Shape{labels.size()});
            Var all_feats = ops::stack_rows(feats);
            const auto positives = sample_positives(labels, rng);
            Var loss = delta_loss(all_scores, all_feats, labels, cfg.lambda_contrast, positives, cfg.temperature);
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) throw NumericError("train_detector: non-finite loss in epoch " + std::to_string(epoch));
            loss_sum += lv;
            ++batches;
            tape.backward(loss);
            optim.step(params);
        }
        log.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    return log;
}

inline DetectorTrainingLog train_detector(Detector& det, const DebuggingSet& ds, const TransformerModel& victim,
                                          const DetectorTrainOptions& opts) {
    if (ds.pairs.empty()) throw ContractError("train_detector: empty debugging set");
    if (det.config().token_count != victim.config().token_count()) {
        throw ContractError("train_detector: detector token count does not match the victim");
    }
    return train_detector_on_maps(det, extract_labeled_maps(victim, ds), opts);
}

} // namespace atpatch
