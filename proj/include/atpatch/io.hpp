#pragma once

// On-disk forms of datasets, debugging sets and inversion results:
// a JSON manifest next to ATPT tensor files.

#include <atpatch/data.hpp>
#include <atpatch/inversion.hpp>
#include <atpatch/serialize.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace atpatch {

namespace fs = std::filesystem;

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

namespace detail {

inline Tensor stack_images(const std::vector<const Tensor*>& images) {
    if (images.empty()) return Tensor(Shape{0});
    Shape shape{images.size()};
    for (auto d : images.front()->shape()) shape.push_back(d);
    Tensor out(shape);
    const std::size_t per = images.front()->size();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->size() != per) throw DimensionError("stack_images: ragged images");
        std::copy(images[i]->data().begin(), images[i]->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

inline Tensor unstack_image(const Tensor& stacked, std::size_t i) {
    Shape shape(stacked.shape().begin() + 1, stacked.shape().end());
    const std::size_t per = shape_numel(shape);
    std::vector<double> v(stacked.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                          stacked.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    return Tensor(shape, std::move(v));
}

inline nlohmann::json input_json(const Input& x) {
    return x.is_image() ? nlohmann::json(nullptr) : nlohmann::json(x.categories());
}

} // namespace detail

// ---- glyph datasets ---------------------------------------------------------

inline void save_glyphs(const fs::path& dir, const std::vector<GlyphSample>& data) {
    fs::create_directories(dir);
    std::vector<const Tensor*> images;
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : data) {
        images.push_back(&s.image);
        samples.push_back({{"id", s.id}, {"label", s.label}, {"poisoned", s.poisoned}, {"trigger_patch_ids", s.trigger_patch_ids}});
    }
    save_tensor(dir / "images.atpt", detail::stack_images(images));
    write_json(dir / "manifest.json", {{"kind", "glyph"}, {"count", data.size()}, {"samples", samples}});
}

inline std::vector<GlyphSample> load_glyphs(const fs::path& dir) {
    const auto manifest = read_json(dir / "manifest.json");
    if (manifest.value("kind", "") != "glyph") throw IoError(dir.string() + " does not hold a glyph dataset");
    const auto& samples = manifest.at("samples");
    std::vector<GlyphSample> out;
    if (samples.empty()) return out;
    const Tensor images = load_tensor(dir / "images.atpt");
    if (images.rank() == 0 || images.dim(0) != samples.size()) throw IoError("image count mismatch in " + dir.string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        GlyphSample s;
        s.image = detail::unstack_image(images, i);
        s.id = samples[i].at("id").get<std::size_t>();
        s.label = samples[i].at("label").get<std::size_t>();
        s.poisoned = samples[i].at("poisoned").get<bool>();
        s.trigger_patch_ids = samples[i].at("trigger_patch_ids").get<std::vector<std::size_t>>();
        out.push_back(std::move(s));
    }
    return out;
}

// ---- tabular datasets -------------------------------------------------------

inline void save_tabular(const fs::path& dir, const std::vector<TabularSample>& data) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : data) {
        samples.push_back({{"id", s.id}, {"label", s.label}, {"protected_index", s.protected_index}, {"features", s.features}});
    }
    write_json(dir / "manifest.json", {{"kind", "tabular"}, {"count", data.size()}, {"samples", samples}});
}

inline std::vector<TabularSample> load_tabular(const fs::path& dir) {
    const auto manifest = read_json(dir / "manifest.json");
    if (manifest.value("kind", "") != "tabular") throw IoError(dir.string() + " does not hold a tabular dataset");
    std::vector<TabularSample> out;
    for (const auto& j : manifest.at("samples")) {
        TabularSample s;
        s.id = j.at("id").get<std::size_t>();
        s.label = j.at("label").get<std::size_t>();
        s.protected_index = j.at("protected_index").get<std::size_t>();
        s.features = j.at("features").get<std::vector<std::size_t>>();
        out.push_back(std::move(s));
    }
    return out;
}

// ---- trigger specs ----------------------------------------------------------

inline void save_trigger(const fs::path& dir, const TriggerSpec& t) {
    fs::create_directories(dir);
    save_tensor(dir / "mask.atpt", t.mask);
    save_tensor(dir / "pattern.atpt", t.pattern);
    write_json(dir / "trigger.json", {{"target_class", t.target_class}, {"blend_alpha", t.blend_alpha}});
}

inline TriggerSpec load_trigger(const fs::path& dir) {
    const auto meta = read_json(dir / "trigger.json");
    TriggerSpec t;
    t.mask = load_tensor(dir / "mask.atpt");
    t.pattern = load_tensor(dir / "pattern.atpt");
    t.target_class = meta.at("target_class").get<std::size_t>();
    t.blend_alpha = meta.at("blend_alpha").get<double>();
    return t;
}

// ---- inversion results ------------------------------------------------------

inline void save_inversion(const fs::path& dir, const InversionResult& r) {
    fs::create_directories(dir);
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : r.per_class) {
        const std::string stem = "class" + std::to_string(c.target_class);
        save_tensor(dir / (stem + "_mask.atpt"), c.mask);
        save_tensor(dir / (stem + "_pattern.atpt"), c.pattern);
        classes.push_back({{"target_class", c.target_class},
                           {"final_loss", c.final_loss},
                           {"l1_mass", c.l1_mass},
                           {"flip_rate", c.flip_rate}});
    }
    write_json(dir / "inversion.json",
               {{"chosen_target", r.chosen_target}, {"low_confidence", r.low_confidence}, {"per_class", classes}});
}

inline InversionResult load_inversion(const fs::path& dir) {
    const auto j = read_json(dir / "inversion.json");
    InversionResult r;
    r.chosen_target = j.at("chosen_target").get<std::size_t>();
    r.low_confidence = j.at("low_confidence").get<bool>();
    for (const auto& c : j.at("per_class")) {
        ClassInversion ci;
        ci.target_class = c.at("target_class").get<std::size_t>();
        const std::string stem = "class" + std::to_string(ci.target_class);
        ci.mask = load_tensor(dir / (stem + "_mask.atpt"));
        ci.pattern = load_tensor(dir / (stem + "_pattern.atpt"));
        ci.final_loss = c.at("final_loss").get<double>();
        ci.l1_mass = c.at("l1_mass").get<double>();
        ci.flip_rate = c.at("flip_rate").get<double>();
        r.per_class.push_back(std::move(ci));
    }
    if (r.chosen_target >= r.per_class.size()) throw IoError("inversion in " + dir.string() + " names a missing class");
    return r;
}

// ---- debugging sets ---------------------------------------------------------

inline void save_debugset(const fs::path& dir, const DebuggingSet& ds) {
    fs::create_directories(dir);
    const bool images = !ds.pairs.empty() ? ds.pairs.front().clean.is_image()
                                          : (!ds.clean_pool.empty() && ds.clean_pool.front().is_image());
    nlohmann::json pairs = nlohmann::json::array();
    std::vector<const Tensor*> clean, compromised, pool;
    for (const auto& p : ds.pairs) {
        nlohmann::json j{{"anomalous_columns", p.anomalous_columns}, {"clean_id", p.clean_id}, {"compromised_id", p.compromised_id}};
        if (images) {
            clean.push_back(&p.clean.pixels());
            compromised.push_back(&p.compromised.pixels());
        } else {
            j["clean"] = detail::input_json(p.clean);
            j["compromised"] = detail::input_json(p.compromised);
        }
        pairs.push_back(std::move(j));
    }
    nlohmann::json pool_json = nlohmann::json::array();
    for (const auto& x : ds.clean_pool) {
        if (images) pool.push_back(&x.pixels());
        else pool_json.push_back(detail::input_json(x));
    }
    if (images) {
        save_tensor(dir / "clean.atpt", detail::stack_images(clean));
        save_tensor(dir / "compromised.atpt", detail::stack_images(compromised));
        save_tensor(dir / "pool.atpt", detail::stack_images(pool));
    }
    write_json(dir / "manifest.json", {{"kind", to_string(ds.kind)},
                                       {"modality", images ? "image" : "tabular"},
                                       {"requested", ds.requested},
                                       {"warnings", ds.warnings},
                                       {"pairs", pairs},
                                       {"clean_pool_ids", ds.clean_pool_ids},
                                       {"clean_pool", pool_json}});
}

inline DebuggingSet load_debugset(const fs::path& dir) {
    const auto m = read_json(dir / "manifest.json");
    DebuggingSet ds;
    ds.kind = m.at("kind").get<std::string>() == "backdoor" ? DebugKind::backdoor : DebugKind::unfairness;
    ds.requested = m.at("requested").get<std::size_t>();
    ds.warnings = m.at("warnings").get<std::vector<std::string>>();
    ds.clean_pool_ids = m.at("clean_pool_ids").get<std::vector<std::size_t>>();
    const bool images = m.at("modality").get<std::string>() == "image";
    const auto& pairs = m.at("pairs");
    Tensor clean, compromised, pool;
    if (images && !pairs.empty()) {
        clean = load_tensor(dir / "clean.atpt");
        compromised = load_tensor(dir / "compromised.atpt");
    }
    if (images && !ds.clean_pool_ids.empty()) pool = load_tensor(dir / "pool.atpt");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        DebugPair p;
        p.anomalous_columns = pairs[i].at("anomalous_columns").get<std::vector<std::size_t>>();
        p.clean_id = pairs[i].at("clean_id").get<std::size_t>();
        p.compromised_id = pairs[i].at("compromised_id").get<std::size_t>();
        if (images) {
            p.clean = Input::image(detail::unstack_image(clean, i));
            p.compromised = Input::image(detail::unstack_image(compromised, i));
        } else {
            p.clean = Input::tabular(pairs[i].at("clean").get<std::vector<std::size_t>>());
            p.compromised = Input::tabular(pairs[i].at("compromised").get<std::vector<std::size_t>>());
        }
        ds.pairs.push_back(std::move(p));
    }
    for (std::size_t i = 0; i < ds.clean_pool_ids.size(); ++i) {
        ds.clean_pool.push_back(images ? Input::image(detail::unstack_image(pool, i))
                                       : Input::tabular(m.at("clean_pool").at(i).get<std::vector<std::size_t>>()));
    }
    return ds;
}

} // namespace atpatch
