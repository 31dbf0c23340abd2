#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "maria/grid.hpp"
#include "maria/masking.hpp"
#include "maria/model.hpp"
#include "maria/training.hpp"

namespace maria {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace cfgdetail {

inline void require_keys(const nlohmann::json& obj, const std::string& where,
                         const std::set<std::string>& known) {
    for (const auto& [key, value] : obj.items())
        if (!known.count(key))
            throw ConfigError(where + ": unknown field '" + key + "'");
}

// The experiment menu: omega or one of the published injection rates.
inline Rate parse_rate(const nlohmann::json& v, const std::string& field) {
    if (v.is_string()) {
        if (v.get<std::string>() == "omega") return Rate::omega();
        throw ConfigError(field + ": expected \"omega\" or a rate from "
                          "{0, 0.05, 0.10, 0.30, 0.50, 0.75}, got \"" +
                          v.get<std::string>() + "\"");
    }
    if (!v.is_number())
        throw ConfigError(field + ": expected \"omega\" or a number");
    const double x = v.get<double>();
    static const double menu[] = {0.0, 0.05, 0.10, 0.30, 0.50, 0.75};
    for (double m : menu)
        if (std::abs(x - m) < 1e-9) return m == 0.0 ? Rate::omega() : Rate::of(m);
    throw ConfigError(field + ": rate " + std::to_string(x) +
                      " is not in the menu {0, 0.05, 0.10, 0.30, 0.50, 0.75}");
}

inline MissingScenario parse_scenario(const std::string& s, const std::string& field) {
    if (s == "missing_modalities") return MissingScenario::missing_modalities;
    if (s == "all_missing") return MissingScenario::all_missing;
    throw ConfigError(field + ": unknown scenario '" + s +
                      "' (expected missing_modalities|all_missing)");
}

inline FusionMode parse_fusion(const std::string& s, const std::string& field) {
    try {
        return fusion_from_string(s);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(field + ": " + e.what());
    }
}

inline SynthSpec parse_synth(const nlohmann::json& j) {
    require_keys(j, "dataset.synthesize",
                 {"seed", "n_samples", "modality_widths", "class_count", "signal",
                  "categorical_fraction", "categories_per_feature", "missing_rate"});
    SynthSpec spec;
    spec.seed = j.value("seed", spec.seed);
    spec.n_samples = j.value("n_samples", spec.n_samples);
    if (j.contains("modality_widths"))
        spec.modality_widths = j.at("modality_widths").get<std::vector<size_t>>();
    spec.class_count = j.value("class_count", spec.class_count);
    spec.signal = j.value("signal", spec.signal);
    spec.categorical_fraction = j.value("categorical_fraction", spec.categorical_fraction);
    spec.categories_per_feature = j.value("categories_per_feature", spec.categories_per_feature);
    spec.missing_rate = j.value("missing_rate", spec.missing_rate);
    try {
        validate(spec);
    } catch (const DataError& e) {
        throw ConfigError(std::string("dataset.synthesize: ") + e.what());
    }
    return spec;
}

} // namespace cfgdetail

struct RunConfig {
    std::optional<std::filesystem::path> manifest;
    std::optional<SynthSpec> synth;

    EncoderConfig encoder;
    TrainConfig train;
    GridSpec grid;

    FusionMode fusion = FusionMode::intermediate; // single-model commands
    MissingScenario scenario = MissingScenario::all_missing;
    Rate train_rate = Rate::omega();
    Rate test_rate = Rate::omega();

    std::filesystem::path output_dir = "out";
    uint64_t master_seed = 1;
    std::string metric = "both";

    std::string config_hash;    // over the raw config file bytes
    nlohmann::json resolved;    // fully resolved values, for provenance

    MultimodalDataset load_or_synthesize_dataset() const {
        if (manifest) return load_dataset(*manifest);
        return synthesize_dataset(*synth);
    }
};

inline std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Parses and fully validates the experiment configuration; no side effects
// happen before this returns.
inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    cfgdetail::require_keys(j, "config",
                            {"dataset", "model", "train", "grid", "fusion", "scenario",
                             "train_rate", "test_rate", "output_dir", "master_seed", "metric"});

    RunConfig cfg;
    cfg.config_hash = fnv1a_hex(raw);

    if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset' section");
    const auto& ds = j.at("dataset");
    cfgdetail::require_keys(ds, "dataset", {"manifest", "synthesize"});
    if (ds.contains("manifest") == ds.contains("synthesize"))
        throw ConfigError("dataset: exactly one of 'manifest' or 'synthesize' required");
    if (ds.contains("manifest")) {
        std::filesystem::path m = ds.at("manifest").get<std::string>();
        if (m.is_relative()) m = path.parent_path() / m;
        if (!std::filesystem::exists(m))
            throw ConfigError("dataset.manifest: file does not exist: " + m.string());
        cfg.manifest = m;
    } else {
        cfg.synth = cfgdetail::parse_synth(ds.at("synthesize"));
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfgdetail::require_keys(
            m, "model", {"d_embed", "heads", "modality_layers", "shared_layers", "ff_width"});
        cfg.encoder.d_embed = m.value("d_embed", cfg.encoder.d_embed);
        cfg.encoder.heads = m.value("heads", cfg.encoder.heads);
        cfg.encoder.modality_layers = m.value("modality_layers", cfg.encoder.modality_layers);
        cfg.encoder.shared_layers = m.value("shared_layers", cfg.encoder.shared_layers);
        cfg.encoder.ff_width = m.value("ff_width", cfg.encoder.ff_width);
        try {
            cfg.encoder.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model: ") + e.what());
        }
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfgdetail::require_keys(t, "train",
                                {"optimizer", "learning_rate", "batch_size", "max_epochs",
                                 "patience", "apply_prob", "class_weighting"});
        cfg.train.optimizer = t.value("optimizer", cfg.train.optimizer);
        cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.max_epochs = t.value("max_epochs", cfg.train.max_epochs);
        cfg.train.patience = t.value("patience", cfg.train.patience);
        cfg.train.regularizer_apply_prob = t.value("apply_prob", cfg.train.regularizer_apply_prob);
        cfg.train.class_weighting = t.value("class_weighting", cfg.train.class_weighting);
        try {
            cfg.train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("train: ") + e.what());
        }
    }

    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        cfgdetail::require_keys(g, "grid",
                                {"train_rates", "test_rates", "scenarios", "models", "folds",
                                 "val_fraction", "knn_k"});
        if (g.contains("train_rates")) {
            cfg.grid.train_rates.clear();
            for (const auto& r : g.at("train_rates"))
                cfg.grid.train_rates.push_back(cfgdetail::parse_rate(r, "grid.train_rates"));
        }
        if (g.contains("test_rates")) {
            cfg.grid.test_rates.clear();
            for (const auto& r : g.at("test_rates"))
                cfg.grid.test_rates.push_back(cfgdetail::parse_rate(r, "grid.test_rates"));
        }
        if (g.contains("scenarios")) {
            cfg.grid.scenarios.clear();
            for (const auto& s : g.at("scenarios"))
                cfg.grid.scenarios.push_back(
                    cfgdetail::parse_scenario(s.get<std::string>(), "grid.scenarios"));
        }
        if (g.contains("models")) {
            cfg.grid.models.clear();
            for (const auto& m : g.at("models")) {
                cfgdetail::require_keys(m, "grid.models", {"fusion", "imputer"});
                GridModelSpec spec;
                spec.fusion =
                    cfgdetail::parse_fusion(m.value("fusion", "intermediate"), "grid.models.fusion");
                const std::string imp = m.value("imputer", "none");
                if (imp == "knn") spec.use_imputer = true;
                else if (imp != "none")
                    throw ConfigError("grid.models.imputer: expected none|knn, got '" + imp + "'");
                cfg.grid.models.push_back(spec);
            }
        }
        cfg.grid.folds = g.value("folds", cfg.grid.folds);
        cfg.grid.val_fraction = g.value("val_fraction", cfg.grid.val_fraction);
        cfg.grid.knn_k = g.value("knn_k", cfg.grid.knn_k);
        try {
            cfg.grid.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("grid: ") + e.what());
        }
    }

    if (j.contains("fusion"))
        cfg.fusion = cfgdetail::parse_fusion(j.at("fusion").get<std::string>(), "fusion");
    if (j.contains("scenario"))
        cfg.scenario = cfgdetail::parse_scenario(j.at("scenario").get<std::string>(), "scenario");
    if (j.contains("train_rate")) cfg.train_rate = cfgdetail::parse_rate(j.at("train_rate"), "train_rate");
    if (j.contains("test_rate")) cfg.test_rate = cfgdetail::parse_rate(j.at("test_rate"), "test_rate");
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("master_seed")) cfg.master_seed = j.at("master_seed").get<uint64_t>();
    if (j.contains("metric")) {
        cfg.metric = j.at("metric").get<std::string>();
        if (cfg.metric != "auc" && cfg.metric != "mcc" && cfg.metric != "both")
            throw ConfigError("metric: expected auc|mcc|both, got '" + cfg.metric + "'");
    }

    // resolved provenance snapshot
    nlohmann::json res;
    res["config_hash"] = cfg.config_hash;
    res["master_seed"] = cfg.master_seed;
    if (cfg.manifest) res["dataset"] = {{"manifest", cfg.manifest->string()}};
    else {
        res["dataset"] = {{"synthesize",
                           {{"seed", cfg.synth->seed},
                            {"n_samples", cfg.synth->n_samples},
                            {"modality_widths", cfg.synth->modality_widths},
                            {"class_count", cfg.synth->class_count},
                            {"signal", cfg.synth->signal},
                            {"categorical_fraction", cfg.synth->categorical_fraction},
                            {"missing_rate", cfg.synth->missing_rate}}}};
    }
    res["model"] = {{"d_embed", cfg.encoder.d_embed},
                    {"heads", cfg.encoder.heads},
                    {"modality_layers", cfg.encoder.modality_layers},
                    {"shared_layers", cfg.encoder.shared_layers},
                    {"ff_width", cfg.encoder.ff_width}};
    res["train"] = {{"optimizer", cfg.train.optimizer},
                    {"learning_rate", cfg.train.learning_rate},
                    {"batch_size", cfg.train.batch_size},
                    {"max_epochs", cfg.train.max_epochs},
                    {"patience", cfg.train.patience},
                    {"apply_prob", cfg.train.regularizer_apply_prob},
                    {"class_weighting", cfg.train.class_weighting}};
    nlohmann::json grid_res;
    grid_res["folds"] = cfg.grid.folds;
    grid_res["val_fraction"] = cfg.grid.val_fraction;
    grid_res["knn_k"] = cfg.grid.knn_k;
    grid_res["train_rates"] = nlohmann::json::array();
    for (const auto& r : cfg.grid.train_rates) grid_res["train_rates"].push_back(r.label());
    grid_res["test_rates"] = nlohmann::json::array();
    for (const auto& r : cfg.grid.test_rates) grid_res["test_rates"].push_back(r.label());
    grid_res["scenarios"] = nlohmann::json::array();
    for (const auto& s : cfg.grid.scenarios) grid_res["scenarios"].push_back(to_string(s));
    grid_res["models"] = nlohmann::json::array();
    for (const auto& m : cfg.grid.models)
        grid_res["models"].push_back({{"fusion", to_string(m.fusion)},
                                      {"imputer", m.use_imputer ? "knn" : "none"}});
    res["grid"] = grid_res;
    res["fusion"] = to_string(cfg.fusion);
    res["scenario"] = to_string(cfg.scenario);
    res["train_rate"] = cfg.train_rate.label();
    res["test_rate"] = cfg.test_rate.label();
    res["metric"] = cfg.metric;
    cfg.resolved = res;
    return cfg;
}

} // namespace maria
