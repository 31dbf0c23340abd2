#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "maria/dataset.hpp"
#include "maria/impute.hpp"
#include "maria/masking.hpp"
#include "maria/metrics.hpp"
#include "maria/model.hpp"
#include "maria/training.hpp"

namespace maria {

struct GridModelSpec {
    FusionMode fusion = FusionMode::intermediate;
    bool use_imputer = false;

    // The intermediate fusion of the unimodal encoders is the full model;
    // the early/late wirings are its single-encoder baselines.
    std::string model_name() const {
        return fusion == FusionMode::intermediate ? "MARIA" : "NAIM";
    }
    std::string fusion_label() const {
        switch (fusion) {
            case FusionMode::early: return "Early";
            case FusionMode::intermediate: return "Intermediate";
            case FusionMode::late: return "Late";
        }
        return "?";
    }
    std::string imputer_label() const { return use_imputer ? "with" : "without"; }
};

struct GridSpec {
    std::vector<Rate> train_rates = {Rate::omega()};
    std::vector<Rate> test_rates = {Rate::omega()};
    std::vector<MissingScenario> scenarios = {MissingScenario::all_missing};
    std::vector<GridModelSpec> models = {GridModelSpec{}};
    size_t folds = 5;
    double val_fraction = 0.2;
    size_t knn_k = 5;

    void validate() const {
        if (train_rates.empty() || test_rates.empty() || scenarios.empty() || models.empty())
            throw std::invalid_argument("grid spec: every axis needs at least one entry");
        if (folds < 2) throw std::invalid_argument("grid spec: folds must be >= 2");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw std::invalid_argument("grid spec: val_fraction must be in [0,1)");
        if (knn_k == 0) throw std::invalid_argument("grid spec: knn_k must be >= 1");
    }
};

struct CellFoldRecord {
    std::string scenario;
    std::string fusion;
    std::string model;
    std::string imputer;
    std::string train_rate;
    std::string test_rate;
    size_t fold = 0;
    double auc_value = std::numeric_limits<double>::quiet_NaN();
    double mcc_value = std::numeric_limits<double>::quiet_NaN();
    std::string status = "ok"; // or "skipped: <reason>"
};

struct ExperimentGrid {
    nlohmann::json provenance; // resolved config + master seed
    std::vector<CellFoldRecord> records;
};

namespace detail {

// Rates at or below the dataset's pre-existing level collapse onto the
// omega cell; rate zero always means "no injection".
inline std::vector<Rate> effective_rates(const std::vector<Rate>& menu, double omega) {
    std::vector<Rate> out;
    std::vector<std::string> seen;
    for (const Rate& r : menu) {
        Rate eff = r;
        if (!r.is_omega && r.value <= omega + 1e-12) eff = Rate::omega();
        const std::string label = eff.label();
        if (std::find(seen.begin(), seen.end(), label) == seen.end()) {
            seen.push_back(label);
            out.push_back(eff);
        }
    }
    return out;
}

struct GridJob {
    MissingScenario scenario;
    GridModelSpec model;
    Rate train_rate;
    Rate test_rate;
    size_t fold = 0;
    size_t ordinal = 0; // stable seed stream id
};

inline CellFoldRecord run_job(const MultimodalDataset& ds, const GridSpec& spec,
                              const EncoderConfig& enc, const TrainConfig& base_train,
                              const FoldSplit& split, const GridJob& job,
                              uint64_t master_seed) {
    CellFoldRecord rec;
    rec.scenario = to_string(job.scenario);
    rec.fusion = job.model.fusion_label();
    rec.model = job.model.model_name();
    rec.imputer = job.model.imputer_label();
    rec.train_rate = job.train_rate.label();
    rec.test_rate = job.test_rate.label();
    rec.fold = job.fold;

    const uint64_t seed_base = mix_seed(master_seed, job.ordinal);
    try {
        std::vector<size_t> train_val = split.train;
        train_val.insert(train_val.end(), split.val.begin(), split.val.end());
        std::sort(train_val.begin(), train_val.end());

        MissingnessPlan train_plan{job.scenario, job.train_rate, mix_seed(seed_base, 1),
                                   MissingnessPlan::Scope::train};
        MissingnessPlan test_plan{job.scenario, job.test_rate, mix_seed(seed_base, 2),
                                  MissingnessPlan::Scope::test};
        MultimodalDataset injected = inject_mcar(ds, train_plan, train_val);
        injected = inject_mcar(injected, test_plan, split.test);

        if (job.model.use_imputer) injected = knn_impute(injected, split.train, spec.knn_k);

        const Preprocessor pre = fit_preprocessor(injected, split.train);
        std::vector<size_t> all(ds.n_samples());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        const MultimodalDataset transformed = apply_preprocessor(pre, injected, all);

        MariaModel model =
            MariaModel::for_dataset(transformed, enc, job.model.fusion, mix_seed(seed_base, 3));
        TrainConfig tcfg = base_train;
        tcfg.seed = mix_seed(seed_base, 4);
        train(model, transformed, split, tcfg);

        std::vector<std::vector<double>> profiles;
        std::vector<int> labels, preds;
        for (size_t i : split.test) {
            profiles.push_back(model.decision_profile(transformed.sample(i)));
            labels.push_back(transformed.labels[i]);
            size_t arg = 0;
            for (size_t c = 1; c < profiles.back().size(); ++c)
                if (profiles.back()[c] > profiles.back()[arg]) arg = c;
            preds.push_back(static_cast<int>(arg));
        }
        rec.auc_value = auc(profiles, labels);
        rec.mcc_value = mcc(preds, labels);
    } catch (const InfeasibleInjectionError& e) {
        rec.status = std::string("skipped: infeasible injection (") + e.what() + ")";
    } catch (const MetricError& e) {
        rec.status = std::string("skipped: metric undefined (") + e.what() + ")";
    }
    return rec;
}

} // namespace detail

// The cross-validated experiment protocol: for every grid cell and fold,
// inject the train-rate plan on train+val and the test-rate plan on test,
// fit preprocessing on the injected training fold, train, and score the
// test fold. Cell axes below the dataset's omega alias to the omega cell.
// Deterministic per master seed regardless of worker count.
inline ExperimentGrid run_grid(const MultimodalDataset& ds, const GridSpec& spec,
                               const EncoderConfig& enc, const TrainConfig& train_cfg,
                               uint64_t master_seed, size_t workers = 1) {
    spec.validate();
    enc.validate();
    train_cfg.validate();

    const auto folds =
        stratified_splits(ds, spec.folds, spec.val_fraction, mix_seed(master_seed, 0x5017ULL));

    std::vector<detail::GridJob> jobs;
    for (MissingScenario scenario : spec.scenarios) {
        const double omega = scenario == MissingScenario::missing_modalities
                                 ? ds.omega_missing_modalities()
                                 : ds.omega_all_missing();
        const auto train_rates = detail::effective_rates(spec.train_rates, omega);
        const auto test_rates = detail::effective_rates(spec.test_rates, omega);
        for (const auto& model : spec.models)
            for (const Rate& tr : train_rates)
                for (const Rate& te : test_rates)
                    for (size_t fold = 0; fold < spec.folds; ++fold) {
                        detail::GridJob job;
                        job.scenario = scenario;
                        job.model = model;
                        job.train_rate = tr;
                        job.test_rate = te;
                        job.fold = fold;
                        job.ordinal = jobs.size();
                        jobs.push_back(job);
                    }
    }

    ExperimentGrid grid;
    grid.records.resize(jobs.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            grid.records[jobs[i].ordinal] = detail::run_job(ds, spec, enc, train_cfg,
                                                            folds[jobs[i].fold], jobs[i],
                                                            master_seed);
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return grid;
}

// ---- record file (one JSON line per cell-fold) ------------------------------

inline void write_grid_records(const ExperimentGrid& grid, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write grid records: " + path.string());
    nlohmann::json prov = grid.provenance;
    prov["type"] = "provenance";
    out << prov.dump() << '\n';
    for (const auto& r : grid.records) {
        nlohmann::json j;
        j["type"] = "record";
        j["scenario"] = r.scenario;
        j["fusion"] = r.fusion;
        j["model"] = r.model;
        j["imputer"] = r.imputer;
        j["train_rate"] = r.train_rate;
        j["test_rate"] = r.test_rate;
        j["fold"] = r.fold;
        if (std::isfinite(r.auc_value)) j["auc"] = r.auc_value;
        if (std::isfinite(r.mcc_value)) j["mcc"] = r.mcc_value;
        j["status"] = r.status;
        out << j.dump() << '\n';
    }
}

inline ExperimentGrid read_grid_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open grid records: " + path.string());
    ExperimentGrid grid;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("grid records line " + std::to_string(line_no) + ": " + e.what());
        }
        const std::string type = j.value("type", "record");
        if (type == "provenance") {
            grid.provenance = j;
            continue;
        }
        CellFoldRecord r;
        r.scenario = j.at("scenario").get<std::string>();
        r.fusion = j.at("fusion").get<std::string>();
        r.model = j.at("model").get<std::string>();
        r.imputer = j.at("imputer").get<std::string>();
        r.train_rate = j.at("train_rate").get<std::string>();
        r.test_rate = j.at("test_rate").get<std::string>();
        r.fold = j.at("fold").get<size_t>();
        if (j.contains("auc") && !j.at("auc").is_null()) r.auc_value = j.at("auc").get<double>();
        if (j.contains("mcc") && !j.at("mcc").is_null()) r.mcc_value = j.at("mcc").get<double>();
        r.status = j.value("status", "ok");
        grid.records.push_back(std::move(r));
    }
    return grid;
}

} // namespace maria
