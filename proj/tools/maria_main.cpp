#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "maria/config.hpp"
#include "maria/grid.hpp"
#include "maria/report.hpp"

namespace fs = std::filesystem;
using namespace maria;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitInfeasible = 4;

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed;
    std::string fusion;
    std::string scenario;
    std::string metric;
    size_t workers = 1;
};

void apply_overrides(RunConfig& cfg, const CommonFlags& flags) {
    if (flags.seed) {
        cfg.master_seed = *flags.seed;
        cfg.resolved["master_seed"] = *flags.seed;
    }
    if (!flags.out_dir.empty()) cfg.output_dir = flags.out_dir;
    if (!flags.fusion.empty()) {
        cfg.fusion = cfgdetail::parse_fusion(flags.fusion, "--fusion");
        cfg.resolved["fusion"] = flags.fusion;
    }
    if (!flags.scenario.empty()) {
        cfg.scenario = cfgdetail::parse_scenario(flags.scenario, "--scenario");
        cfg.resolved["scenario"] = flags.scenario;
    }
    if (!flags.metric.empty()) {
        if (flags.metric != "auc" && flags.metric != "mcc" && flags.metric != "both")
            throw ConfigError("--metric: expected auc|mcc|both");
        cfg.metric = flags.metric;
        cfg.resolved["metric"] = flags.metric;
    }
}

fs::path ensure_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory: " + dir.string());
    return dir;
}

// Shared per-fold pipeline: split, inject, preprocess. Mirrors the grid
// runner so `train` checkpoints and `eval` scores line up.
struct FoldPipeline {
    MultimodalDataset transformed;
    FoldSplit split;
};

FoldPipeline prepare_fold(const RunConfig& cfg, const MultimodalDataset& ds, bool inject_test) {
    const auto folds = stratified_splits(ds, cfg.grid.folds, cfg.grid.val_fraction,
                                         mix_seed(cfg.master_seed, 0x5017ULL));
    const FoldSplit& split = folds[0];
    std::vector<size_t> train_val = split.train;
    train_val.insert(train_val.end(), split.val.begin(), split.val.end());
    std::sort(train_val.begin(), train_val.end());

    MissingnessPlan train_plan{cfg.scenario, cfg.train_rate, mix_seed(cfg.master_seed, 1),
                               MissingnessPlan::Scope::train};
    MultimodalDataset injected = inject_mcar(ds, train_plan, train_val);
    if (inject_test) {
        MissingnessPlan test_plan{cfg.scenario, cfg.test_rate, mix_seed(cfg.master_seed, 2),
                                  MissingnessPlan::Scope::test};
        injected = inject_mcar(injected, test_plan, split.test);
    }
    const Preprocessor pre = fit_preprocessor(injected, split.train);
    std::vector<size_t> all(ds.n_samples());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    return {apply_preprocessor(pre, injected, all), split};
}

int cmd_synth(const CommonFlags& flags) {
    std::ifstream in(flags.config_path);
    if (!in) throw ConfigError("cannot open config: " + flags.config_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    SynthSpec spec;
    if (j.contains("dataset") && j.at("dataset").contains("synthesize"))
        spec = cfgdetail::parse_synth(j.at("dataset").at("synthesize"));
    else
        spec = cfgdetail::parse_synth(j);
    if (flags.seed) spec.seed = *flags.seed;
    if (flags.out_dir.empty()) throw ConfigError("synth: --out directory required");

    const fs::path dir = ensure_out_dir(flags.out_dir);
    MultimodalDataset ds = synthesize_dataset(spec);
    const fs::path manifest = write_dataset(ds, dir);
    std::cout << "wrote dataset: " << manifest.string() << "\n"
              << "samples: " << ds.n_samples() << ", modalities: " << ds.n_modalities()
              << ", classes: " << ds.n_classes() << "\n";
    return kExitOk;
}

int cmd_train(const CommonFlags& flags) {
    RunConfig cfg = load_run_config(flags.config_path);
    apply_overrides(cfg, flags);
    const fs::path dir = ensure_out_dir(cfg.output_dir);

    MultimodalDataset ds = cfg.load_or_synthesize_dataset();
    FoldPipeline fold = prepare_fold(cfg, ds, /*inject_test=*/false);

    MariaModel model = MariaModel::for_dataset(fold.transformed, cfg.encoder, cfg.fusion,
                                               mix_seed(cfg.master_seed, 3));
    TrainConfig tcfg = cfg.train;
    tcfg.seed = mix_seed(cfg.master_seed, 4);
    TrainReport report = train(model, fold.transformed, fold.split, tcfg);

    const fs::path ckpt = dir / "checkpoint.bin";
    model.save(ckpt, cfg.resolved);
    nlohmann::json rj = report.to_json();
    rj["config"] = cfg.resolved;
    {
        std::ofstream out(dir / "train_report.json");
        out << rj.dump(2) << '\n';
    }
    const EpochStats best = report.epochs.empty()
                                ? EpochStats{}
                                : report.epochs[std::min(report.best_epoch,
                                                         report.epochs.size() - 1)];
    std::cout << "checkpoint: " << ckpt.string() << "\n"
              << "report: " << (dir / "train_report.json").string() << "\n"
              << "epochs: " << report.epochs.size() << ", best epoch: " << report.best_epoch + 1
              << ", val loss: " << best.val_loss << ", val accuracy: " << best.val_accuracy
              << "\n";
    return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint) {
    RunConfig cfg = load_run_config(flags.config_path);
    apply_overrides(cfg, flags);
    const fs::path dir = ensure_out_dir(cfg.output_dir);

    MariaModel model = MariaModel::load(checkpoint);
    MultimodalDataset ds = cfg.load_or_synthesize_dataset();
    FoldPipeline fold = prepare_fold(cfg, ds, /*inject_test=*/true);

    std::vector<std::vector<double>> profiles;
    std::vector<int> labels, preds;
    for (size_t i : fold.split.test) {
        profiles.push_back(model.decision_profile(fold.transformed.sample(i)));
        labels.push_back(fold.transformed.labels[i]);
        size_t arg = 0;
        for (size_t c = 1; c < profiles.back().size(); ++c)
            if (profiles.back()[c] > profiles.back()[arg]) arg = c;
        preds.push_back(static_cast<int>(arg));
    }
    const double auc_v = auc(profiles, labels);
    const double mcc_v = mcc(preds, labels);

    nlohmann::json ej;
    ej["auc"] = auc_v;
    ej["mcc"] = mcc_v;
    ej["test_samples"] = fold.split.test.size();
    ej["checkpoint"] = checkpoint;
    ej["config"] = cfg.resolved;
    {
        std::ofstream out(dir / "eval.json");
        out << ej.dump(2) << '\n';
    }
    std::cout << "test samples: " << fold.split.test.size() << "\n"
              << "auc: " << ReportTable::format_value(auc_v) << "\n"
              << "mcc: " << ReportTable::format_value(mcc_v) << "\n"
              << "written: " << (dir / "eval.json").string() << "\n";
    return kExitOk;
}

void write_tables(const ExperimentGrid& grid, const std::string& metric_selection,
                  const fs::path& dir, bool echo_first) {
    const auto tables = build_report_tables(grid, metric_selection);
    std::string provenance_header;
    {
        std::ostringstream os;
        os << "# master_seed: "
           << (grid.provenance.contains("master_seed") ? grid.provenance.at("master_seed").dump()
                                                       : "?")
           << "\n";
        if (grid.provenance.contains("config_hash"))
            os << "# config_hash: " << grid.provenance.at("config_hash").get<std::string>()
               << "\n";
        provenance_header = os.str();
    }
    bool first = true;
    for (const auto& table : tables) {
        const std::string base = "report_" + table.metric + "_" + table.scenario;
        {
            std::ofstream out(dir / (base + ".txt"));
            out << provenance_header << table.to_text();
        }
        {
            std::ofstream out(dir / (base + ".csv"));
            out << provenance_header << table.to_csv();
        }
        std::cout << "table: " << (dir / (base + ".txt")).string() << "\n";
        if (echo_first && first) std::cout << "\n" << table.to_text() << "\n";
        first = false;
    }
}

int cmd_grid(const CommonFlags& flags) {
    RunConfig cfg = load_run_config(flags.config_path);
    apply_overrides(cfg, flags);
    if (!flags.scenario.empty())
        cfg.grid.scenarios = {cfgdetail::parse_scenario(flags.scenario, "--scenario")};
    if (!flags.fusion.empty()) {
        const FusionMode wanted = cfgdetail::parse_fusion(flags.fusion, "--fusion");
        std::vector<GridModelSpec> kept;
        for (const auto& m : cfg.grid.models)
            if (m.fusion == wanted) kept.push_back(m);
        if (kept.empty()) kept.push_back(GridModelSpec{wanted, false});
        cfg.grid.models = kept;
    }
    const fs::path dir = ensure_out_dir(cfg.output_dir);

    MultimodalDataset ds = cfg.load_or_synthesize_dataset();
    ExperimentGrid grid =
        run_grid(ds, cfg.grid, cfg.encoder, cfg.train, cfg.master_seed, flags.workers);
    grid.provenance = cfg.resolved;
    grid.provenance["command"] = "grid";

    const fs::path records = dir / "grid_records.jsonl";
    write_grid_records(grid, records);
    size_t ok = 0, skipped = 0;
    for (const auto& r : grid.records) (r.status == "ok" ? ok : skipped)++;
    std::cout << "records: " << records.string() << " (" << ok << " ok, " << skipped
              << " skipped)\n";
    write_tables(grid, cfg.metric, dir, /*echo_first=*/false);
    return kExitOk;
}

int cmd_report(const std::string& records_path, const CommonFlags& flags) {
    ExperimentGrid grid = read_grid_records(records_path);
    const std::string metric = flags.metric.empty() ? "both" : flags.metric;
    if (metric != "auc" && metric != "mcc" && metric != "both")
        throw ConfigError("--metric: expected auc|mcc|both");
    const fs::path dir = ensure_out_dir(
        flags.out_dir.empty() ? fs::path(records_path).parent_path() : fs::path(flags.out_dir));
    write_tables(grid, metric, dir, /*echo_first=*/true);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MARIA: multimodal masked-attention learning on incomplete tabular data"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string checkpoint, records_path;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", flags.config_path, "experiment config (JSON)")->required();
        cmd->add_option("--seed", flags.seed, "master seed override");
        cmd->add_option("--out", flags.out_dir, "output directory");
    };

    CLI::App* synth = app.add_subcommand("synth", "synthesize a dataset and write its manifest");
    add_common(synth);

    CLI::App* train_cmd = app.add_subcommand("train", "train one model on fold 0");
    add_common(train_cmd);
    train_cmd->add_option("--fusion", flags.fusion, "intermediate|early|late");
    train_cmd->add_option("--scenario", flags.scenario, "missing_modalities|all_missing");

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the test fold");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--fusion", flags.fusion, "intermediate|early|late");
    eval_cmd->add_option("--scenario", flags.scenario, "missing_modalities|all_missing");
    eval_cmd->add_option("--metric", flags.metric, "auc|mcc|both");

    CLI::App* grid_cmd = app.add_subcommand("grid", "run the cross-validated experiment grid");
    add_common(grid_cmd);
    grid_cmd->add_option("--workers", flags.workers, "parallel (cell, fold) jobs");
    grid_cmd->add_option("--metric", flags.metric, "auc|mcc|both");
    grid_cmd->add_option("--scenario", flags.scenario, "restrict to one scenario");
    grid_cmd->add_option("--fusion", flags.fusion, "restrict to one fusion mode");

    CLI::App* report_cmd = app.add_subcommand("report", "emit tables from a grid record file");
    report_cmd->add_option("--records", records_path, "grid_records.jsonl")->required();
    report_cmd->add_option("--metric", flags.metric, "auc|mcc|both");
    report_cmd->add_option("--out", flags.out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (synth->parsed()) return cmd_synth(flags);
        if (train_cmd->parsed()) return cmd_train(flags);
        if (eval_cmd->parsed()) return cmd_eval(flags, checkpoint);
        if (grid_cmd->parsed()) return cmd_grid(flags);
        if (report_cmd->parsed()) return cmd_report(records_path, flags);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const InfeasibleInjectionError& e) {
        std::cerr << "infeasible injection: " << e.what() << "\n";
        return kExitInfeasible;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
