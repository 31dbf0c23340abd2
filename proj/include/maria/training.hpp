#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maria/dataset.hpp"
#include "maria/masking.hpp"
#include "maria/model.hpp"
#include "maria/tensor.hpp"

namespace maria {

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
    std::string optimizer = "adam";
    double learning_rate = 1e-3;
    size_t batch_size = 64;
    size_t max_epochs = 300;
    size_t patience = 25;
    uint64_t seed = 0;
    double regularizer_apply_prob = 0.5;
    bool class_weighting = false;

    void validate() const {
        if (optimizer != "adam")
            throw std::invalid_argument("unsupported optimizer '" + optimizer + "'");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("learning_rate must be positive");
        if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
        if (max_epochs == 0) throw std::invalid_argument("max_epochs must be positive");
        if (patience > max_epochs)
            throw std::invalid_argument("patience must not exceed max_epochs");
        if (regularizer_apply_prob < 0.0 || regularizer_apply_prob > 1.0)
            throw std::invalid_argument("regularizer apply_prob must be in [0,1]");
    }
};

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    size_t best_epoch = 0; // index into epochs
    double wall_seconds = 0.0;
    std::vector<TrainReport> members; // late fusion: one per modality network

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["best_epoch"] = best_epoch;
        j["wall_seconds"] = wall_seconds;
        j["epochs"] = nlohmann::json::array();
        for (const auto& e : epochs)
            j["epochs"].push_back({{"train_loss", e.train_loss},
                                   {"val_loss", e.val_loss},
                                   {"val_accuracy", e.val_accuracy}});
        if (!members.empty()) {
            j["members"] = nlohmann::json::array();
            for (const auto& m : members) j["members"].push_back(m.to_json());
        }
        return j;
    }
};

// ---- optimizer -------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    size_t step = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<std::pair<std::string, Tensor>>& params) {
        step = 0;
        m.assign(params.size(), {});
        v.assign(params.size(), {});
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].second.numel(), 0.0);
            v[i].assign(params[i].second.numel(), 0.0);
        }
    }
};

// Bias-corrected Adam over the parameter grads; a parameter with no grad
// this step is treated as zero gradient.
inline void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                      double lr) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].second;
        auto& vals = t.values();
        const bool has = t.has_grad();
        for (size_t j = 0; j < vals.size(); ++j) {
            const double g = has ? t.grad()[j] : 0.0;
            state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
            state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
            const double mhat = state.m[i][j] / bc1;
            const double vhat = state.v[i][j] / bc2;
            vals[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

// ---- training loop ----------------------------------------------------------

namespace detail {

inline std::vector<double> class_weights_for(const MultimodalDataset& ds,
                                             const std::vector<size_t>& train_idx) {
    std::vector<double> counts(ds.n_classes(), 0.0);
    for (size_t i : train_idx) counts[ds.labels[i]] += 1.0;
    std::vector<double> w(ds.n_classes(), 1.0);
    const double n = static_cast<double>(train_idx.size());
    for (size_t c = 0; c < counts.size(); ++c)
        w[c] = counts[c] > 0.0 ? n / (static_cast<double>(counts.size()) * counts[c]) : 0.0;
    return w;
}

struct MemberView {
    // -1: whole model (intermediate / early); otherwise late-fusion member
    long long member = -1;

    bool usable(const MultimodalDataset& ds, size_t idx) const {
        if (member < 0) return ds.observed_features_of(idx) > 0;
        return ds.modalities[static_cast<size_t>(member)].present_in_sample(idx);
    }

    Tensor forward(const MariaModel& model, const Sample& s) const {
        return member < 0 ? model.forward(s)
                          : model.member_forward(static_cast<size_t>(member), s);
    }

    // Per-batch regularization: the full dropout pipeline for the whole
    // model; feature dropout on the member's own modality for a late member
    // (modality dropout is a no-op on unimodal input and must not erase the
    // member's only modality).
    Sample augment(Sample s, double prob, Rng& rng) const {
        if (member < 0) return apply_dropout_regularizers(std::move(s), prob, rng);
        auto& cells = s.modality_cells[static_cast<size_t>(member)];
        cells = feature_dropout(std::move(cells), prob, rng);
        return s;
    }
};

inline TrainReport train_member(MariaModel& model, const MultimodalDataset& ds,
                                const FoldSplit& split, const TrainConfig& cfg,
                                const MemberView& view) {
    const auto t0 = std::chrono::steady_clock::now();
    auto params = view.member < 0 ? model.parameters()
                                  : model.member_parameters(static_cast<size_t>(view.member));

    std::vector<size_t> train_idx, val_idx;
    for (size_t i : split.train)
        if (view.usable(ds, i)) train_idx.push_back(i);
    for (size_t i : split.val)
        if (view.usable(ds, i)) val_idx.push_back(i);
    if (train_idx.empty()) throw DataError("train: no usable training samples");

    const std::vector<double> weights =
        cfg.class_weighting ? class_weights_for(ds, train_idx) : std::vector<double>{};

    AdamState adam;
    adam.init(params);
    Rng rng(cfg.seed);

    TrainReport report;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    size_t since_best = 0;

    auto snapshot = [&]() {
        best_params.clear();
        for (auto& [name, t] : params) best_params.push_back(t.values());
    };
    auto evaluate = [&](const std::vector<size_t>& idx, double& loss_out, double& acc_out) {
        NoGrad guard;
        double loss_sum = 0.0, weight_sum = 0.0;
        size_t correct = 0;
        for (size_t i : idx) {
            const Sample s = ds.sample(i);
            Tensor logits = view.forward(model, s);
            const double w = weights.empty() ? 1.0 : weights[s.label];
            loss_sum += w * cross_entropy(logits, {s.label}).scalar();
            weight_sum += w;
            size_t arg = 0;
            for (size_t c = 1; c < logits.numel(); ++c)
                if (logits.values()[c] > logits.values()[arg]) arg = c;
            if (static_cast<int>(arg) == s.label) ++correct;
        }
        loss_out = loss_sum / std::max(1e-12, weight_sum);
        acc_out = idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(idx.size());
    };

    for (size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng shuffle_rng = rng.fork(2 * epoch);
        Rng dropout_rng = rng.fork(2 * epoch + 1);
        std::vector<size_t> order = train_idx;
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        size_t seen = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            for (auto& [name, t] : params) t.zero_grad();
            std::vector<Tensor> rows;
            std::vector<int> targets;
            rows.reserve(end - start);
            for (size_t bi = start; bi < end; ++bi) {
                Sample s = view.augment(ds.sample(order[bi]), cfg.regularizer_apply_prob,
                                        dropout_rng);
                rows.push_back(view.forward(model, s));
                targets.push_back(s.label);
            }
            Tensor loss = cross_entropy(concat_rows(rows), targets, weights);
            const double loss_v = loss.scalar();
            if (!std::isfinite(loss_v))
                throw DivergenceError("non-finite training loss at epoch " +
                                      std::to_string(epoch + 1) + ", batch starting " +
                                      std::to_string(start));
            backward(loss);
            adam_step(params, adam, cfg.learning_rate);
            epoch_loss += loss_v * static_cast<double>(end - start);
            seen += end - start;
        }

        EpochStats stats;
        stats.train_loss = epoch_loss / static_cast<double>(seen);
        if (!val_idx.empty()) {
            evaluate(val_idx, stats.val_loss, stats.val_accuracy);
        } else {
            stats.val_loss = stats.train_loss;
            stats.val_accuracy = 0.0;
        }
        report.epochs.push_back(stats);

        if (stats.val_loss < best_val) {
            best_val = stats.val_loss;
            report.best_epoch = report.epochs.size() - 1;
            since_best = 0;
            snapshot();
        } else {
            ++since_best;
            if (since_best > cfg.patience) break;
        }
    }

    if (!best_params.empty())
        for (size_t i = 0; i < params.size(); ++i) params[i].second.values() = best_params[i];

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace detail

// Optimizes the model on the split's training indices with the dropout
// regularizers applied to per-batch sample copies, validation-loss early
// stopping, and best-epoch parameter restore. The source dataset is never
// mutated. Late fusion trains each modality network independently on the
// samples where its modality is present.
inline TrainReport train(MariaModel& model, const MultimodalDataset& ds, const FoldSplit& split,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (model.fusion() != FusionMode::late) {
        detail::MemberView view;
        return detail::train_member(model, ds, split, cfg, view);
    }
    TrainReport report;
    const auto t0 = std::chrono::steady_clock::now();
    for (size_t m = 0; m < model.n_members(); ++m) {
        detail::MemberView view;
        view.member = static_cast<long long>(m);
        TrainConfig member_cfg = cfg;
        member_cfg.seed = mix_seed(cfg.seed, 0xfeed0000ULL + m);
        report.members.push_back(detail::train_member(model, ds, split, member_cfg, view));
    }
    for (const auto& m : report.members)
        report.best_epoch = std::max(report.best_epoch, m.best_epoch);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace maria
