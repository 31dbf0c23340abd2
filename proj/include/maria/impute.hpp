#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "maria/dataset.hpp"

namespace maria {

namespace detail {

// Distances run in preprocessed space: min-max scaled numericals and
// one-hot categoricals, over mutually observed features, normalized by the
// shared-feature count.
struct ImputeSpace {
    const MultimodalDataset& ds;
    Preprocessor pre;

    explicit ImputeSpace(const MultimodalDataset& dataset, const std::vector<size_t>& train)
        : ds(dataset), pre(fit_preprocessor(dataset, train)) {}

    double distance(size_t a, size_t b) const {
        double acc = 0.0;
        size_t shared = 0;
        for (size_t m = 0; m < ds.n_modalities(); ++m) {
            const Modality& mod = ds.modalities[m];
            for (size_t f = 0; f < mod.width(); ++f) {
                const Cell& ca = mod.at(a, f);
                const Cell& cb = mod.at(b, f);
                if (!ca.observed || !cb.observed) continue;
                ++shared;
                if (mod.schema[f].kind == FeatureKind::numerical) {
                    const double va = pre.transform_value(m, f, ca.num);
                    const double vb = pre.transform_value(m, f, cb.num);
                    acc += (va - vb) * (va - vb);
                } else if (ca.cat != cb.cat) {
                    acc += 2.0; // squared one-hot distance between two categories
                }
            }
        }
        if (shared == 0) return std::numeric_limits<double>::infinity();
        return std::sqrt(acc / static_cast<double>(shared));
    }
};

} // namespace detail

// Fills every missing cell with the mean (numerical) or mode (categorical)
// over the k nearest training samples under the mutual-observed distance;
// a sample with no finite-distance neighbor falls back to the training
// column mean/mode. Fitted strictly on the training fold.
inline MultimodalDataset knn_impute(const MultimodalDataset& ds,
                                    const std::vector<size_t>& train_indices, size_t k) {
    if (k == 0) throw DataError("knn_impute: k must be >= 1");
    if (train_indices.empty()) throw DataError("knn_impute: empty training index set");
    const detail::ImputeSpace space(ds, train_indices);
    MultimodalDataset out = ds;

    // column fallbacks from the training fold
    struct ColumnStats {
        bool has = false;
        double mean = 0.0;
        int mode = -1;
    };
    std::vector<std::vector<ColumnStats>> fallback(ds.n_modalities());
    for (size_t m = 0; m < ds.n_modalities(); ++m) {
        const Modality& mod = ds.modalities[m];
        fallback[m].resize(mod.width());
        for (size_t f = 0; f < mod.width(); ++f) {
            ColumnStats st;
            if (mod.schema[f].kind == FeatureKind::numerical) {
                double sum = 0.0;
                size_t n = 0;
                for (size_t i : train_indices)
                    if (mod.at(i, f).observed) {
                        sum += mod.at(i, f).num;
                        ++n;
                    }
                if (n > 0) {
                    st.has = true;
                    st.mean = sum / static_cast<double>(n);
                }
            } else {
                std::vector<size_t> counts(mod.schema[f].categories.size() + 1, 0);
                for (size_t i : train_indices) {
                    const Cell& c = mod.at(i, f);
                    if (c.observed && c.cat >= 0 && static_cast<size_t>(c.cat) < counts.size())
                        counts[static_cast<size_t>(c.cat)]++;
                }
                size_t best = 0;
                for (size_t c = 1; c < counts.size(); ++c)
                    if (counts[c] > counts[best]) best = c;
                if (counts[best] > 0) {
                    st.has = true;
                    st.mode = static_cast<int>(best);
                }
            }
            fallback[m][f] = st;
        }
    }

    for (size_t i = 0; i < ds.n_samples(); ++i) {
        // neighbor order by (distance, index): deterministic under ties
        std::vector<std::pair<double, size_t>> ranked;
        for (size_t j : train_indices) {
            if (j == i) continue;
            const double d = space.distance(i, j);
            if (std::isfinite(d)) ranked.emplace_back(d, j);
        }
        std::sort(ranked.begin(), ranked.end());

        for (size_t m = 0; m < ds.n_modalities(); ++m) {
            Modality& mod = out.modalities[m];
            for (size_t f = 0; f < mod.width(); ++f) {
                if (mod.at(i, f).observed) continue;
                const bool numerical = mod.schema[f].kind == FeatureKind::numerical;
                std::vector<size_t> donors;
                for (const auto& [d, j] : ranked) {
                    if (!ds.modalities[m].at(j, f).observed) continue;
                    donors.push_back(j);
                    if (donors.size() == k) break;
                }
                if (donors.empty()) {
                    const ColumnStats& st = fallback[m][f];
                    if (!st.has) continue; // nothing known about this column at all
                    mod.at(i, f) = numerical ? Cell::numeric(st.mean) : Cell::category(st.mode);
                    continue;
                }
                if (numerical) {
                    double sum = 0.0;
                    for (size_t j : donors) sum += ds.modalities[m].at(j, f).num;
                    mod.at(i, f) = Cell::numeric(sum / static_cast<double>(donors.size()));
                } else {
                    std::vector<size_t> counts(mod.schema[f].categories.size() + 1, 0);
                    for (size_t j : donors)
                        counts[static_cast<size_t>(ds.modalities[m].at(j, f).cat)]++;
                    size_t best = 0;
                    for (size_t c = 1; c < counts.size(); ++c)
                        if (counts[c] > counts[best]) best = c; // tie: smallest index wins
                    mod.at(i, f) = Cell::category(static_cast<int>(best));
                }
            }
        }
    }
    return out;
}

} // namespace maria
