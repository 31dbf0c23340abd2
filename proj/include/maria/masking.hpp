#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "maria/dataset.hpp"
#include "maria/rng.hpp"

namespace maria {

struct InfeasibleInjectionError : std::runtime_error {
    explicit InfeasibleInjectionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Per-token observed flags for one modality, or for the concatenated
// shared token sequence.
using ObservedVector = std::vector<uint8_t>;

inline ObservedVector observed_vector(const std::vector<Cell>& cells) {
    ObservedVector out(cells.size());
    for (size_t i = 0; i < cells.size(); ++i) out[i] = cells[i].observed ? 1 : 0;
    return out;
}

inline ObservedVector concat_observed(const std::vector<ObservedVector>& parts) {
    ObservedVector out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

// Additive attention mask: column j is -inf on every row iff token j is
// unobserved, 0 otherwise. Its transpose therefore has row k all -inf iff
// token k is unobserved.
struct MaskMatrix {
    size_t t = 0;
    ObservedVector observed;
    std::vector<double> additive; // t x t, row-major

    std::vector<double> additive_transposed() const {
        std::vector<double> out(t * t);
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j < t; ++j) out[j * t + i] = additive[i * t + j];
        return out;
    }
};

inline MaskMatrix build_mask(const ObservedVector& obs) {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    MaskMatrix m;
    m.t = obs.size();
    m.observed = obs;
    m.additive.assign(m.t * m.t, 0.0);
    for (size_t j = 0; j < m.t; ++j)
        if (!obs[j])
            for (size_t i = 0; i < m.t; ++i) m.additive[i * m.t + j] = neg_inf;
    return m;
}

// ---- MCAR injection (experiment protocol) ---------------------------------

enum class MissingScenario { missing_modalities, all_missing };

inline std::string to_string(MissingScenario s) {
    return s == MissingScenario::missing_modalities ? "missing_modalities" : "all_missing";
}

// A missing rate from the experiment menu; "omega" stands for the dataset's
// own pre-existing rate, i.e. no injection.
struct Rate {
    bool is_omega = true;
    double value = 0.0;

    static Rate omega() { return {}; }
    static Rate of(double v) { return {false, v}; }

    std::string label() const {
        if (is_omega) return "omega";
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.2f", value);
        return buf;
    }
};

struct MissingnessPlan {
    MissingScenario scenario = MissingScenario::all_missing;
    Rate rate;
    uint64_t seed = 0;
    enum class Scope { train, test } scope = Scope::train;
};

namespace detail {

struct InjectionGrid {
    size_t rows = 0;  // samples in scope
    size_t width = 0; // modalities or features, per scenario
    std::vector<uint8_t> missing;  // current pattern
    std::vector<uint8_t> injected; // cells masked by this run

    bool row_full(size_t r) const {
        for (size_t c = 0; c < width; ++c)
            if (!missing[r * width + c]) return false;
        return true;
    }
    bool col_full(size_t c) const {
        for (size_t r = 0; r < rows; ++r)
            if (!missing[r * width + c]) return false;
        return true;
    }
    size_t row_free(size_t r) const {
        size_t n = 0;
        for (size_t c = 0; c < width; ++c)
            if (!missing[r * width + c]) ++n;
        return n;
    }
    size_t col_free(size_t c) const {
        size_t n = 0;
        for (size_t r = 0; r < rows; ++r)
            if (!missing[r * width + c]) ++n;
        return n;
    }
};

// Masks one grid cell in the dataset copy.
inline void apply_grid_mask(MultimodalDataset& ds, MissingScenario scenario,
                            const std::vector<size_t>& scope_rows, size_t r, size_t c) {
    const size_t sample = scope_rows[r];
    if (scenario == MissingScenario::missing_modalities) {
        Modality& mod = ds.modalities[c];
        for (size_t f = 0; f < mod.width(); ++f) mod.at(sample, f) = Cell::missing();
    } else {
        size_t flat = c;
        for (auto& mod : ds.modalities) {
            if (flat < mod.width()) {
                mod.at(sample, flat) = Cell::missing();
                return;
            }
            flat -= mod.width();
        }
    }
}

// Restores one previously injected grid cell from the original dataset.
inline void restore_grid_cell(MultimodalDataset& ds, const MultimodalDataset& original,
                              MissingScenario scenario, const std::vector<size_t>& scope_rows,
                              size_t r, size_t c) {
    const size_t sample = scope_rows[r];
    if (scenario == MissingScenario::missing_modalities) {
        Modality& mod = ds.modalities[c];
        const Modality& orig = original.modalities[c];
        for (size_t f = 0; f < mod.width(); ++f) mod.at(sample, f) = orig.at(sample, f);
    } else {
        size_t flat = c;
        for (size_t m = 0; m < ds.modalities.size(); ++m) {
            Modality& mod = ds.modalities[m];
            if (flat < mod.width()) {
                mod.at(sample, flat) = original.modalities[m].at(sample, flat);
                return;
            }
            flat -= mod.width();
        }
    }
}

} // namespace detail

// MCAR injection over the scope rows: masks ceil(N * width * p - sum_j m_j)
// grid cells (clamped at 0), counting pre-existing missingness in the same
// units, then guarantees no fully masked grid row or column by swapping an
// injected cell with a uniformly chosen donor. Deterministic per plan seed;
// never unmasks pre-existing cells, never touches labels.
inline MultimodalDataset inject_mcar(const MultimodalDataset& ds, const MissingnessPlan& plan,
                                     std::vector<size_t> scope_rows = {}) {
    MultimodalDataset out = ds;
    if (plan.rate.is_omega) return out; // dataset's own rate: nothing to add
    const double p = plan.rate.value;
    if (p < 0.0 || p >= 1.0)
        throw InfeasibleInjectionError("missing rate must be in [0,1), got " +
                                       std::to_string(p));

    if (scope_rows.empty()) {
        scope_rows.resize(ds.n_samples());
        for (size_t i = 0; i < scope_rows.size(); ++i) scope_rows[i] = i;
    }

    detail::InjectionGrid grid;
    grid.rows = scope_rows.size();
    grid.width = plan.scenario == MissingScenario::missing_modalities ? ds.n_modalities()
                                                                      : ds.total_features();
    grid.missing.assign(grid.rows * grid.width, 0);
    grid.injected.assign(grid.rows * grid.width, 0);
    for (size_t r = 0; r < grid.rows; ++r) {
        const size_t sample = scope_rows[r];
        if (plan.scenario == MissingScenario::missing_modalities) {
            for (size_t m = 0; m < ds.n_modalities(); ++m)
                grid.missing[r * grid.width + m] =
                    ds.modalities[m].present_in_sample(sample) ? 0 : 1;
        } else {
            size_t c = 0;
            for (const auto& mod : ds.modalities)
                for (size_t f = 0; f < mod.width(); ++f, ++c)
                    grid.missing[r * grid.width + c] = mod.at(sample, f).observed ? 0 : 1;
        }
    }

    size_t pre_missing = 0;
    for (uint8_t v : grid.missing) pre_missing += v;

    const double raw_target = static_cast<double>(grid.rows) * static_cast<double>(grid.width) * p -
                              static_cast<double>(pre_missing);
    // epsilon guards ceil against float noise on exact integers
    const long long target = std::max<long long>(
        0, static_cast<long long>(std::ceil(raw_target - 1e-9)));
    if (target == 0) return out;

    const size_t total_after = pre_missing + static_cast<size_t>(target);
    const size_t cell_count = grid.rows * grid.width;
    if (total_after > cell_count - std::max(grid.rows, grid.width))
        throw InfeasibleInjectionError(
            "cannot mask " + std::to_string(target) + " cells of a " + std::to_string(grid.rows) +
            "x" + std::to_string(grid.width) + " grid with " + std::to_string(pre_missing) +
            " pre-existing missing cells while keeping every row and column partially observed");

    Rng rng(plan.seed);
    std::vector<size_t> candidates;
    candidates.reserve(cell_count - pre_missing);
    for (size_t i = 0; i < cell_count; ++i)
        if (!grid.missing[i]) candidates.push_back(i);
    // partial Fisher-Yates: the first `target` entries are the masked cells
    for (size_t i = 0; i < static_cast<size_t>(target); ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
        grid.missing[candidates[i]] = 1;
        grid.injected[candidates[i]] = 1;
    }

    // Repair pass: a fully masked line must contain at least one injected
    // cell (pre-existing rows always keep an observation; fully missing
    // pre-existing columns are left as found since injection never unmasks).
    auto pick_injected_in_row = [&](size_t r) -> long long {
        std::vector<size_t> own;
        for (size_t c = 0; c < grid.width; ++c)
            if (grid.injected[r * grid.width + c]) own.push_back(c);
        if (own.empty()) return -1;
        return static_cast<long long>(own[rng.below(own.size())]);
    };
    auto pick_injected_in_col = [&](size_t c) -> long long {
        std::vector<size_t> own;
        for (size_t r = 0; r < grid.rows; ++r)
            if (grid.injected[r * grid.width + c]) own.push_back(r);
        if (own.empty()) return -1;
        return static_cast<long long>(own[rng.below(own.size())]);
    };
    auto pick_donor = [&](size_t avoid_row, size_t avoid_col) -> long long {
        std::vector<size_t> donors;
        for (size_t r = 0; r < grid.rows; ++r)
            for (size_t c = 0; c < grid.width; ++c) {
                if (r == avoid_row && c == avoid_col) continue;
                if (grid.missing[r * grid.width + c]) continue;
                if (grid.row_free(r) < 2 || grid.col_free(c) < 2) continue;
                donors.push_back(r * grid.width + c);
            }
        if (donors.empty()) return -1;
        return static_cast<long long>(donors[rng.below(donors.size())]);
    };

    size_t guard = 0;
    const size_t guard_limit = 4 * cell_count + 16;
    bool dirty = true;
    while (dirty) {
        if (++guard > guard_limit)
            throw InfeasibleInjectionError("row/column repair did not converge");
        dirty = false;
        for (size_t r = 0; r < grid.rows; ++r) {
            if (!grid.row_full(r)) continue;
            const long long c = pick_injected_in_row(r);
            if (c < 0) continue; // fully missing before injection
            grid.missing[r * grid.width + static_cast<size_t>(c)] = 0;
            grid.injected[r * grid.width + static_cast<size_t>(c)] = 0;
            const long long donor = pick_donor(r, static_cast<size_t>(c));
            if (donor < 0)
                throw InfeasibleInjectionError("no donor cell available while repairing row " +
                                               std::to_string(r));
            grid.missing[static_cast<size_t>(donor)] = 1;
            grid.injected[static_cast<size_t>(donor)] = 1;
            dirty = true;
        }
        for (size_t c = 0; c < grid.width; ++c) {
            if (!grid.col_full(c)) continue;
            const long long r = pick_injected_in_col(c);
            if (r < 0) continue;
            grid.missing[static_cast<size_t>(r) * grid.width + c] = 0;
            grid.injected[static_cast<size_t>(r) * grid.width + c] = 0;
            const long long donor = pick_donor(static_cast<size_t>(r), c);
            if (donor < 0)
                throw InfeasibleInjectionError("no donor cell available while repairing column " +
                                               std::to_string(c));
            grid.missing[static_cast<size_t>(donor)] = 1;
            grid.injected[static_cast<size_t>(donor)] = 1;
            dirty = true;
        }
    }

    for (size_t r = 0; r < grid.rows; ++r)
        for (size_t c = 0; c < grid.width; ++c)
            if (grid.injected[r * grid.width + c])
                detail::apply_grid_mask(out, plan.scenario, scope_rows, r, c);
    return out;
}

// Count of cells inject_mcar will mask for this scope (clamped target).
inline size_t mcar_target_count(const MultimodalDataset& ds, const MissingnessPlan& plan,
                                const std::vector<size_t>& scope_rows) {
    if (plan.rate.is_omega) return 0;
    const size_t width = plan.scenario == MissingScenario::missing_modalities
                             ? ds.n_modalities()
                             : ds.total_features();
    size_t pre = 0;
    for (size_t sample : scope_rows) {
        if (plan.scenario == MissingScenario::missing_modalities) {
            for (size_t m = 0; m < ds.n_modalities(); ++m)
                if (!ds.modalities[m].present_in_sample(sample)) ++pre;
        } else {
            for (const auto& mod : ds.modalities)
                for (size_t f = 0; f < mod.width(); ++f)
                    if (!mod.at(sample, f).observed) ++pre;
        }
    }
    const double raw = static_cast<double>(scope_rows.size()) * static_cast<double>(width) *
                           plan.rate.value -
                       static_cast<double>(pre);
    return static_cast<size_t>(
        std::max<long long>(0, static_cast<long long>(std::ceil(raw - 1e-9))));
}

// ---- training-time dropout regularizers -----------------------------------

// With probability apply_prob, masks c_m ~ U{1..v_m-1} of the sample's v_m
// observed modalities; a single-modality sample is untouched, so at least
// one modality always survives.
inline Sample modality_dropout(Sample sample, double apply_prob, Rng& rng) {
    std::vector<size_t> present;
    for (size_t m = 0; m < sample.modality_cells.size(); ++m)
        if (std::any_of(sample.modality_cells[m].begin(), sample.modality_cells[m].end(),
                        [](const Cell& c) { return c.observed; }))
            present.push_back(m);
    const size_t v = present.size();
    if (v <= 1) return sample; // choice set {1..v-1} is empty
    if (!rng.bernoulli(apply_prob)) return sample;
    const size_t count = 1 + static_cast<size_t>(rng.below(v - 1));
    for (size_t i = 0; i < count; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(v - i));
        std::swap(present[i], present[j]);
        for (Cell& c : sample.modality_cells[present[i]]) c = Cell::missing();
    }
    return sample;
}

// Mirror of modality_dropout at feature granularity within one modality.
inline std::vector<Cell> feature_dropout(std::vector<Cell> cells, double apply_prob, Rng& rng) {
    std::vector<size_t> observed;
    for (size_t f = 0; f < cells.size(); ++f)
        if (cells[f].observed) observed.push_back(f);
    const size_t v = observed.size();
    if (v <= 1) return cells;
    if (!rng.bernoulli(apply_prob)) return cells;
    const size_t count = 1 + static_cast<size_t>(rng.below(v - 1));
    for (size_t i = 0; i < count; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(v - i));
        std::swap(observed[i], observed[j]);
        cells[observed[i]] = Cell::missing();
    }
    return cells;
}

// Modality dropout, then feature dropout on each surviving modality. Every
// sample keeps at least one observed feature throughout.
inline Sample apply_dropout_regularizers(Sample sample, double apply_prob, Rng& rng) {
    sample = modality_dropout(std::move(sample), apply_prob, rng);
    for (auto& cells : sample.modality_cells) {
        if (std::any_of(cells.begin(), cells.end(), [](const Cell& c) { return c.observed; }))
            cells = feature_dropout(std::move(cells), apply_prob, rng);
    }
    return sample;
}

} // namespace maria
