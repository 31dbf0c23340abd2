#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "maria/masking.hpp"

using namespace maria;

namespace {

const double kNegInf = -std::numeric_limits<double>::infinity();

MultimodalDataset make_ds(size_t n, const std::vector<size_t>& widths) {
    MultimodalDataset ds;
    ds.class_names = {"a", "b"};
    for (size_t i = 0; i < n; ++i) {
        ds.sample_ids.push_back("s" + std::to_string(i));
        ds.labels.push_back(static_cast<int>(i % 2));
    }
    for (size_t m = 0; m < widths.size(); ++m) {
        Modality mod;
        mod.name = "m" + std::to_string(m);
        for (size_t f = 0; f < widths[m]; ++f)
            mod.schema.push_back({"f" + std::to_string(f), FeatureKind::numerical, {}});
        mod.cells.assign(n * widths[m], Cell::numeric(1.0));
        ds.modalities.push_back(std::move(mod));
    }
    return ds;
}

size_t count_missing_modalities(const MultimodalDataset& ds) {
    size_t n = 0;
    for (size_t i = 0; i < ds.n_samples(); ++i)
        for (const auto& m : ds.modalities)
            if (!m.present_in_sample(i)) ++n;
    return n;
}

size_t count_missing_cells(const MultimodalDataset& ds) {
    size_t n = 0;
    for (const auto& m : ds.modalities)
        for (const Cell& c : m.cells)
            if (!c.observed) ++n;
    return n;
}

} // namespace

TEST_CASE("build_mask reproduces the column pattern", "[masking]") {
    MaskMatrix m = build_mask({1, 0, 1});
    REQUIRE(m.t == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(m.additive[i * 3 + 0] == 0.0);
        CHECK(m.additive[i * 3 + 1] == kNegInf);
        CHECK(m.additive[i * 3 + 2] == 0.0);
    }

    MaskMatrix all = build_mask({1, 1, 1, 1});
    CHECK(std::all_of(all.additive.begin(), all.additive.end(),
                      [](double v) { return v == 0.0; }));

    MaskMatrix none = build_mask({0, 0});
    CHECK(std::all_of(none.additive.begin(), none.additive.end(),
                      [](double v) { return v == kNegInf; }));
}

TEST_CASE("mask transpose swaps the row and column patterns", "[masking]") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const size_t t = 1 + rng.below(8);
        ObservedVector obs(t);
        for (auto& o : obs) o = rng.bernoulli(0.5) ? 1 : 0;
        MaskMatrix m = build_mask(obs);
        auto mt = m.additive_transposed();
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j < t; ++j) {
                CHECK(mt[i * t + j] == m.additive[j * t + i]);
                // row k of the transpose is all -inf iff token k unobserved
                CHECK((mt[i * t + j] == kNegInf) == !obs[i]);
            }
    }
}

TEST_CASE("inject_mcar masks the adjusted count", "[masking]") {
    MissingnessPlan plan;
    plan.scenario = MissingScenario::missing_modalities;
    plan.rate = Rate::of(0.5);
    plan.seed = 31;

    SECTION("no pre-existing missingness: N*n*p cells") {
        MultimodalDataset ds = make_ds(4, {2, 3});
        MultimodalDataset out = inject_mcar(ds, plan);
        CHECK(count_missing_modalities(out) == 4); // ceil(4*2*0.5)
        CHECK(out.labels == ds.labels);
    }
    SECTION("pre-existing missing modalities reduce the target") {
        MultimodalDataset ds = make_ds(4, {2, 3});
        // two pre-existing fully missing modality cells
        for (size_t f = 0; f < 2; ++f) ds.modalities[0].at(0, f) = Cell::missing();
        for (size_t f = 0; f < 3; ++f) ds.modalities[1].at(1, f) = Cell::missing();
        MultimodalDataset out = inject_mcar(ds, plan);
        CHECK(count_missing_modalities(out) == 4); // 2 pre-existing + 2 injected
    }
    SECTION("rate below the pre-existing level injects nothing") {
        MultimodalDataset ds = make_ds(4, {2, 3});
        for (size_t f = 0; f < 2; ++f) {
            ds.modalities[0].at(0, f) = Cell::missing();
            ds.modalities[0].at(1, f) = Cell::missing();
            ds.modalities[0].at(2, f) = Cell::missing();
        }
        // omega = 3/8 > 0.25
        MissingnessPlan low = plan;
        low.rate = Rate::of(0.25);
        MultimodalDataset out = inject_mcar(ds, low);
        CHECK(count_missing_modalities(out) == 3);
        for (size_t m = 0; m < ds.n_modalities(); ++m)
            CHECK(out.modalities[m].cells == ds.modalities[m].cells);
    }
}

TEST_CASE("inject_mcar keeps every grid row and column partially observed", "[masking]") {
    for (uint64_t seed = 0; seed < 200; ++seed) {
        MissingnessPlan plan;
        plan.scenario = seed % 2 == 0 ? MissingScenario::all_missing
                                      : MissingScenario::missing_modalities;
        // the 6x2 modality grid tops out at rate 0.5 under the guarantee
        plan.rate = plan.scenario == MissingScenario::all_missing
                        ? Rate::of(seed % 3 == 0 ? 0.75 : 0.5)
                        : Rate::of(seed % 3 == 0 ? 0.30 : 0.5);
        plan.seed = seed;
        MultimodalDataset ds = make_ds(6, {2, 3});
        MultimodalDataset out = inject_mcar(ds, plan);

        const size_t expected = mcar_target_count(ds, plan, {0, 1, 2, 3, 4, 5});
        if (plan.scenario == MissingScenario::all_missing) {
            CHECK(count_missing_cells(out) == expected);
            // every sample and every feature column retains an observation
            for (size_t i = 0; i < out.n_samples(); ++i)
                CHECK(out.observed_features_of(i) > 0);
            for (const auto& m : out.modalities)
                for (size_t f = 0; f < m.width(); ++f) {
                    bool any = false;
                    for (size_t i = 0; i < out.n_samples(); ++i) any |= m.at(i, f).observed;
                    CHECK(any);
                }
        } else {
            CHECK(count_missing_modalities(out) == expected);
            for (size_t i = 0; i < out.n_samples(); ++i) {
                size_t present = 0;
                for (const auto& m : out.modalities)
                    if (m.present_in_sample(i)) ++present;
                CHECK(present > 0);
            }
            for (const auto& m : out.modalities) {
                bool any = false;
                for (size_t i = 0; i < out.n_samples(); ++i) any |= m.present_in_sample(i);
                CHECK(any);
            }
        }
    }
}

TEST_CASE("inject_mcar is deterministic and never unmasks", "[masking]") {
    MultimodalDataset ds = make_ds(8, {3, 2});
    ds.modalities[0].at(2, 1) = Cell::missing();
    MissingnessPlan plan;
    plan.scenario = MissingScenario::all_missing;
    plan.rate = Rate::of(0.3);
    plan.seed = 77;

    MultimodalDataset a = inject_mcar(ds, plan);
    MultimodalDataset b = inject_mcar(ds, plan);
    for (size_t m = 0; m < a.n_modalities(); ++m)
        CHECK(a.modalities[m].cells == b.modalities[m].cells);
    CHECK_FALSE(a.modalities[0].at(2, 1).observed); // pre-existing stays missing
    for (size_t m = 0; m < a.n_modalities(); ++m)
        for (size_t i = 0; i < a.modalities[m].cells.size(); ++i)
            if (!ds.modalities[m].cells[i].observed)
                CHECK_FALSE(a.modalities[m].cells[i].observed);
}

TEST_CASE("infeasible rates raise an explicit error", "[masking]") {
    MultimodalDataset ds = make_ds(4, {1, 1}); // 4x2 grid
    MissingnessPlan plan;
    plan.scenario = MissingScenario::all_missing;
    plan.rate = Rate::of(0.9); // needs 8 of 8 cells; guarantee allows 4
    plan.seed = 3;
    CHECK_THROWS_AS(inject_mcar(ds, plan), InfeasibleInjectionError);
}

TEST_CASE("modality_dropout respects the choice set", "[masking]") {
    SECTION("single present modality is a no-op regardless of draws") {
        MultimodalDataset ds = make_ds(1, {3, 2});
        Sample s = ds.sample(0);
        for (Cell& c : s.modality_cells[1]) c = Cell::missing();
        Rng rng(1);
        for (int i = 0; i < 100; ++i) {
            Sample out = modality_dropout(s, 1.0, rng);
            CHECK(out.modality_cells == s.modality_cells);
        }
    }
    SECTION("apply_prob zero is the identity") {
        MultimodalDataset ds = make_ds(1, {3, 2, 2});
        Sample s = ds.sample(0);
        Rng rng(2);
        for (int i = 0; i < 100; ++i)
            CHECK(modality_dropout(s, 0.0, rng).modality_cells == s.modality_cells);
    }
    SECTION("v=3 masks only 1 or 2 modalities over seeded trials") {
        MultimodalDataset ds = make_ds(1, {2, 2, 2});
        Sample s = ds.sample(0);
        Rng rng(3);
        bool saw1 = false, saw2 = false;
        for (int i = 0; i < 10000; ++i) {
            Sample out = modality_dropout(s, 1.0, rng);
            CHECK(out.present_modalities() >= 1);
            const size_t masked = 3 - out.present_modalities();
            REQUIRE(masked >= 1);
            REQUIRE(masked <= 2);
            saw1 |= masked == 1;
            saw2 |= masked == 2;
        }
        CHECK(saw1);
        CHECK(saw2);
    }
}

TEST_CASE("feature_dropout mirrors the modality rule", "[masking]") {
    std::vector<Cell> cells(5, Cell::numeric(2.0));

    SECTION("single observed feature is untouched") {
        std::vector<Cell> one = {Cell::numeric(1), Cell::missing(), Cell::missing()};
        Rng rng(4);
        for (int i = 0; i < 50; ++i) CHECK(feature_dropout(one, 1.0, rng) == one);
    }
    SECTION("v=5 leaves 1..4 observed and c_i is uniform within 3 sigma") {
        Rng rng(5);
        const int trials = 20000;
        std::vector<int> hist(5, 0);
        for (int i = 0; i < trials; ++i) {
            auto out = feature_dropout(cells, 1.0, rng);
            size_t obs = 0;
            for (const Cell& c : out)
                if (c.observed) ++obs;
            REQUIRE(obs >= 1);
            REQUIRE(obs <= 4);
            hist[5 - obs]++; // masked count 1..4
        }
        const double expected = trials / 4.0;
        const double sigma = std::sqrt(trials * 0.25 * 0.75);
        for (int c = 1; c <= 4; ++c)
            CHECK(std::abs(hist[c] - expected) < 3.0 * sigma);
    }
}

TEST_CASE("regularizer pipeline keeps one observation and reproduces per seed", "[masking]") {
    MultimodalDataset ds = make_ds(1, {4, 3, 2});
    Sample s = ds.sample(0);
    for (uint64_t seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        Sample out = apply_dropout_regularizers(s, 0.7, rng);
        CHECK(out.observed_features() >= 1);
        Rng rng2(seed);
        Sample out2 = apply_dropout_regularizers(s, 0.7, rng2);
        CHECK(out.modality_cells == out2.modality_cells);
    }
}
