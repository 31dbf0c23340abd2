#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "maria/model.hpp"
#include "test_util.hpp"

using namespace maria;

namespace {

std::vector<FeatureSchema> numeric_schema(const std::string& prefix, size_t width) {
    std::vector<FeatureSchema> out;
    for (size_t f = 0; f < width; ++f)
        out.push_back({prefix + std::to_string(f), FeatureKind::numerical, {}});
    return out;
}

Sample make_sample(const std::vector<std::vector<Cell>>& cells, int label = 0) {
    Sample s;
    s.modality_cells = cells;
    s.label = label;
    return s;
}

MariaModel tiny_model(FusionMode mode, uint64_t seed = 5,
                      std::vector<std::vector<FeatureSchema>> schemas = {}) {
    if (schemas.empty())
        schemas = {numeric_schema("a", 3), numeric_schema("b", 2)};
    EncoderConfig cfg;
    cfg.d_embed = 8;
    cfg.heads = 2;
    cfg.modality_layers = 1;
    cfg.shared_layers = 1;
    cfg.ff_width = 16;
    std::vector<std::string> names;
    for (size_t i = 0; i < schemas.size(); ++i) names.push_back("m" + std::to_string(i));
    return MariaModel(names, schemas, {"neg", "pos"}, cfg, mode, seed);
}

testutil::Matrix to_matrix(const Tensor& t) {
    testutil::Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (size_t i = 0; i < t.rows(); ++i)
        for (size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

} // namespace

TEST_CASE("embedding maps cells to their rows", "[model]") {
    Rng rng(3);
    std::vector<FeatureSchema> schema = {
        {"x", FeatureKind::numerical, {}},
        {"k", FeatureKind::categorical, {"a", "b", "c"}},
    };
    EmbeddingTable table(schema, 4, rng);

    SECTION("missing cell gives the frozen zero row") {
        Tensor e = table.embed({Cell::missing(), Cell::missing()});
        for (double v : e.values()) CHECK(v == 0.0);
    }
    SECTION("numerical zero embeds as the bias row alone") {
        Tensor e = table.embed({Cell::numeric(0.0), Cell::missing()});
        Tensor bias = gather_row(table.rows(), 1);
        for (size_t j = 0; j < 4; ++j) CHECK(e.at(0, j) == bias.values()[j]);
    }
    SECTION("placeholder payloads at missing cells are invisible") {
        Cell poisoned = Cell::missing();
        poisoned.num = 1e6;
        poisoned.cat = 2;
        Tensor a = table.embed({Cell::numeric(1.5), Cell::missing()});
        Tensor b = table.embed({Cell::numeric(1.5), poisoned});
        CHECK(a.values() == b.values());
    }
    SECTION("unknown category index resolves to the reserved row") {
        Tensor e = table.embed({Cell::missing(), Cell::category(3)});
        Tensor unknown = gather_row(table.rows(), 2 + 3);
        for (size_t j = 0; j < 4; ++j) CHECK(e.at(1, j) == unknown.values()[j]);
        CHECK_THROWS_AS(table.embed({Cell::missing(), Cell::category(4)}), std::out_of_range);
    }
    SECTION("the missing row never receives gradient") {
        Tensor e = table.embed({Cell::numeric(2.0), Cell::missing()});
        backward(sum(e));
        CHECK(table.rows().has_grad());
        CHECK_FALSE(table.missing_row().has_grad());
        for (double v : table.missing_row().values()) CHECK(v == 0.0);
    }
}

TEST_CASE("msa on a single observed token projects its value row", "[model]") {
    Rng rng(7);
    EncoderConfig cfg;
    cfg.d_embed = 4;
    cfg.heads = 2;
    MariaModel m = tiny_model(FusionMode::early);
    const BlockParams& p = m.branch_blocks(0)[0];

    Tensor x = Tensor::randn({1, 8}, rng, 1.0);
    Tensor out = msa(x, {1}, p, 4);
    // attention weight is exactly 1, so the output is V (per head) through wo
    std::vector<Tensor> vs;
    for (size_t h = 0; h < p.wv.size(); ++h) vs.push_back(matmul(x, p.wv[h]));
    Tensor expected = matmul(concat_cols(vs), p.wo);
    CHECK(out.values() == expected.values());
}

TEST_CASE("msa hand-evaluated on two tokens with one missing", "[model]") {
    // one head, d = d_h = 2, wo = identity: row 1 must be exactly V row 1,
    // row 2 must be exactly zero
    BlockParams p;
    p.wq = {Tensor::from({2, 2}, {0.3, -0.1, 0.2, 0.4})};
    p.wk = {Tensor::from({2, 2}, {-0.5, 0.7, 0.1, 0.2})};
    p.wv = {Tensor::from({2, 2}, {1.0, 2.0, -1.0, 0.5})};
    p.wo = Tensor::from({2, 2}, {1, 0, 0, 1});

    Tensor x = Tensor::from({2, 2}, {0.8, -0.6, 123.0, -456.0});
    Tensor out = msa(x, {1, 0}, p, 2);

    Tensor v = matmul(x, p.wv[0]);
    CHECK(out.at(0, 0) == v.at(0, 0));
    CHECK(out.at(0, 1) == v.at(0, 1));
    CHECK(out.at(1, 0) == 0.0);
    CHECK(out.at(1, 1) == 0.0);
}

TEST_CASE("msa of fully missing tokens is the zero matrix", "[model]") {
    MariaModel m = tiny_model(FusionMode::early);
    const BlockParams& p = m.branch_blocks(0)[0];
    Rng rng(9);
    Tensor x = Tensor::randn({3, 8}, rng, 1.0);
    Tensor out = msa(x, {0, 0, 0}, p, 4);
    for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("msa matches the straight-line formula exactly", "[model]") {
    Rng rng(11);
    for (size_t t = 1; t <= 3; ++t) {
        for (int pattern = 0; pattern < (1 << t); ++pattern) {
            const size_t heads = 2, dh = 2, d = heads * dh;
            BlockParams p;
            std::vector<testutil::Matrix> wq, wk, wv;
            for (size_t h = 0; h < heads; ++h) {
                p.wq.push_back(Tensor::randn({d, dh}, rng, 0.7));
                p.wk.push_back(Tensor::randn({d, dh}, rng, 0.7));
                p.wv.push_back(Tensor::randn({d, dh}, rng, 0.7));
                wq.push_back(to_matrix(p.wq.back()));
                wk.push_back(to_matrix(p.wk.back()));
                wv.push_back(to_matrix(p.wv.back()));
            }
            p.wo = Tensor::randn({d, d}, rng, 0.7);
            Tensor x = Tensor::randn({t, d}, rng, 1.3);

            ObservedVector obs(t);
            for (size_t i = 0; i < t; ++i) obs[i] = (pattern >> i) & 1;

            Tensor got = msa(x, obs, p, dh);
            testutil::Matrix want =
                testutil::brute_force_msa(to_matrix(x), obs, wq, wk, wv, to_matrix(p.wo));
            for (size_t i = 0; i < t; ++i)
                for (size_t j = 0; j < d; ++j) CHECK(got.at(i, j) == want[i][j]);
        }
    }
}

TEST_CASE("encoder blocks keep unobserved rows at exact zero", "[model]") {
    MariaModel m = tiny_model(FusionMode::early);
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const size_t t = 5;
        ObservedVector obs(t);
        bool any = false;
        for (auto& o : obs) {
            o = rng.bernoulli(0.6) ? 1 : 0;
            any |= o;
        }
        if (!any) obs[rng.below(t)] = 1;
        Tensor x = Tensor::randn({t, 8}, rng, 1.0);
        x = zero_rows(x, obs);
        for (const auto& block : m.branch_blocks(0)) {
            x = encoder_block(x, obs, block, 4);
            for (size_t i = 0; i < t; ++i)
                if (!obs[i])
                    for (size_t j = 0; j < 8; ++j) CHECK(x.at(i, j) == 0.0);
        }
    }
}

TEST_CASE("fully observed block equals a plain unmasked transformer block", "[model]") {
    MariaModel m = tiny_model(FusionMode::early);
    const BlockParams& p = m.branch_blocks(0)[0];
    Rng rng(17);
    const size_t t = 4, d = 8, dh = 4;
    Tensor x = Tensor::randn({t, d}, rng, 1.0);
    ObservedVector obs(t, 1);
    Tensor got = encoder_block(x, obs, p, dh);

    // reference: attention + residual + layer norm + feed-forward + residual
    // + layer norm, no masking machinery anywhere
    auto mm = [](const testutil::Matrix& a, const testutil::Matrix& b) {
        return testutil::mat_mul(a, b);
    };
    testutil::Matrix xm = to_matrix(x);
    std::vector<testutil::Matrix> wq, wk, wv;
    for (size_t h = 0; h < p.wq.size(); ++h) {
        wq.push_back(to_matrix(p.wq[h]));
        wk.push_back(to_matrix(p.wk[h]));
        wv.push_back(to_matrix(p.wv[h]));
    }
    testutil::Matrix attn(t, std::vector<double>(d, 0.0));
    for (size_t h = 0; h < wq.size(); ++h) {
        auto q = mm(xm, wq[h]), k = mm(xm, wk[h]), v = mm(xm, wv[h]);
        testutil::Matrix s(t, std::vector<double>(t));
        for (size_t i = 0; i < t; ++i) {
            double mx = -1e300;
            for (size_t j = 0; j < t; ++j) {
                double acc = 0.0;
                for (size_t pth = 0; pth < dh; ++pth) acc += q[i][pth] * k[j][pth];
                s[i][j] = acc / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[i][j]);
            }
            double sum = 0.0;
            for (size_t j = 0; j < t; ++j) {
                s[i][j] = std::exp(s[i][j] - mx);
                sum += s[i][j];
            }
            for (size_t j = 0; j < t; ++j) s[i][j] /= sum; // softmax >= 0: ReLU is identity
        }
        auto ho = mm(s, v);
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j < dh; ++j) attn[i][h * dh + j] = ho[i][j];
    }
    attn = mm(attn, to_matrix(p.wo));
    auto layer_norm_ref = [&](testutil::Matrix h, const Tensor& gain, const Tensor& bias) {
        for (size_t i = 0; i < h.size(); ++i) {
            double mu = 0.0;
            for (double v : h[i]) mu += v;
            mu /= static_cast<double>(h[i].size());
            double var = 0.0;
            for (double v : h[i]) var += (v - mu) * (v - mu);
            var /= static_cast<double>(h[i].size());
            for (size_t j = 0; j < h[i].size(); ++j)
                h[i][j] = (h[i][j] - mu) / std::sqrt(var + 1e-5) * gain.values()[j] +
                          bias.values()[j];
        }
        return h;
    };
    testutil::Matrix h1(t, std::vector<double>(d));
    for (size_t i = 0; i < t; ++i)
        for (size_t j = 0; j < d; ++j) h1[i][j] = xm[i][j] + attn[i][j];
    h1 = layer_norm_ref(h1, p.ln1_gain, p.ln1_bias);
    auto ff = mm(h1, to_matrix(p.ff_w1));
    for (size_t i = 0; i < t; ++i)
        for (size_t j = 0; j < ff[i].size(); ++j)
            ff[i][j] = std::max(0.0, ff[i][j] + p.ff_b1.values()[j]);
    auto ff2 = mm(ff, to_matrix(p.ff_w2));
    testutil::Matrix h2(t, std::vector<double>(d));
    for (size_t i = 0; i < t; ++i)
        for (size_t j = 0; j < d; ++j) h2[i][j] = h1[i][j] + ff2[i][j] + p.ff_b2.values()[j];
    h2 = layer_norm_ref(h2, p.ln2_gain, p.ln2_bias);

    for (size_t i = 0; i < t; ++i)
        for (size_t j = 0; j < d; ++j)
            CHECK(got.at(i, j) == Catch::Approx(h2[i][j]).epsilon(1e-12));
}

TEST_CASE("forward produces C logits for any viable missingness pattern", "[model]") {
    for (FusionMode mode : {FusionMode::intermediate, FusionMode::early}) {
        MariaModel m = tiny_model(mode);
        Rng rng(19);
        for (int trial = 0; trial < 20; ++trial) {
            Sample s = make_sample({{Cell::numeric(rng.normal()), Cell::numeric(rng.normal()),
                                     Cell::numeric(rng.normal())},
                                    {Cell::numeric(rng.normal()), Cell::numeric(rng.normal())}});
            for (auto& cells : s.modality_cells)
                for (Cell& c : cells)
                    if (rng.bernoulli(0.5)) c = Cell::missing();
            if (s.observed_features() == 0) s.modality_cells[0][0] = Cell::numeric(0.5);
            Tensor logits = m.forward(s);
            CHECK(logits.shape() == std::vector<size_t>{1, 2});
            for (double v : logits.values()) CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("fully missing samples raise an inference error", "[model]") {
    Sample s = make_sample({{Cell::missing(), Cell::missing(), Cell::missing()},
                            {Cell::missing(), Cell::missing()}});
    for (FusionMode mode : {FusionMode::intermediate, FusionMode::early}) {
        MariaModel m = tiny_model(mode);
        CHECK_THROWS_AS(m.forward(s), InferenceError);
    }
    MariaModel late = tiny_model(FusionMode::late);
    CHECK_THROWS_AS(late.decision_profile(s), InferenceError);
}

TEST_CASE("forward logits are bitwise invariant to missing-cell placeholders", "[model]") {
    const std::vector<double> placeholders = {-1e6, 0.0, 1e6};
    Rng rng(23);
    for (FusionMode mode : {FusionMode::intermediate, FusionMode::early, FusionMode::late}) {
        MariaModel m = tiny_model(mode);
        for (int trial = 0; trial < 10; ++trial) {
            Sample s = make_sample({{Cell::numeric(0.3), Cell::missing(), Cell::numeric(-1.2)},
                                    {Cell::missing(), Cell::numeric(0.9)}});
            const std::vector<double> base = m.decision_profile(s);
            for (double ph : placeholders) {
                Sample mutated = s;
                for (auto& cells : mutated.modality_cells)
                    for (Cell& c : cells)
                        if (!c.observed) {
                            c.num = ph;
                            c.cat = static_cast<int>(rng.below(3));
                        }
                const std::vector<double> got = m.decision_profile(mutated);
                CHECK(got == base);
            }
        }
    }
}

TEST_CASE("a fully missing modality equals explicit zero latent rows", "[model]") {
    MariaModel m = tiny_model(FusionMode::intermediate);
    Sample s = make_sample({{Cell::numeric(0.4), Cell::numeric(1.0), Cell::numeric(-0.2)},
                            {Cell::missing(), Cell::missing()}});
    Tensor logits = m.forward(s);

    // structural path: branch 0 latent, zeros for branch 1, shared stack, head
    const ObservedVector obs0 = observed_vector(s.modality_cells[0]);
    Tensor r0 = encoder_stack(m.embedding_table(0).embed(s.modality_cells[0]), obs0,
                              m.branch_blocks(0), m.config().head_dim());
    Tensor zeros = Tensor::zeros({2, m.config().d_embed});
    Tensor joint = concat_rows({r0, zeros});
    ObservedVector obs_sh = obs0;
    obs_sh.push_back(0);
    obs_sh.push_back(0);
    Tensor shared = encoder_stack(joint, obs_sh, m.shared_blocks(), m.config().head_dim());
    Tensor expected = add_row(matmul(flatten(shared), m.head_weights()), m.head_bias());
    CHECK(logits.values() == expected.values());
}

TEST_CASE("head projections obey the d_h = d_e / h dimensioning", "[model]") {
    MariaModel m = tiny_model(FusionMode::intermediate);
    REQUIRE(m.config().head_dim() == 4);
    for (size_t b = 0; b < 2; ++b)
        for (const auto& block : m.branch_blocks(b))
            for (size_t h = 0; h < block.wq.size(); ++h) {
                CHECK(block.wq[h].shape() == std::vector<size_t>{8, 4});
                CHECK(block.wk[h].shape() == std::vector<size_t>{8, 4});
                CHECK(block.wv[h].shape() == std::vector<size_t>{8, 4});
            }
    EncoderConfig bad;
    bad.d_embed = 10;
    bad.heads = 4;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("early fusion differs from single-modality intermediate only by the shared stack",
          "[model]") {
    std::vector<std::vector<FeatureSchema>> one = {numeric_schema("a", 4)};
    MariaModel early = tiny_model(FusionMode::early, 5, one);
    MariaModel inter1 = tiny_model(FusionMode::intermediate, 5, one);

    // grow the shared stack by one block to measure its parameter cost
    EncoderConfig cfg = inter1.config();
    cfg.shared_layers = 2;
    MariaModel inter2({"m0"}, one, {"neg", "pos"}, cfg, FusionMode::intermediate, 5);

    const size_t block_cost = inter2.parameter_count() - inter1.parameter_count();
    CHECK(inter1.parameter_count() ==
          early.parameter_count() + inter1.config().shared_layers * block_cost);
}

TEST_CASE("late fusion averages the profiles of present modalities", "[model]") {
    MariaModel m = tiny_model(FusionMode::late);
    Sample s = make_sample({{Cell::numeric(0.4), Cell::numeric(-0.6), Cell::numeric(0.1)},
                            {Cell::numeric(1.2), Cell::missing()}});
    auto manual_softmax = [](const Tensor& t) {
        double mx = t.values()[0];
        for (double v : t.values()) mx = std::max(mx, v);
        std::vector<double> out;
        double sum = 0.0;
        for (double v : t.values()) {
            out.push_back(std::exp(v - mx));
            sum += out.back();
        }
        for (double& v : out) v /= sum;
        return out;
    };
    const auto p0 = manual_softmax(m.member_forward(0, s));
    const auto p1 = manual_softmax(m.member_forward(1, s));
    const auto got = m.decision_profile(s);
    for (size_t c = 0; c < got.size(); ++c)
        CHECK(got[c] == Catch::Approx((p0[c] + p1[c]) / 2.0).margin(1e-15));
    CHECK(got[0] + got[1] == Catch::Approx(1.0).margin(1e-9));

    SECTION("one modality missing leaves the surviving profile") {
        Sample lone = s;
        for (Cell& c : lone.modality_cells[0]) c = Cell::missing();
        const auto fallback = m.decision_profile(lone);
        const auto surviving = manual_softmax(m.member_forward(1, lone));
        for (size_t c = 0; c < fallback.size(); ++c) CHECK(fallback[c] == surviving[c]);
    }
}

TEST_CASE("gradients reach every parameter tensor but never the missing row", "[model]") {
    MariaModel m = tiny_model(FusionMode::intermediate);
    Rng rng(29);
    std::vector<Tensor> logit_rows;
    std::vector<int> targets;
    for (int i = 0; i < 8; ++i) {
        Sample s = make_sample({{Cell::numeric(rng.normal()), Cell::numeric(rng.normal()),
                                 i % 2 ? Cell::missing() : Cell::numeric(rng.normal())},
                                {Cell::numeric(rng.normal()),
                                 i % 3 ? Cell::numeric(rng.normal()) : Cell::missing()}});
        logit_rows.push_back(m.forward(s));
        targets.push_back(i % 2);
    }
    backward(cross_entropy(concat_rows(logit_rows), targets));
    for (auto& [name, t] : m.parameters()) {
        CAPTURE(name);
        REQUIRE(t.has_grad());
        bool any = false;
        for (double g : t.grad()) any |= g != 0.0;
        CHECK(any);
    }
    for (size_t b = 0; b < 2; ++b) {
        CHECK_FALSE(m.embedding_table(b).missing_row().has_grad());
        for (double v : m.embedding_table(b).missing_row().values()) CHECK(v == 0.0);
    }
}

TEST_CASE("checkpoints round-trip bit-exactly", "[model]") {
    for (FusionMode mode : {FusionMode::intermediate, FusionMode::early, FusionMode::late}) {
        MariaModel m = tiny_model(mode, 31);
        auto dir = testutil::temp_dir("ckpt");
        const auto path = dir / "model.bin";
        m.save(path);
        MariaModel back = MariaModel::load(path);

        REQUIRE(back.parameters().size() == m.parameters().size());
        for (size_t i = 0; i < m.parameters().size(); ++i) {
            CHECK(back.parameters()[i].first == m.parameters()[i].first);
            CHECK(back.parameters()[i].second.values() == m.parameters()[i].second.values());
        }
        Sample s = make_sample({{Cell::numeric(0.2), Cell::missing(), Cell::numeric(0.8)},
                                {Cell::numeric(-0.5), Cell::numeric(0.1)}});
        CHECK(back.decision_profile(s) == m.decision_profile(s));
        std::filesystem::remove_all(dir);
    }
}
