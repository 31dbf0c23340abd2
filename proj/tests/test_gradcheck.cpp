#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <limits>

#include "maria/tensor.hpp"

using namespace maria;

namespace {

const double kNegInf = -std::numeric_limits<double>::infinity();

// Independent central finite-difference oracle. fwd() must recompute the
// scalar objective from the raw parameter buffer without touching the tape.
double fd_grad(std::vector<double>& param, size_t idx,
               const std::function<double()>& fwd, double h = 1e-5) {
    const double orig = param[idx];
    param[idx] = orig + h;
    const double fp = fwd();
    param[idx] = orig - h;
    const double fm = fwd();
    param[idx] = orig;
    return (fp - fm) / (2.0 * h);
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Fixed projection weights turn a matrix output into a scalar objective
// that exercises the whole Jacobian.
std::vector<double> projection(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> c(n);
    for (double& v : c) v = rng.normal();
    return c;
}

double dot_values(const Tensor& t, const std::vector<double>& c) {
    double s = 0.0;
    for (size_t i = 0; i < t.numel(); ++i) s += c[i] * t.values()[i];
    return s;
}

// Scalar objective sum(t .* c) via flatten + matmul against a constant.
Tensor project(const Tensor& t, const std::vector<double>& c) {
    Tensor flat = flatten(t);
    Tensor cc = Tensor::from({t.numel(), 1}, c);
    return matmul(flat, cc);
}

} // namespace

TEST_CASE("matmul gradient matches finite differences", "[gradcheck]") {
    Rng rng(101);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);

    Tensor loss = sum(matmul(a, b));
    backward(loss);

    auto fwd = [&]() {
        double s = 0.0;
        for (size_t i = 0; i < 3; ++i)
            for (size_t j = 0; j < 2; ++j) {
                double acc = 0.0;
                for (size_t k = 0; k < 4; ++k) acc += a.values()[i * 4 + k] * b.values()[k * 2 + j];
                s += acc;
            }
        return s;
    };
    for (size_t i = 0; i < a.numel(); ++i)
        CHECK(rel_err(a.grad()[i], fd_grad(a.values(), i, fwd)) < 1e-5);
    for (size_t i = 0; i < b.numel(); ++i)
        CHECK(rel_err(b.grad()[i], fd_grad(b.values(), i, fwd)) < 1e-5);
}

TEST_CASE("every primitive op passes gradient check", "[gradcheck]") {
    Rng rng(202);

    struct Case {
        const char* name;
        std::function<Tensor(std::vector<Tensor>&)> build;
        std::vector<std::vector<size_t>> shapes;
    };

    std::vector<double> mask = {0, kNegInf, 0, 0, 0, kNegInf, 0, 0, 0, kNegInf, 0, 0,
                                0, kNegInf, 0, 0};

    std::vector<Case> cases = {
        {"matmul_nt",
         [](std::vector<Tensor>& in) { return matmul_nt(in[0], in[1]); },
         {{3, 4}, {2, 4}}},
        {"add", [](std::vector<Tensor>& in) { return add(in[0], in[1]); }, {{3, 3}, {3, 3}}},
        {"add_row", [](std::vector<Tensor>& in) { return add_row(in[0], in[1]); }, {{4, 3}, {3}}},
        {"scale", [](std::vector<Tensor>& in) { return scale(in[0], -1.7); }, {{2, 5}}},
        {"relu", [](std::vector<Tensor>& in) { return relu(in[0]); }, {{3, 3}}},
        {"masked_softmax",
         [mask](std::vector<Tensor>& in) { return masked_softmax(in[0], mask); },
         {{4, 4}}},
        {"layer_norm",
         [](std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); },
         {{3, 4}, {4}, {4}}},
        {"gather_row", [](std::vector<Tensor>& in) { return gather_row(in[0], 1); }, {{3, 4}}},
        {"concat_rows",
         [](std::vector<Tensor>& in) { return concat_rows({in[0], in[1]}); },
         {{2, 3}, {1, 3}}},
        {"concat_cols",
         [](std::vector<Tensor>& in) { return concat_cols({in[0], in[1]}); },
         {{2, 3}, {2, 2}}},
        {"flatten", [](std::vector<Tensor>& in) { return flatten(in[0]); }, {{2, 3}}},
        {"zero_rows",
         [](std::vector<Tensor>& in) { return zero_rows(in[0], {1, 0, 1}); },
         {{3, 2}}},
    };

    for (auto& c : cases) {
        CAPTURE(c.name);
        std::vector<Tensor> inputs;
        for (auto& s : c.shapes) {
            Tensor t = Tensor::randn(s, rng, 1.0, true);
            // keep relu inputs away from the kink
            for (double& v : t.values())
                if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
            inputs.push_back(t);
        }
        Tensor out = c.build(inputs);
        const std::vector<double> proj = projection(out.numel(), 7);
        backward(project(out, proj));

        auto fwd = [&]() {
            std::vector<Tensor> detached;
            detached.reserve(inputs.size());
            for (auto& t : inputs) detached.push_back(Tensor::from(t.shape(), t.values()));
            return dot_values(c.build(detached), proj);
        };

        for (auto& t : inputs) {
            REQUIRE(t.has_grad());
            for (size_t i = 0; i < t.numel(); ++i) {
                const double fd = fd_grad(t.values(), i, fwd);
                CHECK(rel_err(t.grad()[i], fd) < 1e-4);
            }
        }
    }
}

TEST_CASE("cross_entropy gradient matches finite differences", "[gradcheck]") {
    Rng rng(303);
    Tensor logits = Tensor::randn({4, 3}, rng, 2.0, true);
    const std::vector<int> targets = {0, 2, 1, 2};

    backward(cross_entropy(logits, targets));

    auto fwd = [&]() {
        double loss = 0.0;
        for (size_t i = 0; i < 4; ++i) {
            const double* row = logits.values().data() + i * 3;
            double m = std::max({row[0], row[1], row[2]});
            double s = 0.0;
            for (size_t c = 0; c < 3; ++c) s += std::exp(row[c] - m);
            loss += (m + std::log(s)) - row[targets[i]];
        }
        return loss / 4.0;
    };
    for (size_t i = 0; i < logits.numel(); ++i)
        CHECK(rel_err(logits.grad()[i], fd_grad(logits.values(), i, fwd)) < 1e-4);
}

TEST_CASE("weighted cross_entropy gradient matches finite differences", "[gradcheck]") {
    Rng rng(404);
    Tensor logits = Tensor::randn({3, 2}, rng, 1.5, true);
    const std::vector<int> targets = {0, 1, 1};
    const std::vector<double> weights = {2.0, 0.5};

    backward(cross_entropy(logits, targets, weights));

    auto fwd = [&]() {
        double loss = 0.0, wsum = 0.0;
        for (size_t i = 0; i < 3; ++i) {
            const double* row = logits.values().data() + i * 2;
            const double m = std::max(row[0], row[1]);
            const double s = std::exp(row[0] - m) + std::exp(row[1] - m);
            loss += weights[targets[i]] * ((m + std::log(s)) - row[targets[i]]);
            wsum += weights[targets[i]];
        }
        return loss / wsum;
    };
    for (size_t i = 0; i < logits.numel(); ++i)
        CHECK(rel_err(logits.grad()[i], fd_grad(logits.values(), i, fwd)) < 1e-4);
}
