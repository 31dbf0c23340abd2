#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace maria {

struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// Rank-based (Mann-Whitney) AUC with 0.5 credit for ties; labels in {0,1}.
inline double auc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw MetricError("auc: score/label count mismatch");
    size_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l == 1 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0)
        throw MetricError("auc undefined: needs both classes present");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t t = i; t <= j; ++t)
            if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// AUC from per-sample class-score vectors. Binary tasks use the positive
// class column; multiclass tasks take the macro one-vs-rest average over
// classes with both positives and negatives present.
inline double auc(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels) {
    if (scores.empty() || scores.size() != labels.size())
        throw MetricError("auc: empty input or score/label count mismatch");
    const size_t classes = scores[0].size();
    if (classes < 2) throw MetricError("auc: need scores for at least 2 classes");

    std::vector<size_t> counts(classes, 0);
    for (int l : labels) {
        if (l < 0 || static_cast<size_t>(l) >= classes)
            throw MetricError("auc: label out of range");
        counts[static_cast<size_t>(l)]++;
    }
    const size_t present =
        static_cast<size_t>(std::count_if(counts.begin(), counts.end(),
                                          [](size_t c) { return c > 0; }));
    if (present < 2) throw MetricError("auc undefined: single-class labels");

    if (classes == 2) {
        std::vector<double> pos_scores(labels.size());
        for (size_t s = 0; s < labels.size(); ++s) pos_scores[s] = scores[s][1];
        return auc_binary(pos_scores, labels);
    }
    double total = 0.0;
    size_t used = 0;
    for (size_t c = 0; c < classes; ++c) {
        if (counts[c] == 0 || counts[c] == labels.size()) continue;
        std::vector<double> col(labels.size());
        std::vector<int> ovr(labels.size());
        for (size_t s = 0; s < labels.size(); ++s) {
            col[s] = scores[s][c];
            ovr[s] = labels[s] == static_cast<int>(c) ? 1 : 0;
        }
        total += auc_binary(col, ovr);
        ++used;
    }
    return total / static_cast<double>(used);
}

// Matthews correlation via the generalized CxC confusion form, which
// reduces to the familiar TP/FP/TN/FN expression for two classes. A
// degenerate denominator yields 0.0 and sets the flag.
inline double mcc(const std::vector<int>& pred, const std::vector<int>& truth,
                  bool* degenerate = nullptr) {
    if (pred.size() != truth.size()) throw MetricError("mcc: prediction/label count mismatch");
    if (pred.empty()) throw MetricError("mcc: empty input");
    int max_class = 0;
    for (int v : pred) max_class = std::max(max_class, v);
    for (int v : truth) max_class = std::max(max_class, v);
    const size_t c = static_cast<size_t>(max_class) + 1;
    std::vector<size_t> truth_counts(c, 0);
    for (int v : truth) truth_counts[static_cast<size_t>(v)]++;
    if (std::count_if(truth_counts.begin(), truth_counts.end(),
                      [](size_t n) { return n > 0; }) < 2)
        throw MetricError("mcc undefined: single-class ground truth");

    std::vector<std::vector<double>> conf(c, std::vector<double>(c, 0.0));
    for (size_t i = 0; i < pred.size(); ++i)
        conf[static_cast<size_t>(truth[i])][static_cast<size_t>(pred[i])] += 1.0;

    const double s = static_cast<double>(pred.size());
    double correct = 0.0;
    std::vector<double> t(c, 0.0), p(c, 0.0);
    for (size_t k = 0; k < c; ++k) {
        correct += conf[k][k];
        for (size_t j = 0; j < c; ++j) {
            t[k] += conf[k][j]; // true occurrences of class k
            p[k] += conf[j][k]; // predictions of class k
        }
    }
    double tp_dot = 0.0, pp = 0.0, tt = 0.0;
    for (size_t k = 0; k < c; ++k) {
        tp_dot += p[k] * t[k];
        pp += p[k] * p[k];
        tt += t[k] * t[k];
    }
    const double num = correct * s - tp_dot;
    const double den = std::sqrt((s * s - pp) * (s * s - tt));
    if (degenerate) *degenerate = den == 0.0;
    if (den == 0.0) return 0.0;
    return num / den;
}

// Fold-aggregated metric value.
struct MetricResult {
    std::string metric; // "auc" or "mcc"
    std::vector<double> fold_values;

    double mean() const {
        if (fold_values.empty()) return 0.0;
        double s = 0.0;
        for (double v : fold_values) s += v;
        return s / static_cast<double>(fold_values.size());
    }
};

} // namespace maria
