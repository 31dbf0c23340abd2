#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maria/grid.hpp"

namespace maria {

// One result table per (metric, scenario): rows are fusion x model x
// imputer, column groups the train missing rate, columns the test missing
// rate. Values are fold means scaled to percent, two decimals; the best
// value of every column is marked (ties go to the first row in declared
// order). Unavailable cells render as an em dash.
struct ReportTable {
    std::string metric;   // "auc" or "mcc"
    std::string scenario; // "all_missing" / "missing_modalities"
    std::vector<std::string> train_labels;
    std::vector<std::string> test_labels;

    struct Row {
        std::string fusion, model, imputer;
        std::vector<std::optional<double>> cells; // train-major, then test
        std::vector<bool> bold;
    };
    std::vector<Row> rows;

    size_t column_count() const { return train_labels.size() * test_labels.size(); }

    static std::string format_value(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
        return buf;
    }

    std::string to_text() const {
        std::ostringstream os;
        const size_t label_w = 14, cell_w = 9;
        auto pad = [&](const std::string& s, size_t w) {
            return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
        };
        auto rpad = [&](const std::string& s, size_t w) {
            return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
        };
        const size_t group_w = test_labels.size() * cell_w;

        os << pad(metric == "auc" ? "AUC" : "MCC", label_w) << pad("", label_w)
           << pad("", label_w);
        for (const auto& tr : train_labels) os << "| " << pad("Train: " + tr, group_w);
        os << '\n';
        os << pad("Fusion", label_w) << pad("Model", label_w) << pad("Imputer", label_w);
        for (size_t g = 0; g < train_labels.size(); ++g) {
            os << "| ";
            for (const auto& te : test_labels) os << rpad(te, cell_w - 1) << ' ';
        }
        os << '\n';
        os << std::string(3 * label_w + train_labels.size() * (group_w + 2), '-') << '\n';
        for (const auto& row : rows) {
            os << pad(row.fusion, label_w) << pad(row.model, label_w)
               << pad(row.imputer, label_w);
            for (size_t g = 0; g < train_labels.size(); ++g) {
                os << "| ";
                for (size_t t = 0; t < test_labels.size(); ++t) {
                    const size_t c = g * test_labels.size() + t;
                    std::string cell = "—";
                    if (row.cells[c]) {
                        cell = format_value(*row.cells[c]);
                        if (row.bold[c]) cell = "*" + cell + "*";
                    }
                    os << rpad(cell, cell_w - 1) << ' ';
                }
            }
            os << '\n';
        }
        return os.str();
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "metric,scenario,fusion,model,imputer,train_rate,test_rate,value,best\n";
        for (const auto& row : rows)
            for (size_t g = 0; g < train_labels.size(); ++g)
                for (size_t t = 0; t < test_labels.size(); ++t) {
                    const size_t c = g * test_labels.size() + t;
                    os << metric << ',' << scenario << ',' << row.fusion << ',' << row.model
                       << ',' << row.imputer << ',' << train_labels[g] << ',' << test_labels[t]
                       << ',';
                    if (row.cells[c]) os << format_value(*row.cells[c]);
                    os << ',' << (row.cells[c] && row.bold[c] ? "1" : "0") << '\n';
                }
        return os.str();
    }
};

namespace detail {

inline double rate_sort_key(const std::string& label) {
    if (label == "omega") return -1.0;
    return std::atof(label.c_str());
}

inline int fusion_order(const std::string& fusion) {
    if (fusion == "Early") return 0;
    if (fusion == "Intermediate") return 1;
    if (fusion == "Late") return 2;
    return 3;
}

} // namespace detail

inline ReportTable build_report_table(const ExperimentGrid& grid, const std::string& metric,
                                      const std::string& scenario) {
    ReportTable table;
    table.metric = metric;
    table.scenario = scenario;

    struct RowKey {
        std::string fusion, model, imputer;
        bool operator<(const RowKey& o) const {
            const int a = detail::fusion_order(fusion), b = detail::fusion_order(o.fusion);
            if (a != b) return a < b;
            if (model != o.model) return model < o.model;
            return imputer < o.imputer;
        }
        bool operator==(const RowKey& o) const {
            return fusion == o.fusion && model == o.model && imputer == o.imputer;
        }
    };

    std::vector<std::string> train_labels, test_labels;
    std::map<RowKey, std::map<std::pair<std::string, std::string>, std::vector<double>>> cells;
    for (const auto& r : grid.records) {
        if (r.scenario != scenario) continue;
        const double v = metric == "mcc" ? r.mcc_value : r.auc_value;
        if (std::find(train_labels.begin(), train_labels.end(), r.train_rate) ==
            train_labels.end())
            train_labels.push_back(r.train_rate);
        if (std::find(test_labels.begin(), test_labels.end(), r.test_rate) == test_labels.end())
            test_labels.push_back(r.test_rate);
        if (std::isfinite(v)) cells[{r.fusion, r.model, r.imputer}][{r.train_rate, r.test_rate}]
            .push_back(v);
        else cells[{r.fusion, r.model, r.imputer}]; // row exists even if all folds skipped
    }
    auto by_rate = [](const std::string& a, const std::string& b) {
        return detail::rate_sort_key(a) < detail::rate_sort_key(b);
    };
    std::sort(train_labels.begin(), train_labels.end(), by_rate);
    std::sort(test_labels.begin(), test_labels.end(), by_rate);
    table.train_labels = train_labels;
    table.test_labels = test_labels;

    for (const auto& [key, row_cells] : cells) {
        ReportTable::Row row;
        row.fusion = key.fusion;
        row.model = key.model;
        row.imputer = key.imputer;
        row.cells.resize(table.column_count());
        row.bold.assign(table.column_count(), false);
        for (size_t g = 0; g < train_labels.size(); ++g)
            for (size_t t = 0; t < test_labels.size(); ++t) {
                const auto it = row_cells.find({train_labels[g], test_labels[t]});
                if (it == row_cells.end() || it->second.empty()) continue;
                double sum = 0.0;
                for (double v : it->second) sum += v;
                row.cells[g * test_labels.size() + t] =
                    sum / static_cast<double>(it->second.size());
            }
        table.rows.push_back(std::move(row));
    }

    // exactly one bold per populated column; ties keep the first row
    for (size_t c = 0; c < table.column_count(); ++c) {
        long long best = -1;
        for (size_t r = 0; r < table.rows.size(); ++r) {
            if (!table.rows[r].cells[c]) continue;
            if (best < 0 || *table.rows[r].cells[c] > *table.rows[best].cells[c])
                best = static_cast<long long>(r);
        }
        if (best >= 0) table.rows[static_cast<size_t>(best)].bold[c] = true;
    }
    return table;
}

// All tables for the requested metric selection, paired per scenario in
// record order, AUC table then MCC table.
inline std::vector<ReportTable> build_report_tables(const ExperimentGrid& grid,
                                                    const std::string& metric_selection) {
    std::vector<std::string> scenarios;
    for (const auto& r : grid.records)
        if (std::find(scenarios.begin(), scenarios.end(), r.scenario) == scenarios.end())
            scenarios.push_back(r.scenario);
    std::vector<std::string> metrics;
    if (metric_selection == "both") metrics = {"auc", "mcc"};
    else metrics = {metric_selection};

    std::vector<ReportTable> tables;
    for (const auto& scenario : scenarios)
        for (const auto& metric : metrics)
            tables.push_back(build_report_table(grid, metric, scenario));
    return tables;
}

} // namespace maria
