#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maria/rng.hpp"

namespace maria {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class FeatureKind { numerical, categorical };

struct FeatureSchema {
    std::string name;
    FeatureKind kind = FeatureKind::numerical;
    std::vector<std::string> categories; // categorical only, >= 2 entries

    // Reserved index for categories first seen outside the fitted vocabulary.
    size_t unknown_index() const { return categories.size(); }
};

// One table cell: a numerical payload or a category index, or nothing.
struct Cell {
    bool observed = false;
    double num = 0.0;
    int cat = -1;

    static Cell missing() { return {}; }
    static Cell numeric(double v) { return {true, v, -1}; }
    static Cell category(int idx) { return {true, 0.0, idx}; }

    bool operator==(const Cell&) const = default;
};

struct Modality {
    std::string name;
    std::vector<FeatureSchema> schema;
    std::vector<Cell> cells; // n_samples x schema.size(), row-major

    size_t width() const { return schema.size(); }
    Cell& at(size_t sample, size_t feature) { return cells[sample * width() + feature]; }
    const Cell& at(size_t sample, size_t feature) const {
        return cells[sample * width() + feature];
    }
    size_t observed_in_sample(size_t sample) const {
        size_t n = 0;
        for (size_t f = 0; f < width(); ++f)
            if (at(sample, f).observed) ++n;
        return n;
    }
    bool present_in_sample(size_t sample) const { return observed_in_sample(sample) > 0; }
};

// One sample's cells detached from the dataset; dropout regularizers and
// forward passes work on these copies.
struct Sample {
    std::vector<std::vector<Cell>> modality_cells;
    int label = -1;

    size_t observed_features() const {
        size_t n = 0;
        for (const auto& m : modality_cells)
            for (const Cell& c : m)
                if (c.observed) ++n;
        return n;
    }
    size_t present_modalities() const {
        size_t n = 0;
        for (const auto& m : modality_cells)
            if (std::any_of(m.begin(), m.end(), [](const Cell& c) { return c.observed; })) ++n;
        return n;
    }
};

struct MultimodalDataset {
    std::vector<Modality> modalities;
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::vector<std::string> sample_ids;

    size_t n_samples() const { return labels.size(); }
    size_t n_modalities() const { return modalities.size(); }
    size_t n_classes() const { return class_names.size(); }
    size_t total_features() const {
        size_t n = 0;
        for (const auto& m : modalities) n += m.width();
        return n;
    }

    Sample sample(size_t i) const {
        Sample s;
        s.label = labels[i];
        s.modality_cells.reserve(modalities.size());
        for (const auto& m : modalities) {
            std::vector<Cell> cells(m.width());
            for (size_t f = 0; f < m.width(); ++f) cells[f] = m.at(i, f);
            s.modality_cells.push_back(std::move(cells));
        }
        return s;
    }

    size_t observed_features_of(size_t i) const {
        size_t n = 0;
        for (const auto& m : modalities) n += m.observed_in_sample(i);
        return n;
    }

    bool every_sample_has_observation() const {
        for (size_t i = 0; i < n_samples(); ++i)
            if (observed_features_of(i) == 0) return false;
        return true;
    }

    // Pre-existing missing rate over individual feature cells.
    double omega_all_missing() const {
        size_t missing = 0, total = 0;
        for (const auto& m : modalities)
            for (const Cell& c : m.cells) {
                ++total;
                if (!c.observed) ++missing;
            }
        return total == 0 ? 0.0 : static_cast<double>(missing) / static_cast<double>(total);
    }

    // Pre-existing missing rate over (sample, modality) cells; a modality
    // counts as missing when all of its features are missing.
    double omega_missing_modalities() const {
        size_t missing = 0, total = 0;
        for (size_t i = 0; i < n_samples(); ++i)
            for (const auto& m : modalities) {
                ++total;
                if (!m.present_in_sample(i)) ++missing;
            }
        return total == 0 ? 0.0 : static_cast<double>(missing) / static_cast<double>(total);
    }
};

inline MultimodalDataset subset(const MultimodalDataset& ds, const std::vector<size_t>& indices) {
    MultimodalDataset out;
    out.class_names = ds.class_names;
    out.labels.reserve(indices.size());
    out.sample_ids.reserve(indices.size());
    for (size_t i : indices) {
        out.labels.push_back(ds.labels[i]);
        out.sample_ids.push_back(ds.sample_ids[i]);
    }
    for (const auto& m : ds.modalities) {
        Modality sm;
        sm.name = m.name;
        sm.schema = m.schema;
        sm.cells.reserve(indices.size() * m.width());
        for (size_t i : indices)
            for (size_t f = 0; f < m.width(); ++f) sm.cells.push_back(m.at(i, f));
        out.modalities.push_back(std::move(sm));
    }
    return out;
}

// ---- CSV -------------------------------------------------------------

namespace csv {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (ch != '\r') {
            field += ch;
        }
    }
    out.push_back(std::move(field));
    return out;
}

inline std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::vector<std::vector<std::string>> read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() && in.peek() == EOF) break;
        rows.push_back(split_line(line));
    }
    return rows;
}

// Shortest representation that parses back to the identical double.
inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace csv

// ---- preprocessing -----------------------------------------------------

// Min-Max statistics and categorical vocabularies calibrated on a training
// fold. Applying never changes a cell's observed flag; test-fold values may
// land outside [0,1] (no clipping).
struct Preprocessor {
    struct NumericStats {
        double min = 0.0;
        double max = 1.0;
        bool identity = false; // no observed training cells: leave values as-is
    };
    // [modality][feature]
    std::vector<std::vector<NumericStats>> numeric;
    std::vector<std::vector<std::vector<uint8_t>>> category_seen;
    std::vector<std::string> warnings;

    double transform_value(size_t m, size_t f, double v) const {
        const NumericStats& st = numeric[m][f];
        if (st.identity) return v;
        return (v - st.min) / (st.max - st.min);
    }
};

inline Preprocessor fit_preprocessor(const MultimodalDataset& ds,
                                     const std::vector<size_t>& train_indices) {
    if (train_indices.empty()) throw DataError("fit_preprocessor: empty training index set");
    Preprocessor p;
    p.numeric.resize(ds.n_modalities());
    p.category_seen.resize(ds.n_modalities());
    for (size_t m = 0; m < ds.n_modalities(); ++m) {
        const Modality& mod = ds.modalities[m];
        p.numeric[m].resize(mod.width());
        p.category_seen[m].resize(mod.width());
        for (size_t f = 0; f < mod.width(); ++f) {
            const FeatureSchema& fs = mod.schema[f];
            if (fs.kind == FeatureKind::numerical) {
                double lo = 0.0, hi = 0.0;
                size_t seen = 0;
                for (size_t i : train_indices) {
                    const Cell& c = mod.at(i, f);
                    if (!c.observed) continue;
                    if (seen == 0) {
                        lo = hi = c.num;
                    } else {
                        lo = std::min(lo, c.num);
                        hi = std::max(hi, c.num);
                    }
                    ++seen;
                }
                Preprocessor::NumericStats st;
                if (seen == 0) {
                    st.identity = true;
                    p.warnings.push_back("feature " + mod.name + "/" + fs.name +
                                         " has no observed training cells; identity scaling");
                } else {
                    st.min = lo;
                    st.max = hi == lo ? lo + 1.0 : hi; // degenerate range rule
                }
                p.numeric[m][f] = st;
            } else {
                std::vector<uint8_t> seen(fs.categories.size(), 0);
                for (size_t i : train_indices) {
                    const Cell& c = mod.at(i, f);
                    if (c.observed && c.cat >= 0 && static_cast<size_t>(c.cat) < seen.size())
                        seen[static_cast<size_t>(c.cat)] = 1;
                }
                p.category_seen[m][f] = std::move(seen);
            }
        }
    }
    return p;
}

// Returns the preprocessed subset in index order. Missing flags survive
// unchanged; categories outside the fitted vocabulary map to the reserved
// unknown index.
inline MultimodalDataset apply_preprocessor(const Preprocessor& p, const MultimodalDataset& ds,
                                            const std::vector<size_t>& indices) {
    if (p.numeric.size() != ds.n_modalities())
        throw DataError("apply_preprocessor: modality count mismatch");
    MultimodalDataset out = subset(ds, indices);
    for (size_t m = 0; m < out.n_modalities(); ++m) {
        Modality& mod = out.modalities[m];
        if (p.numeric[m].size() != mod.width())
            throw DataError("apply_preprocessor: schema mismatch in modality " + mod.name);
        for (size_t i = 0; i < out.n_samples(); ++i)
            for (size_t f = 0; f < mod.width(); ++f) {
                Cell& c = mod.at(i, f);
                if (!c.observed) continue;
                if (mod.schema[f].kind == FeatureKind::numerical) {
                    c.num = p.transform_value(m, f, c.num);
                } else {
                    const auto& seen = p.category_seen[m][f];
                    if (c.cat < 0 || static_cast<size_t>(c.cat) >= seen.size() ||
                        !seen[static_cast<size_t>(c.cat)])
                        c.cat = static_cast<int>(mod.schema[f].unknown_index());
                }
            }
    }
    return out;
}

// ---- manifest / schema / CSV ingestion ----------------------------------

namespace detail {

inline FeatureKind parse_kind(const std::string& s) {
    if (s == "numerical") return FeatureKind::numerical;
    if (s == "categorical") return FeatureKind::categorical;
    throw DataError("unknown feature kind: " + s);
}

inline std::vector<FeatureSchema> parse_feature_list(const nlohmann::json& features,
                                                     const std::string& modality_name) {
    std::vector<FeatureSchema> out;
    std::set<std::string> names;
    for (const auto& f : features) {
        FeatureSchema fs;
        fs.name = f.at("name").get<std::string>();
        fs.kind = parse_kind(f.at("kind").get<std::string>());
        if (!names.insert(fs.name).second)
            throw DataError("duplicate feature name " + fs.name + " in modality " + modality_name);
        if (fs.kind == FeatureKind::categorical) {
            for (const auto& c : f.at("categories")) fs.categories.push_back(c.get<std::string>());
            if (fs.categories.size() < 2)
                throw DataError("categorical feature " + fs.name +
                                " needs >= 2 declared categories");
        }
        out.push_back(std::move(fs));
    }
    return out;
}

} // namespace detail

// Reads the JSON manifest and its referenced schema, per-modality CSVs and
// labels CSV. Empty cells (or declared missing tokens) become missing; all
// files align on the id column.
inline MultimodalDataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open manifest: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest parse error in " + manifest_path.string() + ": " + e.what());
    }
    const auto base = manifest_path.parent_path();
    const std::string id_column = manifest.at("id_column").get<std::string>();
    std::set<std::string> missing_tokens = {""};
    if (manifest.contains("missing_tokens"))
        for (const auto& t : manifest.at("missing_tokens"))
            missing_tokens.insert(t.get<std::string>());

    // schema descriptor
    std::ifstream schema_in(base / manifest.at("schema").get<std::string>());
    if (!schema_in)
        throw DataError("cannot open schema: " +
                        (base / manifest.at("schema").get<std::string>()).string());
    nlohmann::json schema_json;
    schema_in >> schema_json;
    std::map<std::string, std::vector<FeatureSchema>> schema_by_modality;
    for (const auto& m : schema_json.at("modalities"))
        schema_by_modality[m.at("name").get<std::string>()] =
            detail::parse_feature_list(m.at("features"), m.at("name").get<std::string>());

    // labels define the sample order
    MultimodalDataset ds;
    const auto label_rows = csv::read_file(base / manifest.at("labels").get<std::string>());
    if (label_rows.empty() || label_rows[0].size() != 2 || label_rows[0][0] != id_column ||
        label_rows[0][1] != "label")
        throw DataError("labels file must have header '" + id_column + ",label'");
    std::map<std::string, size_t> row_of_id;
    std::vector<std::string> raw_labels;
    for (size_t r = 1; r < label_rows.size(); ++r) {
        const auto& row = label_rows[r];
        if (row.size() != 2) throw DataError("labels row " + std::to_string(r) + " malformed");
        if (!row_of_id.emplace(row[0], ds.sample_ids.size()).second)
            throw DataError("duplicate sample id in labels: " + row[0]);
        ds.sample_ids.push_back(row[0]);
        raw_labels.push_back(row[1]);
    }
    std::set<std::string> class_set(raw_labels.begin(), raw_labels.end());
    ds.class_names.assign(class_set.begin(), class_set.end());
    for (const auto& l : raw_labels)
        ds.labels.push_back(static_cast<int>(
            std::distance(ds.class_names.begin(),
                          std::find(ds.class_names.begin(), ds.class_names.end(), l))));

    for (const auto& entry : manifest.at("modalities")) {
        Modality mod;
        mod.name = entry.at("name").get<std::string>();
        auto it = schema_by_modality.find(mod.name);
        if (it == schema_by_modality.end())
            throw DataError("modality " + mod.name + " missing from schema descriptor");
        mod.schema = it->second;

        const auto path = base / entry.at("csv").get<std::string>();
        const auto rows = csv::read_file(path);
        if (rows.empty()) throw DataError("empty modality CSV: " + path.string());
        const auto& header = rows[0];
        if (header.empty() || header[0] != id_column)
            throw DataError("modality " + mod.name + ": first column must be " + id_column);
        if (header.size() != mod.width() + 1)
            throw DataError("modality " + mod.name + ": header width " +
                            std::to_string(header.size() - 1) + " does not match schema width " +
                            std::to_string(mod.width()));
        for (size_t f = 0; f < mod.width(); ++f)
            if (header[f + 1] != mod.schema[f].name)
                throw DataError("modality " + mod.name + ": column '" + header[f + 1] +
                                "' does not match schema feature '" + mod.schema[f].name + "'");

        mod.cells.assign(ds.n_samples() * mod.width(), Cell::missing());
        std::vector<uint8_t> filled(ds.n_samples(), 0);
        for (size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (row.size() != mod.width() + 1)
                throw DataError("modality " + mod.name + " row " + std::to_string(r) +
                                ": expected " + std::to_string(mod.width() + 1) + " fields, got " +
                                std::to_string(row.size()));
            auto idit = row_of_id.find(row[0]);
            if (idit == row_of_id.end())
                throw DataError("modality " + mod.name + ": sample id '" + row[0] +
                                "' not present in labels file");
            const size_t s = idit->second;
            if (filled[s])
                throw DataError("modality " + mod.name + ": duplicate row for id '" + row[0] + "'");
            filled[s] = 1;
            for (size_t f = 0; f < mod.width(); ++f) {
                const std::string& text = row[f + 1];
                if (missing_tokens.count(text)) continue;
                const FeatureSchema& fs = mod.schema[f];
                if (fs.kind == FeatureKind::numerical) {
                    try {
                        size_t pos = 0;
                        const double v = std::stod(text, &pos);
                        if (pos != text.size()) throw std::invalid_argument(text);
                        mod.at(s, f) = Cell::numeric(v);
                    } catch (const std::exception&) {
                        throw DataError("modality " + mod.name + ", feature " + fs.name +
                                        ": non-numeric value '" + text + "'");
                    }
                } else {
                    const auto cit =
                        std::find(fs.categories.begin(), fs.categories.end(), text);
                    if (cit == fs.categories.end())
                        throw DataError("modality " + mod.name + ", feature " + fs.name +
                                        ": unknown category '" + text + "'");
                    mod.at(s, f) =
                        Cell::category(static_cast<int>(cit - fs.categories.begin()));
                }
            }
        }
        for (size_t s = 0; s < ds.n_samples(); ++s)
            if (!filled[s])
                throw DataError("modality " + mod.name + ": sample id '" + ds.sample_ids[s] +
                                "' has no row");
        ds.modalities.push_back(std::move(mod));
    }
    return ds;
}

// Writes CSVs + schema + manifest into dir and returns the manifest path.
// Round-trips cell-identically through load_dataset.
inline std::filesystem::path write_dataset(const MultimodalDataset& ds,
                                           const std::filesystem::path& dir,
                                           const std::string& id_column = "sample_id") {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir.string());

    nlohmann::json schema_json;
    schema_json["modalities"] = nlohmann::json::array();
    for (const auto& m : ds.modalities) {
        nlohmann::json mj;
        mj["name"] = m.name;
        mj["features"] = nlohmann::json::array();
        for (const auto& f : m.schema) {
            nlohmann::json fj;
            fj["name"] = f.name;
            fj["kind"] = f.kind == FeatureKind::numerical ? "numerical" : "categorical";
            if (f.kind == FeatureKind::categorical) fj["categories"] = f.categories;
            mj["features"].push_back(fj);
        }
        schema_json["modalities"].push_back(mj);
    }
    {
        std::ofstream out(dir / "schema.json");
        out << schema_json.dump(2) << '\n';
    }
    {
        std::ofstream out(dir / "labels.csv");
        out << id_column << ",label\n";
        for (size_t i = 0; i < ds.n_samples(); ++i)
            out << csv::quote(ds.sample_ids[i]) << ','
                << csv::quote(ds.class_names[ds.labels[i]]) << '\n';
    }
    for (const auto& m : ds.modalities) {
        std::ofstream out(dir / (m.name + ".csv"));
        out << id_column;
        for (const auto& f : m.schema) out << ',' << csv::quote(f.name);
        out << '\n';
        for (size_t i = 0; i < ds.n_samples(); ++i) {
            out << csv::quote(ds.sample_ids[i]);
            for (size_t f = 0; f < m.width(); ++f) {
                const Cell& c = m.at(i, f);
                out << ',';
                if (!c.observed) continue;
                if (m.schema[f].kind == FeatureKind::numerical)
                    out << csv::format_double(c.num);
                else
                    out << csv::quote(m.schema[f].categories.at(static_cast<size_t>(c.cat)));
            }
            out << '\n';
        }
    }
    nlohmann::json manifest;
    manifest["id_column"] = id_column;
    manifest["labels"] = "labels.csv";
    manifest["schema"] = "schema.json";
    manifest["modalities"] = nlohmann::json::array();
    for (const auto& m : ds.modalities)
        manifest["modalities"].push_back({{"name", m.name}, {"csv", m.name + ".csv"}});
    const auto manifest_path = dir / "manifest.json";
    {
        std::ofstream out(manifest_path);
        out << manifest.dump(2) << '\n';
    }
    return manifest_path;
}

// ---- synthesis -----------------------------------------------------------

// Verification substitute for the access-restricted clinical datasets:
// per-class Gaussians for numerical features and skewed multinomials for
// categorical ones, with a tunable separation so the attainable AUC is
// known in closed form.
struct SynthSpec {
    uint64_t seed = 7;
    size_t n_samples = 400;
    std::vector<size_t> modality_widths = {4, 3};
    size_t class_count = 2;
    double signal = 1.0;               // per-feature class mean separation (+/- signal)
    double categorical_fraction = 0.0; // leading fraction of each modality's features
    size_t categories_per_feature = 3;
    double missing_rate = 0.0; // pre-existing MCAR missingness
};

inline void validate(const SynthSpec& spec) {
    if (spec.n_samples < 50)
        throw DataError("synthesize_dataset: n_samples must be >= 50, got " +
                        std::to_string(spec.n_samples));
    if (spec.modality_widths.empty())
        throw DataError("synthesize_dataset: at least one modality width required");
    for (size_t w : spec.modality_widths)
        if (w == 0) throw DataError("synthesize_dataset: modality width must be >= 1");
    if (spec.class_count < 2) throw DataError("synthesize_dataset: class_count must be >= 2");
    if (spec.missing_rate < 0.0 || spec.missing_rate >= 1.0)
        throw DataError("synthesize_dataset: missing_rate must be in [0,1)");
    if (spec.categorical_fraction < 0.0 || spec.categorical_fraction > 1.0)
        throw DataError("synthesize_dataset: categorical_fraction must be in [0,1]");
}

inline MultimodalDataset synthesize_dataset(const SynthSpec& spec) {
    validate(spec);
    Rng rng(spec.seed);
    const size_t C = spec.class_count;

    MultimodalDataset ds;
    for (size_t c = 0; c < C; ++c) ds.class_names.push_back("class_" + std::to_string(c));
    for (size_t i = 0; i < spec.n_samples; ++i) {
        ds.sample_ids.push_back("s" + std::to_string(i));
        ds.labels.push_back(static_cast<int>(rng.below(C)));
    }

    Rng value_rng = rng.fork(1);
    Rng direction_rng = rng.fork(2);
    for (size_t m = 0; m < spec.modality_widths.size(); ++m) {
        Modality mod;
        mod.name = "modality_" + std::to_string(m);
        const size_t width = spec.modality_widths[m];
        const size_t n_cat = static_cast<size_t>(
            std::floor(spec.categorical_fraction * static_cast<double>(width)));
        std::vector<double> direction(width);
        for (size_t f = 0; f < width; ++f) {
            FeatureSchema fs;
            fs.name = "m" + std::to_string(m) + "_f" + std::to_string(f);
            if (f < n_cat) {
                fs.kind = FeatureKind::categorical;
                for (size_t k = 0; k < spec.categories_per_feature; ++k)
                    fs.categories.push_back("cat_" + std::to_string(k));
            } else {
                fs.kind = FeatureKind::numerical;
            }
            direction[f] = direction_rng.bernoulli(0.5) ? 1.0 : -1.0;
            mod.schema.push_back(std::move(fs));
        }
        mod.cells.assign(spec.n_samples * width, Cell::missing());
        for (size_t i = 0; i < spec.n_samples; ++i) {
            const int label = ds.labels[i];
            const double centered =
                C == 1 ? 0.0
                       : (2.0 * static_cast<double>(label) - static_cast<double>(C - 1)) /
                             static_cast<double>(std::max<size_t>(1, C - 1));
            for (size_t f = 0; f < width; ++f) {
                const FeatureSchema& fs = mod.schema[f];
                if (fs.kind == FeatureKind::numerical) {
                    const double mean = spec.signal * direction[f] * centered;
                    mod.at(i, f) = Cell::numeric(mean + value_rng.normal());
                } else {
                    const size_t K = fs.categories.size();
                    const size_t preferred = (static_cast<size_t>(label) + f) % K;
                    const double boost = 2.0 * spec.signal;
                    const double total = static_cast<double>(K) + boost;
                    double u = value_rng.uniform() * total;
                    size_t pick = K - 1;
                    for (size_t k = 0; k < K; ++k) {
                        const double w = 1.0 + (k == preferred ? boost : 0.0);
                        if (u < w) {
                            pick = k;
                            break;
                        }
                        u -= w;
                    }
                    mod.at(i, f) = Cell::category(static_cast<int>(pick));
                }
            }
        }
        ds.modalities.push_back(std::move(mod));
    }

    if (spec.missing_rate > 0.0) {
        Rng miss_rng = rng.fork(3);
        for (size_t i = 0; i < spec.n_samples; ++i)
            for (auto& mod : ds.modalities)
                for (size_t f = 0; f < mod.width(); ++f)
                    if (miss_rng.bernoulli(spec.missing_rate)) mod.at(i, f) = Cell::missing();
        // keep the at-least-one-observation guarantee per sample
        for (size_t i = 0; i < spec.n_samples; ++i) {
            if (ds.observed_features_of(i) > 0) continue;
            const size_t total = ds.total_features();
            size_t flat = miss_rng.below(total);
            for (auto& mod : ds.modalities) {
                if (flat < mod.width()) {
                    const FeatureSchema& fs = mod.schema[flat];
                    mod.at(i, flat) = fs.kind == FeatureKind::numerical
                                          ? Cell::numeric(miss_rng.normal())
                                          : Cell::category(static_cast<int>(
                                                miss_rng.below(fs.categories.size())));
                    break;
                }
                flat -= mod.width();
            }
        }
    }
    return ds;
}

// ---- stratified cross-validation -----------------------------------------

struct FoldSplit {
    std::vector<size_t> train;
    std::vector<size_t> val;
    std::vector<size_t> test;
};

// k stratified test folds partitioning the dataset; val_fraction of each
// fold's training pool is split off, also stratified. Per-class fold counts
// stay within floor/ceil of n_class/k.
inline std::vector<FoldSplit> stratified_splits(const MultimodalDataset& ds, size_t k,
                                                double val_fraction, uint64_t seed) {
    if (k < 2) throw DataError("stratified_splits: fold count must be >= 2");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw DataError("stratified_splits: val_fraction must be in [0,1)");
    std::vector<std::vector<size_t>> by_class(ds.n_classes());
    for (size_t i = 0; i < ds.n_samples(); ++i) by_class[ds.labels[i]].push_back(i);
    // A class may be rarer than k (it then appears in floor(n_c/k) or
    // ceil(n_c/k) test folds), but below 2 samples some training pool would
    // lose the class entirely.
    for (size_t c = 0; c < by_class.size(); ++c)
        if (by_class[c].size() < 2)
            throw DataError("stratified_splits: class " + ds.class_names[c] + " has " +
                            std::to_string(by_class[c].size()) +
                            " samples; at least 2 required for stratified folds");

    Rng rng(seed);
    std::vector<std::vector<size_t>> fold_members(k);
    size_t cursor = 0; // continues across classes so fold sizes balance
    for (auto& members : by_class) {
        rng.shuffle(members);
        for (size_t idx : members) {
            fold_members[cursor % k].push_back(idx);
            ++cursor;
        }
    }

    std::vector<FoldSplit> out(k);
    for (size_t f = 0; f < k; ++f) {
        FoldSplit& split = out[f];
        split.test = fold_members[f];
        std::sort(split.test.begin(), split.test.end());

        std::vector<std::vector<size_t>> pool_by_class(ds.n_classes());
        for (size_t g = 0; g < k; ++g) {
            if (g == f) continue;
            for (size_t idx : fold_members[g]) pool_by_class[ds.labels[idx]].push_back(idx);
        }
        Rng val_rng = rng.fork(1000 + f);
        for (auto& pool : pool_by_class) {
            val_rng.shuffle(pool);
            const size_t n_val = static_cast<size_t>(
                std::llround(val_fraction * static_cast<double>(pool.size())));
            for (size_t i = 0; i < pool.size(); ++i)
                (i < n_val ? split.val : split.train).push_back(pool[i]);
        }
        std::sort(split.val.begin(), split.val.end());
        std::sort(split.train.begin(), split.train.end());
    }
    return out;
}

} // namespace maria
