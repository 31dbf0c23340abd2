#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maria/dataset.hpp"
#include "maria/masking.hpp"
#include "maria/tensor.hpp"

namespace maria {

struct InferenceError : std::runtime_error {
    explicit InferenceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class FusionMode { intermediate, early, late };

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::intermediate: return "intermediate";
        case FusionMode::early: return "early";
        case FusionMode::late: return "late";
    }
    return "?";
}

inline FusionMode fusion_from_string(const std::string& s) {
    if (s == "intermediate") return FusionMode::intermediate;
    if (s == "early") return FusionMode::early;
    if (s == "late") return FusionMode::late;
    throw std::invalid_argument("unknown fusion mode: " + s +
                                " (expected intermediate|early|late)");
}

struct EncoderConfig {
    size_t d_embed = 32;
    size_t heads = 4;
    size_t modality_layers = 2;
    size_t shared_layers = 2;
    size_t ff_width = 64;

    size_t head_dim() const { return d_embed / heads; }

    void validate() const {
        if (d_embed == 0 || heads == 0 || ff_width == 0)
            throw std::invalid_argument("encoder config dimensions must be positive");
        if (d_embed % heads != 0)
            throw std::invalid_argument("head count " + std::to_string(heads) +
                                        " must divide token width " + std::to_string(d_embed));
        if (modality_layers == 0)
            throw std::invalid_argument("at least one encoder block per stack required");
    }
};

// Lookup-table embedding for one modality. A numerical feature embeds as
// value * direction + bias (two learned rows); a categorical feature has one
// row per declared category plus a reserved unknown row. Missing cells map
// to a frozen all-zero row that never receives gradient.
class EmbeddingTable {
public:
    EmbeddingTable() = default;

    EmbeddingTable(const std::vector<FeatureSchema>& schema, size_t d, Rng& rng)
        : schema_(schema) {
        size_t total = 0;
        for (const auto& fs : schema_) {
            Layout l;
            l.numerical = fs.kind == FeatureKind::numerical;
            l.first_row = total;
            l.n_categories = fs.categories.size();
            total += l.numerical ? 2 : l.n_categories + 1;
            layout_.push_back(l);
        }
        rows_ = Tensor::randn({std::max<size_t>(total, 1), d}, rng,
                              1.0 / std::sqrt(static_cast<double>(d)), /*requires_grad=*/true);
        missing_row_ = Tensor::zeros({1, d}, /*requires_grad=*/false);
    }

    // [t x d] token matrix; unobserved cells yield exactly the frozen zero
    // row, regardless of any payload stored next to the missing flag.
    Tensor embed(const std::vector<Cell>& cells) const {
        if (cells.size() != schema_.size())
            throw DimensionError("embed: sample width " + std::to_string(cells.size()) +
                                 " does not match schema width " +
                                 std::to_string(schema_.size()));
        std::vector<Tensor> tokens;
        tokens.reserve(cells.size());
        for (size_t f = 0; f < cells.size(); ++f) {
            const Cell& c = cells[f];
            const Layout& l = layout_[f];
            if (!c.observed) {
                tokens.push_back(missing_row_);
            } else if (l.numerical) {
                Tensor dir = gather_row(rows_, l.first_row);
                Tensor bias = gather_row(rows_, l.first_row + 1);
                tokens.push_back(add(scale(dir, c.num), bias));
            } else {
                if (c.cat < 0 || static_cast<size_t>(c.cat) > l.n_categories)
                    throw std::out_of_range("embed: category index " + std::to_string(c.cat) +
                                            " out of vocabulary for feature " + schema_[f].name);
                tokens.push_back(gather_row(rows_, l.first_row + static_cast<size_t>(c.cat)));
            }
        }
        return concat_rows(tokens);
    }

    Tensor& rows() { return rows_; }
    const Tensor& rows() const { return rows_; }
    const Tensor& missing_row() const { return missing_row_; }
    const std::vector<FeatureSchema>& schema() const { return schema_; }

private:
    struct Layout {
        bool numerical = true;
        size_t first_row = 0;   // numerical: direction row, bias row follows
        size_t n_categories = 0; // categorical: rows [first..first+n], last is unknown
    };
    std::vector<FeatureSchema> schema_;
    std::vector<Layout> layout_;
    Tensor rows_;
    Tensor missing_row_;
};

struct BlockParams {
    std::vector<Tensor> wq, wk, wv; // per head, each [d x d_h]
    Tensor wo;                      // [d x d]
    Tensor ln1_gain, ln1_bias;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
    Tensor ln2_gain, ln2_bias;
};

// Modified masked self-attention: per head
//   ReLU(softmax(Q K^T / sqrt(d_h) + M) + M^T) V,
// heads concatenated and output-projected. The column mask M silences
// unobserved keys; the transposed mask plus ReLU zeroes unobserved rows.
inline Tensor msa(const Tensor& x, const ObservedVector& obs, const BlockParams& p,
                  size_t head_dim) {
    if (obs.size() != x.rows())
        throw DimensionError("msa: observed vector length " + std::to_string(obs.size()) +
                             " does not match token count " + std::to_string(x.rows()));
    const MaskMatrix mask = build_mask(obs);
    const std::vector<double> mask_t = mask.additive_transposed();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Tensor> heads;
    heads.reserve(p.wq.size());
    for (size_t h = 0; h < p.wq.size(); ++h) {
        Tensor q = matmul(x, p.wq[h]);
        Tensor k = matmul(x, p.wk[h]);
        Tensor v = matmul(x, p.wv[h]);
        Tensor logits = scale(matmul_nt(q, k), inv_sqrt);
        Tensor attn = masked_softmax(logits, mask.additive);
        Tensor gated = relu(add_const(attn, mask_t));
        heads.push_back(matmul(gated, v));
    }
    return matmul(concat_cols(heads), p.wo);
}

// Post-norm transformer block around the masked attention; unobserved rows
// are re-zeroed at the end so residual paths cannot resurrect them.
inline Tensor encoder_block(const Tensor& x, const ObservedVector& obs, const BlockParams& p,
                            size_t head_dim) {
    Tensor attn = msa(x, obs, p, head_dim);
    Tensor h1 = layer_norm(add(x, attn), p.ln1_gain, p.ln1_bias);
    Tensor ff = relu(add_row(matmul(h1, p.ff_w1), p.ff_b1));
    Tensor ff2 = add_row(matmul(ff, p.ff_w2), p.ff_b2);
    Tensor h2 = layer_norm(add(h1, ff2), p.ln2_gain, p.ln2_bias);
    return zero_rows(h2, obs);
}

inline Tensor encoder_stack(Tensor x, const ObservedVector& obs,
                            const std::vector<BlockParams>& blocks, size_t head_dim) {
    for (const auto& b : blocks) x = encoder_block(x, obs, b, head_dim);
    return x;
}

// The full architecture in its three fusion wirings:
//  - intermediate: per-modality encoders, concatenated latents, shared
//    encoder, one classification head;
//  - early: one encoder over the concatenated feature list;
//  - late: one full single-modality network per modality, decision profiles
//    averaged over the modalities present in a sample.
class MariaModel {
public:
    MariaModel() = default;

    MariaModel(std::vector<std::string> modality_names,
               std::vector<std::vector<FeatureSchema>> schemas,
               std::vector<std::string> class_names, EncoderConfig cfg, FusionMode mode,
               uint64_t seed)
        : mode_(mode),
          cfg_(cfg),
          modality_names_(std::move(modality_names)),
          schemas_(std::move(schemas)),
          class_names_(std::move(class_names)) {
        cfg_.validate();
        if (class_names_.size() < 2)
            throw std::invalid_argument("model needs at least 2 classes");
        Rng rng(seed);
        build(rng);
    }

    static MariaModel for_dataset(const MultimodalDataset& ds, EncoderConfig cfg, FusionMode mode,
                                  uint64_t seed) {
        std::vector<std::string> names;
        std::vector<std::vector<FeatureSchema>> schemas;
        for (const auto& m : ds.modalities) {
            names.push_back(m.name);
            schemas.push_back(m.schema);
        }
        return MariaModel(std::move(names), std::move(schemas), ds.class_names, cfg, mode, seed);
    }

    FusionMode fusion() const { return mode_; }
    const EncoderConfig& config() const { return cfg_; }
    const std::vector<std::string>& class_names() const { return class_names_; }
    size_t n_classes() const { return class_names_.size(); }
    size_t n_modalities() const { return schemas_.size(); }

    size_t n_members() const { return mode_ == FusionMode::late ? branches_.size() : 1; }

    // Logit-producing forward for trainable members. For intermediate and
    // early fusion the single member is the whole model; for late fusion
    // member m is that modality's network.
    Tensor member_forward(size_t member, const Sample& sample) const {
        if (mode_ == FusionMode::late) {
            const auto& cells = sample.modality_cells.at(member);
            if (observed_count(cells) == 0)
                throw InferenceError("modality " + modality_names_[member] +
                                     " has no observed feature for this sample");
            const ObservedVector obs = observed_vector(cells);
            Tensor x = branches_[member].table.embed(cells);
            Tensor r = encoder_stack(x, obs, branches_[member].blocks, cfg_.head_dim());
            return add_row(matmul(flatten(r), head_w_[member]), head_b_[member]);
        }
        return forward(sample);
    }

    // Logits [1 x C] for intermediate and early fusion.
    Tensor forward(const Sample& sample) const {
        if (sample.observed_features() == 0)
            throw InferenceError("cannot run inference on a fully missing sample");
        switch (mode_) {
            case FusionMode::intermediate: return forward_intermediate(sample);
            case FusionMode::early: return forward_early(sample);
            case FusionMode::late:
                throw InferenceError(
                    "late fusion has no single logit head; use decision_profile");
        }
        throw std::logic_error("unreachable");
    }

    // Per-class probability vector; for late fusion the mean of the
    // per-modality softmax profiles over modalities present in the sample.
    std::vector<double> decision_profile(const Sample& sample) const {
        NoGrad guard;
        if (mode_ != FusionMode::late) {
            Tensor logits = forward(sample);
            return softmax_values(logits.values());
        }
        if (sample.observed_features() == 0)
            throw InferenceError("cannot run inference on a fully missing sample");
        std::vector<double> mean(n_classes(), 0.0);
        size_t present = 0;
        for (size_t m = 0; m < branches_.size(); ++m) {
            if (observed_count(sample.modality_cells.at(m)) == 0) continue;
            const std::vector<double> profile =
                softmax_values(member_forward(m, sample).values());
            for (size_t c = 0; c < mean.size(); ++c) mean[c] += profile[c];
            ++present;
        }
        for (double& v : mean) v /= static_cast<double>(present);
        return mean;
    }

    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    // Parameters of one trainable member (prefix-filtered registry view).
    std::vector<std::pair<std::string, Tensor>> member_parameters(size_t member) const {
        if (mode_ != FusionMode::late) return params_;
        const std::string prefix = "member" + std::to_string(member) + ".";
        std::vector<std::pair<std::string, Tensor>> out;
        for (const auto& [name, t] : params_)
            if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
        return out;
    }

    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    const EmbeddingTable& embedding_table(size_t branch) const { return branches_.at(branch).table; }
    const std::vector<BlockParams>& branch_blocks(size_t branch) const {
        return branches_.at(branch).blocks;
    }
    const std::vector<BlockParams>& shared_blocks() const { return shared_blocks_; }
    const Tensor& head_weights(size_t i = 0) const { return head_w_.at(i); }
    const Tensor& head_bias(size_t i = 0) const { return head_b_.at(i); }

    // ---- checkpoint io ----------------------------------------------------

    void save(const std::filesystem::path& path,
              const nlohmann::json& provenance = nlohmann::json()) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
        out.write(kMagic, 8);
        const uint32_t version = 1;
        write_pod(out, version);

        nlohmann::json meta;
        if (!provenance.is_null()) meta["provenance"] = provenance;
        meta["fusion"] = to_string(mode_);
        meta["config"] = {{"d_embed", cfg_.d_embed},
                          {"heads", cfg_.heads},
                          {"modality_layers", cfg_.modality_layers},
                          {"shared_layers", cfg_.shared_layers},
                          {"ff_width", cfg_.ff_width}};
        meta["class_names"] = class_names_;
        meta["modalities"] = nlohmann::json::array();
        for (size_t m = 0; m < schemas_.size(); ++m) {
            nlohmann::json mj;
            mj["name"] = modality_names_[m];
            mj["features"] = nlohmann::json::array();
            for (const auto& fs : schemas_[m]) {
                nlohmann::json fj;
                fj["name"] = fs.name;
                fj["kind"] = fs.kind == FeatureKind::numerical ? "numerical" : "categorical";
                if (fs.kind == FeatureKind::categorical) fj["categories"] = fs.categories;
                mj["features"].push_back(fj);
            }
            meta["modalities"].push_back(mj);
        }
        const std::string blob = meta.dump();
        write_pod(out, static_cast<uint64_t>(blob.size()));
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));

        write_pod(out, static_cast<uint64_t>(params_.size()));
        for (const auto& [name, t] : params_) {
            write_pod(out, static_cast<uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod(out, static_cast<uint32_t>(t.shape().size()));
            for (size_t dim : t.shape()) write_pod(out, static_cast<uint64_t>(dim));
            out.write(reinterpret_cast<const char*>(t.values().data()),
                      static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!out) throw CheckpointError("short write on checkpoint: " + path.string());
    }

    static MariaModel load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, kMagic, 8) != 0)
            throw CheckpointError("not a model checkpoint: " + path.string());
        uint32_t version = 0;
        read_pod(in, version);
        if (version != 1)
            throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
        uint64_t blob_len = 0;
        read_pod(in, blob_len);
        std::string blob(blob_len, '\0');
        in.read(blob.data(), static_cast<std::streamsize>(blob_len));
        nlohmann::json meta = nlohmann::json::parse(blob);

        EncoderConfig cfg;
        cfg.d_embed = meta.at("config").at("d_embed").get<size_t>();
        cfg.heads = meta.at("config").at("heads").get<size_t>();
        cfg.modality_layers = meta.at("config").at("modality_layers").get<size_t>();
        cfg.shared_layers = meta.at("config").at("shared_layers").get<size_t>();
        cfg.ff_width = meta.at("config").at("ff_width").get<size_t>();
        std::vector<std::string> names;
        std::vector<std::vector<FeatureSchema>> schemas;
        for (const auto& mj : meta.at("modalities")) {
            names.push_back(mj.at("name").get<std::string>());
            schemas.push_back(detail::parse_feature_list(mj.at("features"),
                                                         mj.at("name").get<std::string>()));
        }
        MariaModel model(std::move(names), std::move(schemas),
                         meta.at("class_names").get<std::vector<std::string>>(), cfg,
                         fusion_from_string(meta.at("fusion").get<std::string>()), /*seed=*/0);

        uint64_t n_tensors = 0;
        read_pod(in, n_tensors);
        if (n_tensors != model.params_.size())
            throw CheckpointError("checkpoint tensor count mismatch");
        for (uint64_t i = 0; i < n_tensors; ++i) {
            uint32_t name_len = 0;
            read_pod(in, name_len);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            uint32_t ndim = 0;
            read_pod(in, ndim);
            std::vector<size_t> shape(ndim);
            for (auto& d : shape) {
                uint64_t v = 0;
                read_pod(in, v);
                d = static_cast<size_t>(v);
            }
            auto& [expected_name, t] = model.params_[i];
            if (name != expected_name || shape != t.shape())
                throw CheckpointError("checkpoint tensor '" + name +
                                      "' does not match model layout entry '" + expected_name +
                                      "'");
            in.read(reinterpret_cast<char*>(t.values().data()),
                    static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
        return model;
    }

private:
    struct Branch {
        EmbeddingTable table;
        std::vector<BlockParams> blocks;
    };

    static constexpr const char kMagic[9] = "MARIACP1";

    template <class T>
    static void write_pod(std::ofstream& out, const T& v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    template <class T>
    static void read_pod(std::ifstream& in, T& v) {
        in.read(reinterpret_cast<char*>(&v), sizeof(T));
    }

    static size_t observed_count(const std::vector<Cell>& cells) {
        size_t n = 0;
        for (const Cell& c : cells)
            if (c.observed) ++n;
        return n;
    }

    static std::vector<double> softmax_values(const std::vector<double>& logits) {
        double m = logits[0];
        for (double v : logits) m = std::max(m, v);
        std::vector<double> out(logits.size());
        double s = 0.0;
        for (size_t i = 0; i < logits.size(); ++i) {
            out[i] = std::exp(logits[i] - m);
            s += out[i];
        }
        for (double& v : out) v /= s;
        return out;
    }

    size_t total_tokens() const {
        size_t t = 0;
        for (const auto& s : schemas_) t += s.size();
        return t;
    }

    BlockParams make_block(const std::string& prefix, Rng& rng) {
        const size_t d = cfg_.d_embed, dh = cfg_.head_dim(), ff = cfg_.ff_width;
        const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
        const double ff_std = 1.0 / std::sqrt(static_cast<double>(ff));
        BlockParams b;
        for (size_t h = 0; h < cfg_.heads; ++h) {
            b.wq.push_back(Tensor::randn({d, dh}, rng, proj_std, true));
            b.wk.push_back(Tensor::randn({d, dh}, rng, proj_std, true));
            b.wv.push_back(Tensor::randn({d, dh}, rng, proj_std, true));
            const std::string hp = prefix + ".h" + std::to_string(h);
            reg(hp + ".wq", b.wq.back());
            reg(hp + ".wk", b.wk.back());
            reg(hp + ".wv", b.wv.back());
        }
        b.wo = Tensor::randn({d, d}, rng, proj_std, true);
        b.ln1_gain = Tensor::full({d}, 1.0, true);
        b.ln1_bias = Tensor::zeros({d}, true);
        b.ff_w1 = Tensor::randn({d, ff}, rng, proj_std, true);
        b.ff_b1 = Tensor::zeros({ff}, true);
        b.ff_w2 = Tensor::randn({ff, d}, rng, ff_std, true);
        b.ff_b2 = Tensor::zeros({d}, true);
        b.ln2_gain = Tensor::full({d}, 1.0, true);
        b.ln2_bias = Tensor::zeros({d}, true);
        reg(prefix + ".wo", b.wo);
        reg(prefix + ".ln1_gain", b.ln1_gain);
        reg(prefix + ".ln1_bias", b.ln1_bias);
        reg(prefix + ".ff_w1", b.ff_w1);
        reg(prefix + ".ff_b1", b.ff_b1);
        reg(prefix + ".ff_w2", b.ff_w2);
        reg(prefix + ".ff_b2", b.ff_b2);
        reg(prefix + ".ln2_gain", b.ln2_gain);
        reg(prefix + ".ln2_bias", b.ln2_bias);
        return b;
    }

    void add_head(const std::string& prefix, size_t in_width, Rng& rng) {
        head_w_.push_back(Tensor::randn({in_width, class_names_.size()}, rng,
                                        1.0 / std::sqrt(static_cast<double>(in_width)), true));
        head_b_.push_back(Tensor::zeros({class_names_.size()}, true));
        reg(prefix + ".head_w", head_w_.back());
        reg(prefix + ".head_b", head_b_.back());
    }

    void reg(const std::string& name, const Tensor& t) { params_.emplace_back(name, t); }

    void build(Rng& rng) {
        const size_t d = cfg_.d_embed;
        switch (mode_) {
            case FusionMode::intermediate: {
                for (size_t m = 0; m < schemas_.size(); ++m) {
                    Branch br;
                    br.table = EmbeddingTable(schemas_[m], d, rng);
                    reg("mod" + std::to_string(m) + ".embed", br.table.rows());
                    for (size_t l = 0; l < cfg_.modality_layers; ++l)
                        br.blocks.push_back(
                            make_block("mod" + std::to_string(m) + ".b" + std::to_string(l), rng));
                    branches_.push_back(std::move(br));
                }
                for (size_t l = 0; l < cfg_.shared_layers; ++l)
                    shared_blocks_.push_back(make_block("shared.b" + std::to_string(l), rng));
                add_head("head", total_tokens() * d, rng);
                break;
            }
            case FusionMode::early: {
                std::vector<FeatureSchema> flat;
                for (const auto& s : schemas_) flat.insert(flat.end(), s.begin(), s.end());
                Branch br;
                br.table = EmbeddingTable(flat, d, rng);
                reg("early.embed", br.table.rows());
                for (size_t l = 0; l < cfg_.modality_layers; ++l)
                    br.blocks.push_back(make_block("early.b" + std::to_string(l), rng));
                branches_.push_back(std::move(br));
                add_head("early", total_tokens() * d, rng);
                break;
            }
            case FusionMode::late: {
                for (size_t m = 0; m < schemas_.size(); ++m) {
                    const std::string prefix = "member" + std::to_string(m);
                    Branch br;
                    br.table = EmbeddingTable(schemas_[m], d, rng);
                    reg(prefix + ".embed", br.table.rows());
                    for (size_t l = 0; l < cfg_.modality_layers; ++l)
                        br.blocks.push_back(make_block(prefix + ".b" + std::to_string(l), rng));
                    branches_.push_back(std::move(br));
                    add_head(prefix, schemas_[m].size() * d, rng);
                }
                break;
            }
        }
    }

    Tensor forward_intermediate(const Sample& sample) const {
        std::vector<Tensor> latents;
        std::vector<ObservedVector> obs_parts;
        for (size_t m = 0; m < branches_.size(); ++m) {
            const auto& cells = sample.modality_cells.at(m);
            const ObservedVector obs = observed_vector(cells);
            Tensor x = branches_[m].table.embed(cells);
            latents.push_back(encoder_stack(x, obs, branches_[m].blocks, cfg_.head_dim()));
            obs_parts.push_back(obs);
        }
        Tensor joint = concat_rows(latents);
        const ObservedVector obs_sh = concat_observed(obs_parts);
        Tensor shared = encoder_stack(joint, obs_sh, shared_blocks_, cfg_.head_dim());
        return add_row(matmul(flatten(shared), head_w_[0]), head_b_[0]);
    }

    Tensor forward_early(const Sample& sample) const {
        std::vector<Cell> flat;
        for (const auto& cells : sample.modality_cells)
            flat.insert(flat.end(), cells.begin(), cells.end());
        const ObservedVector obs = observed_vector(flat);
        Tensor x = branches_[0].table.embed(flat);
        Tensor r = encoder_stack(x, obs, branches_[0].blocks, cfg_.head_dim());
        return add_row(matmul(flatten(r), head_w_[0]), head_b_[0]);
    }

    FusionMode mode_ = FusionMode::intermediate;
    EncoderConfig cfg_;
    std::vector<std::string> modality_names_;
    std::vector<std::vector<FeatureSchema>> schemas_;
    std::vector<std::string> class_names_;
    std::vector<Branch> branches_;
    std::vector<BlockParams> shared_blocks_;
    std::vector<Tensor> head_w_, head_b_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

} // namespace maria
