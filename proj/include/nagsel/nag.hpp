#pragma once

// Neuron-Activated Graphs: per layer, the sorted indices of the K highest-impact
// neurons of one projection type.

#include "common.hpp"
#include "impact.hpp"
#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace nagsel {

enum class LayerSet : std::uint8_t { All = 0, Last = 1 };

inline LayerSet parse_layer_set(std::string_view s) {
    if (s == "all") return LayerSet::All;
    if (s == "last") return LayerSet::Last;
    throw ConfigError("unknown layer set '" + std::string(s) + "' (expected all or last)");
}

inline std::string_view to_string(LayerSet s) { return s == LayerSet::All ? "all" : "last"; }

// K from a width ratio: r_k * d rounded to the nearest multiple of 10 (half up),
// or to the nearest integer when r_k * d < 5; always clamped to [1, d].
// Reproduces the published widths 6144 -> 20, 8192 -> 20, 11008 -> 30 at r_k = 0.003.
inline std::uint32_t width_from_ratio(double r_k, std::uint32_t d) {
    if (!(r_k > 0.0 && r_k <= 1.0)) throw ConfigError("width ratio must lie in (0, 1]");
    const double raw = r_k * static_cast<double>(d);
    double       k   = raw < 5.0 ? std::floor(raw + 0.5) : 10.0 * std::floor(raw / 10.0 + 0.5);
    k                = std::clamp(k, 1.0, static_cast<double>(d));
    return static_cast<std::uint32_t>(k);
}

struct NagConfig {
    ProjType                   proj      = ProjType::UP;
    LayerSet                   layer_set = LayerSet::All;
    std::uint16_t              model_layers = 0;
    std::vector<std::uint32_t> widths;  // K per stored layer
    std::vector<std::uint32_t> dims;    // d per stored layer

    std::size_t layers() const { return widths.size(); }

    std::uint32_t model_layer(std::size_t stored) const {
        return layer_set == LayerSet::All ? static_cast<std::uint32_t>(stored)
                                          : static_cast<std::uint32_t>(model_layers - 1);
    }

    std::uint64_t total_width() const { return std::accumulate(widths.begin(), widths.end(), std::uint64_t{0}); }

    std::vector<ProjectionRef> projection_refs() const {
        std::vector<ProjectionRef> refs;
        for (std::size_t i = 0; i < layers(); ++i) refs.push_back({model_layer(i), proj});
        return refs;
    }

    void validate() const {
        if (widths.empty()) throw ConfigError("NAG config has no layers");
        if (widths.size() != dims.size()) throw ConfigError("NAG config: widths and dims differ in length");
        if (model_layers == 0) throw ConfigError("NAG config: model_layers must be >= 1");
        const std::size_t expect = layer_set == LayerSet::All ? model_layers : 1;
        if (widths.size() != expect) {
            throw ConfigError("NAG config: layer set '" + std::string(to_string(layer_set)) + "' needs " +
                              std::to_string(expect) + " layers, got " + std::to_string(widths.size()));
        }
        for (std::size_t l = 0; l < widths.size(); ++l) {
            if (widths[l] == 0 || widths[l] > dims[l]) {
                throw ConfigError("NAG config: width " + std::to_string(widths[l]) + " at layer " +
                                  std::to_string(l) + " must lie in [1, " + std::to_string(dims[l]) + "]");
            }
        }
    }

    // Uniform width K for every configured layer of `spec`.
    static NagConfig for_model(const ModelSpec& spec, ProjType proj, std::uint32_t k,
                               LayerSet set = LayerSet::All) {
        NagConfig cfg;
        cfg.proj         = proj;
        cfg.layer_set    = set;
        cfg.model_layers = static_cast<std::uint16_t>(spec.n_layers);
        const std::uint32_t d = proj == ProjType::UP ? spec.d_internal : spec.d_model;
        const std::size_t   n = set == LayerSet::All ? spec.n_layers : 1;
        cfg.widths.assign(n, k);
        cfg.dims.assign(n, d);
        cfg.validate();
        return cfg;
    }

    static NagConfig for_model_ratio(const ModelSpec& spec, ProjType proj, double r_k,
                                     LayerSet set = LayerSet::All) {
        const std::uint32_t d = proj == ProjType::UP ? spec.d_internal : spec.d_model;
        return for_model(spec, proj, width_from_ratio(r_k, d), set);
    }

    friend bool operator==(const NagConfig&, const NagConfig&) = default;
};

inline void require_same_config(const NagConfig& a, const NagConfig& b, std::string_view who) {
    if (!(a == b)) throw ConfigError(std::string(who) + ": NAG configurations differ");
}

struct NagRecord {
    std::uint64_t                           doc_id = 0;
    std::vector<std::vector<std::uint32_t>> layers;  // sorted ascending, distinct

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.size();
        return n;
    }

    friend bool operator==(const NagRecord&, const NagRecord&) = default;
};

// Empty string when valid, otherwise a description of the first violated invariant.
inline std::string check_record(const NagRecord& rec, const NagConfig& cfg) {
    if (rec.layers.size() != cfg.layers()) {
        return "record has " + std::to_string(rec.layers.size()) + " layers, config has " +
               std::to_string(cfg.layers());
    }
    for (std::size_t l = 0; l < rec.layers.size(); ++l) {
        const auto& idx = rec.layers[l];
        if (idx.size() != cfg.widths[l]) {
            return "layer " + std::to_string(l) + " has " + std::to_string(idx.size()) + " indices, expected K=" +
                   std::to_string(cfg.widths[l]);
        }
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= cfg.dims[l]) {
                return "layer " + std::to_string(l) + " index " + std::to_string(idx[i]) + " >= d=" +
                       std::to_string(cfg.dims[l]);
            }
            if (i > 0 && idx[i] <= idx[i - 1]) {
                return "layer " + std::to_string(l) + " indices not strictly increasing at position " +
                       std::to_string(i);
            }
        }
    }
    return {};
}

inline void validate_record(const NagRecord& rec, const NagConfig& cfg) {
    if (auto why = check_record(rec, cfg); !why.empty()) {
        throw std::invalid_argument("NAG record " + std::to_string(rec.doc_id) + ": " + why);
    }
}

// Indices of the K largest scores, ascending. Ties go to the lower index.
inline std::vector<std::uint32_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    if (k < 1 || k > scores.size()) {
        throw std::out_of_range("top_k_indices: K=" + std::to_string(k) + " outside [1, " +
                                std::to_string(scores.size()) + "]");
    }
    std::vector<std::uint32_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0u);
    auto before = [&](std::uint32_t a, std::uint32_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), before);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline NagRecord build_nag(std::uint64_t doc_id, std::span<const ImpactVector> ivs, const NagConfig& cfg) {
    if (ivs.size() != cfg.layers()) {
        throw std::invalid_argument("build_nag: expected " + std::to_string(cfg.layers()) +
                                    " impact vectors, got " + std::to_string(ivs.size()));
    }
    NagRecord rec;
    rec.doc_id = doc_id;
    rec.layers.reserve(ivs.size());
    for (std::size_t l = 0; l < ivs.size(); ++l) {
        const ProjectionRef want{cfg.model_layer(l), cfg.proj};
        if (!(ivs[l].ref == want)) {
            throw std::invalid_argument("build_nag: missing impact vector for layer " + std::to_string(want.layer) +
                                        " " + std::string(to_string(want.proj)));
        }
        if (ivs[l].size() != cfg.dims[l]) {
            throw std::invalid_argument("build_nag: impact vector for layer " + std::to_string(want.layer) +
                                        " has " + std::to_string(ivs[l].size()) + " neurons, config says " +
                                        std::to_string(cfg.dims[l]));
        }
        if (cfg.widths[l] > ivs[l].size()) throw std::invalid_argument("build_nag: width exceeds neuron count");
        rec.layers.push_back(top_k_indices(ivs[l].scores, cfg.widths[l]));
    }
    return rec;
}

// Full per-document extraction: forward pass, impacts, top-K.
inline NagRecord extract_nag(const ToyModel& model, std::uint64_t doc_id, std::span<const std::uint32_t> token_ids,
                             const NagConfig& cfg, TokenAggregation agg = TokenAggregation::Mean) {
    const auto refs = cfg.projection_refs();
    const auto n    = std::min<std::size_t>(token_ids.size(), model.spec().max_seq_len);
    const auto ivs  = extract_impacts(model, token_ids.first(n), refs, agg);
    return build_nag(doc_id, ivs, cfg);
}

// ---------------------------------------------------------------------------
// NAG file. Header: "NAGR", u32 version, u16 L, u8 proj, u8 layer-set flag,
// u32 K[L], u32 d[L], u16 model layer count. Records: u64 doc_id followed by
// the K[l] u32 indices of every layer, so every record has the same size.

inline constexpr std::uint32_t kNagVersion = 1;

namespace detail {

inline void put_config_body(io::Writer& w, const NagConfig& cfg) {
    w.put(static_cast<std::uint16_t>(cfg.layers()));
    w.put(static_cast<std::uint8_t>(cfg.proj));
    w.put(static_cast<std::uint8_t>(cfg.layer_set));
    w.put_array(cfg.widths.data(), cfg.widths.size());
    w.put_array(cfg.dims.data(), cfg.dims.size());
    w.put(cfg.model_layers);
}

inline NagConfig get_config_body(io::Reader& r) {
    NagConfig  cfg;
    const auto l_at = r.offset();
    const auto L    = r.get<std::uint16_t>("layer count");
    if (L == 0) throw FormatError("layer count must be >= 1", l_at);
    const auto proj_at = r.offset();
    cfg.proj           = proj_type_from_byte(r.get<std::uint8_t>("proj_type"), proj_at);
    const auto flag_at = r.offset();
    const auto flag    = r.get<std::uint8_t>("layer-set flag");
    if (flag > 1) throw FormatError("invalid layer-set flag " + std::to_string(flag), flag_at);
    cfg.layer_set = static_cast<LayerSet>(flag);
    cfg.widths.resize(L);
    cfg.dims.resize(L);
    r.get_array(cfg.widths.data(), L, "K array");
    r.get_array(cfg.dims.data(), L, "d array");
    cfg.model_layers = r.get<std::uint16_t>("model layer count");
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("inconsistent header: ") + e.what(), l_at);
    }
    return cfg;
}

}  // namespace detail

inline std::uint64_t nag_header_size(const NagConfig& cfg) {
    return 4 + 4 + 2 + 1 + 1 + 8 * cfg.layers() + 2;
}

inline std::uint64_t nag_record_size(const NagConfig& cfg) { return 8 + 4 * cfg.total_width(); }

class NagWriter {
public:
    NagWriter(std::ostream& out, NagConfig cfg) : out_(out), cfg_(std::move(cfg)) {
        cfg_.validate();
        io::Writer w(out_);
        w.put_bytes("NAGR");
        w.put(kNagVersion);
        detail::put_config_body(w, cfg_);
        w.check();
    }

    // Continues an existing file whose header has already been written.
    static NagWriter append(std::ostream& out, NagConfig cfg) { return NagWriter(out, std::move(cfg), 0); }

    void write(const NagRecord& rec) {
        validate_record(rec, cfg_);
        io::Writer w(out_);
        w.put(rec.doc_id);
        for (const auto& layer : rec.layers) w.put_array(layer.data(), layer.size());
        w.check();
        ++count_;
    }

    const NagConfig& config() const { return cfg_; }
    std::uint64_t    count() const { return count_; }

private:
    NagWriter(std::ostream& out, NagConfig cfg, int) : out_(out), cfg_(std::move(cfg)) { cfg_.validate(); }

    std::ostream& out_;
    NagConfig     cfg_;
    std::uint64_t count_ = 0;
};

class NagReader {
public:
    explicit NagReader(std::istream& in) : in_(in), reader_(in) {
        reader_.expect_magic("NAGR");
        const auto ver_at = reader_.offset();
        const auto ver    = reader_.get<std::uint32_t>("version");
        if (ver != kNagVersion) throw FormatError("unsupported NAG file version " + std::to_string(ver), ver_at);
        cfg_ = detail::get_config_body(reader_);
    }

    const NagConfig& config() const { return cfg_; }

    // Next record, or nullopt at a clean end of file.
    std::optional<NagRecord> next() {
        if (reader_.at_eof()) return std::nullopt;
        const auto start = reader_.offset();
        NagRecord  rec;
        rec.doc_id = reader_.get<std::uint64_t>("record doc_id");
        rec.layers.resize(cfg_.layers());
        for (std::size_t l = 0; l < cfg_.layers(); ++l) {
            rec.layers[l].resize(cfg_.widths[l]);
            reader_.get_array(rec.layers[l].data(), cfg_.widths[l], "record indices");
        }
        if (auto why = check_record(rec, cfg_); !why.empty()) {
            throw FormatError("invalid NAG record " + std::to_string(index_) + ": " + why, start);
        }
        ++index_;
        return rec;
    }

    // Positions the stream at record i (requires a seekable stream).
    void seek(std::uint64_t i) {
        in_.clear();
        in_.seekg(static_cast<std::streamoff>(nag_header_size(cfg_) + i * nag_record_size(cfg_)));
        if (!in_) throw std::runtime_error("seek to NAG record " + std::to_string(i) + " failed");
        reader_.set_offset(nag_header_size(cfg_) + i * nag_record_size(cfg_));
        index_  = i;
    }

private:
    std::istream& in_;
    io::Reader    reader_;
    NagConfig     cfg_;
    std::uint64_t index_ = 0;
};

struct NagFile {
    NagConfig              cfg;
    std::vector<NagRecord> records;
};

inline void write_nags(std::ostream& out, const NagConfig& cfg, std::span<const NagRecord> records) {
    NagWriter w(out, cfg);
    for (const auto& r : records) w.write(r);
}

inline NagFile read_nags(std::istream& in) {
    NagReader r(in);
    NagFile   f{r.config(), {}};
    while (auto rec = r.next()) f.records.push_back(std::move(*rec));
    return f;
}

inline NagFile load_nags(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open NAG file '" + path + "'");
    try {
        return read_nags(in);
    } catch (const FormatError& e) {
        throw e.in_file(path);
    }
}

inline void save_nags(const std::string& path, const NagConfig& cfg, std::span<const NagRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_nags(out, cfg, records);
}

}  // namespace nagsel
