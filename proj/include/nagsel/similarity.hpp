#pragma once

#include "nag.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <vector>

namespace nagsel {

// |a ∩ b| for two ascending index arrays.
inline std::size_t sorted_intersection_size(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

inline void require_same_shape(const NagRecord& a, const NagRecord& b) {
    if (a.layers.size() != b.layers.size()) {
        throw ConfigError("pairwise similarity: records have " + std::to_string(a.layers.size()) + " and " +
                          std::to_string(b.layers.size()) + " layers");
    }
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if (a.layers[l].size() != b.layers[l].size()) {
            throw ConfigError("pairwise similarity: width mismatch at layer " + std::to_string(l));
        }
    }
}

// Dice coefficient over (layer, neuron) pairs: 2|A ∩ B| / (|A| + |B|).
inline double pairwise_sim(const NagRecord& a, const NagRecord& b) {
    require_same_shape(a, b);
    std::size_t inter = 0;
    for (std::size_t l = 0; l < a.layers.size(); ++l) inter += sorted_intersection_size(a.layers[l], b.layers[l]);
    const std::size_t total = a.total_size() + b.total_size();
    if (total == 0) throw ConfigError("pairwise similarity: empty records");
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

inline double pairwise_sim(const NagRecord& a, const NagRecord& b, const NagConfig& cfg) {
    validate_record(a, cfg);
    validate_record(b, cfg);
    return pairwise_sim(a, b);
}

inline double nag_distance(const NagRecord& a, const NagRecord& b) { return 1.0 - pairwise_sim(a, b); }

// Per (layer, neuron) activation frequency over a document set. Stored as integer
// counts so that merging shards is exact; weight() divides by the document count.
class GroupProfile {
public:
    GroupProfile() = default;
    explicit GroupProfile(NagConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        counts_.resize(cfg_.layers());
        for (std::size_t l = 0; l < cfg_.layers(); ++l) counts_[l].assign(cfg_.dims[l], 0);
    }

    const NagConfig& config() const { return cfg_; }
    std::uint64_t    n_docs() const { return n_docs_; }
    std::size_t      layers() const { return counts_.size(); }

    std::uint64_t count(std::size_t layer, std::size_t k) const { return counts_[layer][k]; }
    std::span<const std::uint64_t> counts(std::size_t layer) const { return counts_[layer]; }

    double weight(std::size_t layer, std::size_t k) const {
        return static_cast<double>(counts_[layer][k]) / static_cast<double>(n_docs_);
    }

    std::vector<double> weights(std::size_t layer) const {
        std::vector<double> w(counts_[layer].size());
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = weight(layer, k);
        return w;
    }

    // Σ_k w_{l,k}; equals K_l whenever every record has the configured width.
    double layer_mass(std::size_t layer) const {
        std::uint64_t s = 0;
        for (auto c : counts_[layer]) s += c;
        return static_cast<double>(s) / static_cast<double>(n_docs_);
    }

    void add(const NagRecord& rec) {
        validate_record(rec, cfg_);
        for (std::size_t l = 0; l < rec.layers.size(); ++l) {
            for (auto k : rec.layers[l]) ++counts_[l][k];
        }
        ++n_docs_;
    }

    void merge(const GroupProfile& other) {
        require_same_config(cfg_, other.cfg_, "profile merge");
        for (std::size_t l = 0; l < counts_.size(); ++l) {
            for (std::size_t k = 0; k < counts_[l].size(); ++k) counts_[l][k] += other.counts_[l][k];
        }
        n_docs_ += other.n_docs_;
    }

    // Used by the profile reader; `counts` must match the config's shape.
    static GroupProfile from_counts(NagConfig cfg, std::vector<std::vector<std::uint64_t>> counts,
                                    std::uint64_t n_docs) {
        GroupProfile p(std::move(cfg));
        if (counts.size() != p.counts_.size()) throw std::invalid_argument("profile counts: layer count mismatch");
        for (std::size_t l = 0; l < counts.size(); ++l) {
            if (counts[l].size() != p.counts_[l].size()) {
                throw std::invalid_argument("profile counts: width mismatch at layer " + std::to_string(l));
            }
        }
        p.counts_ = std::move(counts);
        p.n_docs_ = n_docs;
        return p;
    }

    friend bool operator==(const GroupProfile&, const GroupProfile&) = default;

private:
    NagConfig                               cfg_;
    std::vector<std::vector<std::uint64_t>> counts_;
    std::uint64_t                           n_docs_ = 0;
};

template <typename Range>
GroupProfile build_profile(const Range& records, const NagConfig& cfg) {
    GroupProfile p(cfg);
    for (const auto& r : records) p.add(r);
    if (p.n_docs() == 0) throw std::invalid_argument("build_profile: empty dataset");
    return p;
}

// Layer-averaged share of the profile mass covered by the record's neurons:
//   (1/L) Σ_l Σ_{k ∈ N_l(c)} w_{l,k} / Σ_k w_{l,k}
// Under fixed width this equals the mean pairwise Dice similarity to the profile's documents.
inline double group_sim(const NagRecord& c, const GroupProfile& profile) {
    const auto& cfg = profile.config();
    validate_record(c, cfg);
    if (profile.n_docs() == 0) throw std::invalid_argument("group_sim: profile built from no documents");
    const std::size_t          L = c.layers.size();
    std::vector<std::uint64_t> num(L, 0), denom(L, 0);
    for (std::size_t l = 0; l < L; ++l) {
        const auto counts = profile.counts(l);
        for (auto v : counts) denom[l] += v;
        if (denom[l] == 0) {
            throw std::domain_error("group_sim: profile layer " + std::to_string(l) + " has zero mass");
        }
        for (auto k : c.layers[l]) num[l] += counts[k];
    }
    // equal layer masses: one integer sum and a single division, so equal totals tie exactly
    if (std::all_of(denom.begin(), denom.end(), [&](std::uint64_t v) { return v == denom[0]; })) {
        const std::uint64_t total = std::accumulate(num.begin(), num.end(), std::uint64_t{0});
        return static_cast<double>(total) / (static_cast<double>(denom[0]) * static_cast<double>(L));
    }
    double acc = 0.0;
    for (std::size_t l = 0; l < L; ++l) acc += static_cast<double>(num[l]) / static_cast<double>(denom[l]);
    return acc / static_cast<double>(L);
}

// ---------------------------------------------------------------------------
// Profile file: "NAGP", u32 version, NAG config body (as in the NAG header),
// u64 n_docs, then per layer d float32 weights w = count / n_docs.

inline constexpr std::uint32_t kProfileVersion = 1;

inline void write_profile(std::ostream& out, const GroupProfile& p) {
    io::Writer w(out);
    w.put_bytes("NAGP");
    w.put(kProfileVersion);
    detail::put_config_body(w, p.config());
    w.put(p.n_docs());
    for (std::size_t l = 0; l < p.layers(); ++l) {
        const auto         counts = p.counts(l);
        std::vector<float> buf(counts.size());
        for (std::size_t k = 0; k < counts.size(); ++k) {
            buf[k] = static_cast<float>(static_cast<double>(counts[k]) / static_cast<double>(p.n_docs()));
        }
        w.put_array(buf.data(), buf.size());
    }
    w.check();
}

// Recovers exact counts from the stored weights; any weight that is not the float32
// image of some count / n_docs, or a layer whose counts do not sum to K * n_docs,
// is rejected.
inline GroupProfile read_profile(std::istream& in) {
    io::Reader r(in);
    r.expect_magic("NAGP");
    const auto ver_at = r.offset();
    const auto ver    = r.get<std::uint32_t>("version");
    if (ver != kProfileVersion) throw FormatError("unsupported profile version " + std::to_string(ver), ver_at);
    NagConfig  cfg  = detail::get_config_body(r);
    const auto n_at = r.offset();
    const auto n    = r.get<std::uint64_t>("n_docs");
    if (n == 0) throw FormatError("profile has n_docs = 0", n_at);
    if (n > (1ULL << 24)) throw FormatError("profile n_docs too large for exact float32 weights", n_at);
    std::vector<std::vector<std::uint64_t>> counts(cfg.layers());
    for (std::size_t l = 0; l < cfg.layers(); ++l) {
        std::vector<float> buf(cfg.dims[l]);
        const auto         at = r.offset();
        r.get_array(buf.data(), buf.size(), "profile weights");
        counts[l].resize(buf.size());
        std::uint64_t mass = 0;
        for (std::size_t k = 0; k < buf.size(); ++k) {
            const float w = buf[k];
            if (!(w >= 0.0f && w <= 1.0f)) {
                throw FormatError("profile weight outside [0, 1]", at + k * sizeof(float));
            }
            const auto c = static_cast<std::uint64_t>(std::llround(static_cast<double>(w) * static_cast<double>(n)));
            if (static_cast<float>(static_cast<double>(c) / static_cast<double>(n)) != w) {
                throw FormatError("profile weight is not a frequency over n_docs=" + std::to_string(n),
                                  at + k * sizeof(float));
            }
            counts[l][k] = c;
            mass += c;
        }
        if (mass != static_cast<std::uint64_t>(cfg.widths[l]) * n) {
            throw FormatError("profile layer " + std::to_string(l) + " mass " +
                                  std::to_string(static_cast<double>(mass) / static_cast<double>(n)) +
                                  " differs from K=" + std::to_string(cfg.widths[l]),
                              at);
        }
    }
    if (!r.at_eof()) throw FormatError("trailing bytes after profile", r.offset());
    return GroupProfile::from_counts(std::move(cfg), std::move(counts), n);
}

inline void save_profile(const std::string& path, const GroupProfile& p) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_profile(out, p);
}

inline GroupProfile load_profile(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open profile '" + path + "'");
    try {
        return read_profile(in);
    } catch (const FormatError& e) {
        throw e.in_file(path);
    }
}

}  // namespace nagsel
