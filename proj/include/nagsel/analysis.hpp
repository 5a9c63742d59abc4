#pragma once

#include "impact.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "selection.hpp"
#include "similarity.hpp"
#include "stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace nagsel {

// ---------------------------------------------------------------------------
// Deactivation masks

// Per configured layer, the n neurons most frequently present in the profile's NAGs.
inline DeactivationMask mask_nag_topk(const GroupProfile& profile, std::size_t per_layer) {
    const auto&      cfg = profile.config();
    DeactivationMask mask;
    mask.criterion = MaskCriterion::NagTopKPerLayer;
    if (per_layer == 0) return mask;
    for (std::size_t l = 0; l < cfg.layers(); ++l) {
        if (per_layer > cfg.dims[l]) {
            throw std::out_of_range("mask_nag_topk: n=" + std::to_string(per_layer) + " exceeds d=" +
                                    std::to_string(cfg.dims[l]));
        }
        const auto counts = profile.counts(l);
        std::vector<double> freq(counts.begin(), counts.end());
        for (auto k : top_k_indices(freq, per_layer)) mask.neurons.push_back({cfg.model_layer(l), cfg.proj, k});
    }
    return mask;
}

namespace detail {

struct ScoredNeuron {
    NeuronId id;
    double   score;
};

// Global top-n by score (desc), ties by (layer, proj, index) ascending. Flags the mask as
// degenerate when the cut falls inside a run of equal scores.
inline DeactivationMask top_neurons(std::vector<ScoredNeuron> all, std::size_t n, MaskCriterion criterion) {
    if (n > all.size()) {
        throw std::out_of_range("mask size " + std::to_string(n) + " exceeds population " + std::to_string(all.size()));
    }
    std::sort(all.begin(), all.end(), [](const ScoredNeuron& a, const ScoredNeuron& b) {
        return a.score > b.score || (a.score == b.score && a.id < b.id);
    });
    DeactivationMask mask;
    mask.criterion = criterion;
    for (std::size_t i = 0; i < n; ++i) mask.neurons.push_back(all[i].id);
    mask.degenerate = n > 0 && n < all.size() && all[n - 1].score == all[n].score;
    return mask;
}

}  // namespace detail

// Global top-n neurons by (mean impact on targets - mean impact on random inputs).
inline DeactivationMask mask_high_delta(std::span<const ImpactStats> target_stats,
                                        std::span<const ImpactStats> random_stats, std::size_t n) {
    if (target_stats.size() != random_stats.size()) {
        throw std::invalid_argument("mask_high_delta: target and random stats cover different projections");
    }
    std::vector<detail::ScoredNeuron> all;
    for (std::size_t i = 0; i < target_stats.size(); ++i) {
        const auto& t = target_stats[i];
        const auto& r = random_stats[i];
        if (!(t.ref() == r.ref()) || t.size() != r.size()) {
            throw std::invalid_argument("mask_high_delta: projection mismatch at position " + std::to_string(i));
        }
        if (t.count() == 0 || r.count() == 0) throw std::invalid_argument("mask_high_delta: empty stats");
        const auto tm = t.mean();
        const auto rm = r.mean();
        for (std::size_t k = 0; k < tm.size(); ++k) {
            all.push_back({{t.ref().layer, t.ref().proj, static_cast<std::uint32_t>(k)}, tm[k] - rm[k]});
        }
    }
    return detail::top_neurons(std::move(all), n, MaskCriterion::HighDelta);
}

// Global top-n neurons by mean impact.
inline DeactivationMask mask_high_mean(std::span<const ImpactStats> stats, std::size_t n) {
    std::vector<detail::ScoredNeuron> all;
    for (const auto& s : stats) {
        const auto m = s.mean();
        for (std::size_t k = 0; k < m.size(); ++k) {
            all.push_back({{s.ref().layer, s.ref().proj, static_cast<std::uint32_t>(k)}, m[k]});
        }
    }
    return detail::top_neurons(std::move(all), n, MaskCriterion::HighMean);
}

struct RandomMaskSpec {
    ProjType    proj      = ProjType::UP;
    std::size_t count     = 0;
    bool        per_layer = true;  // count per layer, or count over all layers together
};

inline DeactivationMask mask_random(const ModelSpec& dims, const RandomMaskSpec& how, std::uint64_t seed) {
    dims.validate();
    const std::size_t d = how.proj == ProjType::UP ? dims.d_internal : dims.d_model;
    DeactivationMask  mask;
    mask.criterion = MaskCriterion::Random;
    std::mt19937_64 gen(seed);
    if (how.per_layer) {
        if (how.count > d) {
            throw std::out_of_range("mask_random: " + std::to_string(how.count) + " neurons per layer exceeds d=" +
                                    std::to_string(d));
        }
        for (std::uint32_t l = 0; l < dims.n_layers; ++l) {
            auto picks = rng::sample_without_replacement(d, how.count, gen);
            std::sort(picks.begin(), picks.end());
            for (auto k : picks) mask.neurons.push_back({l, how.proj, static_cast<std::uint32_t>(k)});
        }
    } else {
        const std::size_t population = d * dims.n_layers;
        if (how.count > population) {
            throw std::out_of_range("mask_random: " + std::to_string(how.count) + " neurons exceeds population " +
                                    std::to_string(population));
        }
        auto picks = rng::sample_without_replacement(population, how.count, gen);
        std::sort(picks.begin(), picks.end());
        for (auto p : picks) {
            mask.neurons.push_back({static_cast<std::uint32_t>(p / d), how.proj, static_cast<std::uint32_t>(p % d)});
        }
    }
    return mask;
}

inline void write_mask(std::ostream& out, const DeactivationMask& mask) {
    for (const auto& n : mask.neurons) out << n.layer << '\t' << to_string(n.proj) << '\t' << n.index << '\n';
}

inline DeactivationMask read_mask(std::istream& in) {
    DeactivationMask          mask;
    std::set<NeuronId>        seen;
    std::string               line;
    std::uint64_t             lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::split_tabs(line);
        if (f.size() != 3) throw FormatError("mask line needs layer, proj and index", lineno, true);
        NeuronId n;
        n.layer = detail::parse_field<std::uint32_t>(f[0], lineno, "layer");
        try {
            n.proj = parse_proj_type(f[1]);
        } catch (const ConfigError& e) {
            throw FormatError(e.what(), lineno, true);
        }
        n.index = detail::parse_field<std::uint32_t>(f[2], lineno, "index");
        if (!seen.insert(n).second) throw FormatError("duplicate mask entry", lineno, true);
        mask.neurons.push_back(n);
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Distances and clustering

// D[i][j] = 1 - Dice(i, j). Rows are filled by `workers` threads.
inline Matrix distance_matrix(std::span<const NagRecord> records, unsigned workers = 1) {
    const std::size_t n = records.size();
    if (n < 2) throw std::invalid_argument("distance_matrix: need at least 2 records");
    for (std::size_t i = 1; i < n; ++i) require_same_shape(records[0], records[i]);
    Matrix d(n, n);
    auto   fill = [&](unsigned w, unsigned stride) {
        for (std::size_t i = w; i < n; i += stride) {
            for (std::size_t j = i + 1; j < n; ++j) d(i, j) = nag_distance(records[i], records[j]);
        }
    };
    workers = std::max(1u, workers);
    if (workers == 1) {
        fill(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(fill, w, workers);
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) d(i, j) = d(j, i);
    }
    return d;
}

// Distance matrix file: u32 n, then n*n row-major float32.
inline void write_distance_matrix(std::ostream& out, const Matrix& d) {
    io::Writer w(out);
    w.put(static_cast<std::uint32_t>(d.rows));
    std::vector<float> buf(d.data.begin(), d.data.end());
    w.put_array(buf.data(), buf.size());
    w.check();
}

inline Matrix read_distance_matrix(std::istream& in) {
    io::Reader r(in);
    const auto n = r.get<std::uint32_t>("n");
    Matrix     d(n, n);
    std::vector<float> buf(static_cast<std::size_t>(n) * n);
    const auto         at = r.offset();
    r.get_array(buf.data(), buf.size(), "distances");
    for (std::size_t i = 0; i < buf.size(); ++i) {
        if (!std::isfinite(buf[i]) || buf[i] < 0.0f) throw FormatError("invalid distance", at + i * sizeof(float));
        d.data[i] = buf[i];
    }
    if (!r.at_eof()) throw FormatError("trailing bytes after distance matrix", r.offset());
    return d;
}

struct Clustering {
    std::vector<std::size_t> assignments;  // cluster id per item, ids ordered by medoid index
    std::vector<std::size_t> medoids;      // ascending item indices
    double                   cost       = 0.0;
    std::size_t              iterations = 0;
};

namespace detail {

inline double medoid_cost(const Matrix& d, std::span<const std::size_t> medoids) {
    double total = 0.0;
    for (std::size_t i = 0; i < d.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (auto m : medoids) best = std::min(best, d(i, m));
        total += best;
    }
    return total;
}

}  // namespace detail

inline constexpr std::size_t kMedoidMaxIterations = 100;

// k-medoids on a precomputed distance matrix. The first medoid is drawn from `seed`,
// the rest are added greedily (largest cost reduction); then the best improving
// medoid/non-medoid swap is applied until none improves or the iteration cap hits.
inline Clustering cluster_medoids(const Matrix& d, std::size_t k, std::uint64_t seed) {
    const std::size_t n = d.rows;
    if (d.cols != n) throw std::invalid_argument("cluster_medoids: distance matrix is not square");
    if (k < 1 || k > n) {
        throw std::out_of_range("cluster_medoids: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    std::mt19937_64          gen(seed);
    std::vector<std::size_t> medoids{static_cast<std::size_t>(rng::bounded(gen, n))};
    std::vector<bool>        is_medoid(n, false);
    is_medoid[medoids[0]] = true;
    while (medoids.size() < k) {
        double      best_cost = std::numeric_limits<double>::infinity();
        std::size_t best      = 0;
        for (std::size_t c = 0; c < n; ++c) {
            if (is_medoid[c]) continue;
            medoids.push_back(c);
            const double cost = detail::medoid_cost(d, medoids);
            medoids.pop_back();
            if (cost < best_cost) {
                best_cost = cost;
                best      = c;
            }
        }
        medoids.push_back(best);
        is_medoid[best] = true;
    }

    Clustering out;
    double     cost = detail::medoid_cost(d, medoids);
    for (; out.iterations < kMedoidMaxIterations; ++out.iterations) {
        double      best_cost = cost;
        std::size_t best_slot = 0, best_item = 0;
        bool        found = false;
        for (std::size_t slot = 0; slot < k; ++slot) {
            const std::size_t old = medoids[slot];
            for (std::size_t c = 0; c < n; ++c) {
                if (is_medoid[c]) continue;
                medoids[slot]    = c;
                const double trial = detail::medoid_cost(d, medoids);
                if (trial < best_cost - 1e-12) {
                    best_cost = trial;
                    best_slot = slot;
                    best_item = c;
                    found     = true;
                }
            }
            medoids[slot] = old;
        }
        if (!found) break;
        is_medoid[medoids[best_slot]] = false;
        is_medoid[best_item]          = true;
        medoids[best_slot]            = best_item;
        cost                          = best_cost;
    }

    std::sort(medoids.begin(), medoids.end());
    out.medoids = medoids;
    out.cost    = cost;
    out.assignments.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (d(i, medoids[c]) < d(i, medoids[best])) best = c;
        }
        out.assignments[i] = best;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Partition agreement metrics

namespace detail {

struct Contingency {
    std::vector<std::vector<std::size_t>> table;  // [cluster][label]
    std::vector<std::size_t>              rows, cols;
    std::size_t                           n = 0;
};

template <typename A, typename B>
Contingency contingency(std::span<const A> assignments, std::span<const B> labels) {
    if (assignments.size() != labels.size()) throw std::invalid_argument("assignments and labels differ in length");
    if (assignments.empty()) throw std::invalid_argument("empty partition");
    std::map<A, std::size_t> ci;
    std::map<B, std::size_t> li;
    for (const auto& a : assignments) ci.emplace(a, ci.size());
    for (const auto& b : labels) li.emplace(b, li.size());
    Contingency c;
    c.n = assignments.size();
    c.table.assign(ci.size(), std::vector<std::size_t>(li.size(), 0));
    c.rows.assign(ci.size(), 0);
    c.cols.assign(li.size(), 0);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        const auto r = ci[assignments[i]];
        const auto k = li[labels[i]];
        ++c.table[r][k];
        ++c.rows[r];
        ++c.cols[k];
    }
    return c;
}

inline double choose2(std::size_t x) { return static_cast<double>(x) * (static_cast<double>(x) - 1.0) / 2.0; }

inline double entropy(std::span<const std::size_t> counts, std::size_t n) {
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(n);
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace detail

// (1/N) Σ_k max_j |C_k ∩ L_j|
template <typename A, typename B>
double purity(std::span<const A> assignments, std::span<const B> labels) {
    const auto  c   = detail::contingency(assignments, labels);
    std::size_t sum = 0;
    for (const auto& row : c.table) sum += *std::max_element(row.begin(), row.end());
    return static_cast<double>(sum) / static_cast<double>(c.n);
}

struct NmiResult {
    double value      = 0.0;
    bool   degenerate = false;  // H(C) = 0 or H(L) = 0; value is defined as 0
};

// I(C; L) / sqrt(H(C) H(L)), natural log.
template <typename A, typename B>
NmiResult nmi_checked(std::span<const A> assignments, std::span<const B> labels) {
    const auto   c  = detail::contingency(assignments, labels);
    const double hc = detail::entropy(c.rows, c.n);
    const double hl = detail::entropy(c.cols, c.n);
    if (hc == 0.0 || hl == 0.0) return {0.0, true};
    const double n  = static_cast<double>(c.n);
    double       mi = 0.0;
    for (std::size_t r = 0; r < c.table.size(); ++r) {
        for (std::size_t k = 0; k < c.table[r].size(); ++k) {
            const double nij = static_cast<double>(c.table[r][k]);
            if (nij == 0.0) continue;
            mi += nij / n * std::log(nij * n / (static_cast<double>(c.rows[r]) * static_cast<double>(c.cols[k])));
        }
    }
    return {std::clamp(mi / std::sqrt(hc * hl), 0.0, 1.0), false};
}

template <typename A, typename B>
double nmi(std::span<const A> assignments, std::span<const B> labels) {
    return nmi_checked(assignments, labels).value;
}

// Hubert-Arabie adjusted Rand index. When both partitions are trivial in the same way
// (the expected and maximum index coincide) the partitions agree and 1 is returned.
template <typename A, typename B>
double ari(std::span<const A> assignments, std::span<const B> labels) {
    const auto c     = detail::contingency(assignments, labels);
    double     index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
    for (const auto& row : c.table) {
        for (auto v : row) index += detail::choose2(v);
    }
    for (auto v : c.rows) sum_rows += detail::choose2(v);
    for (auto v : c.cols) sum_cols += detail::choose2(v);
    const double total    = detail::choose2(c.n);
    const double expected = total == 0.0 ? 0.0 : sum_rows * sum_cols / total;
    const double max_idx  = 0.5 * (sum_rows + sum_cols);
    if (max_idx == expected) return 1.0;
    return (index - expected) / (max_idx - expected);
}

struct ClusterReport {
    std::vector<std::size_t> assignments;
    double                   purity = 0.0;
    double                   nmi    = 0.0;
    double                   ari    = 0.0;
    bool                     nmi_degenerate = false;
};

template <typename B>
ClusterReport cluster_report(std::span<const std::size_t> assignments, std::span<const B> labels) {
    ClusterReport r;
    r.assignments.assign(assignments.begin(), assignments.end());
    r.purity         = purity(assignments, labels);
    const auto n     = nmi_checked(assignments, labels);
    r.nmi            = n.value;
    r.nmi_degenerate = n.degenerate;
    r.ari            = ari(assignments, labels);
    return r;
}

// ---------------------------------------------------------------------------
// Ranking sensitivity

namespace detail {

// Scores of `b` aligned to the doc order of `a`.
inline std::vector<double> aligned_scores(std::span<const RankedCandidate> a, std::span<const RankedCandidate> b) {
    if (a.size() != b.size()) throw std::invalid_argument("score lists cover different pools");
    std::unordered_map<std::uint64_t, double> lookup;
    for (const auto& c : b) {
        if (!lookup.emplace(c.doc_id, c.score).second) {
            throw std::invalid_argument("duplicate doc id " + std::to_string(c.doc_id));
        }
    }
    std::vector<double> out;
    out.reserve(a.size());
    for (const auto& c : a) {
        auto it = lookup.find(c.doc_id);
        if (it == lookup.end()) throw std::invalid_argument("doc id " + std::to_string(c.doc_id) + " missing");
        out.push_back(it->second);
    }
    return out;
}

}  // namespace detail

// Pearson correlation of average ranks.
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
    const auto ra = stats::average_ranks(a);
    const auto rb = stats::average_ranks(b);
    return stats::pearson(ra, rb);
}

inline double spearman(std::span<const RankedCandidate> a, std::span<const RankedCandidate> b) {
    std::vector<double> sa;
    for (const auto& c : a) sa.push_back(c.score);
    return spearman(sa, detail::aligned_scores(a, b));
}

// Jaccard overlap of the exact top-⌈rN⌉ id sets of two scorings of one pool.
inline double topset_jaccard(std::span<const RankedCandidate> a, std::span<const RankedCandidate> b, double r) {
    check_ratio(r);
    (void)detail::aligned_scores(a, b);
    const auto sa = select_top_ratio(a, r).selected;
    const auto sb = select_top_ratio(b, r).selected;
    std::unordered_set<std::uint64_t> ids;
    for (const auto& c : sa) ids.insert(c.doc_id);
    std::size_t inter = 0;
    for (const auto& c : sb) inter += ids.count(c.doc_id);
    const std::size_t uni = sa.size() + sb.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// sqrt(p (1 - p) / n)
inline double binomial_se(double p, double n) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("binomial_se: p must lie in [0, 1]");
    if (!(n > 0.0)) throw std::invalid_argument("binomial_se: n must be positive");
    return std::sqrt(p * (1.0 - p) / n);
}

}  // namespace nagsel
