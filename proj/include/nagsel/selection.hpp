#pragma once

#include "rng.hpp"
#include "similarity.hpp"
#include "stats.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace nagsel {

struct RankedCandidate {
    std::uint64_t doc_id   = 0;
    double        score    = 0.0;
    std::uint64_t n_tokens = 0;

    friend bool operator==(const RankedCandidate&, const RankedCandidate&) = default;
};

// Global tie rule: score descending, then doc_id ascending.
inline bool ranks_before(const RankedCandidate& a, const RankedCandidate& b) {
    return a.score > b.score || (a.score == b.score && a.doc_id < b.doc_id);
}

inline std::vector<RankedCandidate> sorted_by_rank(std::span<const RankedCandidate> xs) {
    std::vector<RankedCandidate> out(xs.begin(), xs.end());
    std::sort(out.begin(), out.end(), ranks_before);
    return out;
}

// ⌈r * n⌉ with a small guard against products such as 0.7 * 10 = 7.000000000000001.
inline std::size_t ceil_fraction(double r, std::size_t n) {
    const double x = r * static_cast<double>(n);
    return std::min(n, static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x))));
}

inline void check_ratio(double r_f) {
    if (!(r_f > 0.0 && r_f <= 1.0)) {
        throw ConfigError("filtering rate r_f must lie in (0, 1], got " + std::to_string(r_f));
    }
}

using TokenCountFn = std::function<std::uint64_t(std::uint64_t doc_id)>;

// One score per record, in input order. `workers` > 1 splits the pool into contiguous shards.
inline std::vector<RankedCandidate> score_pool(std::span<const NagRecord> records, const GroupProfile& profile,
                                               const TokenCountFn& tokens = {}, unsigned workers = 1) {
    std::vector<RankedCandidate> out(records.size());
    auto run = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            out[i] = {records[i].doc_id, group_sim(records[i], profile), tokens ? tokens(records[i].doc_id) : 0};
        }
    };
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, records.size()))));
    if (workers == 1) {
        run(0, records.size());
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (records.size() + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                run(std::min(records.size(), w * chunk), std::min(records.size(), (w + 1) * chunk));
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

struct Selection {
    std::vector<RankedCandidate> selected;  // in rank order
    double                       achieved_fraction = 0.0;
    double                       threshold         = 0.0;  // lowest admitted score
    bool                         exact             = true;
};

inline constexpr std::size_t kDefaultThresholdSample = 100000;

// Top r_f of the pool. M = 0, or M >= N, sorts exactly and keeps ⌈r_f N⌉.
// Otherwise the (1 - r_f) score quantile is estimated from M uniformly sampled
// candidates and one pass keeps every candidate scoring at or above it.
inline Selection select_top_ratio(std::span<const RankedCandidate> scored, double r_f, std::size_t sample_size = 0,
                                  std::uint64_t seed = 0) {
    check_ratio(r_f);
    Selection sel;
    const std::size_t n = scored.size();
    if (n == 0) return sel;

    if (sample_size == 0 || sample_size >= n || ceil_fraction(r_f, n) == n) {
        auto sorted = sorted_by_rank(scored);
        sorted.resize(ceil_fraction(r_f, n));
        sel.selected          = std::move(sorted);
        sel.exact             = true;
        sel.threshold         = sel.selected.empty() ? 0.0 : sel.selected.back().score;
        sel.achieved_fraction = static_cast<double>(sel.selected.size()) / static_cast<double>(n);
        return sel;
    }

    std::mt19937_64 gen(seed);
    const auto      picks = rng::sample_without_replacement(n, sample_size, gen);
    std::vector<double> sample(picks.size());
    for (std::size_t i = 0; i < picks.size(); ++i) sample[i] = scored[picks[i]].score;
    const std::size_t keep = std::max<std::size_t>(1, ceil_fraction(r_f, sample.size()));
    std::nth_element(sample.begin(), sample.begin() + static_cast<std::ptrdiff_t>(keep - 1), sample.end(),
                     std::greater<>());
    sel.threshold = sample[keep - 1];
    sel.exact     = false;
    for (const auto& c : scored) {
        if (c.score >= sel.threshold) sel.selected.push_back(c);
    }
    std::sort(sel.selected.begin(), sel.selected.end(), ranks_before);
    sel.achieved_fraction = static_cast<double>(sel.selected.size()) / static_cast<double>(n);
    return sel;
}

struct BudgetSelection {
    std::vector<RankedCandidate> selected;
    std::uint64_t                total_tokens = 0;
    bool                         under_budget = false;  // the whole pool holds fewer than B tokens
};

// Shortest rank-order prefix whose token total reaches B; the crossing document is kept.
inline BudgetSelection select_token_budget(std::span<const RankedCandidate> scored, std::uint64_t budget) {
    BudgetSelection sel;
    if (budget == 0) return sel;
    for (const auto& c : sorted_by_rank(scored)) {
        if (sel.total_tokens >= budget) break;
        sel.selected.push_back(c);
        sel.total_tokens += c.n_tokens;
    }
    sel.under_budget = sel.total_tokens < budget;
    return sel;
}

struct MixedEntry {
    RankedCandidate candidate;
    std::size_t     target_id   = 0;
    std::size_t     source_rank = 0;  // 1-based position within that target's selection
};

struct MixedSelection {
    std::vector<MixedEntry> entries;
    std::vector<Selection>  per_target;
};

// Each of T targets selects r_f / T of the shared pool; the selections are concatenated
// as-is, so a document chosen by two targets appears twice.
inline MixedSelection select_multi_target(const std::vector<std::vector<RankedCandidate>>& pools, double r_f,
                                          std::size_t sample_size = 0, std::uint64_t seed = 0) {
    check_ratio(r_f);
    if (pools.empty()) throw ConfigError("multi-target selection needs at least one target");
    for (std::size_t t = 1; t < pools.size(); ++t) {
        if (pools[t].size() != pools[0].size()) {
            throw std::invalid_argument("multi-target selection: target " + std::to_string(t) +
                                        " scored a different pool size");
        }
    }
    MixedSelection mix;
    const double share = r_f / static_cast<double>(pools.size());
    for (std::size_t t = 0; t < pools.size(); ++t) {
        auto sel = select_top_ratio(pools[t], share, sample_size, rng::derive_key(seed, t));
        for (std::size_t i = 0; i < sel.selected.size(); ++i) mix.entries.push_back({sel.selected[i], t, i + 1});
        mix.per_target.push_back(std::move(sel));
    }
    return mix;
}

// Percentile rank in (0, 1]: average 1-based ascending rank divided by N.
inline std::vector<double> percentile_ranks(std::span<const double> xs) {
    auto r = stats::average_ranks(xs);
    for (auto& v : r) v /= static_cast<double>(xs.size());
    return r;
}

// fused = alpha * pct(nag) + (1 - alpha) * pct(quality), returned in rank order.
inline std::vector<RankedCandidate> joint_rank(std::span<const RankedCandidate> nag_scores,
                                               const std::unordered_map<std::uint64_t, double>& quality,
                                               double alpha = 0.5) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("fusion weight alpha must lie in [0, 1]");
    const std::size_t   n = nag_scores.size();
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i]    = nag_scores[i].score;
        auto it = quality.find(nag_scores[i].doc_id);
        if (it == quality.end()) {
            throw std::invalid_argument("joint_rank: no quality score for doc " + std::to_string(nag_scores[i].doc_id));
        }
        b[i] = it->second;
    }
    // mixed on the rank scale, then divided by N, so exact ties in the fused score survive rounding
    const auto ra = stats::average_ranks(a);
    const auto rb = stats::average_ranks(b);
    std::vector<RankedCandidate> out(nag_scores.begin(), nag_scores.end());
    for (std::size_t i = 0; i < n; ++i) {
        out[i].score = (alpha * ra[i] + (1.0 - alpha) * rb[i]) / static_cast<double>(n);
    }
    std::sort(out.begin(), out.end(), ranks_before);
    return out;
}

// ---------------------------------------------------------------------------
// Text formats.
//   ranked:  doc_id \t score \t n_tokens      (score printed with %.17g)
//   quality: doc_id \t score
//   manifest: one JSON object per line {doc_id, score, target_id, source_rank}

inline std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_ranked(std::ostream& out, std::span<const RankedCandidate> xs) {
    for (const auto& c : xs) out << c.doc_id << '\t' << format_score(c.score) << '\t' << c.n_tokens << '\n';
}

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> f;
    std::size_t                   start = 0;
    while (true) {
        auto p = line.find('\t', start);
        f.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
        if (p == std::string_view::npos) break;
        start = p + 1;
    }
    return f;
}

template <typename T>
T parse_field(std::string_view s, std::uint64_t line, std::string_view what) {
    T    v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw FormatError("cannot parse " + std::string(what) + " '" + std::string(s) + "'", line, true);
    }
    return v;
}

inline double parse_double(std::string_view s, std::uint64_t line, std::string_view what) {
    std::string tmp(s);
    char*       end = nullptr;
    errno           = 0;
    const double v  = std::strtod(tmp.c_str(), &end);
    if (tmp.empty() || end != tmp.c_str() + tmp.size() || errno == ERANGE || !std::isfinite(v)) {
        throw FormatError("cannot parse " + std::string(what) + " '" + tmp + "'", line, true);
    }
    return v;
}

}  // namespace detail

inline std::vector<RankedCandidate> read_ranked(std::istream& in) {
    std::vector<RankedCandidate> out;
    std::string                  line;
    std::uint64_t                lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::split_tabs(line);
        if (f.size() != 3) throw FormatError("expected 3 tab-separated fields", lineno, true);
        out.push_back({detail::parse_field<std::uint64_t>(f[0], lineno, "doc_id"),
                       detail::parse_double(f[1], lineno, "score"),
                       detail::parse_field<std::uint64_t>(f[2], lineno, "n_tokens")});
    }
    return out;
}

inline std::unordered_map<std::uint64_t, double> read_quality(std::istream& in) {
    std::unordered_map<std::uint64_t, double> out;
    std::string                               line;
    std::uint64_t                             lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::split_tabs(line);
        if (f.size() != 2) throw FormatError("expected 2 tab-separated fields", lineno, true);
        const auto id = detail::parse_field<std::uint64_t>(f[0], lineno, "doc_id");
        if (!out.emplace(id, detail::parse_double(f[1], lineno, "score")).second) {
            throw FormatError("duplicate doc_id " + std::to_string(id), lineno, true);
        }
    }
    return out;
}

inline void write_manifest_entry(std::ostream& out, const RankedCandidate& c, std::size_t target_id,
                                 std::size_t source_rank) {
    nlohmann::ordered_json j;
    j["doc_id"]      = c.doc_id;
    j["score"]       = c.score;
    j["target_id"]   = target_id;
    j["source_rank"] = source_rank;
    out << j.dump() << '\n';
}

inline void write_manifest(std::ostream& out, std::span<const RankedCandidate> selected, std::size_t target_id = 0) {
    for (std::size_t i = 0; i < selected.size(); ++i) write_manifest_entry(out, selected[i], target_id, i + 1);
}

inline void write_manifest(std::ostream& out, const MixedSelection& mix) {
    for (const auto& e : mix.entries) write_manifest_entry(out, e.candidate, e.target_id, e.source_rank);
}

}  // namespace nagsel
