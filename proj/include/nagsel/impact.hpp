#pragma once

// Neuron impact: for input h and projection W, deactivating column k changes the
// output by exactly h . W[:,k], so impact(k | h) = |h . W[:,k]|. Documents are
// aggregated over tokens (mean by default).

#include "common.hpp"
#include "model.hpp"
#include "stats.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <vector>

namespace nagsel {

enum class TokenAggregation : std::uint8_t { Mean, Max };

inline TokenAggregation parse_token_aggregation(std::string_view s) {
    if (s == "mean") return TokenAggregation::Mean;
    if (s == "max") return TokenAggregation::Max;
    throw ConfigError("unknown token aggregation '" + std::string(s) + "' (expected mean or max)");
}

struct ImpactVector {
    ProjectionRef       ref;
    std::vector<double> scores;  // one per neuron, >= 0

    std::size_t size() const { return scores.size(); }
};

inline double token_impact(std::span<const double> h_in, const ProjectionView& w, std::size_t k) {
    if (h_in.size() != w.d_in()) {
        throw std::invalid_argument("token_impact: input dimension " + std::to_string(h_in.size()) +
                                    " does not match d_in " + std::to_string(w.d_in()));
    }
    if (k >= w.d_out()) throw std::out_of_range("token_impact: neuron index " + std::to_string(k) + " out of range");
    double dot = 0.0;
    for (std::size_t i = 0; i < h_in.size(); ++i) dot += h_in[i] * w.at(i, k);
    return std::abs(dot);
}

// Per-column aggregate of |h_in W| over the capture's tokens, one matrix multiply.
inline ImpactVector document_impact(const HookCapture& capture, const ProjectionView& w,
                                    TokenAggregation agg = TokenAggregation::Mean) {
    const std::size_t T = capture.tokens();
    if (T == 0) throw std::invalid_argument("document_impact: empty capture");
    if (capture.inputs.cols != w.d_in()) {
        throw std::invalid_argument("document_impact: capture width " + std::to_string(capture.inputs.cols) +
                                    " does not match d_in " + std::to_string(w.d_in()));
    }
    const Matrix out = matmul(capture.inputs, *w.weights);
    ImpactVector iv{capture.ref, std::vector<double>(w.d_out(), 0.0)};
    for (std::size_t t = 0; t < T; ++t) {
        auto row = out.row(t);
        for (std::size_t k = 0; k < row.size(); ++k) {
            const double a = std::abs(row[k]);
            if (agg == TokenAggregation::Mean) {
                iv.scores[k] += a;
            } else {
                iv.scores[k] = std::max(iv.scores[k], a);
            }
        }
    }
    if (agg == TokenAggregation::Mean) {
        for (auto& s : iv.scores) s /= static_cast<double>(T);
    }
    return iv;
}

// Runs one forward pass and returns an impact vector per requested projection.
inline std::vector<ImpactVector> extract_impacts(const ToyModel& model, std::span<const std::uint32_t> token_ids,
                                                 std::span<const ProjectionRef> targets,
                                                 TokenAggregation agg = TokenAggregation::Mean) {
    auto fwd = forward_capture(model, token_ids, targets);
    std::vector<ImpactVector> out;
    out.reserve(fwd.captures.size());
    for (const auto& cap : fwd.captures) out.push_back(document_impact(cap, model.projection(cap.ref), agg));
    return out;
}

// Running per-neuron sums; mean() divides on demand so merges are exact up to rounding.
class ImpactStats {
public:
    ImpactStats() = default;
    ImpactStats(ProjectionRef ref, std::size_t d) : ref_(ref), sums_(d, 0.0) {}

    const ProjectionRef& ref() const { return ref_; }
    std::uint64_t        count() const { return count_; }
    std::size_t          size() const { return sums_.size(); }

    std::vector<double> mean() const {
        if (count_ == 0) throw std::logic_error("ImpactStats::mean on empty stats");
        std::vector<double> m(sums_.size());
        for (std::size_t k = 0; k < m.size(); ++k) m[k] = sums_[k] / static_cast<double>(count_);
        return m;
    }

    void accumulate(const ImpactVector& iv) {
        if (sums_.empty() && count_ == 0) {
            ref_ = iv.ref;
            sums_.assign(iv.size(), 0.0);
        }
        if (!(iv.ref == ref_) || iv.size() != sums_.size()) {
            throw std::invalid_argument("ImpactStats: projection mismatch (layer " + std::to_string(iv.ref.layer) +
                                        " " + std::string(to_string(iv.ref.proj)) + ")");
        }
        for (std::size_t k = 0; k < sums_.size(); ++k) sums_[k] += iv.scores[k];
        ++count_;
    }

    void merge(const ImpactStats& other) {
        if (other.count_ == 0) return;
        if (count_ == 0 && sums_.empty()) {
            *this = other;
            return;
        }
        if (!(other.ref_ == ref_) || other.sums_.size() != sums_.size()) {
            throw std::invalid_argument("ImpactStats: cannot merge stats of different projections");
        }
        for (std::size_t k = 0; k < sums_.size(); ++k) sums_[k] += other.sums_[k];
        count_ += other.count_;
    }

private:
    ProjectionRef       ref_;
    std::vector<double> sums_;
    std::uint64_t       count_ = 0;
};

inline ImpactStats accumulate_stats(ImpactStats stats, const ImpactVector& iv) {
    stats.accumulate(iv);
    return stats;
}

// Mean impacts per requested projection over a document set (documents truncated
// to the model's context; empty documents skipped).
inline std::vector<ImpactStats> collect_impact_stats(const ToyModel& model,
                                                     const std::vector<std::vector<std::uint32_t>>& docs,
                                                     std::span<const ProjectionRef> refs,
                                                     TokenAggregation agg = TokenAggregation::Mean) {
    std::vector<ImpactStats> stats(refs.size());
    for (const auto& d : docs) {
        if (d.empty()) continue;
        const auto n   = std::min<std::size_t>(d.size(), model.spec().max_seq_len);
        auto       ivs = extract_impacts(model, std::span<const std::uint32_t>(d).first(n), refs, agg);
        for (std::size_t i = 0; i < ivs.size(); ++i) stats[i].accumulate(ivs[i]);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Impact dump: per projection, {doc_id u64, layer u16, proj u8, d u32, float32 x d}.

struct ImpactRecord {
    std::uint64_t doc_id = 0;
    ImpactVector  impact;
};

inline void write_impact_record(std::ostream& out, std::uint64_t doc_id, const ImpactVector& iv) {
    io::Writer w(out);
    w.put(doc_id);
    w.put(static_cast<std::uint16_t>(iv.ref.layer));
    w.put(static_cast<std::uint8_t>(iv.ref.proj));
    w.put(static_cast<std::uint32_t>(iv.size()));
    std::vector<float> buf(iv.scores.begin(), iv.scores.end());
    w.put_array(buf.data(), buf.size());
    w.check();
}

inline std::vector<ImpactRecord> read_impact_dump(std::istream& in) {
    io::Reader                r(in);
    std::vector<ImpactRecord> out;
    while (!r.at_eof()) {
        ImpactRecord rec;
        rec.doc_id             = r.get<std::uint64_t>("doc_id");
        rec.impact.ref.layer   = r.get<std::uint16_t>("layer");
        const auto proj_at     = r.offset();
        rec.impact.ref.proj    = proj_type_from_byte(r.get<std::uint8_t>("proj_type"), proj_at);
        const auto d           = r.get<std::uint32_t>("d");
        std::vector<float> buf(d);
        const auto         at = r.offset();
        r.get_array(buf.data(), buf.size(), "impact scores");
        rec.impact.scores.assign(buf.begin(), buf.end());
        for (std::size_t k = 0; k < d; ++k) {
            if (!std::isfinite(buf[k]) || buf[k] < 0.0f) {
                throw FormatError("impact score must be finite and non-negative", at + k * sizeof(float));
            }
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// Groups dump records into one ImpactStats per projection, ordered by (layer, proj).
inline std::vector<ImpactStats> stats_from_dump(const std::vector<ImpactRecord>& records) {
    std::map<ProjectionRef, ImpactStats> by_ref;
    for (const auto& rec : records) by_ref[rec.impact.ref].accumulate(rec.impact);
    std::vector<ImpactStats> out;
    for (auto& [ref, st] : by_ref) out.push_back(std::move(st));
    return out;
}

// ---------------------------------------------------------------------------
// Validation of the impact score against end-to-end loss change: rank UP neurons
// per layer by mean impact, deactivate the same rank band in every layer, and
// correlate each band's mean impact with |delta mean next-token loss|.

struct ImpactLossBin {
    std::size_t first_rank = 0;
    std::size_t width      = 0;
    double      mean_impact     = 0.0;
    double      delta_loss      = 0.0;
    double      abs_delta_loss  = 0.0;
};

struct ImpactLossReport {
    double                     baseline_loss = 0.0;
    std::vector<ImpactLossBin> bins;  // bin 0 holds the highest-impact ranks
    double                     pearson_r = 0.0;

    const ImpactLossBin& top_bin() const { return bins.front(); }
    const ImpactLossBin& median_bin() const { return bins[bins.size() / 2]; }
};

inline std::vector<std::vector<std::uint32_t>> truncate_docs(const std::vector<std::vector<std::uint32_t>>& docs,
                                                             std::size_t max_len) {
    std::vector<std::vector<std::uint32_t>> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.emplace_back(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(std::min(d.size(), max_len)));
    return out;
}

// How evaluation loss is measured for deactivation experiments.
//   Reference: next-token cross entropy against the unmodified model's own predictive
//              distribution (the expected loss on text drawn from that model).
//   Observed:  next-token cross entropy against the document's actual next tokens.
enum class LossKind : std::uint8_t { Reference, Observed };

inline double eval_loss(const ToyModel& reference, const ToyModel& model,
                        const std::vector<std::vector<std::uint32_t>>& docs, LossKind kind) {
    return kind == LossKind::Reference ? mean_reference_loss(reference, model, docs) : mean_loss(model, docs);
}

// Bin width is floor(d_internal / n_bins); ranks past n_bins * width are left out.
inline ImpactLossReport impact_loss_correlation(const ToyModel& model,
                                                const std::vector<std::vector<std::uint32_t>>& eval_docs,
                                                std::size_t n_bins, LossKind loss = LossKind::Reference) {
    if (n_bins < 2) throw std::invalid_argument("impact_loss_correlation: n_bins must be >= 2");
    const auto& spec = model.spec();
    if (spec.d_internal < n_bins) {
        throw std::invalid_argument("impact_loss_correlation: " + std::to_string(spec.d_internal) +
                                    " UP neurons per layer cannot fill " + std::to_string(n_bins) + " bins");
    }
    const auto docs = truncate_docs(eval_docs, spec.max_seq_len);

    std::vector<ProjectionRef> refs;
    for (std::uint32_t l = 0; l < spec.n_layers; ++l) refs.push_back({l, ProjType::UP});
    std::vector<ImpactStats> stats(refs.size());
    for (const auto& d : docs) {
        if (d.empty()) continue;
        auto ivs = extract_impacts(model, d, refs);
        for (std::size_t i = 0; i < ivs.size(); ++i) stats[i].accumulate(ivs[i]);
    }
    if (stats.front().count() == 0) throw std::invalid_argument("impact_loss_correlation: no evaluation documents");

    // ranked[l][r] = neuron at impact rank r in layer l
    std::vector<std::vector<std::uint32_t>> ranked(spec.n_layers);
    std::vector<std::vector<double>>        means(spec.n_layers);
    for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
        means[l] = stats[l].mean();
        ranked[l].resize(spec.d_internal);
        std::iota(ranked[l].begin(), ranked[l].end(), 0u);
        std::stable_sort(ranked[l].begin(), ranked[l].end(),
                         [&](std::uint32_t a, std::uint32_t b) { return means[l][a] > means[l][b]; });
    }

    ImpactLossReport report;
    report.baseline_loss = eval_loss(model, model, docs, loss);
    const std::size_t width = spec.d_internal / n_bins;
    std::vector<double> xs, ys;
    for (std::size_t b = 0; b < n_bins; ++b) {
        DeactivationMask mask;
        double           impact_sum = 0.0;
        for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
            for (std::size_t r = b * width; r < (b + 1) * width; ++r) {
                const auto k = ranked[l][r];
                mask.neurons.push_back({l, ProjType::UP, k});
                impact_sum += means[l][k];
            }
        }
        ImpactLossBin bin;
        bin.first_rank     = b * width;
        bin.width          = width;
        bin.mean_impact    = impact_sum / static_cast<double>(mask.size());
        bin.delta_loss     = eval_loss(model, deactivate(model, mask), docs, loss) - report.baseline_loss;
        bin.abs_delta_loss = std::abs(bin.delta_loss);
        xs.push_back(bin.mean_impact);
        ys.push_back(bin.abs_delta_loss);
        report.bins.push_back(bin);
    }
    report.pearson_r = stats::pearson(xs, ys);
    return report;
}

}  // namespace nagsel
