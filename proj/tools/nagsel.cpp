// nagsel: command line front end for NAG extraction, profiling, ranking, selection and analysis.
#include "nagsel/nagsel.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

using namespace nagsel;
namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::binary) {
    std::ofstream out(path, mode);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return in;
}

// Runs `f` with FormatErrors tagged by `path`.
template <typename F>
auto with_file(const std::string& path, F&& f) {
    try {
        return f();
    } catch (const FormatError& e) {
        throw e.in_file(path);
    }
}

std::vector<RankedCandidate> load_ranked(const std::string& path) {
    auto in = open_in(path);
    return with_file(path, [&] { return read_ranked(in); });
}

std::vector<Document> load_tokenized(const std::string& path) {
    auto docs = load_corpus(path);
    for (auto& d : docs) tokenize(d, ByteTokenizer{});
    return docs;
}

// Token ids cut to the model context, as extract does.
std::vector<std::vector<std::uint32_t>> token_lists(const std::vector<Document>& docs, std::size_t max_len) {
    std::vector<std::vector<std::uint32_t>> out;
    for (const auto& d : docs) {
        const auto n = std::min(d.token_ids.size(), max_len);
        out.emplace_back(d.token_ids.begin(), d.token_ids.begin() + static_cast<std::ptrdiff_t>(n));
    }
    return out;
}

void require_byte_vocab(const ToyModel& model) {
    if (model.spec().vocab_size < ByteTokenizer{}.vocab_size()) {
        throw ConfigError("model vocabulary " + std::to_string(model.spec().vocab_size) +
                          " is smaller than the byte tokenizer's 256");
    }
}

// ---------------------------------------------------------------------------
// init-model

struct InitModelArgs {
    ModelSpec   spec{4, 64, 128, 4, 256, 64, 0};
    std::string out;
};

void cmd_init_model(const InitModelArgs& a) {
    a.spec.validate();
    const auto model = build_toy_model(a.spec);
    auto       out   = open_out(a.out);
    write_model(model, out);
}

// ---------------------------------------------------------------------------
// extract

struct ExtractArgs {
    std::string corpus, model, out, impact_dump;
    std::string proj = "up", layers = "all", agg = "mean";
    std::uint32_t k  = 20;
    double        rk = 0.0;
    unsigned      workers = 1;
    bool          resume  = false;
};

struct Extracted {
    NagRecord                 rec;
    std::vector<ImpactVector> impacts;
};

// Whole records already present in an interrupted NAG file; the file is cut back to them.
std::optional<std::uint64_t> resume_nags(const std::string& path, const NagConfig& cfg, std::uint64_t& kept) {
    kept = 0;
    std::optional<std::uint64_t> watermark;
    std::uint64_t                good_size = 0;
    {
        auto in = open_in(path);
        with_file(path, [&] {
            NagReader r(in);
            require_same_config(r.config(), cfg, "resume");
            const auto total = fs::file_size(path);
            const auto n     = (total - nag_header_size(cfg)) / nag_record_size(cfg);
            for (std::uint64_t i = 0; i < n; ++i) {
                auto rec = r.next();
                if (watermark && rec->doc_id <= *watermark) {
                    throw FormatError("records out of doc_id order", nag_header_size(cfg) + i * nag_record_size(cfg));
                }
                watermark = rec->doc_id;
                ++kept;
            }
            good_size = nag_header_size(cfg) + kept * nag_record_size(cfg);
            return 0;
        });
    }
    fs::resize_file(path, good_size);
    return watermark;
}

// Cuts an impact dump back to the docs with doc_id <= watermark whose records are all present.
// Returns the last such doc.
std::optional<std::uint64_t> resume_dump(const std::string& path, std::optional<std::uint64_t> watermark,
                                         std::size_t per_doc) {
    std::optional<std::uint64_t> last;
    std::uint64_t                keep = 0;
    if (watermark && fs::exists(path)) {
        auto       in = open_in(path);
        io::Reader r(in);
        std::optional<std::uint64_t> cur;
        std::size_t                  seen = 0;
        try {
            while (!r.at_eof()) {
                const auto doc = r.get<std::uint64_t>("doc_id");
                r.get<std::uint16_t>("layer");
                r.get<std::uint8_t>("proj_type");
                const auto         d = r.get<std::uint32_t>("d");
                std::vector<float> buf(d);
                r.get_array(buf.data(), buf.size(), "impact scores");
                if (doc > *watermark) break;
                if (cur != doc) {
                    cur  = doc;
                    seen = 0;
                }
                if (++seen == per_doc) {
                    keep = r.offset();
                    last = doc;
                }
            }
        } catch (const FormatError&) {
            // partial trailing record
        }
    }
    if (fs::exists(path)) fs::resize_file(path, keep);
    return last;
}

void cmd_extract(const ExtractArgs& a) {
    const auto model = load_model(a.model);
    require_byte_vocab(model);
    const auto proj = parse_proj_type(a.proj);
    const auto set  = parse_layer_set(a.layers);
    const auto agg  = parse_token_aggregation(a.agg);
    const auto cfg  = a.rk > 0.0 ? NagConfig::for_model_ratio(model.spec(), proj, a.rk, set)
                                 : NagConfig::for_model(model.spec(), proj, a.k, set);
    auto docs = load_corpus(a.corpus);
    std::sort(docs.begin(), docs.end(), [](const Document& x, const Document& y) { return x.doc_id < y.doc_id; });

    std::optional<std::uint64_t> watermark;
    std::uint64_t                kept = 0;
    const bool                   resuming = a.resume && fs::exists(a.out);
    if (resuming) {
        watermark = resume_nags(a.out, cfg, kept);
        if (!a.impact_dump.empty()) {
            const auto dumped = resume_dump(a.impact_dump, watermark, cfg.projection_refs().size());
            if (dumped != watermark) {
                // the dump lags the NAG file: drop the NAG records it does not cover
                kept = 0;
                for (const auto& d : docs) kept += dumped && d.doc_id <= *dumped;
                fs::resize_file(a.out, nag_header_size(cfg) + kept * nag_record_size(cfg));
                watermark = dumped;
            }
        }
    }
    std::ofstream out = open_out(a.out, std::ios::binary | (resuming ? std::ios::app : std::ios::trunc));
    NagWriter     writer = resuming ? NagWriter::append(out, cfg) : NagWriter(out, cfg);
    std::ofstream dump;
    if (!a.impact_dump.empty()) {
        dump = open_out(a.impact_dump, std::ios::binary | (resuming ? std::ios::app : std::ios::trunc));
    }

    std::vector<const Document*> todo;
    for (const auto& d : docs) {
        if (!watermark || d.doc_id > *watermark) todo.push_back(&d);
    }
    const auto refs    = cfg.projection_refs();
    const auto max_len = model.spec().max_seq_len;
    auto       one     = [&](const Document& d) {
        try {
            const auto toks = ByteTokenizer{}.encode(d.text);
            if (toks.empty()) throw std::invalid_argument("empty document");
            const auto n = std::min<std::size_t>(toks.size(), max_len);
            Extracted  e;
            e.impacts = extract_impacts(model, std::span<const std::uint32_t>(toks).first(n), refs, agg);
            e.rec     = build_nag(d.doc_id, e.impacts, cfg);
            return e;
        } catch (const std::exception& ex) {
            throw std::runtime_error("doc " + std::to_string(d.doc_id) + ": " + ex.what());
        }
    };

    const auto        t0      = std::chrono::steady_clock::now();
    const unsigned    workers = std::max(1u, a.workers);
    const std::size_t batch   = 64 * workers;
    for (std::size_t begin = 0; begin < todo.size(); begin += batch) {
        const std::size_t      end = std::min(todo.size(), begin + batch);
        std::vector<Extracted> results(end - begin);
        std::vector<std::exception_ptr> errors(workers);
        auto run = [&](unsigned w) {
            try {
                for (std::size_t i = begin + w; i < end; i += workers) results[i - begin] = one(*todo[i]);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        };
        if (workers == 1) {
            run(0);
        } else {
            std::vector<std::thread> pool;
            for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w);
            for (auto& t : pool) t.join();
        }
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        // single serializer keeps output order independent of the worker count
        for (const auto& r : results) {
            if (dump.is_open()) {
                for (const auto& iv : r.impacts) write_impact_record(dump, r.rec.doc_id, iv);
            }
            writer.write(r.rec);
        }
        out.flush();
        if (dump.is_open()) dump.flush();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "extract: " << end << "/" << todo.size() << " docs, "
                  << static_cast<double>(end) / std::max(secs, 1e-9) << " docs/s\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "extract: wrote " << writer.count() << " records";
    if (resuming) std::cerr << " after " << kept << " kept from the previous run";
    std::cerr << " in " << secs << " s (" << static_cast<double>(writer.count()) / std::max(secs, 1e-9)
              << " docs/s)\n";
}

// ---------------------------------------------------------------------------
// profile / rank / select / mix / fuse

struct ProfileArgs {
    std::vector<std::string> nags;
    std::string              out;
};

void cmd_profile(const ProfileArgs& a) {
    std::optional<GroupProfile> profile;
    for (const auto& path : a.nags) {
        const auto f = load_nags(path);
        if (f.records.empty()) throw std::invalid_argument(path + ": no NAG records");
        auto p = build_profile(f.records, f.cfg);
        if (profile) {
            profile->merge(p);
        } else {
            profile = std::move(p);
        }
    }
    auto out = open_out(a.out);
    write_profile(out, *profile);
}

struct RankArgs {
    std::string nags, profile, corpus, out;
    unsigned    workers = 1;
};

void cmd_rank(const RankArgs& a) {
    const auto pool    = load_nags(a.nags);
    const auto profile = load_profile(a.profile);
    require_same_config(profile.config(), pool.cfg, "rank");
    TokenCountFn counts;
    std::unordered_map<std::uint64_t, std::uint64_t> lengths;
    if (!a.corpus.empty()) {
        for (const auto& d : load_corpus(a.corpus)) lengths[d.doc_id] = d.n_tokens.value_or(d.text.size());
        for (const auto& r : pool.records) {
            if (!lengths.count(r.doc_id)) {
                throw std::invalid_argument("doc " + std::to_string(r.doc_id) + " from " + a.nags + " is missing in " + a.corpus);
            }
        }
        counts = [&](std::uint64_t id) { return lengths.at(id); };
    }
    const auto scored = score_pool(pool.records, profile, counts, a.workers);
    auto       out    = open_out(a.out);
    write_ranked(out, sorted_by_rank(scored));
}

struct SelectArgs {
    std::string   ranked, out, mode = "ratio";
    double        rf          = 0.2;
    std::uint64_t budget      = 0;
    std::size_t   sample_size = kDefaultThresholdSample;
    std::uint64_t seed        = 0;
};

void cmd_select(const SelectArgs& a) {
    const auto scored = load_ranked(a.ranked);
    auto       out    = open_out(a.out);
    if (a.mode == "ratio") {
        const auto sel = select_top_ratio(scored, a.rf, a.sample_size, a.seed);
        write_manifest(out, sel.selected);
        std::cerr << "select: " << sel.selected.size() << " of " << scored.size() << " docs (fraction "
                  << sel.achieved_fraction << ", threshold " << format_score(sel.threshold) << ", "
                  << (sel.exact ? "exact" : "estimated") << ")\n";
    } else {
        const auto sel = select_token_budget(scored, a.budget);
        write_manifest(out, sel.selected);
        std::cerr << "select: " << sel.selected.size() << " docs, " << sel.total_tokens << " tokens"
                  << (sel.under_budget ? " (pool smaller than budget)" : "") << "\n";
    }
}

struct MixArgs {
    std::vector<std::string> ranked;
    std::string              out;
    double                   rf          = 0.2;
    std::size_t              sample_size = kDefaultThresholdSample;
    std::uint64_t            seed        = 0;
};

void cmd_mix(const MixArgs& a) {
    std::vector<std::vector<RankedCandidate>> pools;
    for (const auto& p : a.ranked) pools.push_back(load_ranked(p));
    const auto mix = select_multi_target(pools, a.rf, a.sample_size, a.seed);
    auto       out = open_out(a.out);
    write_manifest(out, mix);
    std::cerr << "mix: " << mix.entries.size() << " entries from " << pools.size() << " targets\n";
}

struct FuseArgs {
    std::string ranked, quality, out;
    double      alpha = 0.5;
};

void cmd_fuse(const FuseArgs& a) {
    const auto nag_scores = load_ranked(a.ranked);
    auto       qin        = open_in(a.quality);
    const auto quality    = with_file(a.quality, [&] { return read_quality(qin); });
    auto       out        = open_out(a.out);
    write_ranked(out, joint_rank(nag_scores, quality, a.alpha));
}

// ---------------------------------------------------------------------------
// analyze

struct MaskArgs {
    std::string   criterion = "nag-topk";
    std::string   profile, model, corpus, target_corpus, random_corpus, eval, out;
    std::string   proj    = "up";
    std::size_t   n       = 20;
    bool          global  = false;
    std::uint64_t seed    = 0;
};

std::vector<ImpactStats> corpus_stats(const ToyModel& model, const std::string& path, ProjType proj) {
    std::vector<ProjectionRef> refs;
    for (std::uint32_t l = 0; l < model.spec().n_layers; ++l) refs.push_back({l, proj});
    const auto stats = collect_impact_stats(model, token_lists(load_tokenized(path), model.spec().max_seq_len), refs);
    if (stats.empty() || stats.front().count() == 0) throw std::invalid_argument(path + ": no non-empty documents");
    return stats;
}

void cmd_mask(const MaskArgs& a) {
    auto need = [](const std::string& v, const char* flag, const std::string& crit) {
        if (v.empty()) throw ConfigError("criterion " + crit + " needs " + flag);
    };
    std::optional<ToyModel> model;
    if (!a.model.empty()) {
        model = load_model(a.model);
        require_byte_vocab(*model);
    }
    const auto       proj = parse_proj_type(a.proj);
    DeactivationMask mask;
    if (a.criterion == "nag-topk") {
        need(a.profile, "--profile", a.criterion);
        mask = mask_nag_topk(load_profile(a.profile), a.n);
    } else if (a.criterion == "random") {
        need(a.model, "--model", a.criterion);
        mask = mask_random(model->spec(), {proj, a.n, !a.global}, a.seed);
    } else if (a.criterion == "high-delta") {
        need(a.model, "--model", a.criterion);
        need(a.target_corpus, "--target-corpus", a.criterion);
        need(a.random_corpus, "--random-corpus", a.criterion);
        mask = mask_high_delta(corpus_stats(*model, a.target_corpus, proj), corpus_stats(*model, a.random_corpus, proj), a.n);
    } else if (a.criterion == "high-mean") {
        need(a.model, "--model", a.criterion);
        need(a.corpus, "--corpus", a.criterion);
        mask = mask_high_mean(corpus_stats(*model, a.corpus, proj), a.n);
    } else {
        throw ConfigError("unknown mask criterion '" + a.criterion + "'");
    }
    if (mask.degenerate) std::cerr << "analyze: warning: mask cut falls inside a run of tied scores\n";
    auto out = open_out(a.out);
    write_mask(out, mask);
    if (!a.eval.empty()) {
        need(a.model, "--model", "--eval");
        const auto   docs   = token_lists(load_tokenized(a.eval), model->spec().max_seq_len);
        const double base   = mean_reference_loss(*model, *model, docs);
        const double masked = mean_reference_loss(*model, deactivate(*model, mask), docs);
        std::cout << "neurons\t" << mask.size() << "\nbaseline_loss\t" << format_score(base) << "\nmasked_loss\t"
                  << format_score(masked) << "\ndelta_loss\t" << format_score(masked - base) << "\n";
    }
}

struct DistmatArgs {
    std::string nags, out;
    unsigned    workers = 1;
};

void cmd_distmat(const DistmatArgs& a) {
    const auto f   = load_nags(a.nags);
    auto       out = open_out(a.out);
    write_distance_matrix(out, distance_matrix(f.records, a.workers));
}

struct ClusterArgs {
    std::string   distmat, nags, labels, out;
    std::size_t   k    = 3;
    std::uint64_t seed = 0;
    unsigned      workers = 1;
};

void cmd_cluster(const ClusterArgs& a) {
    Matrix                     d;
    std::vector<std::uint64_t> ids;
    if (!a.nags.empty()) {
        const auto f = load_nags(a.nags);
        d            = distance_matrix(f.records, a.workers);
        for (const auto& r : f.records) ids.push_back(r.doc_id);
    } else {
        auto in = open_in(a.distmat);
        d       = with_file(a.distmat, [&] { return read_distance_matrix(in); });
        for (std::size_t i = 0; i < d.rows; ++i) ids.push_back(i);
    }
    const auto c   = cluster_medoids(d, a.k, a.seed);
    auto       out = open_out(a.out);
    for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << '\t' << c.assignments[i] << '\n';
    std::cout << "cost\t" << format_score(c.cost) << "\niterations\t" << c.iterations << "\n";
    if (!a.labels.empty()) {
        auto                     in = open_in(a.labels);
        std::vector<std::string> labels;
        for (std::string line; std::getline(in, line);) {
            if (!line.empty()) labels.push_back(line);
        }
        if (labels.size() != ids.size()) {
            throw std::invalid_argument(a.labels + ": " + std::to_string(labels.size()) + " labels for " +
                                        std::to_string(ids.size()) + " items");
        }
        const auto r = cluster_report<std::string>(c.assignments, labels);
        std::cout << "purity\t" << format_score(r.purity) << "\nnmi\t" << format_score(r.nmi)
                  << (r.nmi_degenerate ? "\t(degenerate)" : "") << "\nari\t" << format_score(r.ari) << "\n";
    }
}

struct SensitivityArgs {
    std::string a, b;
    double      rf = 0.2;
};

void cmd_sensitivity(const SensitivityArgs& s) {
    const auto a = load_ranked(s.a);
    const auto b = load_ranked(s.b);
    std::cout << "spearman\t" << format_score(spearman(a, b)) << "\ntopset_jaccard\t"
              << format_score(topset_jaccard(a, b, s.rf)) << "\n";
}

// ---------------------------------------------------------------------------
// decontam

struct DecontamArgs {
    std::string targets, tests, out, clean;
    std::size_t n       = kDefaultNgram;
    unsigned    workers = 1;
};

void cmd_decontam(const DecontamArgs& a) {
    const auto targets = load_tokenized(a.targets);
    const auto tests   = load_tokenized(a.tests);
    const auto flagged = decontaminate(targets, tests, a.n, a.workers);
    auto       out     = open_out(a.out);
    for (auto id : flagged) out << id << '\n';
    if (!a.clean.empty()) {
        std::unordered_set<std::uint64_t> drop(flagged.begin(), flagged.end());
        auto                              clean = open_out(a.clean);
        for (const auto& d : load_corpus(a.targets)) {
            if (!drop.count(d.doc_id)) write_document(clean, d);
        }
    }
    std::cerr << "decontam: " << flagged.size() << " of " << targets.size() << " targets share a " << a.n
              << "-gram with the test set\n";
}

// ---------------------------------------------------------------------------
// --format

std::string join(const std::vector<std::uint32_t>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

void print_config(const NagConfig& cfg) {
    std::cout << "proj\t" << to_string(cfg.proj) << "\nlayer_set\t" << to_string(cfg.layer_set) << "\nmodel_layers\t"
              << cfg.model_layers << "\nlayers\t" << cfg.layers() << "\nK\t" << join(cfg.widths) << "\nd\t"
              << join(cfg.dims) << "\n";
}

void cmd_format(const std::string& path) {
    auto       in = open_in(path);
    char       magic[4]{};
    in.read(magic, 4);
    const std::string m(magic, static_cast<std::size_t>(in.gcount()));
    in.clear();
    in.seekg(0);
    with_file(path, [&] {
        if (m == "NAGR") {
            NagReader  r(in);
            const auto size = fs::file_size(path);
            const auto body = size - nag_header_size(r.config());
            std::cout << "file\t" << path << "\ntype\tnag records\nversion\t" << kNagVersion << "\n";
            print_config(r.config());
            std::cout << "records\t" << body / nag_record_size(r.config()) << "\n";
            if (body % nag_record_size(r.config()) != 0) std::cout << "trailing_bytes\t" << body % nag_record_size(r.config()) << "\n";
        } else if (m == "NAGP") {
            const auto p = read_profile(in);
            std::cout << "file\t" << path << "\ntype\tgroup profile\nversion\t" << kProfileVersion << "\n";
            print_config(p.config());
            std::cout << "n_docs\t" << p.n_docs() << "\n";
        } else if (m == "NAGM") {
            io::Reader r(in);
            const auto s = read_model_header(r);
            std::cout << "file\t" << path << "\ntype\tmodel checkpoint\nversion\t" << kModelVersion << "\nn_layers\t"
                      << s.n_layers << "\nd_model\t" << s.d_model << "\nd_internal\t" << s.d_internal << "\nn_heads\t"
                      << s.n_heads << "\nvocab_size\t" << s.vocab_size << "\nmax_seq_len\t" << s.max_seq_len
                      << "\nrng_seed\t" << s.rng_seed << "\n";
        } else {
            throw FormatError("unrecognized file magic (expected NAGR, NAGP or NAGM)", 0);
        }
        return 0;
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NAG-based pretraining data selection"};
    app.set_config("--config", "", "INI/TOML config file; flags override it");
    app.require_subcommand(0, 1);
    std::string format_path;
    app.add_option("--format", format_path, "print header metadata of a NAG, profile or model file")
        ->check(CLI::ExistingFile);

    InitModelArgs im;
    auto*         c_init = app.add_subcommand("init-model", "write a seeded toy model checkpoint");
    c_init->add_option("--out", im.out)->required();
    c_init->add_option("--layers", im.spec.n_layers)->capture_default_str();
    c_init->add_option("--d-model", im.spec.d_model)->capture_default_str();
    c_init->add_option("--d-internal", im.spec.d_internal)->capture_default_str();
    c_init->add_option("--heads", im.spec.n_heads)->capture_default_str();
    c_init->add_option("--vocab", im.spec.vocab_size)->capture_default_str();
    c_init->add_option("--max-seq", im.spec.max_seq_len)->capture_default_str();
    c_init->add_option("--seed", im.spec.rng_seed)->capture_default_str();

    ExtractArgs ex;
    auto*       c_ex = app.add_subcommand("extract", "map each corpus document to its NAG");
    c_ex->add_option("--corpus", ex.corpus, "JSONL corpus")->required()->check(CLI::ExistingFile);
    c_ex->add_option("--model", ex.model, "model checkpoint")->required()->check(CLI::ExistingFile);
    c_ex->add_option("--out", ex.out, "NAG file")->required();
    c_ex->add_option("--proj", ex.proj, "q, k, v, up or down")->capture_default_str();
    auto* k_opt  = c_ex->add_option("--k", ex.k, "neurons per layer")->capture_default_str();
    auto* rk_opt = c_ex->add_option("--rk", ex.rk, "neurons per layer as a fraction of d");
    k_opt->excludes(rk_opt);
    c_ex->add_option("--layers", ex.layers, "all or last")->capture_default_str();
    c_ex->add_option("--agg", ex.agg, "token aggregation: mean or max")->capture_default_str();
    c_ex->add_option("--workers", ex.workers)->capture_default_str()->check(CLI::PositiveNumber);
    c_ex->add_flag("--resume", ex.resume, "continue after the last doc_id already in --out");
    c_ex->add_option("--impact-dump", ex.impact_dump, "also write raw impact vectors");

    ProfileArgs pr;
    auto*       c_pr = app.add_subcommand("profile", "aggregate target NAGs into a profile");
    c_pr->add_option("--nags", pr.nags, "one or more NAG files")->required()->check(CLI::ExistingFile);
    c_pr->add_option("--out", pr.out)->required();

    RankArgs rk;
    auto*    c_rk = app.add_subcommand("rank", "score a candidate pool against a profile");
    c_rk->add_option("--nags", rk.nags)->required()->check(CLI::ExistingFile);
    c_rk->add_option("--profile", rk.profile)->required()->check(CLI::ExistingFile);
    c_rk->add_option("--corpus", rk.corpus, "pool corpus, for token counts")->check(CLI::ExistingFile);
    c_rk->add_option("--out", rk.out)->required();
    c_rk->add_option("--workers", rk.workers)->capture_default_str()->check(CLI::PositiveNumber);

    SelectArgs se;
    auto*      c_se = app.add_subcommand("select", "pick the top of a ranking");
    c_se->add_option("--ranked", se.ranked)->required()->check(CLI::ExistingFile);
    c_se->add_option("--out", se.out, "JSONL manifest")->required();
    c_se->add_option("--mode", se.mode)->capture_default_str()->check(CLI::IsMember({"ratio", "budget"}));
    auto* rf_opt   = c_se->add_option("--rf", se.rf, "selection ratio")->capture_default_str();
    auto* b_opt    = c_se->add_option("--budget", se.budget, "token budget");
    c_se->add_option("--sample-size", se.sample_size, "threshold estimation sample M")->capture_default_str();
    c_se->add_option("--seed", se.seed)->capture_default_str();
    b_opt->excludes(rf_opt);

    MixArgs mx;
    auto*   c_mx = app.add_subcommand("mix", "equal-share selection for several targets");
    c_mx->add_option("--ranked", mx.ranked, "one ranking per target")->required()->check(CLI::ExistingFile);
    c_mx->add_option("--out", mx.out)->required();
    c_mx->add_option("--rf", mx.rf)->capture_default_str();
    c_mx->add_option("--sample-size", mx.sample_size)->capture_default_str();
    c_mx->add_option("--seed", mx.seed)->capture_default_str();

    FuseArgs fu;
    auto*    c_fu = app.add_subcommand("fuse", "combine NAG and quality rankings");
    c_fu->add_option("--ranked", fu.ranked)->required()->check(CLI::ExistingFile);
    c_fu->add_option("--quality", fu.quality, "doc_id<TAB>score")->required()->check(CLI::ExistingFile);
    c_fu->add_option("--out", fu.out)->required();
    c_fu->add_option("--alpha", fu.alpha)->capture_default_str();

    auto* c_an = app.add_subcommand("analyze", "deactivation masks, distances, clustering, sensitivity");
    c_an->require_subcommand(1);

    MaskArgs ma;
    auto*    c_mask = c_an->add_subcommand("deactivate-mask", "build a neuron deactivation mask");
    c_mask->add_option("--criterion", ma.criterion)
        ->capture_default_str()
        ->check(CLI::IsMember({"nag-topk", "random", "high-delta", "high-mean"}));
    c_mask->add_option("--profile", ma.profile)->check(CLI::ExistingFile);
    c_mask->add_option("--model", ma.model)->check(CLI::ExistingFile);
    c_mask->add_option("--corpus", ma.corpus)->check(CLI::ExistingFile);
    c_mask->add_option("--target-corpus", ma.target_corpus)->check(CLI::ExistingFile);
    c_mask->add_option("--random-corpus", ma.random_corpus)->check(CLI::ExistingFile);
    c_mask->add_option("--eval", ma.eval, "report loss change on this corpus")->check(CLI::ExistingFile);
    c_mask->add_option("--proj", ma.proj)->capture_default_str();
    c_mask->add_option("--n", ma.n, "neurons (per layer for nag-topk and random)")->capture_default_str();
    c_mask->add_flag("--global", ma.global, "random: draw n over all layers together");
    c_mask->add_option("--seed", ma.seed)->capture_default_str();
    c_mask->add_option("--out", ma.out)->required();

    DistmatArgs dm;
    auto*       c_dm = c_an->add_subcommand("distmat", "pairwise NAG distance matrix");
    c_dm->add_option("--nags", dm.nags)->required()->check(CLI::ExistingFile);
    c_dm->add_option("--out", dm.out)->required();
    c_dm->add_option("--workers", dm.workers)->capture_default_str()->check(CLI::PositiveNumber);

    ClusterArgs cl;
    auto*       c_cl = c_an->add_subcommand("cluster", "k-medoids over NAG distance");
    auto* cl_d = c_cl->add_option("--distmat", cl.distmat)->check(CLI::ExistingFile);
    auto* cl_n = c_cl->add_option("--nags", cl.nags)->check(CLI::ExistingFile);
    cl_d->excludes(cl_n);
    c_cl->add_option("--labels", cl.labels, "one label per line, in item order")->check(CLI::ExistingFile);
    c_cl->add_option("--k", cl.k)->capture_default_str();
    c_cl->add_option("--seed", cl.seed)->capture_default_str();
    c_cl->add_option("--workers", cl.workers)->capture_default_str()->check(CLI::PositiveNumber);
    c_cl->add_option("--out", cl.out)->required();

    SensitivityArgs sa;
    auto*           c_sa = c_an->add_subcommand("sensitivity", "compare two rankings of one pool");
    c_sa->add_option("--a", sa.a)->required()->check(CLI::ExistingFile);
    c_sa->add_option("--b", sa.b)->required()->check(CLI::ExistingFile);
    c_sa->add_option("--rf", sa.rf)->capture_default_str();

    double p = 0.0, n = 0.0;
    auto*  c_seo = c_an->add_subcommand("se", "binomial standard error");
    c_seo->add_option("--p", p)->required();
    c_seo->add_option("--n", n)->required();

    DecontamArgs dc;
    auto*        c_dc = app.add_subcommand("decontam", "flag targets sharing an n-gram with test data");
    c_dc->add_option("--targets", dc.targets)->required()->check(CLI::ExistingFile);
    c_dc->add_option("--tests", dc.tests)->required()->check(CLI::ExistingFile);
    c_dc->add_option("--n", dc.n)->capture_default_str();
    c_dc->add_option("--workers", dc.workers)->capture_default_str()->check(CLI::PositiveNumber);
    c_dc->add_option("--out", dc.out, "flagged doc ids")->required();
    c_dc->add_option("--clean", dc.clean, "targets without the flagged documents");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (c_cl->parsed() && cl.distmat.empty() && cl.nags.empty()) {
        std::cerr << "nagsel: error: analyze cluster needs --distmat or --nags\n";
        return 2;
    }
    if (c_se->parsed() && se.mode == "budget" && b_opt->count() == 0) {
        std::cerr << "nagsel: error: --mode budget needs --budget\n";
        return 2;
    }
    if (c_se->parsed() && se.mode == "ratio" && b_opt->count() > 0) {
        std::cerr << "nagsel: error: --budget only applies to --mode budget\n";
        return 2;
    }

    try {
        if (!format_path.empty()) cmd_format(format_path);
        if (c_init->parsed()) cmd_init_model(im);
        if (c_ex->parsed()) cmd_extract(ex);
        if (c_pr->parsed()) cmd_profile(pr);
        if (c_rk->parsed()) cmd_rank(rk);
        if (c_se->parsed()) cmd_select(se);
        if (c_mx->parsed()) cmd_mix(mx);
        if (c_fu->parsed()) cmd_fuse(fu);
        if (c_mask->parsed()) cmd_mask(ma);
        if (c_dm->parsed()) cmd_distmat(dm);
        if (c_cl->parsed()) cmd_cluster(cl);
        if (c_sa->parsed()) cmd_sensitivity(sa);
        if (c_seo->parsed()) std::cout << "se\t" << format_score(binomial_se(p, n)) << "\n";
        if (c_dc->parsed()) cmd_decontam(dc);
        if (format_path.empty() && app.get_subcommands().empty()) {
            std::cerr << app.help();
            return 2;
        }
    } catch (const ConfigError& e) {
        std::cerr << "nagsel: config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "nagsel: format error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "nagsel: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
