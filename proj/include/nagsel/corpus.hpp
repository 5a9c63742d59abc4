#pragma once

#include "common.hpp"
#include "rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace nagsel {

struct Document {
    std::uint64_t                doc_id = 0;
    std::string                  text;
    std::optional<std::uint64_t> n_tokens;  // declared in the corpus or set by tokenize()
    std::vector<std::uint32_t>   token_ids;
    bool                         tokenized = false;

    std::uint64_t token_count() const { return n_tokens.value_or(token_ids.size()); }

    friend bool operator==(const Document&, const Document&) = default;
};

class Tokenizer {
public:
    virtual ~Tokenizer()                                                = default;
    virtual std::uint32_t              vocab_size() const               = 0;
    virtual std::vector<std::uint32_t> encode(std::string_view text) const = 0;
};

// One token per byte.
class ByteTokenizer final : public Tokenizer {
public:
    std::uint32_t vocab_size() const override { return 256; }

    std::vector<std::uint32_t> encode(std::string_view text) const override {
        std::vector<std::uint32_t> ids(text.size());
        for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
        return ids;
    }
};

inline void tokenize(Document& doc, const Tokenizer& tok) {
    doc.token_ids = tok.encode(doc.text);
    doc.n_tokens  = doc.token_ids.size();
    doc.tokenized = true;
}

// ---------------------------------------------------------------------------
// Corpus: one JSON object per line, {"id": u64, "text": string, "n_tokens": u64 (optional)}.

struct CorpusOptions {
    bool skip_malformed = false;  // otherwise the first malformed line is fatal
};

class CorpusReader {
public:
    explicit CorpusReader(std::istream& in, CorpusOptions opts = {}) : in_(in), opts_(opts) {}

    // Next well-formed document, or nullopt at end of input.
    std::optional<Document> next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++lineno_;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                Document d = parse(line);
                auto [it, fresh] = seen_.emplace(d.doc_id, lineno_);
                if (!fresh) {
                    throw FormatError("duplicate doc id " + std::to_string(d.doc_id) + " (first seen on line " +
                                          std::to_string(it->second) + ")",
                                      lineno_, true);
                }
                return d;
            } catch (const FormatError& e) {
                const bool duplicate = std::string_view(e.what()).find("duplicate doc id") != std::string_view::npos;
                if (!opts_.skip_malformed || duplicate) throw;
                skipped_.push_back(e.what());
            }
        }
        return std::nullopt;
    }

    const std::vector<std::string>& skipped() const { return skipped_; }
    std::uint64_t                   line() const { return lineno_; }

private:
    Document parse(const std::string& line) const {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("malformed JSON: ") + e.what(), lineno_, true);
        }
        if (!j.is_object()) throw FormatError("corpus record is not an object", lineno_, true);
        Document d;
        auto     id = j.find("id");
        if (id == j.end() || !id->is_number_unsigned()) {
            throw FormatError("corpus record needs a non-negative integer \"id\"", lineno_, true);
        }
        d.doc_id  = id->get<std::uint64_t>();
        auto text = j.find("text");
        if (text == j.end() || !text->is_string()) throw FormatError("corpus record needs a string \"text\"", lineno_, true);
        d.text = text->get<std::string>();
        if (auto nt = j.find("n_tokens"); nt != j.end()) {
            if (!nt->is_number_unsigned()) throw FormatError("\"n_tokens\" must be a non-negative integer", lineno_, true);
            d.n_tokens = nt->get<std::uint64_t>();
        }
        return d;
    }

    std::istream&                                     in_;
    CorpusOptions                                     opts_;
    std::uint64_t                                     lineno_ = 0;
    std::unordered_map<std::uint64_t, std::uint64_t> seen_;
    std::vector<std::string>                          skipped_;
};

inline std::vector<Document> read_corpus(std::istream& in, CorpusOptions opts = {}) {
    CorpusReader          r(in, opts);
    std::vector<Document> docs;
    while (auto d = r.next()) docs.push_back(std::move(*d));
    return docs;
}

inline std::vector<Document> load_corpus(const std::string& path, CorpusOptions opts = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus '" + path + "'");
    try {
        return read_corpus(in, opts);
    } catch (const FormatError& e) {
        throw e.in_file(path);
    }
}

inline void write_document(std::ostream& out, const Document& d) {
    nlohmann::ordered_json j;
    j["id"]   = d.doc_id;
    j["text"] = d.text;
    if (d.n_tokens) j["n_tokens"] = *d.n_tokens;
    out << j.dump() << '\n';
}

inline void write_corpus(std::ostream& out, std::span<const Document> docs) {
    for (const auto& d : docs) write_document(out, d);
}

// ---------------------------------------------------------------------------
// n-gram decontamination

namespace detail {

inline constexpr std::uint64_t kNgramBase = 0x100000001B3ULL;

// Polynomial hash of every length-n window, mod 2^64.
inline std::vector<std::uint64_t> rolling_hashes(std::span<const std::uint32_t> toks, std::size_t n) {
    std::vector<std::uint64_t> out;
    if (toks.size() < n) return out;
    std::uint64_t top = 1;  // base^(n-1)
    for (std::size_t i = 1; i < n; ++i) top *= kNgramBase;
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < n; ++i) h = h * kNgramBase + (static_cast<std::uint64_t>(toks[i]) + 1);
    out.push_back(h);
    for (std::size_t i = n; i < toks.size(); ++i) {
        h -= (static_cast<std::uint64_t>(toks[i - n]) + 1) * top;
        h = h * kNgramBase + (static_cast<std::uint64_t>(toks[i]) + 1);
        out.push_back(h);
    }
    return out;
}

}  // namespace detail

// Hashed index of every n-gram in a set of test documents. Lookups confirm hash hits
// against the stored token sequence, so a positive answer is always a true match.
class NgramIndex {
public:
    NgramIndex(std::span<const Document> tests, std::size_t n) : n_(n) {
        if (n == 0) throw ConfigError("n-gram length must be >= 1");
        for (const auto& t : tests) {
            if (!t.tokenized) throw std::invalid_argument("decontamination: test document " + std::to_string(t.doc_id) + " is not tokenized");
            docs_.push_back(&t.token_ids);
        }
        for (std::uint32_t d = 0; d < docs_.size(); ++d) {
            const auto hs = detail::rolling_hashes(*docs_[d], n_);
            for (std::uint32_t p = 0; p < hs.size(); ++p) index_[hs[p]].push_back({d, p});
        }
    }

    bool contains_any(std::span<const std::uint32_t> toks) const {
        const auto hs = detail::rolling_hashes(toks, n_);
        for (std::size_t p = 0; p < hs.size(); ++p) {
            auto it = index_.find(hs[p]);
            if (it == index_.end()) continue;
            for (const auto& [d, q] : it->second) {
                const auto& other = *docs_[d];
                if (std::equal(toks.begin() + static_cast<std::ptrdiff_t>(p),
                               toks.begin() + static_cast<std::ptrdiff_t>(p + n_),
                               other.begin() + static_cast<std::ptrdiff_t>(q))) {
                    return true;
                }
            }
        }
        return false;
    }

    std::size_t n() const { return n_; }

private:
    struct Site {
        std::uint32_t doc;
        std::uint32_t pos;
    };
    std::size_t                                          n_;
    std::vector<const std::vector<std::uint32_t>*>       docs_;
    std::unordered_map<std::uint64_t, std::vector<Site>> index_;
};

inline constexpr std::size_t kDefaultNgram = 13;

// Ids of targets sharing at least one contiguous n-token run with any test document,
// in target order.
inline std::vector<std::uint64_t> decontaminate(std::span<const Document> targets, std::span<const Document> tests,
                                                std::size_t n = kDefaultNgram, unsigned workers = 1) {
    for (const auto& t : targets) {
        if (!t.tokenized) throw std::invalid_argument("decontamination: target document " + std::to_string(t.doc_id) + " is not tokenized");
    }
    const NgramIndex  index(tests, n);
    std::vector<char> flagged(targets.size(), 0);
    auto run = [&](unsigned w, unsigned stride) {
        for (std::size_t i = w; i < targets.size(); i += stride) flagged[i] = index.contains_any(targets[i].token_ids);
    };
    workers = std::max(1u, workers);
    if (workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
        for (auto& t : pool) t.join();
    }
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (flagged[i]) out.push_back(targets[i].doc_id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Uniform downsampling without replacement; the subset keeps corpus order.

template <typename T>
std::vector<T> sample_uniform(std::span<const T> corpus, std::size_t count, std::uint64_t seed) {
    if (count > corpus.size()) {
        throw std::invalid_argument("sample_uniform: count " + std::to_string(count) + " exceeds corpus size " +
                                    std::to_string(corpus.size()));
    }
    std::mt19937_64 gen(seed);
    auto            idx = rng::sample_without_replacement(corpus.size(), count, gen);
    std::sort(idx.begin(), idx.end());
    std::vector<T> out;
    out.reserve(count);
    for (auto i : idx) out.push_back(corpus[i]);
    return out;
}

template <typename T>
std::vector<T> sample_fraction(std::span<const T> corpus, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("sample fraction must lie in [0, 1]");
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(corpus.size())));
    return sample_uniform(corpus, count, seed);
}

}  // namespace nagsel
