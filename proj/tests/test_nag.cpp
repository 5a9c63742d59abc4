#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

using namespace nagsel;
using test_util::flat_config;
using test_util::random_record;
using test_util::small_spec;

namespace {

// Stable sort by score descending, then take the first K indices.
std::vector<std::uint32_t> sort_oracle(const std::vector<double>& s, std::size_t k) {
    std::vector<std::uint32_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::string nag_bytes(const NagConfig& cfg, const std::vector<NagRecord>& recs) {
    return test_util::to_bytes([&](std::ostream& o) { write_nags(o, cfg, recs); });
}

template <typename T>
void poke(std::string& bytes, std::size_t at, T v) {
    std::memcpy(bytes.data() + at, &v, sizeof v);
}

}  // namespace

TEST(TopK, DirectInspection) {
    std::vector<double> s{0.1, 5.0, 3.0, 0.2};
    EXPECT_EQ(top_k_indices(s, 2), (std::vector<std::uint32_t>{1, 2}));
}

TEST(TopK, AllEqualTakesLowestIndices) {
    std::vector<double> s(9, 0.7);
    EXPECT_EQ(top_k_indices(s, 3), (std::vector<std::uint32_t>{0, 1, 2}));
}

TEST(TopK, TieAtBoundaryPrefersLowerIndex) {
    std::vector<double> s{1.0, 2.0, 1.0, 1.0, 0.5};
    EXPECT_EQ(top_k_indices(s, 2), (std::vector<std::uint32_t>{0, 1}));
    EXPECT_EQ(top_k_indices(s, 3), (std::vector<std::uint32_t>{0, 1, 2}));
}

TEST(TopK, MatchesFullSortOracle) {
    std::mt19937_64 gen(1);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> s(1000);
        // coarse values force plenty of ties
        for (auto& v : s) v = static_cast<double>(gen() % (rep % 2 ? 50 : 1000000));
        EXPECT_EQ(top_k_indices(s, 17), sort_oracle(s, 17));
        EXPECT_EQ(top_k_indices(s, 1000), sort_oracle(s, 1000));
    }
}

TEST(TopK, RangeErrors) {
    std::vector<double> s{1.0, 2.0};
    EXPECT_THROW(top_k_indices(s, 0), std::out_of_range);
    EXPECT_THROW(top_k_indices(s, 3), std::out_of_range);
}

TEST(TopK, PermutationAndShiftInvariance) {
    std::mt19937_64 gen(2);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> s(40);
        for (auto& v : s) v = test_util::uniform(gen, 0.0, 1.0);
        const auto base = top_k_indices(s, 6);
        // present the scores in a shuffled order, then map the answer back
        std::vector<std::uint32_t> perm(40);
        std::iota(perm.begin(), perm.end(), 0u);
        std::shuffle(perm.begin(), perm.end(), gen);
        std::vector<double> shuffled(40);
        for (std::size_t i = 0; i < 40; ++i) shuffled[i] = s[perm[i]];
        std::vector<std::uint32_t> back;
        for (auto i : top_k_indices(shuffled, 6)) back.push_back(perm[i]);
        std::sort(back.begin(), back.end());
        EXPECT_EQ(back, base);

        std::vector<double> shifted(s);
        for (auto& v : shifted) v += 0.25;  // exact in binary for values in [0, 1)
        EXPECT_EQ(top_k_indices(shifted, 6), base);
    }
}

TEST(WidthFromRatio, PublishedWidths) {
    EXPECT_EQ(width_from_ratio(0.003, 6144), 20u);
    EXPECT_EQ(width_from_ratio(0.003, 11008), 30u);
    EXPECT_EQ(width_from_ratio(0.003, 8192), 20u);
    EXPECT_EQ(width_from_ratio(0.01, 128), 1u);
    EXPECT_EQ(width_from_ratio(0.03, 128), 4u);
    EXPECT_EQ(width_from_ratio(1e-6, 128), 1u);
    EXPECT_EQ(width_from_ratio(1.0, 128), 128u);
    EXPECT_THROW(width_from_ratio(0.0, 128), ConfigError);
    EXPECT_THROW(width_from_ratio(1.5, 128), ConfigError);
}

TEST(NagConfig, PublishedModelConfigs) {
    ModelSpec qwen;
    qwen.n_layers   = 28;
    qwen.d_model    = 2048;
    qwen.d_internal = 6144;
    qwen.n_heads    = 16;
    const auto a    = NagConfig::for_model_ratio(qwen, ProjType::UP, 0.003);
    EXPECT_EQ(a.widths, std::vector<std::uint32_t>(28, 20));
    EXPECT_EQ(a.total_width(), 28u * 20u);

    ModelSpec smol  = qwen;
    smol.n_layers   = 36;
    smol.d_internal = 11008;
    const auto b    = NagConfig::for_model_ratio(smol, ProjType::UP, 0.003);
    EXPECT_EQ(b.widths.front(), 30u);
}

TEST(NagConfig, Validation) {
    const auto s = small_spec();
    EXPECT_THROW(NagConfig::for_model(s, ProjType::UP, 17), ConfigError);
    EXPECT_THROW(NagConfig::for_model(s, ProjType::UP, 0), ConfigError);
    EXPECT_THROW(NagConfig::for_model(s, ProjType::DOWN, 9), ConfigError);
    const auto last = NagConfig::for_model(s, ProjType::K, 3, LayerSet::Last);
    EXPECT_EQ(last.layers(), 1u);
    EXPECT_EQ(last.model_layer(0), 1u);
    EXPECT_EQ(last.dims[0], 8u);
    auto bad   = flat_config(2, 2, 8);
    bad.widths = {2};
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_EQ(parse_layer_set("last"), LayerSet::Last);
    EXPECT_THROW(parse_layer_set("first"), ConfigError);
}

TEST(BuildNag, FromImpactVectors) {
    const auto cfg = flat_config(2, 2, 4);
    std::vector<ImpactVector> ivs{{{0, ProjType::UP}, {0.1, 5.0, 3.0, 0.2}}, {{1, ProjType::UP}, {1, 1, 1, 1}}};
    const auto rec = build_nag(9, ivs, cfg);
    EXPECT_EQ(rec.doc_id, 9u);
    EXPECT_EQ(rec.layers[0], (std::vector<std::uint32_t>{1, 2}));
    EXPECT_EQ(rec.layers[1], (std::vector<std::uint32_t>{0, 1}));
    EXPECT_EQ(rec.total_size(), 4u);
    EXPECT_TRUE(check_record(rec, cfg).empty());
}

TEST(BuildNag, Errors) {
    const auto                cfg = flat_config(2, 2, 4);
    std::vector<ImpactVector> one{{{0, ProjType::UP}, {1, 2, 3, 4}}};
    EXPECT_THROW(build_nag(0, one, cfg), std::invalid_argument);
    std::vector<ImpactVector> wrong_layer{{{0, ProjType::UP}, {1, 2, 3, 4}}, {{0, ProjType::UP}, {1, 2, 3, 4}}};
    EXPECT_THROW(build_nag(0, wrong_layer, cfg), std::invalid_argument);
    std::vector<ImpactVector> wrong_proj{{{0, ProjType::UP}, {1, 2, 3, 4}}, {{1, ProjType::Q}, {1, 2, 3, 4}}};
    EXPECT_THROW(build_nag(0, wrong_proj, cfg), std::invalid_argument);
    std::vector<ImpactVector> wrong_d{{{0, ProjType::UP}, {1, 2, 3, 4}}, {{1, ProjType::UP}, {1, 2, 3}}};
    EXPECT_THROW(build_nag(0, wrong_d, cfg), std::invalid_argument);
}

TEST(ExtractNag, DeterministicOnToyModel) {
    auto s       = small_spec(7);
    const auto m = build_toy_model(s);
    const auto cfg = NagConfig::for_model(s, ProjType::UP, 1);
    std::vector<std::uint32_t> toks{3, 1, 4, 1, 5, 9, 2, 6};
    const auto a = extract_nag(m, 1, toks, cfg);
    const auto b = extract_nag(build_toy_model(s), 1, toks, cfg);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.layers.size(), 2u);
    EXPECT_EQ(a.total_size(), 2u);
    EXPECT_EQ(nag_bytes(cfg, {a}), nag_bytes(cfg, {b}));
}

TEST(ExtractNag, TruncatesToContext) {
    auto s       = small_spec(5);
    const auto m = build_toy_model(s);
    const auto cfg = NagConfig::for_model(s, ProjType::DOWN, 3, LayerSet::Last);
    std::mt19937_64 gen(3);
    auto long_doc = test_util::random_tokens(40, 64, gen);
    std::vector<std::uint32_t> head(long_doc.begin(), long_doc.begin() + 16);
    EXPECT_EQ(extract_nag(m, 0, long_doc, cfg), extract_nag(m, 0, head, cfg));
}

TEST(NagFile, HeaderLayout) {
    const auto cfg   = flat_config(3, 2, 10);
    const auto bytes = nag_bytes(cfg, {});
    ASSERT_EQ(bytes.size(), nag_header_size(cfg));
    EXPECT_EQ(bytes.substr(0, 4), "NAGR");
    std::uint32_t ver;
    std::memcpy(&ver, bytes.data() + 4, 4);
    EXPECT_EQ(ver, 1u);
    std::uint16_t L;
    std::memcpy(&L, bytes.data() + 8, 2);
    EXPECT_EQ(L, 3u);
    EXPECT_EQ(static_cast<std::uint8_t>(bytes[10]), 3u);  // UP
    EXPECT_EQ(static_cast<std::uint8_t>(bytes[11]), 0u);  // all layers
    std::uint32_t k0;
    std::memcpy(&k0, bytes.data() + 12, 4);
    EXPECT_EQ(k0, 2u);
}

TEST(NagFile, RoundtripTenThousandRecords) {
    const auto      cfg = flat_config(4, 5, 64);
    std::mt19937_64 gen(4);
    std::vector<NagRecord> recs;
    for (std::uint64_t i = 0; i < 10000; ++i) recs.push_back(random_record(i * 7 + 3, cfg, gen));
    const auto bytes = nag_bytes(cfg, recs);
    EXPECT_EQ(bytes.size(), nag_header_size(cfg) + recs.size() * nag_record_size(cfg));
    std::istringstream in(bytes);
    const auto         f = read_nags(in);
    EXPECT_EQ(f.cfg, cfg);
    EXPECT_EQ(f.records, recs);
    EXPECT_EQ(nag_bytes(f.cfg, f.records), bytes);
}

TEST(NagFile, SeekByRecord) {
    const auto      cfg = flat_config(2, 3, 20);
    std::mt19937_64 gen(5);
    std::vector<NagRecord> recs;
    for (std::uint64_t i = 0; i < 50; ++i) recs.push_back(random_record(i, cfg, gen));
    std::istringstream in(nag_bytes(cfg, recs));
    NagReader          r(in);
    r.seek(37);
    EXPECT_EQ(*r.next(), recs[37]);
    EXPECT_EQ(*r.next(), recs[38]);
    r.seek(0);
    EXPECT_EQ(*r.next(), recs[0]);
    r.seek(49);
    EXPECT_EQ(*r.next(), recs[49]);
    EXPECT_FALSE(r.next().has_value());
}

TEST(NagFile, AppendContinuesFile) {
    const auto      cfg = flat_config(1, 2, 8);
    std::mt19937_64 gen(6);
    std::vector<NagRecord> recs;
    for (std::uint64_t i = 0; i < 6; ++i) recs.push_back(random_record(i, cfg, gen));
    std::ostringstream out;
    {
        NagWriter w(out, cfg);
        for (int i = 0; i < 3; ++i) w.write(recs[i]);
    }
    {
        auto w = NagWriter::append(out, cfg);
        for (int i = 3; i < 6; ++i) w.write(recs[i]);
        EXPECT_EQ(w.count(), 3u);
    }
    EXPECT_EQ(out.str(), nag_bytes(cfg, recs));
}

TEST(NagFile, WriterRejectsInvalidRecords) {
    const auto         cfg = flat_config(1, 3, 8);
    std::ostringstream out;
    NagWriter          w(out, cfg);
    EXPECT_THROW(w.write({1, {{1, 2}}}), std::invalid_argument);
    EXPECT_THROW(w.write({1, {{1, 2, 8}}}), std::invalid_argument);
    EXPECT_THROW(w.write({1, {{2, 1, 3}}}), std::invalid_argument);
    EXPECT_THROW(w.write({1, {{1, 1, 3}}}), std::invalid_argument);
    EXPECT_NO_THROW(w.write({1, {{1, 2, 3}}}));
}

TEST(NagFile, Corruptions) {
    const auto      cfg = flat_config(2, 3, 16);
    std::mt19937_64 gen(7);
    std::vector<NagRecord> recs;
    for (std::uint64_t i = 0; i < 4; ++i) recs.push_back(random_record(i, cfg, gen));
    const auto bytes  = nag_bytes(cfg, recs);
    const auto header = nag_header_size(cfg);
    auto offset_of = [](const std::string& b) -> std::int64_t {
        std::istringstream in(b);
        try {
            read_nags(in);
        } catch (const FormatError& e) {
            return static_cast<std::int64_t>(e.position());
        }
        return -1;
    };
    auto b = bytes;
    b[1]   = 'X';
    EXPECT_EQ(offset_of(b), 0);
    b = bytes;
    poke<std::uint32_t>(b, 4, 2);
    EXPECT_EQ(offset_of(b), 4);
    b = bytes;
    poke<std::uint16_t>(b, 8, 0);
    EXPECT_EQ(offset_of(b), 8);
    b = bytes;
    poke<std::uint16_t>(b, 8, 3);  // corrupted length field: header now claims 3 layers
    EXPECT_GE(offset_of(b), 8);
    b     = bytes;
    b[10] = 9;
    EXPECT_EQ(offset_of(b), 10);
    b     = bytes;
    b[11] = 4;
    EXPECT_EQ(offset_of(b), 11);
    b = bytes;
    poke<std::uint32_t>(b, 12, 17);  // K > d
    EXPECT_EQ(offset_of(b), 8);
    // record index >= d
    b = bytes;
    poke<std::uint32_t>(b, header + 8, 99);
    EXPECT_EQ(offset_of(b), static_cast<std::int64_t>(header));
    // truncated second record
    b = bytes.substr(0, header + nag_record_size(cfg) + 5);
    EXPECT_EQ(offset_of(b), static_cast<std::int64_t>(header + nag_record_size(cfg) + 5));
}

TEST(NagFile, HeaderWidthDisagreesWithRecord) {
    // A file written for K=19 read back under a header that says K=20 must fail
    // (record bytes no longer line up with sorted index sets or the file ends early).
    const auto      cfg19 = flat_config(1, 19, 64);
    std::mt19937_64 gen(8);
    std::vector<NagRecord> recs;
    for (std::uint64_t i = 0; i < 3; ++i) recs.push_back(random_record(i, cfg19, gen));
    auto bytes = nag_bytes(cfg19, recs);
    poke<std::uint32_t>(bytes, 12, 20);
    std::istringstream in(bytes);
    EXPECT_THROW(read_nags(in), FormatError);
}

TEST(NagFile, LoadNamesPath) {
    const std::string path = ::testing::TempDir() + "/trunc.nagr";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NAGR";
    }
    try {
        load_nags(path);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
    }
}
