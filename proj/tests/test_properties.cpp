// Randomized properties that cut across modules.
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace nagsel;
using test_util::flat_config;
using test_util::random_record;

namespace {

NagConfig random_config(std::mt19937_64& gen) {
    const std::size_t layers = 1 + gen() % 5;
    NagConfig         cfg    = flat_config(layers, 1, 1);
    for (std::size_t l = 0; l < layers; ++l) {
        cfg.dims[l]   = 1 + static_cast<std::uint32_t>(gen() % 40);
        cfg.widths[l] = 1 + static_cast<std::uint32_t>(gen() % cfg.dims[l]);
    }
    return cfg;
}

}  // namespace

TEST(Properties, NagFileRoundtripPreservesScores) {
    std::mt19937_64 gen(1);
    for (int rep = 0; rep < 30; ++rep) {
        const auto             cfg = random_config(gen);
        std::vector<NagRecord> recs;
        for (std::uint64_t i = 0; i < 1 + gen() % 60; ++i) recs.push_back(random_record(gen(), cfg, gen));
        std::stringstream io;
        write_nags(io, cfg, recs);
        const auto back = read_nags(io);
        ASSERT_TRUE(back.cfg == cfg);
        ASSERT_EQ(back.records, recs);
        const auto p1 = build_profile(recs, cfg);
        std::stringstream pio;
        write_profile(pio, p1);
        const auto p2 = read_profile(pio);
        for (const auto& r : recs) EXPECT_EQ(group_sim(r, p1), group_sim(r, p2));
    }
}

TEST(Properties, PoolOrderDoesNotChangeSelection) {
    std::mt19937_64 gen(2);
    for (int rep = 0; rep < 30; ++rep) {
        const auto             cfg = random_config(gen);
        std::vector<NagRecord> target, pool;
        for (std::uint64_t i = 0; i < 10; ++i) target.push_back(random_record(i, cfg, gen));
        for (std::uint64_t i = 0; i < 200; ++i) pool.push_back(random_record(1000 + i, cfg, gen));
        const auto profile = build_profile(target, cfg);
        const auto a       = select_top_ratio(score_pool(pool, profile), 0.15).selected;
        std::shuffle(pool.begin(), pool.end(), gen);
        std::shuffle(target.begin(), target.end(), gen);
        const auto b = select_top_ratio(score_pool(pool, build_profile(target, cfg)), 0.15).selected;
        EXPECT_EQ(a, b);
    }
}

TEST(Properties, ProfileScoreEqualsPairwiseMeanOnModelNags) {
    const auto spec  = test_util::small_spec(11);
    const auto model = build_toy_model(spec);
    std::mt19937_64 gen(3);
    for (ProjType proj : kAllProjTypes) {
        for (LayerSet set : {LayerSet::All, LayerSet::Last}) {
            const auto             cfg = NagConfig::for_model(spec, proj, 3, set);
            std::vector<NagRecord> target, pool;
            for (std::uint64_t i = 0; i < 12; ++i) {
                target.push_back(extract_nag(model, i, test_util::random_tokens(1 + gen() % 16, spec.vocab_size, gen), cfg));
            }
            for (std::uint64_t i = 0; i < 20; ++i) {
                pool.push_back(extract_nag(model, 100 + i, test_util::random_tokens(1 + gen() % 16, spec.vocab_size, gen), cfg));
            }
            const auto profile = build_profile(target, cfg);
            for (const auto& c : score_pool(pool, profile)) {
                double s = 0.0;
                for (const auto& t : target) s += pairwise_sim(pool[c.doc_id - 100], t);
                EXPECT_NEAR(c.score, s / static_cast<double>(target.size()), 1e-12);
            }
        }
    }
}

TEST(Properties, NagIsTopKOfImpacts) {
    const auto spec  = test_util::small_spec(12);
    const auto model = build_toy_model(spec);
    std::mt19937_64 gen(4);
    const auto      cfg  = NagConfig::for_model(spec, ProjType::DOWN, 4);
    const auto      refs = cfg.projection_refs();
    for (int rep = 0; rep < 30; ++rep) {
        const auto toks = test_util::random_tokens(1 + gen() % 16, spec.vocab_size, gen);
        const auto ivs  = extract_impacts(model, toks, refs);
        const auto rec  = extract_nag(model, 5, toks, cfg);
        for (std::size_t l = 0; l < ivs.size(); ++l) {
            // every chosen neuron beats or ties every excluded one, ties going to the lower index
            std::set<std::uint32_t> in(rec.layers[l].begin(), rec.layers[l].end());
            for (std::uint32_t k = 0; k < ivs[l].size(); ++k) {
                if (in.count(k)) continue;
                for (auto j : in) {
                    const double a = ivs[l].scores[j], b = ivs[l].scores[k];
                    EXPECT_TRUE(a > b || (a == b && j < k));
                }
            }
        }
    }
}

TEST(Properties, DeactivatingNagNeuronsIsLocalToMask) {
    const auto spec  = test_util::small_spec(13);
    const auto model = build_toy_model(spec);
    std::mt19937_64 gen(5);
    const auto      toks = test_util::random_tokens(10, spec.vocab_size, gen);
    const auto      cfg  = NagConfig::for_model(spec, ProjType::UP, 3);
    const auto      rec  = extract_nag(model, 0, toks, cfg);
    const auto      mask = mask_nag_topk(build_profile(std::vector<NagRecord>{rec}, cfg), 3);
    const auto      off  = deactivate(model, mask);
    for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
        for (std::uint32_t k = 0; k < spec.d_internal; ++k) {
            const bool masked = std::find(rec.layers[l].begin(), rec.layers[l].end(), k) != rec.layers[l].end();
            EXPECT_EQ(off.is_deactivated({l, ProjType::UP, k}), masked);
        }
    }
    EXPECT_EQ(off.deactivated_count(), 3u * spec.n_layers);
}

TEST(Properties, RankedFileRoundtripPreservesSelection) {
    std::mt19937_64              gen(6);
    std::vector<RankedCandidate> pool;
    for (std::uint64_t i = 0; i < 500; ++i) pool.push_back({gen(), test_util::uniform(gen, -1e3, 1e3), gen() % 4096});
    std::stringstream io;
    write_ranked(io, pool);
    const auto back = read_ranked(io);
    EXPECT_EQ(select_top_ratio(back, 0.3).selected, select_top_ratio(pool, 0.3).selected);
    EXPECT_EQ(select_token_budget(back, 100000).selected, select_token_budget(pool, 100000).selected);
}
