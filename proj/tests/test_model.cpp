#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

using namespace nagsel;
using test_util::small_spec;

namespace {

std::string model_bytes(const ToyModel& m) {
    return test_util::to_bytes([&](std::ostream& o) { write_model(m, o); });
}

}  // namespace

TEST(ModelSpec, RejectsIndivisibleHeads) {
    auto s    = small_spec();
    s.d_model = 8;
    s.n_heads = 3;
    EXPECT_THROW(s.validate(), ConfigError);
    EXPECT_THROW(build_toy_model(s), ConfigError);
}

TEST(ModelSpec, RejectsZeroDimensions) {
    for (int field = 0; field < 6; ++field) {
        auto s = small_spec();
        switch (field) {
            case 0: s.n_layers = 0; break;
            case 1: s.d_model = 0; break;
            case 2: s.d_internal = 0; break;
            case 3: s.n_heads = 0; break;
            case 4: s.vocab_size = 0; break;
            default: s.max_seq_len = 0; break;
        }
        EXPECT_THROW(s.validate(), ConfigError) << "field " << field;
    }
}

TEST(BuildToyModel, SameSpecGivesIdenticalWeights) {
    const auto a = build_toy_model(small_spec());
    const auto b = build_toy_model(small_spec());
    EXPECT_EQ(model_bytes(a), model_bytes(b));
    EXPECT_TRUE(a == b);
    EXPECT_NE(model_bytes(a), model_bytes(build_toy_model(small_spec(8))));
}

TEST(BuildToyModel, ProjectionShapes) {
    auto s       = small_spec(7);
    s.vocab_size = 64;
    const auto m = build_toy_model(s);
    const auto up = m.projection({0, ProjType::UP});
    EXPECT_EQ(up.d_in(), 8u);
    EXPECT_EQ(up.d_out(), 16u);
    for (auto p : {ProjType::Q, ProjType::K, ProjType::V}) {
        EXPECT_EQ(m.projection({1, p}).d_in(), 8u);
        EXPECT_EQ(m.projection({1, p}).d_out(), 8u);
    }
    EXPECT_EQ(m.projection({1, ProjType::DOWN}).d_in(), 16u);
    EXPECT_EQ(m.projection({1, ProjType::DOWN}).d_out(), 8u);
    EXPECT_EQ(m.neuron_count(ProjType::UP), 16u);
    EXPECT_EQ(m.neuron_count(ProjType::DOWN), 8u);
    EXPECT_THROW(m.projection({2, ProjType::UP}), std::out_of_range);
}

TEST(BuildToyModel, WeightsAreFloat32AndWithinGainedBound) {
    const auto m = build_toy_model(small_spec(3));
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (auto p : kAllProjTypes) {
            const Matrix& w = *m.projection({l, p}).weights;
            for (double v : w.data) {
                EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
                EXPECT_TRUE(std::isfinite(v));
            }
        }
    }
}

TEST(BuildToyModel, StreamsIndependentOfLayerCount) {
    auto s2     = small_spec(11);
    auto s3     = s2;
    s3.n_layers = 3;
    const auto a = build_toy_model(s2);
    const auto b = build_toy_model(s3);
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (auto p : kAllProjTypes) {
            EXPECT_TRUE(*a.projection({l, p}).weights == *b.projection({l, p}).weights);
        }
    }
    EXPECT_TRUE(a.token_embedding() == b.token_embedding());
}

TEST(ForwardCapture, SingleUpCaptureShape) {
    const auto                 m = build_toy_model(small_spec());
    std::vector<std::uint32_t> toks{1, 2, 3};
    std::vector<ProjectionRef> refs{{0, ProjType::UP}};
    const auto                 r = forward_capture(m, toks, refs);
    ASSERT_EQ(r.captures.size(), 1u);
    EXPECT_EQ(r.captures[0].tokens(), 3u);
    EXPECT_EQ(r.captures[0].inputs.cols, 8u);
    EXPECT_EQ(r.captures[0].outputs.cols, 16u);
    EXPECT_EQ(r.logits.rows, 3u);
    EXPECT_EQ(r.logits.cols, 64u);
}

TEST(ForwardCapture, NoTargetsGivesLogitsOnly) {
    const auto                 m = build_toy_model(small_spec());
    std::vector<std::uint32_t> toks{5, 9};
    const auto                 r = forward_capture(m, toks, {});
    EXPECT_TRUE(r.captures.empty());
    for (double v : r.logits.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(ForwardCapture, InputErrors) {
    const auto                 m = build_toy_model(small_spec());
    std::vector<std::uint32_t> empty;
    EXPECT_THROW(forward(m, empty), std::invalid_argument);
    std::vector<std::uint32_t> bad{1, 64};
    EXPECT_THROW(forward(m, bad), std::out_of_range);
    std::vector<std::uint32_t> too_long(17, 1);
    EXPECT_THROW(forward(m, too_long), std::invalid_argument);
    std::vector<std::uint32_t> ok{1};
    std::vector<ProjectionRef> refs{{5, ProjType::UP}};
    EXPECT_THROW(forward_capture(m, ok, refs), std::out_of_range);
}

TEST(ForwardCapture, Deterministic) {
    const auto      m = build_toy_model(small_spec());
    std::mt19937_64 gen(1);
    auto            toks = test_util::random_tokens(12, 64, gen);
    std::vector<ProjectionRef> refs;
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (auto p : kAllProjTypes) refs.push_back({l, p});
    }
    const auto a = forward_capture(m, toks, refs);
    const auto b = forward_capture(m, toks, refs);
    EXPECT_TRUE(a.logits == b.logits);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        EXPECT_TRUE(a.captures[i].inputs == b.captures[i].inputs);
        EXPECT_TRUE(a.captures[i].outputs == b.captures[i].outputs);
    }
}

TEST(ForwardCapture, HookFidelity) {
    const auto      m = build_toy_model(small_spec(4));
    std::mt19937_64 gen(2);
    auto            toks = test_util::random_tokens(10, 64, gen);
    std::vector<ProjectionRef> refs;
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (auto p : kAllProjTypes) refs.push_back({l, p});
    }
    const auto r = forward_capture(m, toks, refs);
    for (const auto& c : r.captures) {
        const Matrix& w = *m.projection(c.ref).weights;
        for (std::size_t t = 0; t < c.tokens(); ++t) {
            for (std::size_t k = 0; k < w.cols; ++k) {
                double y = 0.0;
                for (std::size_t i = 0; i < w.rows; ++i) y += c.inputs(t, i) * w(i, k);
                const double obs = c.outputs(t, k);
                EXPECT_LE(std::abs(y - obs), 1e-10 * std::max(1.0, std::abs(obs)));
            }
        }
    }
}

TEST(ForwardCapture, ZeroingUpColumnChangesOnlyThatCoordinate) {
    const auto      m = build_toy_model(small_spec(5));
    std::mt19937_64 gen(3);
    auto            toks = test_util::random_tokens(6, 64, gen);
    for (std::uint32_t l = 0; l < 2; ++l) {
        const std::uint32_t k      = 3 + l;
        ToyModel            edited = m;
        Matrix&             w      = edited.projection_matrix({l, ProjType::UP});
        for (std::size_t i = 0; i < w.rows; ++i) w(i, k) = 0.0;
        std::vector<ProjectionRef> refs{{l, ProjType::UP}};
        const auto a = forward_capture(m, toks, refs).captures[0];
        const auto b = forward_capture(edited, toks, refs).captures[0];
        ASSERT_TRUE(a.inputs == b.inputs);
        const Matrix& w0 = *m.projection({l, ProjType::UP}).weights;
        for (std::size_t t = 0; t < toks.size(); ++t) {
            for (std::size_t j = 0; j < a.outputs.cols; ++j) {
                if (j != k) {
                    EXPECT_EQ(a.outputs(t, j), b.outputs(t, j));
                    continue;
                }
                double dot = 0.0;
                for (std::size_t i = 0; i < w0.rows; ++i) dot += a.inputs(t, i) * w0(i, k);
                EXPECT_NEAR(b.outputs(t, j) - a.outputs(t, j), -dot, 1e-12);
            }
        }
    }
}

TEST(Deactivate, EmptyMaskIsIdentity) {
    const auto      m = build_toy_model(small_spec());
    std::mt19937_64 gen(4);
    auto            toks = test_util::random_tokens(9, 64, gen);
    const auto      d    = deactivate(m, DeactivationMask{});
    EXPECT_TRUE(forward(m, toks) == forward(d, toks));
    EXPECT_EQ(d.deactivated_count(), 0u);
}

TEST(Deactivate, WholeUpLayerOutputsZero) {
    const auto       m = build_toy_model(small_spec());
    DeactivationMask mask;
    for (std::uint32_t k = 0; k < 16; ++k) mask.neurons.push_back({1, ProjType::UP, k});
    const auto      d = deactivate(m, mask);
    std::mt19937_64 gen(5);
    for (int rep = 0; rep < 5; ++rep) {
        auto                       toks = test_util::random_tokens(1 + rep * 3, 64, gen);
        std::vector<ProjectionRef> refs{{1, ProjType::UP}};
        const auto                 c = forward_capture(d, toks, refs).captures[0];
        for (double v : c.outputs.data) EXPECT_EQ(v, 0.0);
    }
}

TEST(Deactivate, SingleNeuronMatchesHardZeroedCopy) {
    const auto      m = build_toy_model(small_spec(9));
    std::mt19937_64 gen(6);
    std::vector<std::vector<std::uint32_t>> docs;
    for (int i = 0; i < 4; ++i) docs.push_back(test_util::random_tokens(12, 64, gen));
    for (auto proj : {ProjType::UP, ProjType::DOWN, ProjType::Q}) {
        for (std::uint32_t l = 0; l < 2; ++l) {
            const std::uint32_t k = 5;
            DeactivationMask    mask;
            mask.neurons.push_back({l, proj, k});
            const auto masked = deactivate(m, mask);

            ToyModel copy = m;
            Matrix&  w    = copy.projection_matrix({l, proj});
            for (std::size_t i = 0; i < w.rows; ++i) w(i, k) = 0.0;

            EXPECT_DOUBLE_EQ(mean_loss(masked, docs), mean_loss(copy, docs));
            EXPECT_NE(mean_loss(masked, docs), mean_loss(m, docs));
        }
    }
}

TEST(Deactivate, LocalityOnProjectionOutput) {
    const auto      m = build_toy_model(small_spec(12));
    std::mt19937_64 gen(7);
    auto            toks = test_util::random_tokens(8, 64, gen);
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (auto p : kAllProjTypes) {
            const std::uint32_t k = 2;
            DeactivationMask    mask;
            mask.neurons.push_back({l, p, k});
            std::vector<ProjectionRef> refs{{l, p}};
            const auto a = forward_capture(m, toks, refs).captures[0];
            const auto b = forward_capture(deactivate(m, mask), toks, refs).captures[0];
            for (std::size_t t = 0; t < toks.size(); ++t) {
                for (std::size_t j = 0; j < a.outputs.cols; ++j) {
                    if (j == k) {
                        EXPECT_EQ(b.outputs(t, j), 0.0);
                    } else {
                        EXPECT_EQ(a.outputs(t, j), b.outputs(t, j));
                    }
                }
            }
        }
    }
}

TEST(Deactivate, OriginalUntouchedAndRangeChecked) {
    const auto       m = build_toy_model(small_spec());
    const auto       before = model_bytes(m);
    DeactivationMask mask;
    mask.neurons.push_back({0, ProjType::UP, 1});
    const auto d = deactivate(m, mask);
    EXPECT_EQ(model_bytes(m), before);
    EXPECT_EQ(m.deactivated_count(), 0u);
    EXPECT_TRUE(d.is_deactivated({0, ProjType::UP, 1}));
    EXPECT_FALSE(d.is_deactivated({0, ProjType::UP, 2}));

    DeactivationMask bad;
    bad.neurons.push_back({0, ProjType::UP, 16});
    EXPECT_THROW(deactivate(m, bad), std::out_of_range);
    bad.neurons = {{0, ProjType::DOWN, 8}};
    EXPECT_THROW(deactivate(m, bad), std::out_of_range);
    bad.neurons = {{2, ProjType::UP, 0}};
    EXPECT_THROW(deactivate(m, bad), std::out_of_range);
}

TEST(Loss, ReferenceLossNeverBelowBaseline) {
    const auto      m = build_toy_model(small_spec(13));
    std::mt19937_64 gen(8);
    std::vector<std::vector<std::uint32_t>> docs;
    for (int i = 0; i < 3; ++i) docs.push_back(test_util::random_tokens(10, 64, gen));
    const double base = mean_reference_loss(m, m, docs);
    for (std::uint32_t k = 0; k < 16; k += 3) {
        DeactivationMask mask;
        mask.neurons.push_back({0, ProjType::UP, k});
        EXPECT_GE(mean_reference_loss(m, deactivate(m, mask), docs), base - 1e-12);
    }
    std::vector<std::uint32_t> one{1};
    EXPECT_THROW(next_token_loss(m, one), std::invalid_argument);
}

TEST(Loss, HandComputedCrossEntropy) {
    Matrix logits(3, 2);
    logits(0, 0) = 0.0;
    logits(0, 1) = 0.0;
    logits(1, 0) = std::log(3.0);
    logits(1, 1) = 0.0;
    std::vector<std::uint32_t> toks{0, 1, 0};
    // position 0 predicts 1 with p=1/2, position 1 predicts 0 with p=3/4
    const double expect = (std::log(2.0) + std::log(4.0 / 3.0)) / 2.0;
    EXPECT_NEAR(next_token_loss(logits, toks), expect, 1e-15);
}

TEST(Checkpoint, RoundtripIsByteExact) {
    auto s       = small_spec(21);
    s.n_layers   = 3;
    const auto m = build_toy_model(s);
    const auto bytes = model_bytes(m);
    std::istringstream in(bytes);
    const auto back = read_model(in);
    EXPECT_TRUE(back == m);
    EXPECT_EQ(model_bytes(back), bytes);
    const std::size_t floats = 3 * (8 * 8 * 3 + 8 * 16 * 2) + 64 * 8 + 16 * 8 + 3 * (8 * 8 + 8 * 16) + 8 * 64;
    EXPECT_EQ(bytes.size(), 4 + 4 + 6 * 4 + 8 + 4 * floats);
}

TEST(Checkpoint, CorruptionsAreStructured) {
    const auto bytes = model_bytes(build_toy_model(small_spec()));
    auto expect_error = [](std::string b, std::uint64_t offset) {
        std::istringstream in(b);
        try {
            read_model(in);
            ADD_FAILURE() << "no error";
        } catch (const FormatError& e) {
            EXPECT_EQ(e.position(), offset) << e.what();
            EXPECT_FALSE(e.is_line());
        }
    };
    auto bad_magic = bytes;
    bad_magic[0]   = 'X';
    expect_error(bad_magic, 0);
    auto bad_version = bytes;
    bad_version[4]   = 9;
    expect_error(bad_version, 4);
    expect_error(bytes.substr(0, bytes.size() - 3), bytes.size() - 3);
    auto nan_weight = bytes;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan_weight.data() + 40 + 8, &nan, 4);
    expect_error(nan_weight, 48);
    expect_error(bytes + "x", bytes.size());
    auto bad_heads = bytes;
    bad_heads[20]  = 3;  // n_heads
    expect_error(bad_heads, 8);
}

TEST(Checkpoint, FileHelpersNameThePath) {
    const std::string path = ::testing::TempDir() + "/bad_model.nagm";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NAGM";
    }
    try {
        load_model(path);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
        EXPECT_EQ(e.position(), 4u);
    }
    const auto m = build_toy_model(small_spec());
    save_model(m, path);
    EXPECT_TRUE(load_model(path) == m);
    EXPECT_THROW(load_model(path + ".missing"), std::runtime_error);
}
