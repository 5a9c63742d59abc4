#pragma once

// Minimal decoder-only transformer used as the reference extraction model.
//
// Block layout (pre-norm):
//   a = rmsnorm(x);  x += attn(a Wq, a Wk, a Wv) Wo
//   f = rmsnorm(x);  x += (silu(f Wgate) * (f Wup)) Wdown
// Positions come from a learned additive embedding. All arithmetic is double;
// weights are generated as float32-representable values so checkpoints are lossless.

#include "common.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace nagsel {

struct ModelSpec {
    std::uint32_t n_layers    = 2;
    std::uint32_t d_model     = 8;
    std::uint32_t d_internal  = 16;
    std::uint32_t n_heads     = 2;
    std::uint32_t vocab_size  = 256;
    std::uint32_t max_seq_len = 64;
    std::uint64_t rng_seed    = 0;

    void validate() const {
        auto positive = [](std::uint32_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string("model spec: ") + name + " must be >= 1");
        };
        positive(n_layers, "n_layers");
        positive(d_model, "d_model");
        positive(d_internal, "d_internal");
        positive(n_heads, "n_heads");
        positive(vocab_size, "vocab_size");
        positive(max_seq_len, "max_seq_len");
        if (d_model % n_heads != 0) {
            throw ConfigError("model spec: d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                              std::to_string(n_heads) + ")");
        }
        if (n_layers > 0xFFFF) throw ConfigError("model spec: n_layers exceeds 65535");
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Dense row-major matrix.
struct Matrix {
    std::size_t         rows = 0;
    std::size_t         cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double&       operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double        operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<double>       row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

// out[t] = in[t] * W for every row t.
inline Matrix matmul(const Matrix& in, const Matrix& w) {
    if (in.cols != w.rows) {
        throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(in.cols) + " vs " +
                                    std::to_string(w.rows) + ")");
    }
    Matrix out(in.rows, w.cols);
    for (std::size_t t = 0; t < in.rows; ++t) {
        auto dst = out.row(t);
        for (std::size_t i = 0; i < in.cols; ++i) {
            const double a = in(t, i);
            if (a == 0.0) continue;
            auto wr = w.row(i);
            for (std::size_t j = 0; j < w.cols; ++j) dst[j] += a * wr[j];
        }
    }
    return out;
}

// A projection's weight matrix; each column is one neuron.
struct ProjectionView {
    const Matrix* weights = nullptr;

    std::size_t d_in() const { return weights->rows; }
    std::size_t d_out() const { return weights->cols; }
    double      at(std::size_t i, std::size_t k) const { return (*weights)(i, k); }
};

struct HookCapture {
    ProjectionRef ref;
    Matrix        inputs;   // T x d_in: exactly what entered the matrix multiply
    Matrix        outputs;  // T x d_out: the projection output after any deactivation

    std::size_t tokens() const { return inputs.rows; }
};

struct NeuronId {
    std::uint32_t layer = 0;
    ProjType      proj  = ProjType::UP;
    std::uint32_t index = 0;

    friend bool operator==(const NeuronId&, const NeuronId&)  = default;
    friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

enum class MaskCriterion : std::uint8_t { NagTopKPerLayer, Random, HighMean, HighDelta, Custom };

inline std::string_view to_string(MaskCriterion c) {
    switch (c) {
        case MaskCriterion::NagTopKPerLayer: return "NAG_TOPK_PER_LAYER";
        case MaskCriterion::Random: return "RANDOM";
        case MaskCriterion::HighMean: return "HIGH_MEAN";
        case MaskCriterion::HighDelta: return "HIGH_DELTA";
        case MaskCriterion::Custom: return "CUSTOM";
    }
    return "?";
}

struct DeactivationMask {
    std::vector<NeuronId> neurons;
    MaskCriterion         criterion  = MaskCriterion::Custom;
    bool                  degenerate = false;  // selection was decided entirely by the tie rule

    std::size_t size() const { return neurons.size(); }
    bool        empty() const { return neurons.empty(); }
};

struct LayerWeights {
    Matrix q, k, v, o;
    Matrix gate, up, down;
};

struct ForwardResult {
    Matrix                   logits;  // T x vocab
    std::vector<HookCapture> captures;
};

class ToyModel {
public:
    const ModelSpec& spec() const { return spec_; }

    std::size_t neuron_count(ProjType p) const {
        return p == ProjType::UP ? spec_.d_internal : spec_.d_model;
    }

    ProjectionView projection(ProjectionRef ref) const {
        check_layer(ref.layer);
        return ProjectionView{&matrix_for(layers_[ref.layer], ref.proj)};
    }

    // Mutable access for tests and checkpoint loading; invalidates nothing.
    Matrix& projection_matrix(ProjectionRef ref) {
        check_layer(ref.layer);
        return const_cast<Matrix&>(matrix_for(layers_[ref.layer], ref.proj));
    }

    const LayerWeights& layer(std::uint32_t l) const { return layers_.at(l); }
    LayerWeights&       layer(std::uint32_t l) { return layers_.at(l); }
    const Matrix&       token_embedding() const { return tok_emb_; }
    const Matrix&       position_embedding() const { return pos_emb_; }
    const Matrix&       lm_head() const { return lm_head_; }
    Matrix&             token_embedding() { return tok_emb_; }
    Matrix&             position_embedding() { return pos_emb_; }
    Matrix&             lm_head() { return lm_head_; }

    bool is_deactivated(const NeuronId& n) const {
        auto it = masked_.find(ProjectionRef{n.layer, n.proj});
        return it != masked_.end() && it->second[n.index] != 0;
    }

    std::size_t deactivated_count() const {
        std::size_t c = 0;
        for (const auto& [ref, flags] : masked_) c += static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
        return c;
    }

    void validate_neuron(const NeuronId& n) const {
        if (n.layer >= spec_.n_layers) {
            throw std::out_of_range("neuron layer " + std::to_string(n.layer) + " out of range (model has " +
                                    std::to_string(spec_.n_layers) + " layers)");
        }
        if (n.index >= neuron_count(n.proj)) {
            throw std::out_of_range("neuron index " + std::to_string(n.index) + " out of range for " +
                                    std::string(to_string(n.proj)) + " (d=" + std::to_string(neuron_count(n.proj)) +
                                    ")");
        }
    }

    friend bool operator==(const ToyModel& a, const ToyModel& b) {
        if (!(a.spec_ == b.spec_) || !(a.tok_emb_ == b.tok_emb_) || !(a.pos_emb_ == b.pos_emb_) ||
            !(a.lm_head_ == b.lm_head_) || a.layers_.size() != b.layers_.size()) {
            return false;
        }
        for (std::size_t l = 0; l < a.layers_.size(); ++l) {
            const auto& x = a.layers_[l];
            const auto& y = b.layers_[l];
            if (!(x.q == y.q && x.k == y.k && x.v == y.v && x.o == y.o && x.gate == y.gate && x.up == y.up &&
                  x.down == y.down)) {
                return false;
            }
        }
        return a.masked_ == b.masked_;
    }

private:
    friend ToyModel build_toy_model(const ModelSpec&);
    friend ToyModel deactivate(const ToyModel&, const DeactivationMask&);
    friend ToyModel read_model(std::istream&);
    friend ForwardResult forward_capture(const ToyModel&, std::span<const std::uint32_t>,
                                         std::span<const ProjectionRef>);

    static const Matrix& matrix_for(const LayerWeights& lw, ProjType p) {
        switch (p) {
            case ProjType::Q: return lw.q;
            case ProjType::K: return lw.k;
            case ProjType::V: return lw.v;
            case ProjType::UP: return lw.up;
            case ProjType::DOWN: return lw.down;
        }
        throw std::logic_error("unreachable projection type");
    }

    void check_layer(std::uint32_t l) const {
        if (l >= spec_.n_layers) throw std::out_of_range("layer " + std::to_string(l) + " out of range");
    }

    void zero_masked(ProjectionRef ref, Matrix& out) const {
        auto it = masked_.find(ref);
        if (it == masked_.end()) return;
        const auto& flags = it->second;
        for (std::size_t t = 0; t < out.rows; ++t) {
            for (std::size_t k = 0; k < out.cols; ++k) {
                if (flags[k]) out(t, k) = 0.0;
            }
        }
    }

    ModelSpec                 spec_;
    Matrix                    tok_emb_, pos_emb_, lm_head_;
    std::vector<LayerWeights> layers_;
    // Per projection, one flag per output neuron; nonzero forces that output to 0.
    std::map<ProjectionRef, std::vector<std::uint8_t>> masked_;
};

namespace detail {

// PRNG stream tags; projection types use their enum value, the rest sit above.
inline constexpr std::uint64_t kTagO       = 5;
inline constexpr std::uint64_t kTagGate    = 6;
inline constexpr std::uint64_t kGlobalSlot = 0xFFFFFFFFULL;
inline constexpr std::uint64_t kTagTokEmb  = 0;
inline constexpr std::uint64_t kTagPosEmb  = 1;
inline constexpr std::uint64_t kTagLmHead  = 2;

// Per-neuron log-normal gain (sigma of log gain, mean gain 1). Gives the heavy-tailed
// neuron scales real checkpoints show; with gains of exactly 1 every neuron looks alike.
inline constexpr double kNeuronGainSigma = 0.5;
// Amplitude of the learned position embedding relative to token embeddings.
inline constexpr double kPositionScale = 0.1;

inline Matrix init_uniform(std::size_t rows, std::size_t cols, double bound, std::uint64_t key, double gain_sigma = 0.0) {
    Matrix            m(rows, cols);
    rng::CounterStream stream(key);
    std::vector<double> gain(cols, 1.0);
    if (gain_sigma > 0.0) {
        // log-normal column gains drawn after the rows*cols uniforms of the same stream
        const std::uint64_t base = rows * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            const double u1 = 1.0 - stream.uniform01(base + 2 * c);
            const double u2 = stream.uniform01(base + 2 * c + 1);
            const double z  = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
            gain[c]         = std::exp(gain_sigma * z - 0.5 * gain_sigma * gain_sigma);
        }
    }
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        const double u = stream.uniform01(i) * 2.0 - 1.0;
        m.data[i]      = static_cast<double>(static_cast<float>(u * bound * gain[i % cols]));
    }
    return m;
}

inline Matrix rmsnorm(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (std::size_t t = 0; t < x.rows; ++t) {
        double ss = 0.0;
        for (double v : x.row(t)) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols) + 1e-6);
        for (std::size_t j = 0; j < x.cols; ++j) out(t, j) = x(t, j) * inv;
    }
    return out;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

}  // namespace detail

// Weights are uniform(-1/sqrt(d_in), 1/sqrt(d_in)) times a log-normal gain per output
// column; each tensor is drawn from its own counter stream keyed by (seed, layer, tensor
// tag). Embeddings are uniform(-1, 1) without gains.
inline ToyModel build_toy_model(const ModelSpec& spec) {
    spec.validate();
    ToyModel m;
    m.spec_ = spec;
    const std::uint64_t seed = spec.rng_seed;
    auto weight = [&](std::size_t rows, std::size_t cols, std::uint64_t layer, std::uint64_t tag) {
        return detail::init_uniform(rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)),
                                    rng::derive_key(seed, layer, tag), detail::kNeuronGainSigma);
    };
    m.tok_emb_ = detail::init_uniform(spec.vocab_size, spec.d_model, 1.0,
                                      rng::derive_key(seed, detail::kGlobalSlot, detail::kTagTokEmb));
    m.pos_emb_ = detail::init_uniform(spec.max_seq_len, spec.d_model, detail::kPositionScale,
                                      rng::derive_key(seed, detail::kGlobalSlot, detail::kTagPosEmb));
    m.lm_head_ = weight(spec.d_model, spec.vocab_size, detail::kGlobalSlot, detail::kTagLmHead);
    m.layers_.resize(spec.n_layers);
    for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
        auto& lw = m.layers_[l];
        lw.q     = weight(spec.d_model, spec.d_model, l, static_cast<std::uint64_t>(ProjType::Q));
        lw.k     = weight(spec.d_model, spec.d_model, l, static_cast<std::uint64_t>(ProjType::K));
        lw.v     = weight(spec.d_model, spec.d_model, l, static_cast<std::uint64_t>(ProjType::V));
        lw.up    = weight(spec.d_model, spec.d_internal, l, static_cast<std::uint64_t>(ProjType::UP));
        lw.down  = weight(spec.d_internal, spec.d_model, l, static_cast<std::uint64_t>(ProjType::DOWN));
        lw.o     = weight(spec.d_model, spec.d_model, l, detail::kTagO);
        lw.gate  = weight(spec.d_model, spec.d_internal, l, detail::kTagGate);
    }
    return m;
}

inline void validate_tokens(const ModelSpec& spec, std::span<const std::uint32_t> token_ids) {
    if (token_ids.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (token_ids.size() > spec.max_seq_len) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(token_ids.size()) +
                                    " exceeds max_seq_len " + std::to_string(spec.max_seq_len));
    }
    for (std::size_t t = 0; t < token_ids.size(); ++t) {
        if (token_ids[t] >= spec.vocab_size) {
            throw std::out_of_range("forward: token id " + std::to_string(token_ids[t]) + " at position " +
                                    std::to_string(t) + " >= vocab_size " + std::to_string(spec.vocab_size));
        }
    }
}

// Runs the model and records the per-token inputs and outputs of every requested projection.
inline ForwardResult forward_capture(const ToyModel& model, std::span<const std::uint32_t> token_ids,
                                     std::span<const ProjectionRef> targets = {}) {
    const auto& spec = model.spec_;
    validate_tokens(spec, token_ids);
    for (const auto& ref : targets) model.check_layer(ref.layer);

    const std::size_t T  = token_ids.size();
    const std::size_t D  = spec.d_model;
    const std::size_t H  = spec.n_heads;
    const std::size_t dh = D / H;

    ForwardResult result;
    result.captures.resize(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) result.captures[i].ref = targets[i];

    auto record = [&](std::uint32_t layer, ProjType p, const Matrix& in, const Matrix& out) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (targets[i].layer == layer && targets[i].proj == p) {
                result.captures[i].inputs  = in;
                result.captures[i].outputs = out;
            }
        }
    };

    Matrix x(T, D);
    for (std::size_t t = 0; t < T; ++t) {
        auto te = model.tok_emb_.row(token_ids[t]);
        auto pe = model.pos_emb_.row(t);
        for (std::size_t j = 0; j < D; ++j) x(t, j) = te[j] + pe[j];
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> weights(T);
    for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
        const auto& lw = model.layers_[l];

        Matrix a = detail::rmsnorm(x);
        Matrix q = matmul(a, lw.q);
        Matrix k = matmul(a, lw.k);
        Matrix v = matmul(a, lw.v);
        model.zero_masked({l, ProjType::Q}, q);
        model.zero_masked({l, ProjType::K}, k);
        model.zero_masked({l, ProjType::V}, v);
        record(l, ProjType::Q, a, q);
        record(l, ProjType::K, a, k);
        record(l, ProjType::V, a, v);

        Matrix attn(T, D);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t t = 0; t < T; ++t) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) dot += q(t, off + j) * k(s, off + j);
                    weights[s] = dot * scale;
                    mx         = std::max(mx, weights[s]);
                }
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    weights[s] = std::exp(weights[s] - mx);
                    z += weights[s];
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const double p = weights[s] / z;
                    for (std::size_t j = 0; j < dh; ++j) attn(t, off + j) += p * v(s, off + j);
                }
            }
        }
        Matrix attn_out = matmul(attn, lw.o);
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn_out.data[i];

        Matrix f    = detail::rmsnorm(x);
        Matrix gate = matmul(f, lw.gate);
        Matrix up   = matmul(f, lw.up);
        model.zero_masked({l, ProjType::UP}, up);
        record(l, ProjType::UP, f, up);

        Matrix mid(T, spec.d_internal);
        for (std::size_t i = 0; i < mid.data.size(); ++i) mid.data[i] = detail::silu(gate.data[i]) * up.data[i];
        Matrix down = matmul(mid, lw.down);
        model.zero_masked({l, ProjType::DOWN}, down);
        record(l, ProjType::DOWN, mid, down);
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += down.data[i];
    }

    result.logits = matmul(detail::rmsnorm(x), model.lm_head_);
    return result;
}

inline Matrix forward(const ToyModel& model, std::span<const std::uint32_t> token_ids) {
    return forward_capture(model, token_ids, {}).logits;
}

// Mean next-token cross entropy over positions 0..T-2. Needs T >= 2.
inline double next_token_loss(const Matrix& logits, std::span<const std::uint32_t> token_ids) {
    if (token_ids.size() < 2) throw std::invalid_argument("next_token_loss: need at least 2 tokens");
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < token_ids.size(); ++t) {
        auto   row = logits.row(t);
        double mx  = *std::max_element(row.begin(), row.end());
        double z   = 0.0;
        for (double v : row) z += std::exp(v - mx);
        total += (std::log(z) + mx) - row[token_ids[t + 1]];
    }
    return total / static_cast<double>(token_ids.size() - 1);
}

inline double next_token_loss(const ToyModel& model, std::span<const std::uint32_t> token_ids) {
    return next_token_loss(forward(model, token_ids), token_ids);
}

// Average of per-document losses; documents shorter than 2 tokens are skipped.
inline double mean_loss(const ToyModel& model, const std::vector<std::vector<std::uint32_t>>& docs) {
    double      sum = 0.0;
    std::size_t n   = 0;
    for (const auto& d : docs) {
        if (d.size() < 2) continue;
        sum += next_token_loss(model, d);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_loss: no document has 2 or more tokens");
    return sum / static_cast<double>(n);
}

// Cross entropy of `model` against the predictive distribution of `reference`,
// averaged over positions 0..T-2 and then over documents. Its increase over the
// reference's own value is the mean KL(reference || model), so it never drops
// below the unmodified model.
inline double mean_reference_loss(const ToyModel& reference, const ToyModel& model,
                                  const std::vector<std::vector<std::uint32_t>>& docs) {
    double      sum = 0.0;
    std::size_t n   = 0;
    for (const auto& d : docs) {
        if (d.size() < 2) continue;
        const Matrix p = forward(reference, d);
        const Matrix q = forward(model, d);
        double       doc = 0.0;
        for (std::size_t t = 0; t + 1 < d.size(); ++t) {
            auto         pr = p.row(t);
            auto         qr = q.row(t);
            const double pm = *std::max_element(pr.begin(), pr.end());
            const double qm = *std::max_element(qr.begin(), qr.end());
            double       pz = 0.0, qz = 0.0;
            for (double v : pr) pz += std::exp(v - pm);
            for (double v : qr) qz += std::exp(v - qm);
            const double q_lse = std::log(qz) + qm;
            double       ce    = 0.0;
            for (std::size_t v = 0; v < pr.size(); ++v) ce += std::exp(pr[v] - pm) / pz * (q_lse - qr[v]);
            doc += ce;
        }
        sum += doc / static_cast<double>(d.size() - 1);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_reference_loss: no document has 2 or more tokens");
    return sum / static_cast<double>(n);
}

// Copy of `model` whose listed neuron outputs are forced to zero in every forward pass.
inline ToyModel deactivate(const ToyModel& model, const DeactivationMask& mask) {
    for (const auto& n : mask.neurons) model.validate_neuron(n);
    ToyModel out = model;
    for (const auto& n : mask.neurons) {
        auto& flags = out.masked_[ProjectionRef{n.layer, n.proj}];
        if (flags.empty()) flags.assign(model.neuron_count(n.proj), 0);
        flags[n.index] = 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "NAGM", u32 version, u32 x6 spec dims, u64 seed, then float32
// row-major tensors: for each layer Q K V UP DOWN; then token embedding,
// position embedding, per layer O and GATE, and the LM head.
// Deactivation masks are runtime state and are not persisted.

inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

inline void put_matrix(io::Writer& w, const Matrix& m) {
    std::vector<float> buf(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) buf[i] = static_cast<float>(m.data[i]);
    w.put_array(buf.data(), buf.size());
}

inline void get_matrix(io::Reader& r, Matrix& m, std::size_t rows, std::size_t cols, std::string_view what) {
    m = Matrix(rows, cols);
    std::vector<float> buf(rows * cols);
    const auto         start = r.offset();
    r.get_array(buf.data(), buf.size(), what);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        if (!std::isfinite(buf[i])) {
            throw FormatError("non-finite weight in " + std::string(what), start + i * sizeof(float));
        }
        m.data[i] = static_cast<double>(buf[i]);
    }
}

}  // namespace detail

inline void write_model(const ToyModel& model, std::ostream& out) {
    io::Writer w(out);
    const auto& s = model.spec();
    w.put_bytes("NAGM");
    w.put(kModelVersion);
    w.put(s.n_layers);
    w.put(s.d_model);
    w.put(s.d_internal);
    w.put(s.n_heads);
    w.put(s.vocab_size);
    w.put(s.max_seq_len);
    w.put(s.rng_seed);
    for (std::uint32_t l = 0; l < s.n_layers; ++l) {
        for (auto p : kAllProjTypes) detail::put_matrix(w, *model.projection({l, p}).weights);
    }
    detail::put_matrix(w, model.token_embedding());
    detail::put_matrix(w, model.position_embedding());
    for (std::uint32_t l = 0; l < s.n_layers; ++l) {
        detail::put_matrix(w, model.layer(l).o);
        detail::put_matrix(w, model.layer(l).gate);
    }
    detail::put_matrix(w, model.lm_head());
    w.check();
}

inline ModelSpec read_model_header(io::Reader& r) {
    r.expect_magic("NAGM");
    const auto ver_at = r.offset();
    const auto ver    = r.get<std::uint32_t>("version");
    if (ver != kModelVersion) {
        throw FormatError("unsupported model checkpoint version " + std::to_string(ver), ver_at);
    }
    ModelSpec s;
    s.n_layers    = r.get<std::uint32_t>("n_layers");
    s.d_model     = r.get<std::uint32_t>("d_model");
    s.d_internal  = r.get<std::uint32_t>("d_internal");
    s.n_heads     = r.get<std::uint32_t>("n_heads");
    s.vocab_size  = r.get<std::uint32_t>("vocab_size");
    s.max_seq_len = r.get<std::uint32_t>("max_seq_len");
    s.rng_seed    = r.get<std::uint64_t>("rng_seed");
    try {
        s.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("invalid model header: ") + e.what(), 8);
    }
    return s;
}

inline ToyModel read_model(std::istream& in) {
    io::Reader r(in);
    ToyModel   m;
    m.spec_        = read_model_header(r);
    const auto& s  = m.spec_;
    m.layers_.resize(s.n_layers);
    for (std::uint32_t l = 0; l < s.n_layers; ++l) {
        auto& lw = m.layers_[l];
        detail::get_matrix(r, lw.q, s.d_model, s.d_model, "Q weights");
        detail::get_matrix(r, lw.k, s.d_model, s.d_model, "K weights");
        detail::get_matrix(r, lw.v, s.d_model, s.d_model, "V weights");
        detail::get_matrix(r, lw.up, s.d_model, s.d_internal, "UP weights");
        detail::get_matrix(r, lw.down, s.d_internal, s.d_model, "DOWN weights");
    }
    detail::get_matrix(r, m.tok_emb_, s.vocab_size, s.d_model, "token embedding");
    detail::get_matrix(r, m.pos_emb_, s.max_seq_len, s.d_model, "position embedding");
    for (std::uint32_t l = 0; l < s.n_layers; ++l) {
        detail::get_matrix(r, m.layers_[l].o, s.d_model, s.d_model, "O weights");
        detail::get_matrix(r, m.layers_[l].gate, s.d_model, s.d_internal, "GATE weights");
    }
    detail::get_matrix(r, m.lm_head_, s.d_model, s.vocab_size, "LM head");
    if (!r.at_eof()) throw FormatError("trailing bytes after model checkpoint", r.offset());
    return m;
}

inline void save_model(const ToyModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_model(model, out);
}

inline ToyModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model checkpoint '" + path + "'");
    try {
        return read_model(in);
    } catch (const FormatError& e) {
        throw e.in_file(path);
    }
}

}  // namespace nagsel
