#pragma once

// Synthetic document generators for desk-scale experiments on the toy model.
// A "task" is a preferred-neuron set in the first layer's UP projection; its
// documents draw most tokens from the vocabulary entries that drive those
// neurons hardest.

#include "model.hpp"
#include "rng.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

namespace nagsel::synthetic {

using TokenDoc = std::vector<std::uint32_t>;

inline TokenDoc uniform_doc(std::size_t len, std::uint32_t vocab, std::mt19937_64& gen) {
    TokenDoc d(len);
    for (auto& t : d) t = static_cast<std::uint32_t>(rng::bounded(gen, vocab));
    return d;
}

// Tokens ranked by how strongly their (normalized) embedding drives `neurons`
// in layer 0 UP; returns the top `count`.
inline std::vector<std::uint32_t> preferred_tokens(const ToyModel& model, std::span<const std::uint32_t> neurons,
                                                   std::size_t count) {
    const auto&   spec = model.spec();
    const Matrix& emb  = model.token_embedding();
    const Matrix& up   = *model.projection({0, ProjType::UP}).weights;
    std::vector<double> score(spec.vocab_size, 0.0);
    for (std::uint32_t t = 0; t < spec.vocab_size; ++t) {
        auto   e  = emb.row(t);
        double ss = 0.0;
        for (double v : e) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(e.size()) + 1e-6);
        for (auto k : neurons) {
            double dot = 0.0;
            for (std::size_t i = 0; i < e.size(); ++i) dot += e[i] * inv * up(i, k);
            score[t] += std::abs(dot);
        }
    }
    std::vector<std::uint32_t> order(spec.vocab_size);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
    order.resize(std::min<std::size_t>(count, order.size()));
    return order;
}

struct TaskSpec {
    std::vector<std::uint32_t> neurons;  // preferred layer-0 UP neurons
    std::vector<std::uint32_t> tokens;   // vocabulary the task favours
};

// `n_tasks` tasks with disjoint preferred-neuron sets and disjoint vocabularies.
inline std::vector<TaskSpec> make_tasks(const ToyModel& model, std::size_t n_tasks, std::size_t neurons_per_task,
                                        std::size_t tokens_per_task, std::uint64_t seed) {
    const auto& spec = model.spec();
    if (n_tasks * neurons_per_task > spec.d_internal || n_tasks * tokens_per_task > spec.vocab_size) {
        throw std::invalid_argument("make_tasks: model too small for the requested tasks");
    }
    std::mt19937_64 gen(seed);
    const auto      picks = rng::sample_without_replacement(spec.d_internal, n_tasks * neurons_per_task, gen);
    std::vector<TaskSpec> tasks(n_tasks);
    std::vector<bool>     taken(spec.vocab_size, false);
    for (std::size_t j = 0; j < n_tasks; ++j) {
        for (std::size_t i = 0; i < neurons_per_task; ++i) {
            tasks[j].neurons.push_back(static_cast<std::uint32_t>(picks[j * neurons_per_task + i]));
        }
        for (auto t : preferred_tokens(model, tasks[j].neurons, spec.vocab_size)) {
            if (tasks[j].tokens.size() == tokens_per_task) break;
            if (!taken[t]) {
                taken[t] = true;
                tasks[j].tokens.push_back(t);
            }
        }
    }
    return tasks;
}

// Each token comes from the task vocabulary with probability `focus`, otherwise uniform.
inline TokenDoc task_doc(const TaskSpec& task, std::size_t len, std::uint32_t vocab, double focus,
                         std::mt19937_64& gen) {
    TokenDoc d(len);
    for (auto& t : d) {
        if (rng::uniform01(gen) < focus) {
            t = task.tokens[rng::bounded(gen, task.tokens.size())];
        } else {
            t = static_cast<std::uint32_t>(rng::bounded(gen, vocab));
        }
    }
    return d;
}

}  // namespace nagsel::synthetic
