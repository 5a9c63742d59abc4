#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace nagsel::stats {

inline double mean(std::span<const double> xs) {
    if (xs.empty()) throw std::invalid_argument("mean of empty sample");
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

// Pearson correlation; returns 0 when either side has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
    if (a.size() < 2) throw std::invalid_argument("pearson: need at least 2 points");
    const double ma = mean(a);
    const double mb = mean(b);
    double       sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// 1-based ascending ranks; tied values share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return xs[i] < xs[j]; });
    std::vector<double> ranks(xs.size());
    std::size_t         i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace nagsel::stats
