#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace oracle {

struct Interval {
    double lo, hi;  // [lo, hi)
    double length() const { return std::max(0.0, hi - lo); }
};

// Overlap index of two single intervals by interval arithmetic.
inline double overlap(Interval a, Interval b) {
    const double inter = std::max(0.0, std::min(a.hi, b.hi) - std::max(a.lo, b.lo));
    const double uni = a.length() + b.length() - inter;
    const double sym = uni - inter;
    const bool strict_subset = b.lo >= a.lo && b.hi <= a.hi && b.length() < a.length();
    return (strict_subset ? -1.0 : 1.0) * sym / uni;
}

// Fraction of (familiar, outlier) pairs ordered correctly; ties count one half.
inline double pairwise_auroc(const std::vector<double>& s, const std::vector<bool>& pos) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!pos[i]) continue;
        for (std::size_t k = 0; k < s.size(); ++k) {
            if (pos[k]) continue;
            pairs += 1;
            wins += s[i] > s[k] ? 1.0 : (s[i] == s[k] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

// Shapley values by averaging marginal contributions over all n! orderings.
template <class Game>
std::vector<double> shapley_by_permutation(int n, const Game& v) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::vector<double> phi(static_cast<std::size_t>(n), 0.0);
    double count = 0;
    do {
        unsigned coalition = 0;
        for (int f : order) {
            const double before = v(coalition);
            coalition |= 1u << f;
            phi[static_cast<std::size_t>(f)] += v(coalition) - before;
        }
        count += 1;
    } while (std::next_permutation(order.begin(), order.end()));
    for (auto& p : phi) p /= count;
    return phi;
}

// Two-class max-softmax directly from the definition.
inline double two_class_score(double z0, double z1, double t) {
    const double e0 = std::exp(z0 / t), e1 = std::exp(z1 / t);
    return std::max(e0, e1) / (e0 + e1);
}

} // namespace oracle
