#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "pmc/error.hpp"

namespace pmc {

/// Monte Carlo estimate with its standard error.
struct Estimate {
    double value = 0.0;
    double se = 0.0;  // standard error
};

/// Standard error of a difference of two estimates, variances added.
inline double combined_se(const Estimate& a, const Estimate& b) {
    return std::sqrt(a.se * a.se + b.se * b.se);
}

/// Pairwise summation; the result depends only on the input order.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 16) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

inline Estimate mean_estimate(std::span<const double> v) {
    if (v.empty()) throw DomainError("estimate over zero samples");
    const double n = static_cast<double>(v.size());
    const double mean = pairwise_sum(v) / n;
    if (v.size() == 1) return {mean, 0.0};
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - mean) * (v[i] - mean);
    const double var = pairwise_sum(sq) / (n - 1.0);
    return {mean, std::sqrt(var / n)};
}

} // namespace pmc
