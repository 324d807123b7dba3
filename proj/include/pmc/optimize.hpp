#pragma once
// Bounded maximizers used by the best-response and Hamiltonian solvers.
//
// Candidates replace the incumbent only on strict improvement, so when the
// objective is flat the earliest (lexicographically smallest) point wins.

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "pmc/model.hpp"

namespace pmc {

struct Max1DOptions {
    int grid_points = 41;
    /// Brent precision in bits of the argument (at most half the mantissa).
    int bits = 26;
    int max_iter = 200;
    /// Value gap under which two far-apart grid points count as a near-tie.
    double tie_tol = 1e-9;
};

struct Max1D {
    double x = 0.0;
    double f = -std::numeric_limits<double>::infinity();
    int evals = 0;
    bool near_tie = false;
};

namespace detail {

template <class F>
void brent_polish(const F& f, double lo, double hi, Max1D& best, const Max1DOptions& opt) {
    if (!(hi > lo)) return;
    std::uintmax_t iters = static_cast<std::uintmax_t>(opt.max_iter);
    int evals = 0;
    auto neg = [&](double x) {
        ++evals;
        return -f(x);
    };
    auto r = boost::math::tools::brent_find_minima(neg, lo, hi, opt.bits, iters);
    best.evals += evals;
    if (-r.second > best.f) {
        best.x = r.first;
        best.f = -r.second;
    }
}

} // namespace detail

/// Global bounded maximization: uniform grid scan, then Brent refinement
/// on the bracket around the best grid point.
template <class F>
Max1D maximize_1d(const F& f, double lo, double hi, const Max1DOptions& opt = {}) {
    Max1D best;
    if (!(hi > lo)) {
        best.x = lo;
        best.f = f(lo);
        best.evals = 1;
        return best;
    }
    const int G = std::max(3, opt.grid_points);
    std::vector<double> fs(static_cast<std::size_t>(G));
    int arg = 0;
    for (int j = 0; j < G; ++j) {
        const double x = j == G - 1 ? hi : lo + (hi - lo) * j / (G - 1);
        fs[static_cast<std::size_t>(j)] = f(x);
        if (j == 0 || fs[static_cast<std::size_t>(j)] > fs[static_cast<std::size_t>(arg)]) arg = j;
    }
    best.evals = G;
    best.x = arg == G - 1 ? hi : lo + (hi - lo) * arg / (G - 1);
    best.f = fs[static_cast<std::size_t>(arg)];
    for (int j = 0; j < G; ++j)
        if (std::abs(j - arg) > 1 && best.f - fs[static_cast<std::size_t>(j)] < opt.tie_tol * (1.0 + std::abs(best.f)))
            best.near_tie = true;
    const double a = lo + (hi - lo) * std::max(0, arg - 1) / (G - 1);
    const double b = arg + 1 >= G - 1 ? hi : lo + (hi - lo) * (arg + 1) / (G - 1);
    detail::brent_polish(f, a, b, best, opt);
    return best;
}

/// Local maximization from a warm start x0 with known value f0: Brent on a
/// bracket of half-width `width`, widened while the optimum sits on an
/// interior bracket edge.
template <class F>
Max1D maximize_1d_local(const F& f, double lo, double hi, double x0, double f0, double width,
                        const Max1DOptions& opt = {}) {
    Max1D best;
    best.x = x0;
    best.f = f0;
    if (!(hi > lo)) return best;
    width = std::max(width, 1e-6 * (hi - lo));
    for (int round = 0; round < 30; ++round) {
        const double a = std::max(lo, x0 - width), b = std::min(hi, x0 + width);
        detail::brent_polish(f, a, b, best, opt);
        const double edge = 1e-6 * (b - a);
        const bool stuck_low = a > lo && best.x - a < edge;
        const bool stuck_high = b < hi && b - best.x < edge;
        if (!stuck_low && !stuck_high) break;
        x0 = best.x;
        width *= 4.0;
    }
    return best;
}

/// First `count` points of the Halton sequence in the box [lo, hi].
inline std::vector<Vec> halton_points(const Vec& lo, const Vec& hi, int count) {
    static const int primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97};
    std::vector<Vec> out;
    const Eigen::Index dim = lo.size();
    for (int s = 1; s <= count; ++s) {
        Vec p(dim);
        for (Eigen::Index c = 0; c < dim; ++c) {
            const int base = primes[c % 25] + (c >= 25 ? 2 * static_cast<int>(c) : 0);
            double r = 0.0, fr = 1.0 / base;
            for (int i = s; i > 0; i /= base, fr /= base) r += fr * (i % base);
            p[c] = lo[c] + r * (hi[c] - lo[c]);
        }
        out.push_back(std::move(p));
    }
    return out;
}

struct NelderMeadResult {
    Vec x;
    double f = -std::numeric_limits<double>::infinity();
    int evals = 0;
    bool converged = false;
};

/// Box-projected Nelder-Mead maximization.
template <class F>
NelderMeadResult nelder_mead_max(const F& f, Vec x0, const Vec& lo, const Vec& hi, double step, double tol,
                                 int max_evals) {
    const Eigen::Index n = x0.size();
    auto proj = [&](const Vec& v) { return Vec(v.cwiseMax(lo).cwiseMin(hi)); };
    NelderMeadResult res;
    std::vector<Vec> pts{proj(x0)};
    std::vector<double> val{f(pts[0])};
    for (Eigen::Index c = 0; c < n; ++c) {
        Vec v = pts[0];
        v[c] += (v[c] + step <= hi[c]) ? step : -step;
        pts.push_back(proj(v));
        val.push_back(f(pts.back()));
    }
    res.evals = static_cast<int>(n + 1);
    std::vector<std::size_t> order(pts.size());
    while (res.evals < max_evals) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return val[a] > val[b]; });
        const std::size_t ib = order.front(), iw = order.back(), is = order[order.size() - 2];
        if (std::abs(val[ib] - val[iw]) <= tol * (1.0 + std::abs(val[ib]))) {
            double spread = 0.0;
            for (const auto& p : pts) spread = std::max(spread, (p - pts[ib]).cwiseAbs().maxCoeff());
            if (spread <= std::sqrt(tol)) {
                res.converged = true;
                break;
            }
        }
        Vec cen = Vec::Zero(n);
        for (std::size_t i = 0; i < pts.size(); ++i)
            if (i != iw) cen += pts[i];
        cen /= static_cast<double>(n);
        Vec xr = proj(cen + (cen - pts[iw]));
        double fr = f(xr);
        ++res.evals;
        if (fr > val[ib]) {
            Vec xe = proj(cen + 2.0 * (cen - pts[iw]));
            double fe = f(xe);
            ++res.evals;
            if (fe > fr) {
                pts[iw] = xe;
                val[iw] = fe;
            } else {
                pts[iw] = xr;
                val[iw] = fr;
            }
        } else if (fr > val[is]) {
            pts[iw] = xr;
            val[iw] = fr;
        } else {
            Vec xc = proj(cen + 0.5 * (pts[iw] - cen));
            double fc = f(xc);
            ++res.evals;
            if (fc > val[iw]) {
                pts[iw] = xc;
                val[iw] = fc;
            } else {
                for (std::size_t i = 0; i < pts.size(); ++i) {
                    if (i == ib) continue;
                    pts[i] = proj(pts[ib] + 0.5 * (pts[i] - pts[ib]));
                    val[i] = f(pts[i]);
                    ++res.evals;
                }
            }
        }
    }
    std::size_t ib = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        if (val[i] > val[ib]) ib = i;
    res.x = pts[ib];
    res.f = val[ib];
    return res;
}

} // namespace pmc
