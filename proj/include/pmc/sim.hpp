#pragma once
// Path simulation under a feedback action, Girsanov densities and
// (importance-sampled) Monte Carlo estimates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <vector>

#include "pmc/model.hpp"
#include "pmc/rng.hpp"
#include "pmc/stats.hpp"
#include "pmc/util.hpp"

namespace pmc {

/// Uniform grid t_0 = 0 < ... < t_M = T.
struct TimeGrid {
    double horizon = 1.0;
    int steps = 1;

    TimeGrid() = default;
    TimeGrid(double T, int M) : horizon(T), steps(M) {
        if (!(T > 0.0) || M < 1) throw ConfigError("time grid needs T > 0 and at least one step");
    }
    double dt() const { return horizon / steps; }
    double t(int k) const { return k == steps ? horizon : horizon * static_cast<double>(k) / steps; }
};

/// Feedback action (t, x) -> joint action a.
using ActionPolicy = std::function<Vec(double, const Vec&)>;

inline ActionPolicy constant_policy(const Vec& a) {
    return [a](double, const Vec&) { return a; };
}

struct JumpEvent {
    int step = 0;   // jump occurs in (t_step, t_step+1]
    int agent = 0;
    int atom = 0;
    double mark = 0.0;
    Vec size;       // beta^agent in R^d
};

/// Simulated paths. Storage is flat, path-major.
struct PathBundle {
    TimeGrid grid;
    int n_paths = 0;
    int state_dim = 0;
    int noise_dim = 0;
    std::uint64_t seed = 0;
    /// true when simulated under the reference measure P (b = 0, lambda = 1).
    bool base_measure = true;

    std::vector<double> dw;        // Brownian increments of the simulation measure [path][step][n]
    std::vector<double> xs;        // states [path][node][D]
    std::vector<double> dens;      // dP^alpha/dP along the path [path][node]
    std::vector<std::vector<JumpEvent>> jumps;  // per path, in step order

    int nodes() const { return grid.steps + 1; }

    Eigen::Map<const Vec> x(int p, int node) const {
        return {xs.data() + (static_cast<std::size_t>(p) * nodes() + node) * state_dim, state_dim};
    }
    Eigen::Map<const Vec> dW(int p, int step) const {
        return {dw.data() + (static_cast<std::size_t>(p) * grid.steps + step) * noise_dim, noise_dim};
    }
    double density(int p, int node) const { return dens[static_cast<std::size_t>(p) * nodes() + node]; }

    /// Continuous part of X_{k+1} - X_k: the increment minus realized jumps.
    Vec continuous_increment(int p, int step, int block_dim) const {
        Vec d = x(p, step + 1) - x(p, step);
        for (const auto& ev : jumps[static_cast<std::size_t>(p)])
            if (ev.step == step) d.segment(static_cast<Eigen::Index>(ev.agent) * block_dim, block_dim) -= ev.size;
        return d;
    }
};

struct SimOptions {
    /// Allow steps whose total jump probability exceeds 0.1.
    bool allow_coarse_jumps = false;
    int workers = 1;
};

namespace detail {

inline void check_jump_probability(double total, double t, const SimOptions& opt) {
    if (total > 1.0)
        throw SolverError("per-step jump probability " + std::to_string(total) + " > 1 at t=" + std::to_string(t) +
                          "; refine the time grid");
    if (total > 0.1 && !opt.allow_coarse_jumps)
        throw SolverError("per-step jump probability " + std::to_string(total) + " > 0.1 at t=" + std::to_string(t) +
                          "; refine the time grid or set the coarse-jump override");
}

} // namespace detail

/// Euler scheme with per-atom Bernoulli thinning of the jumps. An empty
/// policy simulates under the reference measure P (no drift, lambda = 1).
inline PathBundle simulate_paths(const ModelSpec& m, const ActionPolicy& policy, const TimeGrid& grid, int n_paths,
                                 std::uint64_t seed, const SimOptions& opt = {}) {
    if (n_paths < 1) throw ConfigError("simulate_paths: need at least one path");
    const int D = m.state_dim(), n = m.noise_dim, M = grid.steps, N = m.agents, d = m.block_dim;
    PathBundle B;
    B.grid = grid;
    B.n_paths = n_paths;
    B.state_dim = D;
    B.noise_dim = n;
    B.seed = seed;
    B.base_measure = !policy;
    B.dw.assign(static_cast<std::size_t>(n_paths) * M * n, 0.0);
    B.xs.assign(static_cast<std::size_t>(n_paths) * (M + 1) * D, 0.0);
    B.dens.assign(static_cast<std::size_t>(n_paths) * (M + 1), 1.0);
    B.jumps.resize(static_cast<std::size_t>(n_paths));
    const double dt = grid.dt(), sdt = std::sqrt(dt);

    parallel_for(static_cast<std::size_t>(n_paths), opt.workers, [&](std::size_t p) {
        StreamRng rng(seed, p);
        Vec x = m.x0;
        double logm = 0.0;
        double* xs = B.xs.data() + p * (M + 1) * D;
        double* dw = B.dw.data() + p * M * n;
        double* dens = B.dens.data() + p * (M + 1);
        auto& evs = B.jumps[p];
        Eigen::Map<Vec>(xs, D) = x;
        Vec xi(n), b = Vec::Zero(n);
        for (int k = 0; k < M; ++k) {
            const double t = grid.t(k);
            for (int c = 0; c < n; ++c) xi[c] = sdt * rng.normal();
            Vec a;
            if (policy) {
                a = policy(t, x);
                b = m.drift(t, x, a);
            }
            const Mat S = m.sigma(t, x);
            Vec nx = x + S * (b * dt + xi);
            double total = 0.0;
            double log_jump = 0.0;
            for (int i = 0; i < N; ++i) {
                const auto& js = m.jumps[static_cast<std::size_t>(i)];
                for (std::size_t j = 0; j < js.atoms.size(); ++j) {
                    const auto& at = js.atoms[j];
                    const double lam = policy ? js.intensity(t, x, a, at.mark) : 1.0;
                    if (!(lam > 0.0)) throw ModelError("intensity lambda^" + std::to_string(i) + " <= 0 during simulation");
                    const double prob = lam * at.weight * dt;
                    total += prob;
                    log_jump -= (lam - 1.0) * at.weight * dt;
                    if (rng.uniform() < prob) {
                        Vec beta = js.size(t, x, at.mark);
                        nx.segment(static_cast<Eigen::Index>(i) * d, d) += beta;
                        evs.push_back({k, i, static_cast<int>(j), at.mark, std::move(beta)});
                        log_jump += std::log(lam);
                    }
                }
            }
            detail::check_jump_probability(total, t, opt);
            // P-increment is xi + b dt; the P^alpha / P likelihood ratio of this step.
            logm += b.dot(xi + b * dt) - 0.5 * b.squaredNorm() * dt + log_jump;
            Eigen::Map<Vec>(dw + static_cast<std::ptrdiff_t>(k) * n, n) = xi;
            x = nx;
            Eigen::Map<Vec>(xs + static_cast<std::ptrdiff_t>(k + 1) * D, D) = x;
            dens[k + 1] = std::exp(logm);
        }
    });
    return B;
}

/// Discrete stochastic exponential M^alpha along base-measure paths:
/// exp(b.dW - |b|^2 dt / 2) per step, lambda at each jump, and
/// exp(-sum (lambda - 1) w dt) for the compensator. Layout [path][node].
inline std::vector<double> girsanov_density(const ModelSpec& m, const PathBundle& B, const ActionPolicy& policy,
                                            int workers = 1) {
    if (!B.base_measure) throw DomainError("girsanov_density needs a bundle simulated under the reference measure");
    const int M = B.grid.steps, N = m.agents, nodes = B.nodes();
    const double dt = B.grid.dt();
    std::vector<double> out(static_cast<std::size_t>(B.n_paths) * nodes, 1.0);
    parallel_for(static_cast<std::size_t>(B.n_paths), workers, [&](std::size_t p) {
        const int pi = static_cast<int>(p);
        const auto& evs = B.jumps[p];
        std::size_t next = 0;
        double logm = 0.0;
        for (int k = 0; k < M; ++k) {
            const double t = B.grid.t(k);
            const Vec x = B.x(pi, k);
            const Vec a = policy(t, x);
            const Vec b = m.drift(t, x, a);
            logm += b.dot(B.dW(pi, k)) - 0.5 * b.squaredNorm() * dt;
            for (int i = 0; i < N; ++i) {
                const auto& js = m.jumps[static_cast<std::size_t>(i)];
                for (const auto& at : js.atoms) {
                    const double lam = js.intensity(t, x, a, at.mark);
                    if (!(lam > 0.0))
                        throw ModelError("intensity lambda^" + std::to_string(i) + " <= 0 at t=" + std::to_string(t) +
                                         "; the density would lose positivity");
                    logm -= (lam - 1.0) * at.weight * dt;
                }
            }
            for (; next < evs.size() && evs[next].step == k; ++next) {
                const auto& ev = evs[next];
                const auto& js = m.jumps[static_cast<std::size_t>(ev.agent)];
                logm += std::log(js.intensity(t, x, a, ev.mark));
            }
            out[p * nodes + static_cast<std::size_t>(k + 1)] = std::exp(logm);
        }
    });
    return out;
}

using PathFunctional = std::function<double(const PathBundle&, int path)>;

/// Mean and standard error of functional(path); with density paths supplied
/// (layout [path][node], as returned by girsanov_density) the estimator is
/// M_T * functional.
inline Estimate estimate_expectation(const PathBundle& B, const PathFunctional& f,
                                     const std::vector<double>* reweight = nullptr) {
    if (B.n_paths < 1) throw DomainError("estimate_expectation over zero paths");
    std::vector<double> v(static_cast<std::size_t>(B.n_paths));
    const std::size_t stride = static_cast<std::size_t>(B.nodes());
    if (reweight && reweight->size() != stride * static_cast<std::size_t>(B.n_paths))
        throw DomainError("reweighting densities do not match the bundle layout");
    for (int p = 0; p < B.n_paths; ++p) {
        double y = f(B, p);
        if (!std::isfinite(y)) throw DomainError("functional is not finite on path " + std::to_string(p));
        if (reweight) y *= (*reweight)[static_cast<std::size_t>(p) * stride + (stride - 1)];
        v[static_cast<std::size_t>(p)] = y;
    }
    return mean_estimate(v);
}

inline PathFunctional terminal_coordinate(int c) {
    return [c](const PathBundle& B, int p) { return B.x(p, B.grid.steps)[c]; };
}

/// Columnar export: path,node,t,x0..x{D-1},density. A non-negative
/// max_paths keeps only the first max_paths paths.
inline void write_paths_csv(const PathBundle& B, std::ostream& os, int max_paths = -1) {
    os << "path,node,t";
    for (int c = 0; c < B.state_dim; ++c) os << ",x" << c;
    os << ",density\n";
    char buf[64];
    const int rows = max_paths < 0 ? B.n_paths : std::min(B.n_paths, max_paths);
    for (int p = 0; p < rows; ++p)
        for (int k = 0; k < B.nodes(); ++k) {
            os << p << ',' << k;
            std::snprintf(buf, sizeof buf, ",%.17g", B.grid.t(k));
            os << buf;
            const auto x = B.x(p, k);
            for (int c = 0; c < B.state_dim; ++c) {
                std::snprintf(buf, sizeof buf, ",%.17g", x[c]);
                os << buf;
            }
            std::snprintf(buf, sizeof buf, ",%.17g\n", B.density(p, k));
            os << buf;
        }
}

} // namespace pmc
