#pragma once
// Agents' continuation values: the forward controlled process Y, a backward
// least-squares Monte Carlo solver for the BSDEs with jumps, and Monte Carlo
// evaluation of agents' objectives.
//
// Backward forms
//   general_f:  Y_t = U_A(xi) + int_t^T f ds - int_t^T Z dX^c - int_t^T H dmu
//   cara_g:     Y_t = xi      + int_t^T g ds - int_t^T Z dX^c + int_t^T H dmu
// so read forward, a realized jump moves Y by +H (general_f) or -H (cara_g).

#include <cmath>
#include <functional>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "pmc/nash.hpp"
#include "pmc/regression.hpp"
#include "pmc/sim.hpp"

namespace pmc {

/// (t, x) -> (z, h, k).
using ControlPolicy = std::function<ControlPoint(double, const Vec&)>;
/// (t, x) -> flow payments k in R^N; empty means k = 0.
using FlowPolicy = std::function<Vec(double, const Vec&)>;
/// Terminal data per path, one entry per agent.
using TerminalFn = std::function<Vec(const PathBundle&, int path)>;

namespace detail {

/// Forward effect on Y of one realized jump with loading h.
inline double jump_sign(GeneratorMode mode) { return mode == GeneratorMode::general_f ? 1.0 : -1.0; }

/// h-table columns of the jumps realized in `step` (zero-size jumps of X
/// are not jumps and are skipped).
inline std::vector<int> jump_columns(const ModelSpec& m, const PathBundle& B, int p, int step) {
    std::vector<int> out;
    for (const auto& ev : B.jumps[static_cast<std::size_t>(p)])
        if (ev.step == step && !is_zero(ev.size)) out.push_back(m.atom_offset(ev.agent) + ev.atom);
    return out;
}

inline Vec flow_at(const ModelSpec& m, const FlowPolicy& chi, double t, const Vec& x) {
    if (!chi) return Vec::Zero(m.agents);
    Vec k = chi(t, x);
    if (k.size() != m.agents) throw DomainError("flow policy returned " + std::to_string(k.size()) + " entries for " +
                                                std::to_string(m.agents) + " agents");
    return k;
}

inline void check_bundle(const ModelSpec& m, const PathBundle& B) {
    if (B.state_dim != m.state_dim() || B.noise_dim != m.noise_dim)
        throw DomainError("path bundle dimensions do not match model '" + m.name + "'");
    if (B.n_paths < 1) throw DomainError("empty path bundle");
}

/// One least-squares Monte Carlo regression of Y_{k+1} on
///   [phi(X_k) | jump indicator x phi per atom | phi * dW^c / sqrt(dt)].
/// Per atom, the indicator block uses the full basis when the atom fired on
/// at least 4x(basis size) paths, a constant when it fired at all, and is
/// absent otherwise. The dW blocks fit the covariation E[Y_{k+1} dW^c | X_k] / dt.
struct LsmcFit {
    PolynomialBasis basis;
    Mat phi, design;
    LeastSquares ls;
    int F = 0, total = 0, wstart = 0, n = 0;
    double sdt = 1.0;
    std::vector<int> width, start;

    LsmcFit(const ModelSpec& m, const PathBundle& B, int k, const Mat& X, const Mat& target, int degree, double ridge)
        : basis(X, degree), phi(basis.design(X)), F(basis.size()), n(m.noise_dim), sdt(std::sqrt(B.grid.dt())) {
        const int P = static_cast<int>(X.rows()), A = m.total_atoms();
        std::vector<std::vector<int>> cols(static_cast<std::size_t>(P));
        std::vector<int> count(static_cast<std::size_t>(A), 0);
        for (int p = 0; p < P; ++p) {
            cols[static_cast<std::size_t>(p)] = jump_columns(m, B, p, k);
            for (int c : cols[static_cast<std::size_t>(p)]) ++count[static_cast<std::size_t>(c)];
        }
        width.assign(static_cast<std::size_t>(A), 0);
        start.assign(static_cast<std::size_t>(A), 0);
        total = F;
        for (int c = 0; c < A; ++c) {
            const int cnt = count[static_cast<std::size_t>(c)];
            width[static_cast<std::size_t>(c)] = cnt >= 4 * F ? F : cnt > 0 ? 1 : 0;
            start[static_cast<std::size_t>(c)] = total;
            total += width[static_cast<std::size_t>(c)];
        }
        wstart = total;
        total += n * F;
        design = Mat::Zero(P, total);
        design.leftCols(F) = phi;
        for (int p = 0; p < P; ++p) {
            for (int c : cols[static_cast<std::size_t>(p)]) {
                const int w = width[static_cast<std::size_t>(c)];
                design.block(p, start[static_cast<std::size_t>(c)], 1, w) += phi.block(p, 0, 1, w);
            }
            const auto dW = B.dW(p, k);
            for (int c = 0; c < n; ++c) design.block(p, wstart + c * F, 1, F) = phi.row(p) * dW[c] / sdt;
        }
        ls = least_squares(design, target, ridge);
    }

    /// No-jump conditional mean at path p.
    Vec mean(int p) const { return (phi.row(p) * ls.coef.topRows(F)).transpose(); }
    /// Effect on Y_{k+1} of a jump of h-column c at path p (zero if the atom is absent).
    Vec jump(int p, int c) const {
        const int w = width[static_cast<std::size_t>(c)];
        if (w == 0) return Vec::Zero(ls.coef.cols());
        return (phi.block(p, 0, 1, w) * ls.coef.block(start[static_cast<std::size_t>(c)], 0, w, ls.coef.cols())).transpose();
    }
    /// Covariation with dW per unit time, targets x n.
    Mat zw(int p) const {
        Mat out(ls.coef.cols(), n);
        for (int c = 0; c < n; ++c) out.col(c) = (phi.row(p) * ls.coef.middleRows(wstart + c * F, F)).transpose() / sdt;
        return out;
    }
    /// Standard error of the target after removing the fitted jump and dW terms.
    Vec residual_se(const Mat& target) const {
        const Mat rest = target - design.rightCols(total - F) * ls.coef.bottomRows(total - F);
        Vec se(target.cols());
        for (Eigen::Index i = 0; i < target.cols(); ++i) {
            std::vector<double> v(rest.col(i).data(), rest.col(i).data() + rest.rows());
            se[i] = mean_estimate(v).se;
        }
        return se;
    }
};

} // namespace detail

/// Euler recursion Y_{k+1} = Y_k - F(or G) dt + z dX^c + (+/-) h at jumps,
/// with the generator at the Nash point a*(t_k, X_k, Y_k, z, h, k).
/// Layout [path][node][agent].
inline std::vector<double> forward_Y(const ModelSpec& m, const Vec& y, const ControlPolicy& policy, const PathBundle& B,
                                     GeneratorMode mode, const NashOptions& nash = {}, int workers = 1) {
    detail::check_bundle(m, B);
    const int N = m.agents, M = B.grid.steps, nodes = B.nodes();
    if (y.size() != N) throw DomainError("forward_Y: y must have one entry per agent");
    NashOptions opt = nash;
    opt.certify = false;
    const double dt = B.grid.dt(), sign = detail::jump_sign(mode);
    std::vector<double> out(static_cast<std::size_t>(B.n_paths) * nodes * N);
    parallel_for(static_cast<std::size_t>(B.n_paths), workers, [&](std::size_t ps) {
        const int p = static_cast<int>(ps);
        Vec Y = y;
        Vec a_prev;
        double* row = out.data() + ps * nodes * N;
        Eigen::Map<Vec>(row, N) = Y;
        for (int k = 0; k < M; ++k) {
            const double t = B.grid.t(k);
            const Vec x = B.x(p, k);
            const ControlPoint cp = policy(t, x);
            auto br = best_response_fixed_point(m, t, x, Y, cp, mode, opt, a_prev.size() ? &a_prev : nullptr);
            a_prev = br.a;
            Vec next = Y - br.values * dt + cp.z * B.continuous_increment(p, k, m.block_dim);
            for (int col : detail::jump_columns(m, B, p, k)) next += sign * cp.h.col(col);
            Y = next;
            Eigen::Map<Vec>(row + static_cast<std::ptrdiff_t>(k + 1) * N, N) = Y;
        }
    });
    return out;
}

struct LsmcOptions {
    int degree = 2;
    double ridge = 1e-8;
    NashOptions nash{};
    int workers = 1;
};

struct BSDESolution {
    GeneratorMode mode = GeneratorMode::cara_g;
    int n_paths = 0, steps = 0, agents = 0, state_dim = 0, atoms = 0;
    std::vector<double> y;   // [path][node][agent]
    std::vector<double> z;   // [path][step][agent][state]
    std::vector<double> h;   // [path][step][agent][atom column]
    std::vector<double> r2;  // [step][agent], fit of the conditional expectation
    Vec y0_se;               // Monte Carlo standard error of Y_0

    int nodes() const { return steps + 1; }
    Eigen::Map<const Vec> Y(int p, int node) const {
        return {y.data() + (static_cast<std::size_t>(p) * nodes() + node) * agents, agents};
    }
    Mat Z(int p, int step) const {
        Mat out(agents, state_dim);
        const double* src = z.data() + (static_cast<std::size_t>(p) * steps + step) * agents * state_dim;
        for (int i = 0; i < agents; ++i)
            for (int c = 0; c < state_dim; ++c) out(i, c) = src[i * state_dim + c];
        return out;
    }
    Mat H(int p, int step) const {
        Mat out(agents, atoms);
        const double* src = h.data() + (static_cast<std::size_t>(p) * steps + step) * agents * atoms;
        for (int i = 0; i < agents; ++i)
            for (int c = 0; c < atoms; ++c) out(i, c) = src[i * atoms + c];
        return out;
    }
    Vec Y0() const { return Y(0, 0); }
};

/// Backward induction on a base-measure bundle. Per step, Y_{k+1} is
/// regressed on polynomial features of X_k, their products with per-atom jump
/// indicators (the jump loadings H) and with dW (the loading Z Sigma). Then
/// Y_k = no-jump conditional mean + generator * dt, the generator taken at the
/// Nash point of the regressed (z, h, k).
inline BSDESolution solve_backward_lsmc(const ModelSpec& m, const TerminalFn& terminal, const FlowPolicy& chi,
                                        const PathBundle& B, GeneratorMode mode, const LsmcOptions& opt = {}) {
    detail::check_bundle(m, B);
    if (!B.base_measure) throw DomainError("solve_backward_lsmc needs a bundle simulated under the reference measure");
    const int N = m.agents, D = m.state_dim(), A = m.total_atoms(), M = B.grid.steps;
    const int P = B.n_paths, nodes = B.nodes();
    const double dt = B.grid.dt(), sign = detail::jump_sign(mode);
    NashOptions nash = opt.nash;
    nash.certify = false;

    BSDESolution S;
    S.mode = mode;
    S.n_paths = P;
    S.steps = M;
    S.agents = N;
    S.state_dim = D;
    S.atoms = A;
    S.y.assign(static_cast<std::size_t>(P) * nodes * N, 0.0);
    S.z.assign(static_cast<std::size_t>(P) * M * N * D, 0.0);
    S.h.assign(static_cast<std::size_t>(P) * M * N * A, 0.0);
    S.r2.assign(static_cast<std::size_t>(M) * N, 1.0);
    S.y0_se = Vec::Zero(N);
    auto yat = [&](int p, int node) { return S.y.data() + (static_cast<std::size_t>(p) * nodes + node) * N; };

    for (int p = 0; p < P; ++p) {
        const Vec xi = terminal(B, p);
        if (xi.size() != N) throw DomainError("terminal data must have one entry per agent");
        for (int i = 0; i < N; ++i)
            if (!std::isfinite(xi[i])) throw DomainError("terminal value is not finite on path " + std::to_string(p));
        Eigen::Map<Vec>(yat(p, M), N) = xi;
    }

    std::vector<Vec> warm(static_cast<std::size_t>(P));
    for (int k = M - 1; k >= 0; --k) {
        const double t = B.grid.t(k);
        Mat X(P, D), target(P, N);
        for (int p = 0; p < P; ++p) {
            X.row(p) = B.x(p, k).transpose();
            target.row(p) = Eigen::Map<const Vec>(yat(p, k + 1), N).transpose();
        }
        const detail::LsmcFit fit(m, B, k, X, target, opt.degree, opt.ridge);
        for (int i = 0; i < N; ++i) S.r2[static_cast<std::size_t>(k) * N + i] = fit.ls.r2[i];
        if (k == 0) S.y0_se = fit.residual_se(target);

        parallel_for(static_cast<std::size_t>(P), opt.workers, [&](std::size_t ps) {
            const int p = static_cast<int>(ps);
            const Vec x = B.x(p, k);
            ControlPoint cp = ControlPoint::zero(m);
            cp.z = fit.zw(p) * m.sigma(t, x).completeOrthogonalDecomposition().pseudoInverse();
            for (int c = 0; c < A; ++c)
                if (fit.width[static_cast<std::size_t>(c)] > 0) cp.h.col(c) = sign * fit.jump(p, c);
            cp.k = detail::flow_at(m, chi, t, x);
            const Vec c0 = fit.mean(p);
            Vec& a_warm = warm[ps];
            auto br = best_response_fixed_point(m, t, x, c0, cp, mode, nash, a_warm.size() ? &a_warm : nullptr);
            a_warm = br.a;
            Eigen::Map<Vec>(yat(p, k), N) = c0 + br.values * dt;
            double* zdst = S.z.data() + (ps * M + static_cast<std::size_t>(k)) * N * D;
            double* hdst = S.h.data() + (ps * M + static_cast<std::size_t>(k)) * N * A;
            for (int i = 0; i < N; ++i) {
                for (int c = 0; c < D; ++c) zdst[i * D + c] = cp.z(i, c);
                for (int c = 0; c < A; ++c) hdst[i * A + c] = cp.h(i, c);
            }
        });
    }
    return S;
}

enum class CeDirection { to_utility, to_ce };

/// Componentwise U_A^i(y) = -exp(-R_A^i y) or its inverse; layout [..][agent].
inline std::vector<double> ce_utility_transform(const std::vector<double>& Y, const Vec& risk_aversion, CeDirection dir) {
    const std::size_t N = static_cast<std::size_t>(risk_aversion.size());
    if (N == 0 || Y.size() % N != 0) throw DomainError("ce_utility_transform: values do not split into agents");
    std::vector<double> out(Y.size());
    for (std::size_t j = 0; j < Y.size(); ++j) {
        const double R = risk_aversion[static_cast<Eigen::Index>(j % N)];
        if (dir == CeDirection::to_utility) {
            out[j] = -std::exp(-R * Y[j]);
        } else {
            if (!(Y[j] < 0.0))
                throw DomainError("to_ce needs strictly negative utilities, got " + std::to_string(Y[j]) + " at entry " +
                                  std::to_string(j));
            out[j] = -std::log(-Y[j]) / R;
        }
    }
    return out;
}

/// Monte Carlo of e^{-int rho} U_A(xi) + int e^{-int rho} (u_A(k) - c(a)) dt
/// on a bundle simulated under `response`; the discount integral uses the
/// left-endpoint rule. Optional densities ([path][node]) reweight the paths.
inline std::vector<Estimate> agent_value_estimate(const ModelSpec& m, const TerminalFn& xi, const FlowPolicy& chi,
                                                  const ActionPolicy& response, const PathBundle& B,
                                                  const std::vector<double>* reweight = nullptr) {
    detail::check_bundle(m, B);
    const int N = m.agents, M = B.grid.steps;
    const double dt = B.grid.dt();
    if (reweight && reweight->size() != static_cast<std::size_t>(B.n_paths) * B.nodes())
        throw DomainError("reweighting densities do not match the bundle layout");
    std::vector<std::vector<double>> v(static_cast<std::size_t>(N), std::vector<double>(static_cast<std::size_t>(B.n_paths)));
    for (int p = 0; p < B.n_paths; ++p) {
        Vec disc = Vec::Zero(N), flow = Vec::Zero(N);
        for (int k = 0; k < M; ++k) {
            const double t = B.grid.t(k);
            const Vec x = B.x(p, k);
            const Vec a = response(t, x);
            const Vec kk = detail::flow_at(m, chi, t, x);
            for (int i = 0; i < N; ++i) {
                const auto& ag = m.agent[static_cast<std::size_t>(i)];
                flow[i] += std::exp(-disc[i]) * (ag.flow_utility(kk) - ag.cost(t, x, a)) * dt;
                disc[i] += ag.discount(t, x, kk, a) * dt;
            }
        }
        const Vec term = xi(B, p);
        if (term.size() != N) throw DomainError("terminal data must have one entry per agent");
        const double w = reweight ? (*reweight)[static_cast<std::size_t>(p) * B.nodes() + M] : 1.0;
        for (int i = 0; i < N; ++i) {
            if (!std::isfinite(term[i]))
                throw DomainError("contract payment is not finite on path " + std::to_string(p));
            v[static_cast<std::size_t>(i)][static_cast<std::size_t>(p)] =
                w * (std::exp(-disc[i]) * m.agent[static_cast<std::size_t>(i)].terminal_utility(term[i]) + flow[i]);
        }
    }
    std::vector<Estimate> out;
    for (const auto& col : v) out.push_back(mean_estimate(col));
    return out;
}

/// R_t = e^{-int_0^t rho} U(Y_t) + int_0^t e^{-int rho} (u_A - c) ds along
/// each path, with U = U_A for certainty-equivalent Y (cara_g) and the
/// identity for utility-unit Y. Layout as Y.
inline std::vector<double> discounted_agent_process(const ModelSpec& m, const std::vector<double>& Y, GeneratorMode mode,
                                                    const FlowPolicy& chi, const ActionPolicy& response,
                                                    const PathBundle& B) {
    detail::check_bundle(m, B);
    const int N = m.agents, M = B.grid.steps, nodes = B.nodes();
    if (Y.size() != static_cast<std::size_t>(B.n_paths) * nodes * N) throw DomainError("Y paths do not match the bundle");
    const double dt = B.grid.dt();
    std::vector<double> R(Y.size());
    for (int p = 0; p < B.n_paths; ++p) {
        Vec disc = Vec::Zero(N), flow = Vec::Zero(N);
        for (int k = 0; k <= M; ++k) {
            const std::size_t base = (static_cast<std::size_t>(p) * nodes + k) * N;
            for (int i = 0; i < N; ++i) {
                const auto& ag = m.agent[static_cast<std::size_t>(i)];
                const double u = mode == GeneratorMode::cara_g ? ag.terminal_utility(Y[base + i]) : Y[base + i];
                R[base + i] = std::exp(-disc[i]) * u + flow[i];
            }
            if (k == M) break;
            const double t = B.grid.t(k);
            const Vec x = B.x(p, k);
            const Vec a = response(t, x);
            const Vec kk = detail::flow_at(m, chi, t, x);
            for (int i = 0; i < N; ++i) {
                const auto& ag = m.agent[static_cast<std::size_t>(i)];
                flow[i] += std::exp(-disc[i]) * (ag.flow_utility(kk) - ag.cost(t, x, a)) * dt;
                disc[i] += ag.discount(t, x, kk, a) * dt;
            }
        }
    }
    return R;
}

/// Sample mean and standard error of R_{k+1} - R_k per step and agent.
/// Layout [step][agent].
inline std::vector<Estimate> step_drift(const std::vector<double>& R, const PathBundle& B, int agents) {
    const int M = B.grid.steps, nodes = B.nodes();
    std::vector<Estimate> out;
    std::vector<double> d(static_cast<std::size_t>(B.n_paths));
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < agents; ++i) {
            for (int p = 0; p < B.n_paths; ++p) {
                const std::size_t base = static_cast<std::size_t>(p) * nodes * agents;
                d[static_cast<std::size_t>(p)] = R[base + static_cast<std::size_t>(k + 1) * agents + i] -
                                                 R[base + static_cast<std::size_t>(k) * agents + i];
            }
            out.push_back(mean_estimate(d));
        }
    return out;
}

/// path,node,Y0..,znorm0..,r2_0..; the R^2 of step k sits on node k.
inline void write_bsde_csv(const BSDESolution& S, std::ostream& os) {
    os << "path,node";
    for (int i = 0; i < S.agents; ++i) os << ",Y" << i;
    for (int i = 0; i < S.agents; ++i) os << ",znorm" << i;
    for (int i = 0; i < S.agents; ++i) os << ",r2_" << i;
    os << '\n';
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        os << buf;
    };
    for (int p = 0; p < S.n_paths; ++p)
        for (int k = 0; k < S.nodes(); ++k) {
            os << p << ',' << k;
            const auto y = S.Y(p, k);
            for (int i = 0; i < S.agents; ++i) put(y[i]);
            const Mat z = k < S.steps ? S.Z(p, k) : Mat::Zero(S.agents, S.state_dim);
            for (int i = 0; i < S.agents; ++i) put(k < S.steps ? z.row(i).norm() : NAN);
            for (int i = 0; i < S.agents; ++i) put(k < S.steps ? S.r2[static_cast<std::size_t>(k) * S.agents + i] : NAN);
            os << '\n';
        }
}

} // namespace pmc
