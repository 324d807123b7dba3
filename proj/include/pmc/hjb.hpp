#pragma once
// The principal's dynamic-programming equation
//   -v_t - H_t(x, Dv) - 1/2 Tr(Sigma Sigma^T D^2 v) - Hv = 0,  v(T, .) = L
// on a truncated box, its feedback policy, and a regression Monte Carlo
// cross-check through the uncontrolled forward-backward system with driver psi.
//
// Far field. The box faces use ghost nodes v(x_face +- h e_d) =
// v(x_face) + L(x_face +- h e_d) - L(x_face), and a jump leaving the box reads
// v(clamp(x')) + L(x') - L(clamp(x')), with L the model's liquidation value.
// Both are nondecreasing in the interior values, so the scheme stays monotone,
// and they are exact whenever v - L is locally constant in x.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "pmc/bsde.hpp"
#include "pmc/nash.hpp"
#include "pmc/rng.hpp"
#include "pmc/sim.hpp"
#include "pmc/util.hpp"

namespace pmc {

/// Uniform tensor grid over a box, at least 5 nodes per dimension.
/// Node j has multi-index (i_0, ..., i_{D-1}) with i_0 varying fastest.
class SpaceGrid {
public:
    SpaceGrid() = default;
    SpaceGrid(Vec lo, Vec hi, std::vector<int> nodes) : lo_(std::move(lo)), hi_(std::move(hi)), n_(std::move(nodes)) {
        const int D = static_cast<int>(n_.size());
        if (D < 1 || lo_.size() != D || hi_.size() != D) throw ConfigError("space grid: box and node counts disagree in dimension");
        stride_.assign(static_cast<std::size_t>(D), 1);
        h_.resize(D);
        for (int d = 0; d < D; ++d) {
            if (n_[static_cast<std::size_t>(d)] < 5)
                throw ConfigError("space grid: dimension " + std::to_string(d) + " has " +
                                  std::to_string(n_[static_cast<std::size_t>(d)]) + " nodes; at least 5 are required");
            if (!(hi_[d] > lo_[d]) || !std::isfinite(lo_[d]) || !std::isfinite(hi_[d]))
                throw ConfigError("space grid: dimension " + std::to_string(d) + " needs lo < hi");
            h_[d] = (hi_[d] - lo_[d]) / (n_[static_cast<std::size_t>(d)] - 1);
            if (d > 0) stride_[static_cast<std::size_t>(d)] = stride_[static_cast<std::size_t>(d - 1)] * n_[static_cast<std::size_t>(d - 1)];
        }
        size_ = stride_.back() * n_.back();
    }

    /// The model's declared state box with the same node count per dimension.
    static SpaceGrid from_box(const ModelSpec& m, int nodes) {
        return SpaceGrid(m.box_lo, m.box_hi, std::vector<int>(static_cast<std::size_t>(m.state_dim()), nodes));
    }

    int dim() const { return static_cast<int>(n_.size()); }
    int nodes(int d) const { return n_[static_cast<std::size_t>(d)]; }
    const std::vector<int>& node_counts() const { return n_; }
    long size() const { return size_; }
    long stride(int d) const { return stride_[static_cast<std::size_t>(d)]; }
    const Vec& lo() const { return lo_; }
    const Vec& hi() const { return hi_; }
    const Vec& dx() const { return h_; }

    int coord(long j, int d) const { return static_cast<int>((j / stride(d)) % nodes(d)); }
    Vec point(long j) const {
        Vec x(dim());
        for (int d = 0; d < dim(); ++d) x[d] = coord(j, d) == nodes(d) - 1 ? hi_[d] : lo_[d] + coord(j, d) * h_[d];
        return x;
    }
    bool contains(const Vec& x) const {
        for (int d = 0; d < dim(); ++d)
            if (!(x[d] >= lo_[d] && x[d] <= hi_[d])) return false;
        return true;
    }
    Vec clamp(const Vec& x) const { return x.cwiseMax(lo_).cwiseMin(hi_); }

    /// Multilinear interpolation weights of clamp(x); at most 2^D entries.
    void stencil(const Vec& x, std::vector<std::pair<long, double>>& out) const {
        const int D = dim();
        std::vector<long> base(static_cast<std::size_t>(D));
        std::vector<double> frac(static_cast<std::size_t>(D));
        long j0 = 0;
        for (int d = 0; d < D; ++d) {
            const double s = (std::clamp(x[d], lo_[d], hi_[d]) - lo_[d]) / h_[d];
            const int i = std::clamp(static_cast<int>(std::floor(s)), 0, nodes(d) - 2);
            frac[static_cast<std::size_t>(d)] = std::clamp(s - i, 0.0, 1.0);
            j0 += i * stride(d);
        }
        out.clear();
        for (int corner = 0; corner < (1 << D); ++corner) {
            double w = 1.0;
            long j = j0;
            for (int d = 0; d < D; ++d) {
                const double f = frac[static_cast<std::size_t>(d)];
                if ((corner >> d) & 1) {
                    w *= f;
                    j += stride(d);
                } else {
                    w *= 1.0 - f;
                }
            }
            if (w != 0.0) out.emplace_back(j, w);
        }
    }

    double interpolate(const double* values, const Vec& x) const {
        std::vector<std::pair<long, double>> st;
        stencil(x, st);
        double s = 0.0;
        for (const auto& [j, w] : st) s += w * values[j];
        return s;
    }

private:
    Vec lo_, hi_, h_;
    std::vector<int> n_;
    std::vector<long> stride_;
    long size_ = 0;
};

enum class TimeScheme { explicit_euler, imex };

inline const char* scheme_name(TimeScheme s) { return s == TimeScheme::imex ? "imex" : "explicit"; }

struct HjbOptions {
    /// explicit_euler: everything explicit. imex: implicit diffusion, explicit
    /// Hamiltonian and jump terms.
    TimeScheme scheme = TimeScheme::explicit_euler;
    /// Safety factor c of the step restriction dt * rate <= c.
    double cfl = 0.45;
    HamiltonianOptions ham{};
    int workers = 1;
    /// Terminal data replacing L(x) (the far field still follows the model's L).
    std::function<double(const Vec&)> terminal;
    /// Skip the check that X_0 sits at least a quarter of the box width from every face.
    bool allow_value_point_near_face = false;
};

/// Solution slices k = 0..M with the maximizer found at each node of each slice.
struct ValueSurface {
    std::shared_ptr<const ModelSpec> model;
    SpaceGrid grid;
    TimeGrid time;
    TimeScheme scheme = TimeScheme::explicit_euler;
    HamiltonianOptions ham{};
    double cfl_ratio = 0.0;  // dt * rate, at most the configured factor
    int agents = 0, state_dim = 0, atoms = 0, action_dim = 0;

    // Flat tables, slice-major then node-major.
    std::vector<double> v, hval, grad, z, h, chi, a;

    double value_at_x0 = 0.0;
    /// sum_i U_A^{-1}(R_0^i).
    double reservation_shift = 0.0;
    double principal_value = 0.0;

    // Diagnostics.
    int boundary_argmax = 0;    // maximizers on the search box
    int budget_warnings = 0;    // sups that ran out of sweeps
    int extrapolated_jumps = 0; // (node, atom) pairs jumping out of the box
    int skipped_cross_terms = 0;

    long nodes() const { return grid.size(); }
    int slices() const { return time.steps + 1; }
    std::size_t at(int k, long j) const { return static_cast<std::size_t>(k) * static_cast<std::size_t>(nodes()) + static_cast<std::size_t>(j); }

    const double* slice(int k) const { return v.data() + at(k, 0); }
    double value(int k, long j) const { return v[at(k, j)]; }
    double hamiltonian(int k, long j) const { return hval[at(k, j)]; }
    Vec gradient(int k, long j) const { return Eigen::Map<const Vec>(grad.data() + at(k, j) * state_dim, state_dim); }
    Vec action(int k, long j) const { return Eigen::Map<const Vec>(a.data() + at(k, j) * action_dim, action_dim); }
    ControlPoint control(int k, long j) const {
        const std::size_t n = at(k, j);
        ControlPoint cp;
        cp.z = Eigen::Map<const Mat>(z.data() + n * agents * state_dim, agents, state_dim);
        cp.h = Eigen::Map<const Mat>(h.data() + n * agents * atoms, agents, atoms);
        cp.k = Eigen::Map<const Vec>(chi.data() + n * agents, agents);
        return cp;
    }
    /// v(t_k, x) by multilinear interpolation (x clamped to the box).
    double interpolate(int k, const Vec& x) const { return grid.interpolate(slice(k), x); }
};

namespace detail {

using Stencil = std::vector<std::pair<long, double>>;

struct JumpStencil {
    double weight = 0.0;
    Stencil nodes;
    double offset = 0.0;  // far-field correction
};

/// Everything about the grid operators that does not change in time.
struct HjbOperators {
    const ModelSpec* m = nullptr;
    const SpaceGrid* g = nullptr;
    std::vector<Vec> x;
    std::vector<Mat> sigma;
    std::vector<double> diff;            // a_dd per node and dimension
    std::vector<double> off_lo, off_hi;  // ghost offsets per node and dimension
    std::vector<std::vector<JumpStencil>> jumps;
    std::vector<double> mass;
    int extrapolated = 0, skipped_cross = 0;

    HjbOperators(const ModelSpec& model, const SpaceGrid& grid) : m(&model), g(&grid) {
        const int D = grid.dim();
        const long S = grid.size();
        const auto& L = model.principal.liquidation;
        x.resize(static_cast<std::size_t>(S));
        sigma.resize(static_cast<std::size_t>(S));
        diff.assign(static_cast<std::size_t>(S) * D, 0.0);
        off_lo.assign(static_cast<std::size_t>(S) * D, 0.0);
        off_hi.assign(static_cast<std::size_t>(S) * D, 0.0);
        jumps.resize(static_cast<std::size_t>(S));
        mass.assign(static_cast<std::size_t>(S), 0.0);
        for (long j = 0; j < S; ++j) {
            const std::size_t js = static_cast<std::size_t>(j);
            x[js] = grid.point(j);
            sigma[js] = model.sigma(0.0, x[js]);
            const Mat aa = sigma[js] * sigma[js].transpose();
            const double Lx = L(x[js]);
            for (int d = 0; d < D; ++d) {
                diff[js * D + d] = aa(d, d);
                for (int e = d + 1; e < D; ++e)
                    if (aa(d, e) != 0.0 && !(interior(j, d) && interior(j, e))) ++skipped_cross;
                if (grid.coord(j, d) == 0) off_lo[js * D + d] = L(x[js] - grid.dx()[d] * Vec::Unit(D, d)) - Lx;
                if (grid.coord(j, d) == grid.nodes(d) - 1) off_hi[js * D + d] = L(x[js] + grid.dx()[d] * Vec::Unit(D, d)) - Lx;
            }
            for (const auto& at : mass_atoms(model, 0.0, x[js])) {
                const Vec target = x[js] + embed_block(model, at.agent, model.jumps[static_cast<std::size_t>(at.agent)].size(0.0, x[js], at.mark));
                JumpStencil st;
                st.weight = at.weight;
                grid.stencil(target, st.nodes);
                if (!grid.contains(target)) {
                    st.offset = L(target) - L(grid.clamp(target));
                    ++extrapolated;
                }
                mass[js] += at.weight;
                jumps[js].push_back(std::move(st));
            }
        }
    }

    bool interior(long j, int d) const { return g->coord(j, d) > 0 && g->coord(j, d) < g->nodes(d) - 1; }

    double neighbor(const double* v, long j, int d, int dir) const {
        const int c = g->coord(j, d);
        const std::size_t n = static_cast<std::size_t>(j) * g->dim() + d;
        if (dir > 0) return c == g->nodes(d) - 1 ? v[j] + off_hi[n] : v[j + g->stride(d)];
        return c == 0 ? v[j] + off_lo[n] : v[j - g->stride(d)];
    }

    Vec central(const double* v, long j) const {
        Vec p(g->dim());
        for (int d = 0; d < g->dim(); ++d) p[d] = (neighbor(v, j, d, 1) - neighbor(v, j, d, -1)) / (2.0 * g->dx()[d]);
        return p;
    }

    /// One-sided differences in the direction of the transport s.
    Vec upwind(const double* v, long j, const Vec& s) const {
        Vec p(g->dim());
        for (int d = 0; d < g->dim(); ++d)
            p[d] = s[d] >= 0.0 ? (neighbor(v, j, d, 1) - v[j]) / g->dx()[d] : (v[j] - neighbor(v, j, d, -1)) / g->dx()[d];
        return p;
    }

    /// 1/2 Tr(Sigma Sigma^T D^2 v) at node j, ghosts included.
    double diffusion(const double* v, long j) const {
        const int D = g->dim();
        const std::size_t js = static_cast<std::size_t>(j);
        double s = 0.0;
        for (int d = 0; d < D; ++d) {
            const double a = diff[js * D + d];
            if (a != 0.0) s += 0.5 * a * (neighbor(v, j, d, 1) - 2.0 * v[j] + neighbor(v, j, d, -1)) / (g->dx()[d] * g->dx()[d]);
        }
        if (D > 1) {
            const Mat aa = sigma[js] * sigma[js].transpose();
            for (int d = 0; d < D; ++d)
                for (int e = d + 1; e < D; ++e) {
                    if (aa(d, e) == 0.0 || !interior(j, d) || !interior(j, e)) continue;
                    const long sd = g->stride(d), se = g->stride(e);
                    s += aa(d, e) * (v[j + sd + se] - v[j + sd - se] - v[j - sd + se] + v[j - sd - se]) /
                         (4.0 * g->dx()[d] * g->dx()[e]);
                }
        }
        return s;
    }

    /// Sum over atoms of w (v(x + beta) - v(x)).
    double jump(const double* v, long j) const {
        double s = 0.0;
        for (const auto& st : jumps[static_cast<std::size_t>(j)]) {
            double vt = st.offset;
            for (const auto& [n, w] : st.nodes) vt += w * v[n];
            s += st.weight * (vt - v[j]);
        }
        return s;
    }

    /// Sparse matrix A and constant c with diffusion(v) = A v + c (diagonal
    /// terms plus interior cross terms).
    void diffusion_matrix(Eigen::SparseMatrix<double>& A, Vec& c) const {
        const int D = g->dim();
        const long S = g->size();
        std::vector<Eigen::Triplet<double>> trip;
        c = Vec::Zero(S);
        for (long j = 0; j < S; ++j) {
            const std::size_t js = static_cast<std::size_t>(j);
            for (int d = 0; d < D; ++d) {
                const double a = diff[js * D + d];
                if (a == 0.0) continue;
                const double w = 0.5 * a / (g->dx()[d] * g->dx()[d]);
                trip.emplace_back(j, j, -2.0 * w);
                for (int dir : {-1, 1}) {
                    const int cc = g->coord(j, d) + dir;
                    if (cc < 0 || cc > g->nodes(d) - 1) {
                        trip.emplace_back(j, j, w);
                        c[j] += w * (dir > 0 ? off_hi[js * D + d] : off_lo[js * D + d]);
                    } else {
                        trip.emplace_back(j, j + dir * g->stride(d), w);
                    }
                }
            }
            if (D > 1) {
                const Mat aa = sigma[js] * sigma[js].transpose();
                for (int d = 0; d < D; ++d)
                    for (int e = d + 1; e < D; ++e) {
                        if (aa(d, e) == 0.0 || !interior(j, d) || !interior(j, e)) continue;
                        const long sd = g->stride(d), se = g->stride(e);
                        const double w = aa(d, e) / (4.0 * g->dx()[d] * g->dx()[e]);
                        trip.emplace_back(j, j + sd + se, w);
                        trip.emplace_back(j, j + sd - se, -w);
                        trip.emplace_back(j, j - sd + se, -w);
                        trip.emplace_back(j, j - sd - se, w);
                    }
            }
        }
        A.resize(S, S);
        A.setFromTriplets(trip.begin(), trip.end());
    }
};

/// Largest |(Sigma b)_d| over the model's state and action probes.
inline Vec transport_bound(const ModelSpec& m) {
    Vec s = Vec::Zero(m.state_dim());
    for (const auto& x : state_probes(m)) {
        const Mat S = m.sigma(0.0, x);
        for (const auto& a : action_probes(m)) s = s.cwiseMax((S * m.drift(0.0, x, a)).cwiseAbs());
    }
    return s;
}

struct NodeSup {
    HamiltonianResult res;
    Vec p;
};

/// Hamiltonian at node j of a slice: central differences first, then one
/// re-evaluation with differences upwinded along Sigma b(a*).
inline NodeSup node_sup(const HamiltonianProblem& prob, const HjbOperators& ops, const double* v, long j, double t,
                        const HamiltonianResult* warm) {
    const ModelSpec& m = prob.model();
    const Vec& x = ops.x[static_cast<std::size_t>(j)];
    const Vec pc = ops.central(v, j);
    HamiltonianResult rc = prob.sup(t, x, pc, warm);
    const Vec s = ops.sigma[static_cast<std::size_t>(j)] * m.drift(t, x, rc.a);
    Vec pu = ops.upwind(v, j, s);
    if ((pu - pc).lpNorm<Eigen::Infinity>() <= 1e-12 * (1.0 + pc.lpNorm<Eigen::Infinity>())) {
        // Same maximizer; value taken at the upwind gradient.
        rc.value = prob.objective(t, x, pu, rc.cp, false, &rc.a);
        return {std::move(rc), std::move(pu)};
    }
    HamiltonianResult ru = prob.sup(t, x, pu, &rc);
    ru.evaluations += rc.evaluations;
    return {std::move(ru), std::move(pu)};
}

inline void check_hjb_model(const ModelSpec& m, const SpaceGrid& g, const TimeGrid& tg) {
    require_valid(m);
    require_cara_risk_neutral(m);
    if (m.state_dim() > 3)
        throw ConfigError("the grid solver handles state dimension dN <= 3; model '" + m.name + "' has dN = " +
                          std::to_string(m.state_dim()) + " (use fbsde_crosscheck instead)");
    if (g.dim() != m.state_dim())
        throw ConfigError("space grid has dimension " + std::to_string(g.dim()) + ", model '" + m.name + "' has " +
                          std::to_string(m.state_dim()));
    std::string why;
    if (!time_homogeneous_dynamics(m, &why)) throw ModelError("the grid solver needs time-independent Sigma and beta: " + why);
    if (std::abs(tg.horizon - m.horizon) > 1e-12 * m.horizon)
        throw ConfigError("time grid horizon " + std::to_string(tg.horizon) + " differs from the model horizon " +
                          std::to_string(m.horizon));
}

} // namespace detail

/// Backward sweep from v(T, .) = L. Each slice stores the maximizer of the
/// Hamiltonian at its own gradient; slice k+1 drives the step to slice k.
inline ValueSurface solve(const ModelSpec& model, const SpaceGrid& grid, const TimeGrid& tgrid, const HjbOptions& opt = {}) {
    detail::check_hjb_model(model, grid, tgrid);
    for (int d = 0; d < grid.dim(); ++d) {
        const double w = grid.hi()[d] - grid.lo()[d];
        const double x0 = model.x0[d];
        if (!(x0 > grid.lo()[d] && x0 < grid.hi()[d]))
            throw ConfigError("space grid must contain X_0 strictly (dimension " + std::to_string(d) + ")");
        if (!opt.allow_value_point_near_face && (x0 - grid.lo()[d] < 0.25 * w - 1e-12 * w || grid.hi()[d] - x0 < 0.25 * w - 1e-12 * w))
            throw ConfigError("X_0 must sit at least 25% of the box width from every face (dimension " + std::to_string(d) + ")");
    }
    if (!(opt.cfl > 0.0)) throw ConfigError("CFL factor must be positive");

    auto mp = std::make_shared<const ModelSpec>(model);
    const ModelSpec& m = *mp;
    const detail::HjbOperators ops(m, grid);
    const HamiltonianProblem prob(m, opt.ham);
    const int D = grid.dim(), N = m.agents, A = m.total_atoms(), Ad = m.action_dim(), M = tgrid.steps;
    const long S = grid.size();
    const double dt = tgrid.dt();

    // Step restriction: dt (diffusion + transport + jump mass) <= cfl.
    const Vec s_max = detail::transport_bound(m);
    double rate = *std::max_element(ops.mass.begin(), ops.mass.end());
    for (int d = 0; d < D; ++d) {
        rate += s_max[d] / grid.dx()[d];
        if (opt.scheme == TimeScheme::explicit_euler) {
            double amax = 0.0;
            for (long j = 0; j < S; ++j) amax = std::max(amax, ops.diff[static_cast<std::size_t>(j) * D + d]);
            rate += amax / (grid.dx()[d] * grid.dx()[d]);
        }
    }
    if (dt * rate > opt.cfl * (1.0 + 1e-12)) {
        const double need = opt.cfl / rate;
        throw SolverError("CFL condition violated for the " + std::string(scheme_name(opt.scheme)) + " scheme: dt = " +
                          std::to_string(dt) + " but dt <= " + std::to_string(need) + " is required (at least " +
                          std::to_string(static_cast<long>(std::ceil(tgrid.horizon / need))) + " time steps)");
    }

    ValueSurface out;
    out.model = mp;
    out.grid = grid;
    out.time = tgrid;
    out.scheme = opt.scheme;
    out.ham = opt.ham;
    out.cfl_ratio = dt * rate;
    out.agents = N;
    out.state_dim = D;
    out.atoms = A;
    out.action_dim = Ad;
    out.extrapolated_jumps = ops.extrapolated;
    out.skipped_cross_terms = ops.skipped_cross;
    const std::size_t total = static_cast<std::size_t>(M + 1) * static_cast<std::size_t>(S);
    out.v.assign(total, 0.0);
    out.hval.assign(total, 0.0);
    out.grad.assign(total * D, 0.0);
    out.z.assign(total * N * D, 0.0);
    out.h.assign(total * N * A, 0.0);
    out.chi.assign(total * N, 0.0);
    out.a.assign(total * Ad, 0.0);

    for (long j = 0; j < S; ++j) {
        const Vec& x = ops.x[static_cast<std::size_t>(j)];
        out.v[out.at(M, j)] = opt.terminal ? opt.terminal(x) : m.principal.liquidation(x);
        if (!std::isfinite(out.v[out.at(M, j)]))
            throw ModelError("terminal value is not finite at x = " + detail::fmt_vec(x));
    }

    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    if (opt.scheme == TimeScheme::imex) {
        Eigen::SparseMatrix<double> Adiff;
        Vec c_diff;
        ops.diffusion_matrix(Adiff, c_diff);
        Eigen::SparseMatrix<double> I(S, S);
        I.setIdentity();
        lu.compute(I - dt * Adiff);
        if (lu.info() != Eigen::Success) throw SolverError("implicit diffusion matrix could not be factored");
    }

    std::vector<HamiltonianResult> warm(static_cast<std::size_t>(S));
    std::vector<char> has_warm(static_cast<std::size_t>(S), 0);
    std::vector<char> flag_boundary(static_cast<std::size_t>(S), 0), flag_budget(static_cast<std::size_t>(S), 0);
    Vec rhs(S);
    for (int k = M; k >= 0; --k) {
        const double t = tgrid.t(k);
        const double* vk = out.v.data() + out.at(k, 0);
        parallel_for(static_cast<std::size_t>(S), opt.workers, [&](std::size_t js) {
            const long j = static_cast<long>(js);
            auto ns = detail::node_sup(prob, ops, vk, j, t, has_warm[js] ? &warm[js] : nullptr);
            const std::size_t n = out.at(k, j);
            out.hval[n] = ns.res.value;
            Eigen::Map<Vec>(out.grad.data() + n * D, D) = ns.p;
            Eigen::Map<Mat>(out.z.data() + n * N * D, N, D) = ns.res.cp.z;
            Eigen::Map<Mat>(out.h.data() + n * N * A, N, A) = ns.res.cp.h;
            Eigen::Map<Vec>(out.chi.data() + n * N, N) = ns.res.cp.k;
            Eigen::Map<Vec>(out.a.data() + n * Ad, Ad) = ns.res.a;
            flag_boundary[js] = ns.res.at_boundary;
            flag_budget[js] = ns.res.budget_warning;
            warm[js] = std::move(ns.res);
            has_warm[js] = 1;
        });
        for (long j = 0; j < S; ++j) {
            out.boundary_argmax += flag_boundary[static_cast<std::size_t>(j)];
            out.budget_warnings += flag_budget[static_cast<std::size_t>(j)];
        }
        if (k == 0) break;

        double* vn = out.v.data() + out.at(k - 1, 0);
        const double* hk = out.hval.data() + out.at(k, 0);
        if (opt.scheme == TimeScheme::explicit_euler) {
            parallel_for(static_cast<std::size_t>(S), opt.workers, [&](std::size_t js) {
                const long j = static_cast<long>(js);
                vn[j] = vk[j] + dt * (ops.diffusion(vk, j) + hk[j] + ops.jump(vk, j));
            });
        } else {
            // Increment form: (I - dt A) (v_new - v) = dt (A v + c + H + J), so
            // states the operators annihilate stay bit-exact.
            parallel_for(static_cast<std::size_t>(S), opt.workers, [&](std::size_t js) {
                const long j = static_cast<long>(js);
                rhs[j] = dt * (ops.diffusion(vk, j) + hk[j] + ops.jump(vk, j));
            });
            Eigen::Map<Vec>(vn, S) = Eigen::Map<const Vec>(vk, S) + lu.solve(rhs);
        }
        for (long j = 0; j < S; ++j)
            if (!std::isfinite(vn[j]))
                throw SolverError("value became non-finite at slice " + std::to_string(k - 1) + ", x = " +
                                  detail::fmt_vec(ops.x[static_cast<std::size_t>(j)]));
    }

    out.value_at_x0 = out.interpolate(0, m.x0);
    for (const auto& ag : m.agent) out.reservation_shift += ag.terminal_utility_inverse(ag.reservation);
    out.principal_value = out.value_at_x0 - out.reservation_shift;
    return out;
}

/// |V(0, X_0)| change when every face moves 10% of the width toward X_0
/// (same spacing). Zero when the shrunken grid would have fewer than 5 nodes.
inline double boundary_influence(const ModelSpec& m, const ValueSurface& s, const HjbOptions& opt = {}) {
    const SpaceGrid& g = s.grid;
    Vec lo = g.lo(), hi = g.hi();
    std::vector<int> n = g.node_counts();
    for (int d = 0; d < g.dim(); ++d) {
        const int cut = static_cast<int>(std::floor(0.1 * (n[static_cast<std::size_t>(d)] - 1)));
        n[static_cast<std::size_t>(d)] -= 2 * cut;
        if (n[static_cast<std::size_t>(d)] < 5) return 0.0;
        lo[d] += cut * g.dx()[d];
        hi[d] -= cut * g.dx()[d];
    }
    HjbOptions o = opt;
    o.allow_value_point_near_face = true;
    const ValueSurface inner = solve(m, SpaceGrid(lo, hi, n), s.time, o);
    return std::abs(inner.value_at_x0 - s.value_at_x0);
}

struct PolicyQuality {
    int probes = 0;
    double worst_gap = 0.0;  // |H_sup - h(interpolated control)| / max(1, |H_sup|)
    double worst_t = 0.0;
    Vec worst_x;
    bool passed = true;
    std::string warning;
};

/// Interpolated feedback maps. Time is piecewise constant by slice, space
/// multilinear (x clamped to the box); a* is recomputed at the interpolated
/// controls.
class FeedbackPolicy {
public:
    explicit FeedbackPolicy(std::shared_ptr<const ValueSurface> s) : s_(std::move(s)) {}

    const ValueSurface& surface() const { return *s_; }
    const PolicyQuality& quality() const { return q_; }
    void set_quality(PolicyQuality q) { q_ = std::move(q); }

    int slice(double t) const {
        const int M = s_->time.steps;
        const double u = t / s_->time.dt();
        return std::clamp(static_cast<int>(std::floor(u + 1e-9)), 0, M);
    }

    ControlPoint control(double t, const Vec& x) const {
        const int k = slice(t);
        const ValueSurface& s = *s_;
        const int N = s.agents, D = s.state_dim, A = s.atoms;
        std::vector<std::pair<long, double>> st;
        s.grid.stencil(x, st);
        ControlPoint cp{Mat::Zero(N, D), Mat::Zero(N, A), Vec::Zero(N)};
        for (const auto& [j, w] : st) {
            const std::size_t n = s.at(k, j);
            cp.z += w * Eigen::Map<const Mat>(s.z.data() + n * N * D, N, D);
            cp.h += w * Eigen::Map<const Mat>(s.h.data() + n * N * A, N, A);
            cp.k += w * Eigen::Map<const Vec>(s.chi.data() + n * N, N);
        }
        return cp;
    }

    Vec gradient(double t, const Vec& x) const {
        const int k = slice(t);
        std::vector<std::pair<long, double>> st;
        s_->grid.stencil(x, st);
        Vec p = Vec::Zero(s_->state_dim);
        for (const auto& [j, w] : st) p += w * s_->gradient(k, j);
        return p;
    }

    /// Stored node maximizers a*, interpolated.
    Vec recorded_action(double t, const Vec& x) const {
        const int k = slice(t);
        std::vector<std::pair<long, double>> st;
        s_->grid.stencil(x, st);
        Vec a = Vec::Zero(s_->action_dim);
        for (const auto& [j, w] : st) a += w * s_->action(k, j);
        return a;
    }

    Vec action(double t, const Vec& x) const {
        NashOptions nash = s_->ham.nash;
        nash.certify = false;
        const ModelSpec& m = *s_->model;
        return best_response_fixed_point(m, t, x, Vec::Zero(m.agents), control(t, x), GeneratorMode::cara_g, nash).a;
    }

    ControlPolicy control_policy() const {
        auto self = *this;
        return [self](double t, const Vec& x) { return self.control(t, x); };
    }
    FlowPolicy flow_policy() const {
        auto self = *this;
        return [self](double t, const Vec& x) { return self.control(t, x).k; };
    }
    ActionPolicy action_policy() const {
        auto self = *this;
        return [self](double t, const Vec& x) { return self.action(t, x); };
    }

private:
    std::shared_ptr<const ValueSurface> s_;
    PolicyQuality q_;
};

/// Build the feedback maps and run the quality gate: at `probes` seeded
/// random (t, x), a fresh Hamiltonian sup at the interpolated gradient must
/// match the objective at the interpolated control within 5%.
inline FeedbackPolicy extract_policy(std::shared_ptr<const ValueSurface> s, int probes = 32, std::uint64_t seed = 20240917) {
    if (!s || s->v.empty()) throw DomainError("extract_policy needs a solved value surface");
    FeedbackPolicy pol(s);
    const ModelSpec& m = *s->model;
    const HamiltonianProblem prob(m, s->ham);
    PolicyQuality q;
    q.probes = probes;
    StreamRng rng(seed, 0);
    const Vec lo = s->grid.lo(), hi = s->grid.hi();
    for (int i = 0; i < probes; ++i) {
        const double t = rng.uniform() * s->time.horizon;
        Vec x(lo.size());
        for (Eigen::Index d = 0; d < x.size(); ++d) x[d] = lo[d] + rng.uniform() * (hi[d] - lo[d]);
        const Vec p = pol.gradient(t, x);
        const double best = prob.sup(t, x, p).value;
        const double got = prob.objective(t, x, p, pol.control(t, x));
        const double gap = std::abs(best - got) / std::max(1.0, std::abs(best));
        if (i == 0 || gap > q.worst_gap) {
            q.worst_gap = gap;
            q.worst_t = t;
            q.worst_x = x;
        }
    }
    q.passed = q.worst_gap <= 0.05;
    if (!q.passed)
        q.warning = "feedback policy quality gate failed: relative Hamiltonian gap " + std::to_string(q.worst_gap) +
                    " at t = " + std::to_string(q.worst_t) + ", x = " + detail::fmt_vec(q.worst_x);
    pol.set_quality(std::move(q));
    return pol;
}

inline FeedbackPolicy extract_policy(const ValueSurface& s, int probes = 32, std::uint64_t seed = 20240917) {
    return extract_policy(std::make_shared<const ValueSurface>(s), probes, seed);
}

// ---------------------------------------------------------------------------
// Forward-backward cross-check

struct FbsdeOptions {
    int degree = 2;
    double ridge = 1e-8;
    HamiltonianOptions ham{};
    int workers = 1;
    /// Terminal data replacing L(x).
    std::function<double(const Vec&)> terminal;
};

/// Uncontrolled paths started at (t, x), covering the remaining horizon T - t.
inline PathBundle crosscheck_bundle(const ModelSpec& m, double t, const Vec& x, int steps, int paths, std::uint64_t seed,
                                    const SimOptions& sim = {}) {
    if (!(t >= 0.0 && t < m.horizon)) throw DomainError("cross-check time must lie in [0, T)");
    if (x.size() != m.state_dim()) throw DomainError("cross-check point has the wrong dimension");
    ModelSpec shifted = m;
    shifted.x0 = x;
    shifted.horizon = m.horizon - t;
    return simulate_paths(shifted, nullptr, TimeGrid(m.horizon - t, steps), paths, seed, sim);
}

/// Y~ at (t, x) from one explicit backward regression pass on an
/// uncontrolled bundle from crosscheck_bundle:
///   Y_k = E_k[Y_{k+1}] + psi(t + s_k, X_k, zeta_k) ds,  zeta_k = d<Y, W>/ds.
/// The driver does not depend on Y, so the pass is already the Picard fixed point.
inline Estimate fbsde_crosscheck(const ModelSpec& m, double t, const Vec& x, const PathBundle& B, const FbsdeOptions& opt = {}) {
    detail::require_cara_risk_neutral(m);
    detail::check_bundle(m, B);
    if (!B.base_measure) throw DomainError("fbsde_crosscheck needs an uncontrolled bundle");
    if (std::abs(B.grid.horizon - (m.horizon - t)) > 1e-12 * m.horizon)
        throw DomainError("bundle horizon does not match T - t");
    if (!((B.x(0, 0) - x).lpNorm<Eigen::Infinity>() <= 1e-12 * (1.0 + x.lpNorm<Eigen::Infinity>())))
        throw DomainError("bundle does not start at the cross-check point");

    const HamiltonianProblem prob(m, opt.ham);
    const int P = B.n_paths, M = B.grid.steps, D = m.state_dim(), A = m.total_atoms();
    const double dt = B.grid.dt();
    std::vector<std::pair<int, int>> atom_of(static_cast<std::size_t>(A));
    for (int l = 0; l < m.agents; ++l)
        for (int j = 0; j < m.atom_count(l); ++j) atom_of[static_cast<std::size_t>(m.atom_offset(l) + j)] = {l, j};

    Mat Y(P, 1);
    double scale = 0.0;
    for (int p = 0; p < P; ++p) {
        const Vec xt = B.x(p, M);
        Y(p, 0) = opt.terminal ? opt.terminal(xt) : m.principal.liquidation(xt);
        if (!std::isfinite(Y(p, 0))) throw DomainError("terminal value is not finite on path " + std::to_string(p));
        scale = std::max(scale, std::abs(Y(p, 0)));
    }
    std::vector<HamiltonianResult> warm(static_cast<std::size_t>(P));
    std::vector<char> has_warm(static_cast<std::size_t>(P), 0);
    Estimate out;
    for (int k = M - 1; k >= 0; --k) {
        const double s = t + B.grid.t(k);
        Mat X(P, D);
        for (int p = 0; p < P; ++p) X.row(p) = B.x(p, k).transpose();
        const detail::LsmcFit fit(m, B, k, X, Y, opt.degree, opt.ridge);
        if (k == 0) out.se = fit.residual_se(Y)[0];
        Mat next(P, 1);
        parallel_for(static_cast<std::size_t>(P), opt.workers, [&](std::size_t ps) {
            const int p = static_cast<int>(ps);
            const Vec xk = B.x(p, k);
            double mean = fit.mean(p)[0];
            for (int c = 0; c < A; ++c) {
                if (fit.width[static_cast<std::size_t>(c)] == 0) continue;
                const auto [l, j] = atom_of[static_cast<std::size_t>(c)];
                const auto& js = m.jumps[static_cast<std::size_t>(l)];
                if (is_zero(js.size(s, xk, js.atoms[static_cast<std::size_t>(j)].mark))) continue;
                mean += fit.jump(p, c)[0] * js.atoms[static_cast<std::size_t>(j)].weight * dt;
            }
            const Vec zeta = fit.zw(p).row(0).transpose();
            auto r = prob.sup(s, xk, zeta, has_warm[ps] ? &warm[ps] : nullptr, true);
            next(p, 0) = mean + r.value * dt;
            warm[ps] = std::move(r);
            has_warm[ps] = 1;
        });
        const double now = next.cwiseAbs().maxCoeff();
        if (!std::isfinite(now) || now > 1e6 * (1.0 + scale))
            throw SolverError("forward-backward iteration diverged at step " + std::to_string(k) + " (|Y| = " +
                              std::to_string(now) + "); psi may not be Lipschitz in zeta on the search box, "
                              "check z_max / h_max or refine the time grid");
        scale = std::max(scale, now);
        Y = std::move(next);
    }
    out.value = Y.col(0).mean();
    return out;
}

// ---------------------------------------------------------------------------
// Export and cache

/// Rows: t, x_0.., v, |Dv|, z_<i>_<c>.., chi_<i>.. for every slice and node.
inline void write_surface_csv(const ValueSurface& s, std::ostream& os) {
    const int N = s.agents, D = s.state_dim;
    os << "t";
    for (int d = 0; d < D; ++d) os << ",x" << d;
    os << ",v,grad_norm";
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < D; ++c) os << ",z_" << i << "_" << c;
    for (int i = 0; i < N; ++i) os << ",chi_" << i;
    os << "\n";
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf;
    };
    for (int k = 0; k < s.slices(); ++k)
        for (long j = 0; j < s.nodes(); ++j) {
            num(s.time.t(k));
            const Vec x = s.grid.point(j);
            for (int d = 0; d < D; ++d) os << ',', num(x[d]);
            os << ',', num(s.value(k, j));
            os << ',', num(s.gradient(k, j).norm());
            const ControlPoint cp = s.control(k, j);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < D; ++c) os << ',', num(cp.z(i, c));
            for (int i = 0; i < N; ++i) os << ',', num(cp.k[i]);
            os << "\n";
        }
}

/// Rows: t, x_0.., a_<c>.., z_<i>_<c>.., h_<i>_<j>.., chi_<i>.. (the stored
/// node maximizers).
inline void write_policy_csv(const ValueSurface& s, std::ostream& os) {
    const int N = s.agents, D = s.state_dim, A = s.atoms;
    os << "t";
    for (int d = 0; d < D; ++d) os << ",x" << d;
    for (int c = 0; c < s.action_dim; ++c) os << ",a_" << c;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < D; ++c) os << ",z_" << i << "_" << c;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < A; ++j) os << ",h_" << i << "_" << j;
    for (int i = 0; i < N; ++i) os << ",chi_" << i;
    os << "\n";
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf;
    };
    for (int k = 0; k < s.slices(); ++k)
        for (long j = 0; j < s.nodes(); ++j) {
            num(s.time.t(k));
            const Vec x = s.grid.point(j);
            for (int d = 0; d < D; ++d) os << ',', num(x[d]);
            const Vec a = s.action(k, j);
            for (int c = 0; c < s.action_dim; ++c) os << ',', num(a[c]);
            const ControlPoint cp = s.control(k, j);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < D; ++c) os << ',', num(cp.z(i, c));
            for (int i = 0; i < N; ++i)
                for (int q = 0; q < A; ++q) os << ',', num(cp.h(i, q));
            for (int i = 0; i < N; ++i) os << ',', num(cp.k[i]);
            os << "\n";
        }
}

/// Hash of everything the surface depends on. Custom terminal data has no
/// canonical description and cannot be keyed.
inline std::string surface_cache_key(const ModelSpec& m, const SpaceGrid& g, const TimeGrid& tg, const HjbOptions& opt) {
    if (opt.terminal) throw ConfigError("surfaces with custom terminal data cannot be cached");
    if (m.source.is_null()) throw ConfigError("model '" + m.name + "' has no canonical description to key a cache");
    std::string s = m.source.dump();
    char buf[64];
    auto add = [&](double v) {
        std::snprintf(buf, sizeof buf, "|%.17g", v);
        s += buf;
    };
    for (int d = 0; d < g.dim(); ++d) add(g.lo()[d]), add(g.hi()[d]), add(g.nodes(d));
    add(tg.horizon), add(tg.steps), add(static_cast<double>(opt.scheme)), add(opt.cfl);
    const auto& h = opt.ham;
    add(h.z_max), add(h.h_max), add(h.k_max), add(h.tol), add(h.max_sweeps), add(h.multistart);
    add(h.nash.tol), add(h.nash.max_sweeps);
    return "pmc-surface-" + hex64(fnv1a(s));
}

namespace detail {

inline void put_raw(std::ostream& os, const void* p, std::size_t n) { os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
inline void put_i64(std::ostream& os, std::int64_t v) { put_raw(os, &v, sizeof v); }
inline void put_f64(std::ostream& os, double v) { put_raw(os, &v, sizeof v); }
inline void put_vec(std::ostream& os, const std::vector<double>& v) {
    put_i64(os, static_cast<std::int64_t>(v.size()));
    put_raw(os, v.data(), v.size() * sizeof(double));
}

inline bool get_raw(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<bool>(is);
}
inline std::int64_t get_i64(std::istream& is) {
    std::int64_t v = 0;
    if (!get_raw(is, &v, sizeof v)) throw DomainError("surface cache truncated");
    return v;
}
inline double get_f64(std::istream& is) {
    double v = 0;
    if (!get_raw(is, &v, sizeof v)) throw DomainError("surface cache truncated");
    return v;
}
inline std::vector<double> get_vec(std::istream& is, std::size_t expect) {
    const std::int64_t n = get_i64(is);
    if (n < 0 || static_cast<std::size_t>(n) != expect) throw DomainError("surface cache has a malformed table");
    std::vector<double> v(static_cast<std::size_t>(n));
    if (!get_raw(is, v.data(), v.size() * sizeof(double))) throw DomainError("surface cache truncated");
    return v;
}

} // namespace detail

/// Binary layout: "PMCVS1", key, dimensions, scalars, tables (native doubles).
inline void save_surface(const ValueSurface& s, const std::string& key, std::ostream& os) {
    detail::put_raw(os, "PMCVS1", 6);
    detail::put_i64(os, static_cast<std::int64_t>(key.size()));
    detail::put_raw(os, key.data(), key.size());
    const int D = s.state_dim;
    for (std::int64_t v : {std::int64_t{D}, std::int64_t{s.agents}, std::int64_t{s.atoms}, std::int64_t{s.action_dim},
                           std::int64_t{s.time.steps}, static_cast<std::int64_t>(s.scheme)})
        detail::put_i64(os, v);
    for (int d = 0; d < D; ++d) {
        detail::put_i64(os, s.grid.nodes(d));
        detail::put_f64(os, s.grid.lo()[d]);
        detail::put_f64(os, s.grid.hi()[d]);
    }
    for (double v : {s.time.horizon, s.cfl_ratio, s.value_at_x0, s.reservation_shift, s.principal_value})
        detail::put_f64(os, v);
    for (std::int64_t v : {std::int64_t{s.boundary_argmax}, std::int64_t{s.budget_warnings}, std::int64_t{s.extrapolated_jumps},
                           std::int64_t{s.skipped_cross_terms}})
        detail::put_i64(os, v);
    for (const auto* t : {&s.v, &s.hval, &s.grad, &s.z, &s.h, &s.chi, &s.a}) detail::put_vec(os, *t);
}

/// The cached surface if the stream holds one with this key, else nullopt.
/// A stream that is not a surface cache at all throws DomainError.
inline std::optional<ValueSurface> load_surface(std::istream& is, const std::string& key, const ModelSpec& m,
                                                const HamiltonianOptions& ham = {}) {
    char magic[6];
    if (!detail::get_raw(is, magic, 6) || std::memcmp(magic, "PMCVS1", 6) != 0) throw DomainError("not a surface cache file");
    const std::int64_t klen = detail::get_i64(is);
    if (klen < 0 || klen > 4096) throw DomainError("surface cache has a malformed key");
    std::string stored(static_cast<std::size_t>(klen), '\0');
    if (!detail::get_raw(is, stored.data(), stored.size())) throw DomainError("surface cache truncated");
    if (stored != key) return std::nullopt;
    ValueSurface s;
    s.model = std::make_shared<const ModelSpec>(m);
    s.ham = ham;
    const int D = static_cast<int>(detail::get_i64(is));
    s.state_dim = D;
    s.agents = static_cast<int>(detail::get_i64(is));
    s.atoms = static_cast<int>(detail::get_i64(is));
    s.action_dim = static_cast<int>(detail::get_i64(is));
    const int M = static_cast<int>(detail::get_i64(is));
    s.scheme = static_cast<TimeScheme>(detail::get_i64(is));
    if (D != m.state_dim() || s.agents != m.agents || s.atoms != m.total_atoms() || s.action_dim != m.action_dim() || M < 1)
        throw DomainError("surface cache does not match the model");
    Vec lo(D), hi(D);
    std::vector<int> n(static_cast<std::size_t>(D));
    for (int d = 0; d < D; ++d) {
        n[static_cast<std::size_t>(d)] = static_cast<int>(detail::get_i64(is));
        lo[d] = detail::get_f64(is);
        hi[d] = detail::get_f64(is);
    }
    s.grid = SpaceGrid(lo, hi, n);
    s.time = TimeGrid(detail::get_f64(is), M);
    s.cfl_ratio = detail::get_f64(is);
    s.value_at_x0 = detail::get_f64(is);
    s.reservation_shift = detail::get_f64(is);
    s.principal_value = detail::get_f64(is);
    s.boundary_argmax = static_cast<int>(detail::get_i64(is));
    s.budget_warnings = static_cast<int>(detail::get_i64(is));
    s.extrapolated_jumps = static_cast<int>(detail::get_i64(is));
    s.skipped_cross_terms = static_cast<int>(detail::get_i64(is));
    const std::size_t T = static_cast<std::size_t>(M + 1) * static_cast<std::size_t>(s.grid.size());
    const std::size_t N = static_cast<std::size_t>(s.agents);
    s.v = detail::get_vec(is, T);
    s.hval = detail::get_vec(is, T);
    s.grad = detail::get_vec(is, T * D);
    s.z = detail::get_vec(is, T * N * D);
    s.h = detail::get_vec(is, T * N * s.atoms);
    s.chi = detail::get_vec(is, T * N);
    s.a = detail::get_vec(is, T * s.action_dim);
    return s;
}

/// Scalar integral operator at grid node j of a slice (far-field rule outside the box).
inline double integral_operator_apply(const ModelSpec& m, const SpaceGrid& g, const std::vector<double>& slice, long j) {
    if (static_cast<long>(slice.size()) != g.size()) throw DomainError("slice size does not match the grid");
    if (j < 0 || j >= g.size()) throw DomainError("node index outside the grid");
    const Vec x = g.point(j);
    double s = 0.0;
    std::vector<std::pair<long, double>> st;
    for (const auto& at : detail::mass_atoms(m, 0.0, x)) {
        const Vec target = x + embed_block(m, at.agent, m.jumps[static_cast<std::size_t>(at.agent)].size(0.0, x, at.mark));
        g.stencil(target, st);
        double vt = g.contains(target) ? 0.0 : m.principal.liquidation(target) - m.principal.liquidation(g.clamp(target));
        for (const auto& [n, w] : st) vt += w * slice[static_cast<std::size_t>(n)];
        s += at.weight * (vt - slice[static_cast<std::size_t>(j)]);
    }
    return s;
}

} // namespace pmc
