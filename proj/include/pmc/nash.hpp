#pragma once
// Agents' BSDE generators, the pointwise Nash best-response fixed point and
// the principal's Hamiltonian.
//
//   f^i = u_A(k) - c(a) - rho(k,a) y^i + z^{i,:} Sigma b(a) + sum_l sum_j h^{i,l,j} m^l_j(a)
//   g^i = rho(k,a)/R + z^{i,:} Sigma b(a) - R |z^{i,:} Sigma|^2 / 2 + sum_l sum_j (1 - e^{R h^{i,l,j}}) m^l_j(a) / R
//   phi = sum_i [rho^i/R^i - R^i |z^{i,:} Sigma|^2 / 2] - u_P(k)
//         + sum_{i,l,j} ((1 - e^{R h})/R + h) m^l_j(a*)
//
// where m^l_j(a) = lambda^l(t,x,a,e_j) w_j is the eta-kernel mass of atom j
// of agent l (atoms with vanishing jump size carry no mass).

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pmc/model.hpp"
#include "pmc/optimize.hpp"

namespace pmc {

enum class GeneratorMode { general_f, cara_g };

/// One candidate principal control (z, h, k).
struct ControlPoint {
    Mat z;  // N x dN
    Mat h;  // N x total_atoms; column atom_offset(l) + j is atom j of F^l
    Vec k;  // N, componentwise >= 0

    static ControlPoint zero(const ModelSpec& m) {
        return {Mat::Zero(m.agents, m.state_dim()), Mat::Zero(m.agents, m.total_atoms()), Vec::Zero(m.agents)};
    }
};

namespace detail {

struct MassAtom {
    int agent = 0;   // l
    int column = 0;  // column in the h table
    double mark = 0.0;
    double weight = 0.0;
};

/// Atoms of every F^l that carry eta-mass at (t, x).
inline std::vector<MassAtom> mass_atoms(const ModelSpec& m, double t, const Vec& x) {
    std::vector<MassAtom> out;
    for (int l = 0; l < m.agents; ++l) {
        const auto& js = m.jumps[static_cast<std::size_t>(l)];
        for (std::size_t j = 0; j < js.atoms.size(); ++j) {
            const auto& at = js.atoms[j];
            if (at.weight == 0.0 || is_zero(js.size(t, x, at.mark))) continue;
            out.push_back({l, m.atom_offset(l) + static_cast<int>(j), at.mark, at.weight});
        }
    }
    return out;
}

inline double intensity_checked(const ModelSpec& m, const MassAtom& at, double t, const Vec& x, const Vec& a) {
    const double lam = m.jumps[static_cast<std::size_t>(at.agent)].intensity(t, x, a, at.mark);
    if (!(lam > 0.0))
        throw ModelError("intensity lambda^" + std::to_string(at.agent) + " is " + std::to_string(lam) + " at mark " +
                         std::to_string(at.mark) + "; intensities must be strictly positive");
    return lam;
}

inline double exp_rh(double ra, double h, int i, const MassAtom& at) {
    if (std::abs(ra * h) > 700.0)
        throw DomainError("exp(R_A h) overflows for agent " + std::to_string(i) + " at h column " +
                          std::to_string(at.column) + " (mark " + std::to_string(at.mark) + ", R_A h = " +
                          std::to_string(ra * h) + ")");
    return std::exp(ra * h);
}

} // namespace detail

/// The map a -> (f^i or g^i)(a) for all agents at a fixed (t, x, y, cp).
class AgentObjective {
public:
    AgentObjective(const ModelSpec& m, double t, const Vec& x, const Vec& y, const ControlPoint& cp, GeneratorMode mode)
        : m_(m), t_(t), x_(x), y_(y), k_(cp.k), mode_(mode), atoms_(detail::mass_atoms(m, t, x)) {
        const int N = m.agents;
        if (cp.z.rows() != N || cp.z.cols() != m.state_dim() || cp.h.rows() != N || cp.h.cols() != m.total_atoms() ||
            cp.k.size() != N)
            throw DomainError("control point has the wrong shape for model '" + m.name + "'");
        if (mode == GeneratorMode::general_f && y.size() != N) throw DomainError("general_f mode needs y in R^N");
        zs_ = cp.z * m.sigma(t, x);
        coef_.assign(static_cast<std::size_t>(N), std::vector<double>(atoms_.size(), 0.0));
        konst_.assign(static_cast<std::size_t>(N), 0.0);
        for (int i = 0; i < N; ++i) {
            const auto& ag = m.agent[static_cast<std::size_t>(i)];
            auto& c = coef_[static_cast<std::size_t>(i)];
            if (mode == GeneratorMode::cara_g) {
                if (!ag.cara) throw ModelError("cara_g mode needs the CARA flag on agent " + std::to_string(i));
                const double R = ag.risk_aversion;
                for (std::size_t j = 0; j < atoms_.size(); ++j)
                    c[j] = (1.0 - detail::exp_rh(R, cp.h(i, atoms_[j].column), i, atoms_[j])) / R * atoms_[j].weight;
                konst_[static_cast<std::size_t>(i)] = -0.5 * R * zs_.row(i).squaredNorm();
            } else {
                for (std::size_t j = 0; j < atoms_.size(); ++j) c[j] = cp.h(i, atoms_[j].column) * atoms_[j].weight;
                konst_[static_cast<std::size_t>(i)] = ag.flow_utility(cp.k);
            }
        }
    }

    /// Generator of agent i at joint action a.
    double operator()(int i, const Vec& a) const {
        const auto& ag = m_.agent[static_cast<std::size_t>(i)];
        const Vec b = m_.drift(t_, x_, a);
        double v = konst_[static_cast<std::size_t>(i)] + zs_.row(i).dot(b);
        const double rho = ag.discount(t_, x_, k_, a);
        if (mode_ == GeneratorMode::cara_g)
            v += rho / ag.risk_aversion;
        else
            v += -ag.cost(t_, x_, a) - rho * y_[i];
        const auto& c = coef_[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < atoms_.size(); ++j)
            if (c[j] != 0.0) v += c[j] * detail::intensity_checked(m_, atoms_[j], t_, x_, a);
        return v;
    }

    const std::vector<detail::MassAtom>& atoms() const { return atoms_; }

private:
    const ModelSpec& m_;
    double t_;
    Vec x_, y_, k_;
    GeneratorMode mode_;
    std::vector<detail::MassAtom> atoms_;
    Mat zs_;
    std::vector<std::vector<double>> coef_;
    std::vector<double> konst_;
};

inline double agent_generator_f(const ModelSpec& m, int i, double t, const Vec& x, const Vec& y, const ControlPoint& cp,
                                const Vec& a) {
    return AgentObjective(m, t, x, y, cp, GeneratorMode::general_f)(i, a);
}

inline double agent_generator_g(const ModelSpec& m, int i, double t, const Vec& x, const ControlPoint& cp, const Vec& a) {
    return AgentObjective(m, t, x, Vec::Zero(m.agents), cp, GeneratorMode::cara_g)(i, a);
}

// ---------------------------------------------------------------------------
// Best response

struct NashOptions {
    /// Sup-norm change of a across a sweep that counts as converged; Brent
    /// locates a smooth maximum only to about sqrt(machine eps).
    double tol = 1e-7;
    int max_sweeps = 200;
    Max1DOptions line{};
    /// Compute the grid certificate (residual); inner calls skip it.
    bool certify = true;
    int certify_points = 101;
};

struct BestResponse {
    Vec a;
    Vec values;          // f^i or g^i at a*
    int iterations = 0;  // sweeps that moved the iterate by at least tol
    double residual = 0.0;
    bool near_tie = false;
};

namespace detail {

/// max over each agent coordinate of (grid max - value at a*), clipped at 0.
inline double certificate(const ModelSpec& m, const AgentObjective& obj, const Vec& a, int points) {
    double res = 0.0;
    for (int i = 0; i < m.agents; ++i) {
        const double at = obj(i, a);
        const int off = m.actions.offset(i);
        for (int c = 0; c < m.actions.dim(i); ++c) {
            const double lo = m.actions.lower[static_cast<std::size_t>(i)][c];
            const double hi = m.actions.upper[static_cast<std::size_t>(i)][c];
            Vec b = a;
            for (int g = 0; g < points; ++g) {
                b[off + c] = points == 1 ? lo : lo + (hi - lo) * g / (points - 1);
                res = std::max(res, obj(i, b) - at);
            }
        }
    }
    return res;
}

} // namespace detail

/// Gauss-Seidel best-response sweeps over the agents; each agent's box
/// problem is solved by grid scan + Brent per coordinate (coordinate ascent
/// when the agent's action is multi-dimensional).
inline BestResponse best_response_fixed_point(const ModelSpec& m, double t, const Vec& x, const Vec& y,
                                              const ControlPoint& cp, GeneratorMode mode, const NashOptions& opt = {},
                                              const Vec* warm = nullptr) {
    const AgentObjective obj(m, t, x, y, cp, mode);
    const int N = m.agents;
    BestResponse br;
    Vec a = warm ? m.actions.project(*warm) : m.actions.center();
    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        const Vec before = a;
        for (int i = 0; i < N; ++i) {
            const int off = m.actions.offset(i), dim = m.actions.dim(i);
            const auto& lo = m.actions.lower[static_cast<std::size_t>(i)];
            const auto& hi = m.actions.upper[static_cast<std::size_t>(i)];
            for (int round = 0; round < 100; ++round) {
                double moved = 0.0;
                for (int c = 0; c < dim; ++c) {
                    Vec trial = a;
                    auto f = [&](double v) {
                        trial[off + c] = v;
                        return obj(i, trial);
                    };
                    Max1D r = maximize_1d(f, lo[c], hi[c], opt.line);
                    br.near_tie = br.near_tie || r.near_tie;
                    moved = std::max(moved, std::abs(r.x - a[off + c]));
                    a[off + c] = r.x;
                }
                if (dim == 1 || moved < opt.tol) break;
            }
        }
        const double change = (a - before).cwiseAbs().maxCoeff();
        if (change >= opt.tol) ++br.iterations;
        if (change < opt.tol || N == 1) {
            br.a = a;
            br.values.resize(N);
            for (int i = 0; i < N; ++i) br.values[i] = obj(i, a);
            if (opt.certify) br.residual = detail::certificate(m, obj, a, opt.certify_points);
            return br;
        }
    }
    const double residual = detail::certificate(m, obj, a, opt.certify_points);
    throw SolverError("best-response iteration did not converge after " + std::to_string(opt.max_sweeps) +
                      " sweeps at t=" + std::to_string(t) + ", x=" + detail::fmt_vec(x) + "; last iterate a=" +
                      detail::fmt_vec(a) + ", residual " + std::to_string(residual) +
                      " (the best-response map may not have a unique fixed point)");
}

/// Generator values at the Nash fixed point a*.
inline Vec F_G_eval(const ModelSpec& m, double t, const Vec& x, const Vec& y, const ControlPoint& cp, GeneratorMode mode,
                    const NashOptions& opt = {}) {
    return best_response_fixed_point(m, t, x, y, cp, mode, opt).values;
}

// ---------------------------------------------------------------------------
// phi and the principal's Hamiltonian

namespace detail {

inline void require_cara_risk_neutral(const ModelSpec& m) {
    if (!m.all_cara() || !m.principal.risk_neutral)
        throw ModelError("model '" + m.name + "': the principal's Hamiltonian needs CARA agents and a risk-neutral principal");
}

/// phi at a given a (no best response).
inline double phi_at(const ModelSpec& m, double t, const Vec& x, const ControlPoint& cp, const Vec& a,
                     const std::vector<MassAtom>& atoms, const Mat& zs) {
    double v = -m.principal.flow_disutility(cp.k);
    std::vector<double> mass(atoms.size());
    for (std::size_t j = 0; j < atoms.size(); ++j) mass[j] = atoms[j].weight * intensity_checked(m, atoms[j], t, x, a);
    for (int i = 0; i < m.agents; ++i) {
        const auto& ag = m.agent[static_cast<std::size_t>(i)];
        const double R = ag.risk_aversion;
        v += ag.discount(t, x, cp.k, a) / R - 0.5 * R * zs.row(i).squaredNorm();
        for (std::size_t j = 0; j < atoms.size(); ++j) {
            const double h = cp.h(i, atoms[j].column);
            v += ((1.0 - exp_rh(R, h, i, atoms[j])) / R + h) * mass[j];
        }
    }
    return v;
}

} // namespace detail

struct PhiValue {
    double value = 0.0;
    Vec a;  // a* at which phi was evaluated
};

inline PhiValue phi_eval(const ModelSpec& m, double t, const Vec& x, const ControlPoint& cp, const NashOptions& opt = {}) {
    detail::require_cara_risk_neutral(m);
    NashOptions inner = opt;
    inner.certify = false;
    auto br = best_response_fixed_point(m, t, x, Vec::Zero(m.agents), cp, GeneratorMode::cara_g, inner);
    const Mat zs = cp.z * m.sigma(t, x);
    return {detail::phi_at(m, t, x, cp, br.a, detail::mass_atoms(m, t, x), zs), br.a};
}

struct HamiltonianOptions {
    double z_max = 10.0;
    double h_max = 5.0;
    double k_max = 10.0;
    double tol = 1e-10;
    int max_sweeps = 50;
    /// Halton starts used when the problem is not known to be concave.
    int multistart = 4;
    Max1DOptions line{};
    NashOptions nash{};
};

struct HamiltonianResult {
    double value = -std::numeric_limits<double>::infinity();
    ControlPoint cp;
    Vec a;
    int evaluations = 0;
    /// Sweep budget ran out while still improving: value is a lower bound.
    bool budget_warning = false;
    bool near_tie = false;
    /// Some coordinate of the argmax sits on the search box.
    bool at_boundary = false;
};

/// Structure of the sup over (z, h, k) for one model, computed once.
class HamiltonianProblem {
public:
    explicit HamiltonianProblem(const ModelSpec& m, HamiltonianOptions opt = {})
        : m_(m), opt_(opt), concave_(mark_independent_intensity(m)), flow_trivial_(flow_payments_trivial(m)) {
        detail::require_cara_risk_neutral(m);
        opt_.nash.certify = false;
    }

    const ModelSpec& model() const { return m_; }
    const HamiltonianOptions& options() const { return opt_; }
    bool concave() const { return concave_; }
    bool flow_payments_fixed() const { return flow_trivial_; }

    /// h_t(x, p, z, h, k, a*) = phi + p . Sigma b(a*); with psi set, p is
    /// zeta in R^n and the drift term is zeta . b(a*).
    double objective(double t, const Vec& x, const Vec& p, const ControlPoint& cp, bool psi = false,
                     Vec* a_out = nullptr) const {
        const Mat S = m_.sigma(t, x);
        return objective_at(t, x, p, cp, psi, S, detail::mass_atoms(m_, t, x), a_out);
    }

    /// sup over the search box. `warm` (a previous result at a nearby point)
    /// switches concave problems to local line searches.
    HamiltonianResult sup(double t, const Vec& x, const Vec& p, const HamiltonianResult* warm = nullptr,
                          bool psi = false) const {
        const int N = m_.agents, D = m_.state_dim();
        if (p.size() != (psi ? m_.noise_dim : D)) throw DomainError("hamiltonian_sup: p has the wrong dimension");
        const Mat S = m_.sigma(t, x);
        const auto atoms = detail::mass_atoms(m_, t, x);

        // Active coordinates of theta.
        struct Coord {
            int kind;  // 0 z, 1 h, 2 k
            int row, col;
            double lo, hi;
        };
        std::vector<Coord> coords;
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < D; ++c)
                if (!is_zero(Vec(S.row(c).transpose()))) coords.push_back({0, i, c, -opt_.z_max, opt_.z_max});
        for (int i = 0; i < N; ++i)
            for (const auto& at : atoms) coords.push_back({1, i, at.column, -opt_.h_max, opt_.h_max});
        if (!flow_trivial_)
            for (int i = 0; i < N; ++i) coords.push_back({2, i, 0, 0.0, opt_.k_max});

        ControlPoint cp = ControlPoint::zero(m_);
        auto get = [&](const ControlPoint& c, const Coord& q) -> double {
            return q.kind == 0 ? c.z(q.row, q.col) : q.kind == 1 ? c.h(q.row, q.col) : c.k[q.row];
        };
        auto set = [&](ControlPoint& c, const Coord& q, double v) {
            if (q.kind == 0) c.z(q.row, q.col) = v;
            else if (q.kind == 1) c.h(q.row, q.col) = v;
            else c.k[q.row] = v;
        };
        if (warm && warm->cp.z.rows() == N)
            for (const auto& q : coords) set(cp, q, std::clamp(get(warm->cp, q), q.lo, q.hi));

        HamiltonianResult res;
        auto eval = [&](const ControlPoint& c) {
            ++res.evaluations;
            return objective_at(t, x, p, c, psi, S, atoms, nullptr);
        };

        auto ascend = [&](ControlPoint& c, double& fc, bool global_first) {
            bool improving = true;
            for (int sweep = 0; sweep < opt_.max_sweeps; ++sweep) {
                const double start = fc;
                double moved = 0.0;
                for (const auto& q : coords) {
                    ControlPoint trial = c;
                    auto f = [&](double v) {
                        set(trial, q, v);
                        return eval(trial);
                    };
                    const double x0 = get(c, q);
                    Max1D r;
                    if (global_first && sweep == 0) {
                        r = maximize_1d(f, q.lo, q.hi, opt_.line);
                        res.near_tie = res.near_tie || r.near_tie;
                        if (!(r.f > fc)) {
                            r.x = x0;
                            r.f = fc;
                        }
                    } else {
                        r = maximize_1d_local(f, q.lo, q.hi, x0, fc, 0.02 * (q.hi - q.lo), opt_.line);
                    }
                    moved = std::max(moved, std::abs(r.x - x0));
                    set(c, q, r.x);
                    fc = r.f;
                }
                improving = fc - start > opt_.tol * (1.0 + std::abs(fc)) || moved > std::sqrt(opt_.tol);
                if (!improving) return true;
                if (coords.size() == 1 && !(global_first && sweep == 0)) return true;
            }
            return !improving;
        };

        double fbest = eval(cp);
        bool converged = true;
        if (!coords.empty()) {
            const bool local = concave_ && warm != nullptr;
            converged = ascend(cp, fbest, !local);
            if (!concave_) {
                Vec lo(static_cast<Eigen::Index>(coords.size())), hi(lo.size());
                for (std::size_t c = 0; c < coords.size(); ++c) {
                    lo[static_cast<Eigen::Index>(c)] = coords[c].lo;
                    hi[static_cast<Eigen::Index>(c)] = coords[c].hi;
                }
                for (const Vec& start : halton_points(lo, hi, opt_.multistart)) {
                    ControlPoint c2 = ControlPoint::zero(m_);
                    for (std::size_t c = 0; c < coords.size(); ++c) set(c2, coords[c], start[static_cast<Eigen::Index>(c)]);
                    double f2 = eval(c2);
                    bool conv2 = ascend(c2, f2, false);
                    if (f2 > fbest) {
                        fbest = f2;
                        cp = c2;
                        converged = conv2;
                    }
                }
                Vec th(lo.size());
                for (std::size_t c = 0; c < coords.size(); ++c) th[static_cast<Eigen::Index>(c)] = get(cp, coords[c]);
                auto fv = [&](const Vec& v) {
                    ControlPoint c3 = cp;
                    for (std::size_t c = 0; c < coords.size(); ++c) set(c3, coords[c], v[static_cast<Eigen::Index>(c)]);
                    return eval(c3);
                };
                auto nm = nelder_mead_max(fv, th, lo, hi, 0.05 * (hi - lo).maxCoeff(), opt_.tol, 200 * static_cast<int>(th.size() + 1));
                if (nm.f > fbest) {
                    fbest = nm.f;
                    for (std::size_t c = 0; c < coords.size(); ++c) set(cp, coords[c], nm.x[static_cast<Eigen::Index>(c)]);
                }
            }
        }
        res.budget_warning = !converged;
        for (const auto& q : coords) {
            const double v = get(cp, q);
            if ((v <= q.lo && q.kind != 2) || v >= q.hi) res.at_boundary = true;
        }
        res.value = objective_at(t, x, p, cp, psi, S, atoms, &res.a);
        res.cp = std::move(cp);
        return res;
    }

private:
    double objective_at(double t, const Vec& x, const Vec& p, const ControlPoint& cp, bool psi, const Mat& S,
                        const std::vector<detail::MassAtom>& atoms, Vec* a_out) const {
        auto br = best_response_fixed_point(m_, t, x, Vec::Zero(m_.agents), cp, GeneratorMode::cara_g, opt_.nash);
        const Mat zs = cp.z * S;
        const Vec b = m_.drift(t, x, br.a);
        const double drift = psi ? p.dot(b) : p.dot(S * b);
        if (a_out) *a_out = br.a;
        return detail::phi_at(m_, t, x, cp, br.a, atoms, zs) + drift;
    }

    const ModelSpec& m_;
    HamiltonianOptions opt_;
    bool concave_;
    bool flow_trivial_;
};

/// H_t(x, p) (or psi(t, x, zeta) with psi set) with its argmax.
inline HamiltonianResult hamiltonian_sup(const ModelSpec& m, double t, const Vec& x, const Vec& p,
                                         const HamiltonianOptions& opt = {}, bool psi = false) {
    return HamiltonianProblem(m, opt).sup(t, x, p, nullptr, psi);
}

} // namespace pmc
