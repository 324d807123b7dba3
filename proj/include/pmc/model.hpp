#pragma once
// Problem instances of the principal / multi-agent contracting model.
//
// Output dynamics under the action process alpha:
//
//   dX = Sigma(t,X) b(t,X,alpha) dt + Sigma(t,X) dW^alpha
//        + sum_i I_i[ beta^i(t,X,e) ] mu_{J^i}(dt,de)
//
// where mu_{J^i} has compensator lambda^i(t,X,alpha,e) F^i(de) dt. The state
// has dimension D = d N; agent i owns the i-th block of d coordinates.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmc/error.hpp"

namespace pmc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Per-agent action boxes A_i; the joint action is their concatenation.
struct ActionSpace {
    std::vector<Vec> lower;
    std::vector<Vec> upper;

    int agents() const { return static_cast<int>(lower.size()); }
    int dim(int i) const { return static_cast<int>(lower[static_cast<std::size_t>(i)].size()); }
    int offset(int i) const {
        int off = 0;
        for (int j = 0; j < i; ++j) off += dim(j);
        return off;
    }
    int total_dim() const { return offset(agents()); }

    Vec joint_lower() const { return concat(lower); }
    Vec joint_upper() const { return concat(upper); }
    Vec center() const { return 0.5 * (joint_lower() + joint_upper()); }

    Vec project(const Vec& a) const {
        return a.cwiseMax(joint_lower()).cwiseMin(joint_upper());
    }
    bool contains(const Vec& a, double tol = 0.0) const {
        if (a.size() != total_dim()) return false;
        Vec lo = joint_lower(), hi = joint_upper();
        for (Eigen::Index c = 0; c < a.size(); ++c)
            if (!(a[c] >= lo[c] - tol && a[c] <= hi[c] + tol)) return false;
        return true;
    }

private:
    static Vec concat(const std::vector<Vec>& parts) {
        Eigen::Index n = 0;
        for (const auto& p : parts) n += p.size();
        Vec out(n);
        Eigen::Index off = 0;
        for (const auto& p : parts) {
            out.segment(off, p.size()) = p;
            off += p.size();
        }
        return out;
    }
};

/// One atom (mark, weight) of the discretized mark measure F^i.
struct MarkAtom {
    double mark = 0.0;
    double weight = 0.0;
    /// Atom whose jump size may vanish; it never contributes to eta.
    bool inert = false;
};

struct JumpSpec {
    std::vector<MarkAtom> atoms;
    /// beta^i(t, x, e) in R^d.
    std::function<Vec(double, const Vec&, double)> size;
    /// lambda^i(t, x, a, e) > 0, a the joint action.
    std::function<double(double, const Vec&, const Vec&, double)> intensity;

    bool active() const { return !atoms.empty(); }
    double total_weight() const {
        double s = 0.0;
        for (const auto& at : atoms) s += at.weight;
        return s;
    }
};

struct AgentSpec {
    /// rho^i(t, x, k, a).
    std::function<double(double, const Vec&, const Vec&, const Vec&)> discount;
    /// c^i(t, x, a).
    std::function<double(double, const Vec&, const Vec&)> cost;
    /// u_A^i(k).
    std::function<double(const Vec&)> flow_utility;
    std::function<double(double)> terminal_utility;
    std::function<double(double)> terminal_utility_inverse;
    bool cara = false;
    double risk_aversion = 0.0;
    double reservation = 0.0;
    /// Points where the utility round trip and monotonicity are probed.
    std::vector<double> utility_probes{-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0};
};

struct PrincipalSpec {
    std::function<double(const Vec&)> liquidation;
    std::function<double(double)> terminal_utility;
    std::function<double(const Vec&)> flow_disutility;
    std::function<double(double, const Vec&)> discount;
    bool risk_neutral = false;
};

struct ModelSpec {
    std::string name;
    int agents = 1;      // N
    int block_dim = 1;   // d
    int noise_dim = 1;   // n
    double horizon = 1.0;
    Vec x0;
    /// User-declared state box used for validation probes and default grids.
    Vec box_lo;
    Vec box_hi;
    ActionSpace actions;
    std::function<Mat(double, const Vec&)> sigma;
    std::function<Vec(double, const Vec&, const Vec&)> drift;
    std::vector<JumpSpec> jumps;
    std::vector<AgentSpec> agent;
    PrincipalSpec principal;
    /// Canonical description this model was built from (builtin or expression spec).
    nlohmann::json source;

    int state_dim() const { return agents * block_dim; }
    int action_dim() const { return actions.total_dim(); }
    /// Number of mark atoms of F^l, and the column offset of agent l's atoms in h-tables.
    int atom_count(int l) const {
        return static_cast<int>(jumps[static_cast<std::size_t>(l)].atoms.size());
    }
    int atom_offset(int l) const {
        int off = 0;
        for (int j = 0; j < l; ++j) off += atom_count(j);
        return off;
    }
    int total_atoms() const { return atom_offset(agents); }

    bool all_cara() const {
        for (const auto& a : agent)
            if (!a.cara) return false;
        return true;
    }
    bool has_jumps() const { return total_atoms() > 0; }
    double total_jump_weight() const {
        double s = 0.0;
        for (const auto& j : jumps) s += j.total_weight();
        return s;
    }
};

using ModelPtr = std::shared_ptr<const ModelSpec>;

/// Embed a block-d vector into the l-th block of R^{dN}.
inline Vec embed_block(const ModelSpec& m, int l, const Vec& v) {
    Vec out = Vec::Zero(m.state_dim());
    out.segment(static_cast<Eigen::Index>(l) * m.block_dim, m.block_dim) = v;
    return out;
}

// ---------------------------------------------------------------------------
// Kernels

struct KernelAtom {
    int atom = 0;   // index into F^i's atom list
    Vec size;       // beta^i(t,x,e_j)
    double mass = 0.0;
};

inline bool is_zero(const Vec& v) { return v.size() == 0 || v.cwiseAbs().maxCoeff() == 0.0; }

/// eta^{i,a}_t(x, .) as a finite list of atoms; zero-size atoms are dropped.
inline std::vector<KernelAtom> eta_kernel(const ModelSpec& m, double t, const Vec& x, const Vec& a, int i) {
    const auto& js = m.jumps.at(static_cast<std::size_t>(i));
    std::vector<KernelAtom> out;
    out.reserve(js.atoms.size());
    for (std::size_t j = 0; j < js.atoms.size(); ++j) {
        const auto& at = js.atoms[j];
        if (at.weight == 0.0) continue;
        double lam = js.intensity(t, x, a, at.mark);
        if (!(lam > 0.0))
            throw ModelError("intensity lambda^" + std::to_string(i) + " is " + std::to_string(lam) +
                             " at atom " + std::to_string(j) + " (mark " + std::to_string(at.mark) +
                             "); intensities must be strictly positive");
        Vec beta = js.size(t, x, at.mark);
        if (is_zero(beta)) continue;
        out.push_back({static_cast<int>(j), std::move(beta), lam * at.weight});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationIssue {
    std::string invariant;
    std::string detail;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;
    bool usable() const { return issues.empty(); }
    std::string summary() const {
        std::string s;
        for (const auto& is : issues) s += is.invariant + ": " + is.detail + "\n";
        return s;
    }
};

namespace detail {

inline std::string fmt_vec(const Vec& v) {
    std::string s = "(";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(v[i]);
    }
    return s + ")";
}

/// 3^D lattice (lo, mid, hi) over the state box.
inline std::vector<Vec> state_probes(const ModelSpec& m) {
    const int D = m.state_dim();
    std::vector<Vec> out;
    int total = 1;
    for (int d = 0; d < D; ++d) total *= 3;
    for (int idx = 0; idx < total; ++idx) {
        Vec x(D);
        int r = idx;
        for (int d = 0; d < D; ++d) {
            int c = r % 3;
            r /= 3;
            x[d] = m.box_lo[d] + 0.5 * c * (m.box_hi[d] - m.box_lo[d]);
        }
        out.push_back(x);
    }
    return out;
}

/// Corners of the joint action box plus its center.
inline std::vector<Vec> action_probes(const ModelSpec& m) {
    Vec lo = m.actions.joint_lower(), hi = m.actions.joint_upper();
    const int A = static_cast<int>(lo.size());
    std::vector<Vec> out;
    const int corners = A <= 12 ? (1 << A) : 0;
    for (int mask = 0; mask < corners; ++mask) {
        Vec a(A);
        for (int c = 0; c < A; ++c) a[c] = (mask >> c) & 1 ? hi[c] : lo[c];
        out.push_back(a);
    }
    out.push_back(0.5 * (lo + hi));
    return out;
}

inline std::vector<Vec> flow_probes(const ModelSpec& m) {
    std::vector<Vec> out{Vec::Zero(m.agents), Vec::Ones(m.agents)};
    for (int i = 0; i < m.agents; ++i) out.push_back(Vec::Unit(m.agents, i));
    return out;
}

inline void require_finite(double v, const std::string& coef, const std::string& where) {
    if (!std::isfinite(v))
        throw ModelError("coefficient " + coef + " is not finite (" + std::to_string(v) + ") at " + where);
}
inline void require_finite(const Vec& v, const std::string& coef, const std::string& where) {
    for (Eigen::Index i = 0; i < v.size(); ++i) require_finite(v[i], coef, where);
}
inline void require_finite(const Mat& v, const std::string& coef, const std::string& where) {
    for (Eigen::Index i = 0; i < v.size(); ++i) require_finite(v.data()[i], coef, where);
}

} // namespace detail

/// Check the structural invariants of a model on a deterministic probe set.
/// Non-finite coefficient values throw ModelError; every other failed
/// invariant is listed in the report.
inline ValidationReport validate(const ModelSpec& m) {
    ValidationReport rep;
    auto issue = [&](std::string inv, std::string det) { rep.issues.push_back({std::move(inv), std::move(det)}); };

    const int N = m.agents, D = m.state_dim();
    if (N < 1 || m.block_dim < 1 || m.noise_dim < 1) {
        issue("dimensions", "N, d and n must all be positive");
        return rep;
    }
    if (!(m.horizon > 0.0) || !std::isfinite(m.horizon)) issue("horizon", "T must be positive and finite");
    if (m.x0.size() != D) issue("dimensions", "X_0 has size " + std::to_string(m.x0.size()) + ", expected dN = " + std::to_string(D));
    if (m.box_lo.size() != D || m.box_hi.size() != D) {
        issue("state box", "state box must have dN components");
        return rep;
    }
    for (int d = 0; d < D; ++d)
        if (!(m.box_lo[d] < m.box_hi[d])) issue("state box", "lo >= hi in coordinate " + std::to_string(d));
    if (m.actions.agents() != N || static_cast<int>(m.actions.upper.size()) != N)
        issue("action space", "need one action box per agent");
    if (static_cast<int>(m.jumps.size()) != N) issue("jumps", "need one JumpSpec per agent (possibly empty)");
    if (static_cast<int>(m.agent.size()) != N) issue("agents", "need one AgentSpec per agent");
    if (!m.sigma || !m.drift) issue("coefficients", "Sigma and b must be provided");
    if (!m.principal.liquidation || !m.principal.terminal_utility || !m.principal.flow_disutility || !m.principal.discount)
        issue("principal", "liquidation L, U_P, u_P and r must all be provided");
    if (!rep.usable()) return rep;

    for (int i = 0; i < N; ++i) {
        const auto& lo = m.actions.lower[static_cast<std::size_t>(i)];
        const auto& hi = m.actions.upper[static_cast<std::size_t>(i)];
        if (lo.size() != hi.size() || lo.size() == 0) {
            issue("action space", "agent " + std::to_string(i) + " box bounds have mismatched or zero size");
            continue;
        }
        for (Eigen::Index c = 0; c < lo.size(); ++c) {
            if (!std::isfinite(lo[c]) || !std::isfinite(hi[c]))
                issue("action space", "agent " + std::to_string(i) + " bound " + std::to_string(c) + " is not finite");
            else if (lo[c] > hi[c])
                issue("action space", "agent " + std::to_string(i) + " lower > upper in coordinate " + std::to_string(c));
        }
    }
    if (!rep.usable()) return rep;

    const auto xs = detail::state_probes(m);
    const auto as = detail::action_probes(m);
    const auto ks = detail::flow_probes(m);
    const std::vector<double> ts{0.0, 0.5 * m.horizon, m.horizon};

    for (double t : ts) {
        for (const auto& x : xs) {
            const std::string where = "t=" + std::to_string(t) + ", x=" + detail::fmt_vec(x);
            Mat S = m.sigma(t, x);
            detail::require_finite(S, "Sigma", where);
            if (S.rows() != D || S.cols() != m.noise_dim) {
                issue("dimensions", "Sigma is " + std::to_string(S.rows()) + "x" + std::to_string(S.cols()) +
                                        ", expected " + std::to_string(D) + "x" + std::to_string(m.noise_dim));
                return rep;
            }
            double r = m.principal.discount(t, x);
            detail::require_finite(r, "r", where);
            if (r < 0.0) issue("principal discount", "r < 0 at " + where);
            if (m.principal.risk_neutral && r != 0.0) issue("risk-neutral principal", "r != 0 at " + where);

            for (const auto& a : as) {
                const std::string wa = where + ", a=" + detail::fmt_vec(a);
                Vec b = m.drift(t, x, a);
                detail::require_finite(b, "b", wa);
                if (b.size() != m.noise_dim) {
                    issue("dimensions", "b has size " + std::to_string(b.size()) + ", expected n = " + std::to_string(m.noise_dim));
                    return rep;
                }
                for (int i = 0; i < N; ++i) {
                    const auto& ag = m.agent[static_cast<std::size_t>(i)];
                    const std::string tag = std::to_string(i);
                    double c = ag.cost(t, x, a);
                    detail::require_finite(c, "c^" + tag, wa);
                    if (ag.cara && c != 0.0) issue("CARA consistency", "agent " + tag + " has CARA flag but c != 0 at " + wa);
                    for (const auto& k : ks) {
                        double rho = ag.discount(t, x, k, a);
                        detail::require_finite(rho, "rho^" + tag, wa + ", k=" + detail::fmt_vec(k));
                    }
                    const auto& js = m.jumps[static_cast<std::size_t>(i)];
                    for (std::size_t j = 0; j < js.atoms.size(); ++j) {
                        const auto& at = js.atoms[j];
                        const std::string wj = wa + ", atom " + std::to_string(j);
                        double lam = js.intensity(t, x, a, at.mark);
                        detail::require_finite(lam, "lambda^" + tag, wj);
                        if (!(lam > 0.0)) issue("jump intensity", "lambda^" + tag + " <= 0 at " + wj);
                    }
                }
            }
            for (int i = 0; i < N; ++i) {
                const auto& js = m.jumps[static_cast<std::size_t>(i)];
                const std::string tag = std::to_string(i);
                for (std::size_t j = 0; j < js.atoms.size(); ++j) {
                    const auto& at = js.atoms[j];
                    const std::string wj = where + ", atom " + std::to_string(j);
                    if (!std::isfinite(at.weight) || at.weight < 0.0) issue("mark measure", "negative or non-finite weight for agent " + tag + " atom " + std::to_string(j));
                    Vec beta = js.size(t, x, at.mark);
                    detail::require_finite(beta, "beta^" + tag, wj);
                    if (beta.size() != m.block_dim) {
                        issue("dimensions", "beta^" + tag + " has size " + std::to_string(beta.size()) + ", expected d");
                        return rep;
                    }
                    if (is_zero(beta) && !at.inert)
                        issue("jump size", "beta^" + tag + " vanishes at non-inert " + wj);
                }
            }
        }
    }

    for (int i = 0; i < N; ++i) {
        const auto& ag = m.agent[static_cast<std::size_t>(i)];
        const std::string tag = std::to_string(i);
        for (const auto& k : ks) {
            double u = ag.flow_utility(k);
            detail::require_finite(u, "u_A^" + tag, "k=" + detail::fmt_vec(k));
            if (ag.cara && u != 0.0) issue("CARA consistency", "agent " + tag + " has CARA flag but u_A != 0");
            detail::require_finite(m.principal.flow_disutility(k), "u_P", "k=" + detail::fmt_vec(k));
        }
        if (ag.cara && !(ag.risk_aversion > 0.0)) issue("CARA consistency", "agent " + tag + " needs R_A > 0");
        double prev = -INFINITY;
        for (double y : ag.utility_probes) {
            double u = ag.terminal_utility(y);
            detail::require_finite(u, "U_A^" + tag, "y=" + std::to_string(y));
            if (!(u > prev)) issue("U_A monotonicity", "U_A^" + tag + " not strictly increasing at y=" + std::to_string(y));
            prev = u;
            double back = ag.terminal_utility_inverse(u);
            if (!(std::abs(back - y) <= 1e-10 * std::max(1.0, std::abs(y))))
                issue("U_A round trip", "agent " + tag + ": U_A^{-1}(U_A(" + std::to_string(y) + ")) = " + std::to_string(back));
            if (ag.cara) {
                double want = -std::exp(-ag.risk_aversion * y);
                if (!(std::abs(u - want) <= 1e-12 * std::max(1.0, std::abs(want))))
                    issue("CARA consistency", "agent " + tag + ": U_A(" + std::to_string(y) + ") != -exp(-R_A y)");
            }
        }
    }
    if (m.principal.risk_neutral) {
        for (double v : {-3.0, -1.0, 0.0, 0.25, 1.0, 7.5})
            if (m.principal.terminal_utility(v) != v)
                issue("risk-neutral principal", "U_P(" + std::to_string(v) + ") != " + std::to_string(v));
    }
    for (const auto& x : xs) detail::require_finite(m.principal.liquidation(x), "L", "x=" + detail::fmt_vec(x));
    if (m.x0.size() == D)
        for (int d = 0; d < D; ++d)
            if (!(m.x0[d] >= m.box_lo[d] && m.x0[d] <= m.box_hi[d]))
                issue("state box", "X_0 lies outside the declared state box in coordinate " + std::to_string(d));
    return rep;
}

/// Throws ModelError carrying the report when validation fails.
inline void require_valid(const ModelSpec& m) {
    auto rep = validate(m);
    if (!rep.usable()) throw ModelError("model '" + m.name + "' failed validation:\n" + rep.summary());
}

// ---------------------------------------------------------------------------
// Structural probes used by the solvers

/// Sigma and beta do not depend on t on the probe set.
inline bool time_homogeneous_dynamics(const ModelSpec& m, std::string* why = nullptr) {
    for (const auto& x : detail::state_probes(m)) {
        if (m.sigma(0.0, x) != m.sigma(m.horizon, x) || m.sigma(0.0, x) != m.sigma(0.5 * m.horizon, x)) {
            if (why) *why = "Sigma depends on t at x=" + detail::fmt_vec(x);
            return false;
        }
        for (int i = 0; i < m.agents; ++i) {
            const auto& js = m.jumps[static_cast<std::size_t>(i)];
            for (const auto& at : js.atoms)
                if (js.size(0.0, x, at.mark) != js.size(m.horizon, x, at.mark) ||
                    js.size(0.0, x, at.mark) != js.size(0.5 * m.horizon, x, at.mark)) {
                    if (why) *why = "beta^" + std::to_string(i) + " depends on t at x=" + detail::fmt_vec(x);
                    return false;
                }
        }
    }
    return true;
}

/// lambda^i(t,x,a,e) does not vary with the mark e on the probe set.
inline bool mark_independent_intensity(const ModelSpec& m) {
    for (const auto& x : detail::state_probes(m))
        for (const auto& a : detail::action_probes(m))
            for (int i = 0; i < m.agents; ++i) {
                const auto& js = m.jumps[static_cast<std::size_t>(i)];
                for (std::size_t j = 1; j < js.atoms.size(); ++j)
                    if (js.intensity(0.0, x, a, js.atoms[j].mark) != js.intensity(0.0, x, a, js.atoms[0].mark))
                        return false;
            }
    return true;
}

/// Flow payments can be fixed at zero: no rho^i depends on k and u_P is
/// increasing in every coordinate from zero on the probe set.
inline bool flow_payments_trivial(const ModelSpec& m) {
    const auto ks = detail::flow_probes(m);
    for (double t : {0.0, 0.5 * m.horizon, m.horizon})
        for (const auto& x : detail::state_probes(m))
            for (const auto& a : detail::action_probes(m))
                for (const auto& ag : m.agent) {
                    double r0 = ag.discount(t, x, ks[0], a);
                    for (const auto& k : ks)
                        if (ag.discount(t, x, k, a) != r0) return false;
                }
    for (const auto& ag : m.agent) {
        double u0 = ag.flow_utility(ks[0]);
        for (const auto& k : ks)
            if (ag.flow_utility(k) != u0) return false;
    }
    const Vec zero = Vec::Zero(m.agents);
    for (int i = 0; i < m.agents; ++i)
        for (double s : {1e-3, 0.5, 2.0})
            if (!(m.principal.flow_disutility(s * Vec::Unit(m.agents, i)) > m.principal.flow_disutility(zero)))
                return false;
    return true;
}

} // namespace pmc
