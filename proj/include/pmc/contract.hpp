#pragma once
// Contracts built from a feedback policy: pathwise terminal payments, agent
// and principal values, and Monte Carlo checks of incentive compatibility and
// participation.
//
// The payment xi^i is the cara_g forward process started at y0^i:
//   xi = y0 + int (1/2 R |Z Sigma|^2 - rho/R - sum (1 - e^{R H}) / R dnu^{a*}) dt
//          + int Z Sigma dW^{a*} - sum H at realized jumps,
// which forward_Y computes in cara_g mode.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmc/bsde.hpp"
#include "pmc/hjb.hpp"
#include "pmc/sim.hpp"
#include "pmc/stats.hpp"
#include "pmc/util.hpp"

namespace pmc {

/// What a contract needs from a policy: the controls (z*, h*, chi*) and the
/// joint action a* the principal recommends.
struct ContractPolicy {
    ControlPolicy control;
    ActionPolicy response;
    std::string provenance;
};

/// Hash of the surface tables a feedback policy reads.
inline std::string surface_hash(const ValueSurface& s) {
    std::uint64_t h = fnv1a(s.model ? s.model->name : std::string());
    for (const auto* t : {&s.v, &s.z, &s.h, &s.chi, &s.a})
        if (!t->empty()) h = fnv1a(t->data(), t->size() * sizeof(double), h);
    return hex64(h);
}

inline ContractPolicy contract_policy(const FeedbackPolicy& pol) {
    return {pol.control_policy(), pol.action_policy(), surface_hash(pol.surface())};
}

struct ContractOptions {
    NashOptions nash{};
    int workers = 1;
    /// Controls with |z| >= z_bound or |h| >= h_bound are reported as unbounded.
    double z_bound = 10.0;
    double h_bound = 5.0;
};

struct ContractOutcome {
    int agents = 0, n_paths = 0;
    TimeGrid grid;
    std::uint64_t seed = 0;
    Vec y0;
    std::vector<double> xi;   // [path][agent]
    std::vector<double> chi;  // [path][step][agent]
    std::vector<Estimate> agent_values;
    std::vector<char> reservation_ok;
    Estimate principal;
    std::string provenance;
    double max_abs_z = 0.0, max_abs_h = 0.0;
    /// Non-empty when the controls along the paths reach the boundedness limits.
    std::string warning;

    double payment(int p, int i) const { return xi[static_cast<std::size_t>(p) * agents + i]; }
    TerminalFn terminal() const {
        auto tab = std::make_shared<const std::vector<double>>(xi);
        const int N = agents;
        return [tab, N](const PathBundle&, int p) {
            return Vec(Eigen::Map<const Vec>(tab->data() + static_cast<std::size_t>(p) * N, N));
        };
    }
};

/// U_A^{i,-1}(R_0^i) per agent, the default y0.
inline Vec reservation_ce(const ModelSpec& m) {
    Vec y(m.agents);
    for (int i = 0; i < m.agents; ++i) {
        const auto& ag = m.agent[static_cast<std::size_t>(i)];
        y[i] = ag.terminal_utility_inverse(ag.reservation);
    }
    return y;
}

/// E[e^{-int r} U_P(L(X_T) - sum xi) - int e^{-int r} u_P(chi) dt] with the
/// left-endpoint rule for the discount integral.
inline Estimate principal_value(const ModelSpec& m, const ContractOutcome& c, const PathBundle& B) {
    detail::check_bundle(m, B);
    if (B.n_paths != c.n_paths || B.grid.steps != c.grid.steps)
        throw DomainError("principal_value: bundle does not match the contract's paths");
    const int N = m.agents, M = B.grid.steps;
    const double dt = B.grid.dt();
    std::vector<double> v(static_cast<std::size_t>(B.n_paths));
    for (int p = 0; p < B.n_paths; ++p) {
        double disc = 0.0, flow = 0.0;
        for (int k = 0; k < M; ++k) {
            const Vec x = B.x(p, k);
            const Vec k_ = Eigen::Map<const Vec>(c.chi.data() + (static_cast<std::size_t>(p) * M + k) * N, N);
            flow += std::exp(-disc) * m.principal.flow_disutility(k_) * dt;
            disc += m.principal.discount(B.grid.t(k), x) * dt;
        }
        double paid = 0.0;
        for (int i = 0; i < N; ++i) paid += c.payment(p, i);
        v[static_cast<std::size_t>(p)] =
            std::exp(-disc) * m.principal.terminal_utility(m.principal.liquidation(B.x(p, M)) - paid) - flow;
    }
    return mean_estimate(v);
}

/// Pathwise payments on a bundle simulated under the recommended actions.
inline ContractOutcome synthesize_contract(const ModelSpec& m, const ContractPolicy& pol, const Vec& y0, const PathBundle& B,
                                           const ContractOptions& opt = {}) {
    detail::check_bundle(m, B);
    if (y0.size() != m.agents) throw DomainError("y0 must have one entry per agent");
    const int N = m.agents, M = B.grid.steps, P = B.n_paths, nodes = B.nodes();
    ContractOutcome c;
    c.agents = N;
    c.n_paths = P;
    c.grid = B.grid;
    c.seed = B.seed;
    c.y0 = y0;
    c.provenance = pol.provenance;
    const auto Y = forward_Y(m, y0, pol.control, B, GeneratorMode::cara_g, opt.nash, opt.workers);
    c.xi.resize(static_cast<std::size_t>(P) * N);
    c.chi.resize(static_cast<std::size_t>(P) * M * N);
    for (int p = 0; p < P; ++p) {
        for (int i = 0; i < N; ++i) {
            const double v = Y[(static_cast<std::size_t>(p) * nodes + M) * N + i];
            if (!std::isfinite(v)) throw SolverError("contract payment is not finite on path " + std::to_string(p));
            c.xi[static_cast<std::size_t>(p) * N + i] = v;
        }
        for (int k = 0; k < M; ++k) {
            const ControlPoint cp = pol.control(B.grid.t(k), B.x(p, k));
            Eigen::Map<Vec>(c.chi.data() + (static_cast<std::size_t>(p) * M + k) * N, N) = cp.k;
            c.max_abs_z = std::max(c.max_abs_z, cp.z.size() ? cp.z.cwiseAbs().maxCoeff() : 0.0);
            c.max_abs_h = std::max(c.max_abs_h, cp.h.size() ? cp.h.cwiseAbs().maxCoeff() : 0.0);
        }
    }
    if (c.max_abs_z >= opt.z_bound || c.max_abs_h >= opt.h_bound)
        c.warning = "controls reach the boundedness limits (max |z| = " + std::to_string(c.max_abs_z) +
                    ", max |h| = " + std::to_string(c.max_abs_h) + "); admissibility is not established";

    const ControlPolicy control = pol.control;
    const FlowPolicy flow = [control](double t, const Vec& x) { return control(t, x).k; };
    c.agent_values = agent_value_estimate(m, c.terminal(), flow, pol.response, B);
    c.reservation_ok.resize(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        const auto& e = c.agent_values[static_cast<std::size_t>(i)];
        c.reservation_ok[static_cast<std::size_t>(i)] = e.value - m.agent[static_cast<std::size_t>(i)].reservation >= -3.0 * e.se;
    }
    c.principal = principal_value(m, c, B);
    return c;
}

inline ContractOutcome synthesize_contract(const ModelSpec& m, const ContractPolicy& pol, const PathBundle& B,
                                           const ContractOptions& opt = {}) {
    return synthesize_contract(m, pol, reservation_ce(m), B, opt);
}

/// Largest |a*_recorded - best response at the policy's controls| along the
/// paths of B (every node but the last).
inline double equilibrium_consistency(const ModelSpec& m, const FeedbackPolicy& pol, const PathBundle& B,
                                      const NashOptions& nash = {}) {
    NashOptions opt = nash;
    opt.certify = false;
    double worst = 0.0;
    for (int p = 0; p < B.n_paths; ++p)
        for (int k = 0; k < B.grid.steps; ++k) {
            const double t = B.grid.t(k);
            const Vec x = B.x(p, k);
            const auto br = best_response_fixed_point(m, t, x, Vec::Zero(m.agents), pol.control(t, x), GeneratorMode::cara_g, opt);
            worst = std::max(worst, (br.a - pol.recorded_action(t, x)).lpNorm<Eigen::Infinity>());
        }
    return worst;
}

// ---------------------------------------------------------------------------
// Participation

struct ParticipationCheck {
    std::vector<char> ok;
    std::vector<double> margin;  // value - R_0
    std::vector<double> se;
};

inline ParticipationCheck verify_participation(const ContractOutcome& c, const Vec& R0) {
    if (R0.size() != c.agents || static_cast<int>(c.agent_values.size()) != c.agents)
        throw DomainError("verify_participation: one reservation value per agent is required");
    ParticipationCheck out;
    for (int i = 0; i < c.agents; ++i) {
        const auto& e = c.agent_values[static_cast<std::size_t>(i)];
        out.margin.push_back(e.value - R0[i]);
        out.se.push_back(e.se);
        out.ok.push_back(e.value - R0[i] >= -3.0 * e.se);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Incentive compatibility

/// A unilateral deviation of one agent: its own action block as a feedback
/// map. `constant` is set for constant deviations.
struct Deviation {
    int agent = 0;
    std::string description;
    ActionPolicy action;
    std::optional<Vec> constant;
};

inline Deviation constant_deviation(int agent, const Vec& a) {
    std::string d = "agent " + std::to_string(agent) + " plays " + detail::fmt_vec(a);
    return {agent, d, constant_policy(a), a};
}

/// Constant deviations on a 9-point grid per action coordinate (other
/// coordinates of the agent at equilibrium), plus the zero action when it is
/// admissible. Coordinates with a degenerate range contribute nothing.
inline std::vector<Deviation> default_deviations(const ModelSpec& m, const ActionPolicy& equilibrium, int points = 9) {
    std::vector<Deviation> out;
    const int N = m.agents;
    for (int i = 0; i < N; ++i) {
        const int off = m.actions.offset(i), di = m.actions.dim(i);
        const Vec lo = m.actions.lower[static_cast<std::size_t>(i)], hi = m.actions.upper[static_cast<std::size_t>(i)];
        for (int c = 0; c < di; ++c) {
            if (!(hi[c] > lo[c])) continue;
            for (int q = 0; q < points; ++q) {
                const double v = lo[c] + (hi[c] - lo[c]) * q / (points - 1);
                Deviation d;
                d.agent = i;
                if (di == 1) {
                    d = constant_deviation(i, Vec::Constant(1, v));
                } else {
                    d.description = "agent " + std::to_string(i) + " sets action " + std::to_string(c) + " to " + std::to_string(v);
                    d.action = [equilibrium, off, di, c, v](double t, const Vec& x) {
                        Vec a = equilibrium(t, x).segment(off, di);
                        a[c] = v;
                        return a;
                    };
                }
                out.push_back(std::move(d));
            }
        }
        const Vec zero = Vec::Zero(di);
        if ((zero.array() >= lo.array()).all() && (zero.array() <= hi.array()).all()) {
            bool listed = false;
            for (const auto& d : out)
                if (d.agent == i && d.constant && *d.constant == zero) listed = true;
            if (!listed) out.push_back(constant_deviation(i, zero));
        }
    }
    return out;
}

struct DeviationRow {
    int agent = 0;
    std::string description;
    Estimate value;
    Estimate gain;  // value - equilibrium value, standard errors combined
    bool equilibrium = false;
};

struct DeviationReport {
    std::vector<DeviationRow> rows;
    std::vector<Estimate> equilibrium;
    bool pass = true;
    /// Largest gain / combined stderr over the deviations (0 if none positive).
    double worst_score = 0.0;
    int n_paths = 0;
    std::uint64_t seed = 0;
};

struct VerifyOptions {
    NashOptions nash{};
    int workers = 1;
    /// Gains below this (absolute) are numerical noise even when stderr is 0.
    double noise_floor = 1e-9;
};

/// Re-simulate the recommended play and every unilateral deviation with the
/// same seed (common random numbers), recompute the contract's payments on
/// each bundle and compare the deviating agent's value with equilibrium.
/// Fails when some gain exceeds 3 combined standard errors.
inline DeviationReport verify_incentive_compatibility(const ModelSpec& m, const ContractPolicy& pol, const ContractOutcome& c,
                                                      const std::vector<Deviation>& deviations, int n_paths,
                                                      std::uint64_t seed, const VerifyOptions& opt = {}) {
    if (deviations.empty()) throw ConfigError("deviation list is empty");
    if (n_paths < 2) throw ConfigError("incentive check needs at least 2 paths");
    const int N = m.agents;
    for (std::size_t j = 0; j < deviations.size(); ++j) {
        const auto& d = deviations[j];
        if (d.agent < 0 || d.agent >= N) throw ConfigError("deviation " + std::to_string(j) + " names agent " + std::to_string(d.agent));
        if (!d.action) throw ConfigError("deviation " + std::to_string(j) + " has no action map");
        if (d.constant) {
            const Vec& a = *d.constant;
            const Vec& lo = m.actions.lower[static_cast<std::size_t>(d.agent)];
            const Vec& hi = m.actions.upper[static_cast<std::size_t>(d.agent)];
            if (a.size() != lo.size() || !((a.array() >= lo.array()).all() && (a.array() <= hi.array()).all()))
                throw ConfigError("deviation " + std::to_string(j) + " (" + d.description + ") lies outside the action space");
        }
    }
    const ControlPolicy control = pol.control;
    const FlowPolicy flow = [control](double t, const Vec& x) { return control(t, x).k; };
    SimOptions sim;
    sim.allow_coarse_jumps = true;

    auto values_under = [&](const ActionPolicy& play) {
        const PathBundle B = simulate_paths(m, play, c.grid, n_paths, seed, sim);
        const auto Y = forward_Y(m, c.y0, control, B, GeneratorMode::cara_g, opt.nash);
        const int M = B.grid.steps, nodes = B.nodes();
        auto tab = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n_paths) * N);
        for (int p = 0; p < n_paths; ++p)
            for (int i = 0; i < N; ++i) (*tab)[static_cast<std::size_t>(p) * N + i] = Y[(static_cast<std::size_t>(p) * nodes + M) * N + i];
        const TerminalFn xi = [tab, N](const PathBundle&, int p) {
            return Vec(Eigen::Map<const Vec>(tab->data() + static_cast<std::size_t>(p) * N, N));
        };
        return agent_value_estimate(m, xi, flow, play, B);
    };

    DeviationReport rep;
    rep.n_paths = n_paths;
    rep.seed = seed;
    rep.equilibrium = values_under(pol.response);
    for (int i = 0; i < N; ++i)
        rep.rows.push_back({i, "equilibrium", rep.equilibrium[static_cast<std::size_t>(i)], {0.0, 0.0}, true});

    std::vector<DeviationRow> rows(deviations.size());
    parallel_for(deviations.size(), opt.workers, [&](std::size_t j) {
        const auto& d = deviations[j];
        const int off = m.actions.offset(d.agent), di = m.actions.dim(d.agent);
        const Vec& lo = m.actions.lower[static_cast<std::size_t>(d.agent)];
        const Vec& hi = m.actions.upper[static_cast<std::size_t>(d.agent)];
        const ActionPolicy eq = pol.response, own = d.action;
        const ActionPolicy joint = [=](double t, const Vec& x) {
            Vec a = eq(t, x);
            const Vec mine = own(t, x);
            if (mine.size() != di || !((mine.array() >= lo.array() - 1e-12).all() && (mine.array() <= hi.array() + 1e-12).all()))
                throw DomainError("deviation " + std::to_string(j) + " (" + d.description + ") leaves the action space at t = " +
                                  std::to_string(t));
            a.segment(off, di) = mine;
            return a;
        };
        const Estimate v = values_under(joint)[static_cast<std::size_t>(d.agent)];
        const Estimate& e = rep.equilibrium[static_cast<std::size_t>(d.agent)];
        rows[j] = {d.agent, d.description, v, {v.value - e.value, combined_se(v, e)}, false};
    });
    for (auto& r : rows) {
        if (r.gain.value > 3.0 * r.gain.se + opt.noise_floor) rep.pass = false;
        if (r.gain.value > 0.0) rep.worst_score = std::max(rep.worst_score, r.gain.se > 0.0 ? r.gain.value / r.gain.se : 1e300);
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Export

inline nlohmann::json to_json(const ContractOutcome& c) {
    nlohmann::json agents = nlohmann::json::array();
    for (int i = 0; i < c.agents; ++i)
        agents.push_back({{"y0", c.y0[i]},
                          {"value", c.agent_values[static_cast<std::size_t>(i)].value},
                          {"stderr", c.agent_values[static_cast<std::size_t>(i)].se},
                          {"reservation_ok", static_cast<bool>(c.reservation_ok[static_cast<std::size_t>(i)])}});
    return {{"paths", c.n_paths},
            {"steps", c.grid.steps},
            {"horizon", c.grid.horizon},
            {"seed", c.seed},
            {"agents", agents},
            {"principal_value", c.principal.value},
            {"principal_stderr", c.principal.se},
            {"policy_provenance", c.provenance},
            {"max_abs_z", c.max_abs_z},
            {"max_abs_h", c.max_abs_h},
            {"warning", c.warning}};
}

inline nlohmann::json to_json(const DeviationReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& d : r.rows)
        rows.push_back({{"agent", d.agent},
                        {"deviation", d.description},
                        {"value", d.value.value},
                        {"stderr", d.value.se},
                        {"gain", d.gain.value},
                        {"gain_stderr", d.gain.se},
                        {"equilibrium", d.equilibrium}});
    return {{"verdict", r.pass ? "pass" : "fail"}, {"paths", r.n_paths}, {"seed", r.seed}, {"worst_score", r.worst_score}, {"rows", rows}};
}

/// path,xi_0..
inline void write_payments_csv(const ContractOutcome& c, std::ostream& os) {
    os << "path";
    for (int i = 0; i < c.agents; ++i) os << ",xi_" << i;
    os << "\n";
    char buf[32];
    for (int p = 0; p < c.n_paths; ++p) {
        os << p;
        for (int i = 0; i < c.agents; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", c.payment(p, i));
            os << ',' << buf;
        }
        os << "\n";
    }
}

/// agent,deviation,value,stderr,gain,gain_stderr,equilibrium
inline void write_deviations_csv(const DeviationReport& r, std::ostream& os) {
    os << "agent,deviation,value,stderr,gain,gain_stderr,equilibrium\n";
    char buf[160];
    for (const auto& d : r.rows) {
        std::string desc = d.description;
        for (auto& ch : desc)
            if (ch == ',' || ch == '"') ch = ';';
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,%d\n", d.value.value, d.value.se, d.gain.value, d.gain.se,
                      d.equilibrium ? 1 : 0);
        os << d.agent << ',' << desc << buf;
    }
}

} // namespace pmc
