// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 iff all
// pass. Optional arguments select criteria by number: `acceptance 3 7`.
//
// Reference values come from closed forms, brute-force scans or Monte Carlo
// computed here, independently of the solver paths they check.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "pmc/pmc.hpp"

using namespace pmc;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Vec v1(double a) { return Vec::Constant(1, a); }

HjbOptions imex() {
    HjbOptions o;
    o.scheme = TimeScheme::imex;
    return o;
}

ControlPolicy constant_control(const ModelSpec& m, double z, double h = 0.0) {
    ControlPoint cp = ControlPoint::zero(m);
    cp.z.setConstant(z);
    cp.h.setConstant(h);
    return [cp](double, const Vec&) { return cp; };
}

TerminalFn terminal_of(const std::vector<double>& Y, int N) {
    return [&Y, N](const PathBundle& B, int p) {
        return Vec(Eigen::Map<const Vec>(Y.data() + (static_cast<std::size_t>(p) * B.nodes() + B.grid.steps) * N, N));
    };
}

// One agent, b = 0, rho = 0, so H = 0 for every gradient; optional jump atom.
ModelSpec zero_hamiltonian(const std::string& sigma, const std::string& liquidation, double jump_mass = 0.0) {
    json j = json::parse(R"({"spec": {
        "agents": 1, "block_dim": 1, "noise_dim": 1, "horizon": 1.0,
        "x0": [0.0], "state_box": {"lo": [-4.0], "hi": [4.0]},
        "drift": ["0"],
        "actions": [{"lo": [0.0], "hi": [1.0]}],
        "agent_specs": [{"cara": true, "risk_aversion": 1.0, "reservation": -1.0}]}})");
    j["spec"]["sigma"] = json::array({json::array({sigma})});
    j["spec"]["principal"] = {{"liquidation", liquidation}};
    if (jump_mass > 0.0)
        j["spec"]["jumps"] = json::array({{{"atoms", json::array({{{"mark", 1.0}, {"weight", jump_mass}}})}, {"size", json::array({"-1"})}}});
    return model_from_json(j);
}

// ---------------------------------------------------------------------------

Verdict holmstrom_milgrom_benchmark() {
    auto m = builtin_model("holmstrom_milgrom");
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = solve(m, SpaceGrid::from_box(m, 201), TimeGrid(1.0, 200), imex());
    const double secs = seconds_since(t0);
    // z* = 1 / (1 + kappa R sigma^2) = 0.5 and v(t, x) = x + 0.25 (T - t).
    double zdev = 0.0, vdev = 0.0;
    for (int k = 0; k <= s.time.steps; ++k)
        for (long j = 1; j + 1 < s.nodes(); ++j) {
            zdev = std::max(zdev, std::abs(s.control(k, j).z(0, 0) - 0.5));
            vdev = std::max(vdev, std::abs(s.value(k, j) - s.grid.point(j)[0] - 0.25 * (1.0 - s.time.t(k))));
        }

    // Brute force over linear contracts xi = y0 + z X_T + const: the agent
    // answers a = z / kappa; the principal's value is scored by Monte Carlo
    // with common random numbers.
    double best_z = -1.0, best_v = -1e300, best_se = 0.0;
    for (int q = 0; q <= 20; ++q) {
        const double z = 0.05 * q;
        const ContractPolicy cp{constant_control(m, z), constant_policy(v1(z)), "linear"};
        const PathBundle B = simulate_paths(m, cp.response, TimeGrid(1.0, 20), 4000, 101);
        const auto c = synthesize_contract(m, cp, B);
        if (c.principal.value > best_v) best_v = c.principal.value, best_z = z, best_se = c.principal.se;
    }
    const bool pass = zdev <= 0.01 && std::abs(s.principal_value - 0.25) <= 5e-3 && secs <= 30.0 &&
                      std::abs(best_z - 0.5) <= 0.05 + 1e-12 && std::abs(best_v - 0.25) <= 3.0 * best_se + 5e-3;
    return {pass, fmt("max|z-0.5| = %.2e, V_P = %.6f, max|v-exact| = %.1e, solve %.1f s; MC scan argmax z = %.2f, V = %.4f +- %.4f",
                      zdev, s.principal_value, vdev, secs, best_z, best_v, best_se)};
}

Verdict girsanov_suite() {
    bool pass = true;
    std::string detail;
    std::uint64_t seed = 200;
    for (const auto& name : builtin_names()) {
        const auto t0 = std::chrono::steady_clock::now();
        auto m = builtin_model(name);
        const Vec lo = m.actions.joint_lower(), hi = m.actions.joint_upper();
        std::vector<ActionPolicy> policies{
            constant_policy(m.actions.center()),
            constant_policy(lo + 0.25 * (hi - lo)),
            [lo, hi](double, const Vec& x) { return Vec(lo + (0.5 + 0.4 * std::tanh(x[0])) * (hi - lo)); }};
        const TimeGrid tg(m.horizon, 50);
        const PathBundle base = simulate_paths(m, nullptr, tg, 10000, ++seed);
        double worst_mass = 0.0, worst_x = 0.0;
        for (const auto& pol : policies) {
            const auto M = girsanov_density(m, base, pol);
            const Estimate mass = estimate_expectation(base, [](const PathBundle&, int) { return 1.0; }, &M);
            worst_mass = std::max(worst_mass, std::abs(mass.value - 1.0) / mass.se);
            const PathBundle drifted = simulate_paths(m, pol, tg, 10000, ++seed);
            for (int d = 0; d < m.state_dim(); ++d) {
                const Estimate rw = estimate_expectation(base, terminal_coordinate(d), &M);
                const Estimate dr = estimate_expectation(drifted, terminal_coordinate(d));
                const double se = combined_se(rw, dr);
                worst_x = std::max(worst_x, se > 0.0 ? std::abs(rw.value - dr.value) / se : 0.0);
            }
        }
        const double secs = seconds_since(t0);
        const bool ok = worst_mass <= 3.0 && worst_x <= 3.0 && secs <= 10.0;
        pass = pass && ok;
        detail += fmt("%s%s: |E M_T - 1| <= %.2f se, X_T gap <= %.2f se, %.1f s", detail.empty() ? "" : "; ", name.c_str(),
                      worst_mass, worst_x, secs);
    }
    return {pass, detail};
}

Verdict bsde_roundtrip() {
    auto m = builtin_model("holmstrom_milgrom");
    const double y0 = reservation_ce(m)[0];
    const PathBundle B = simulate_paths(m, nullptr, TimeGrid(1.0, 50), 20000, 301);
    const auto Y = forward_Y(m, v1(y0), constant_control(m, 0.5), B, GeneratorMode::cara_g);
    LsmcOptions opt;
    opt.degree = 2;
    const auto S = solve_backward_lsmc(m, terminal_of(Y, 1), nullptr, B, GeneratorMode::cara_g, opt);
    const double err = std::abs(S.Y0()[0] - y0);

    // Four times the paths should halve the Y_0 standard error.
    auto se = [&](int n, std::uint64_t seed) {
        const PathBundle b = simulate_paths(m, nullptr, TimeGrid(1.0, 50), n, seed);
        const TerminalFn quad = [](const PathBundle& bb, int p) { return v1(0.5 * std::pow(bb.x(p, bb.grid.steps)[0], 2)); };
        return solve_backward_lsmc(m, quad, nullptr, b, GeneratorMode::cara_g, opt).y0_se[0];
    };
    const double ratio = se(20000, 303) / se(5000, 302);
    return {err <= 5e-2 && std::abs(ratio - 0.5) <= 0.1,
            fmt("|Y_0 - y| = %.2e (Y_0 = %.5f); stderr ratio at 4x paths = %.3f", err, S.Y0()[0], ratio)};
}

Verdict nash_bsde_probes() {
    bool pass = true;
    std::string detail;
    struct Case {
        ModelSpec m;
        int nodes, steps;
    };
    std::vector<Case> cases{{builtin_model("holmstrom_milgrom"), 81, 100}, {builtin_model("multi_agent_cara"), 9, 12}};
    std::uint64_t seed = 400;
    for (auto& [m, nodes, steps] : cases) {
        const int N = m.agents;
        const FeedbackPolicy pol = extract_policy(solve(m, SpaceGrid::from_box(m, nodes), TimeGrid(m.horizon, steps), imex()));
        const ControlPolicy control = pol.control_policy();
        const FlowPolicy flow = pol.flow_policy();
        const ActionPolicy eq = pol.action_policy();
        const Vec y0 = reservation_ce(m);
        // Largest drift in stderr units: |drift| along equilibrium, +drift of the deviator otherwise.
        auto probe = [&](const ActionPolicy& play, int deviator) {
            const PathBundle B = simulate_paths(m, play, TimeGrid(m.horizon, 20), 10000, seed);
            const auto Y = forward_Y(m, y0, control, B, GeneratorMode::cara_g);
            const auto R = discounted_agent_process(m, Y, GeneratorMode::cara_g, flow, play, B);
            double worst = -1e300;
            const auto drift = step_drift(R, B, N);
            for (std::size_t e = 0; e < drift.size(); ++e) {
                const int i = static_cast<int>(e % static_cast<std::size_t>(N));
                const double sc = drift[e].se > 0.0 ? drift[e].value / drift[e].se : 0.0;
                if (deviator < 0) worst = std::max(worst, std::abs(sc));
                else if (i == deviator) worst = std::max(worst, sc);
            }
            return worst;
        };
        ++seed;
        const double eq_worst = probe(eq, -1);
        double dev_worst = -1e300;
        int devs = 0;
        for (int i = 0; i < N; ++i) {
            const double lo = m.actions.lower[static_cast<std::size_t>(i)][0], hi = m.actions.upper[static_cast<std::size_t>(i)][0];
            const int off = m.actions.offset(i);
            for (int q = 0; q < 9; ++q) {
                const double a = lo + (hi - lo) * q / 8.0;
                const ActionPolicy play = [eq, off, a](double t, const Vec& x) {
                    Vec j = eq(t, x);
                    j[off] = a;
                    return j;
                };
                dev_worst = std::max(dev_worst, probe(play, i));
                ++devs;
            }
        }
        const bool ok = eq_worst <= 4.0 && dev_worst <= 4.0;
        pass = pass && ok;
        detail += fmt("%s%s: equilibrium |drift| <= %.2f se, %d deviations drift <= %+.2f se", detail.empty() ? "" : "; ",
                      m.name.c_str(), eq_worst, devs, dev_worst);
    }
    return {pass, detail};
}

Verdict ce_utility_identity() {
    auto m = builtin_model("holmstrom_milgrom");
    const PathBundle B = simulate_paths(m, nullptr, TimeGrid(1.0, 50), 20000, 501);
    const auto xi = [](const PathBundle& b, int p) {
        const double x = b.x(p, b.grid.steps)[0];
        return 0.5 * x + 0.1 * std::tanh(x);
    };
    const double ra = m.agent[0].risk_aversion;
    const auto ce = solve_backward_lsmc(m, [&](const PathBundle& b, int p) { return v1(xi(b, p)); }, nullptr, B, GeneratorMode::cara_g);
    const auto ut = solve_backward_lsmc(m, [&](const PathBundle& b, int p) { return v1(-std::exp(-ra * xi(b, p))); }, nullptr, B,
                                        GeneratorMode::general_f);
    const double u_from_ce = ce_utility_transform({ce.Y0()[0]}, v1(ra), CeDirection::to_utility)[0];
    const double gap = std::abs(u_from_ce - ut.Y0()[0]);
    return {gap <= 5e-2, fmt("U_A(Y_0^ce) = %.5f, Y_0^utility = %.5f, gap %.2e", u_from_ce, ut.Y0()[0], gap)};
}

Verdict pide_analytic() {
    const SpaceGrid g(v1(-4.0), v1(4.0), {81});
    // (a) constant terminal, both schemes.
    bool a_ok = true;
    for (auto opt : {HjbOptions{}, imex()}) {
        const auto s = solve(zero_hamiltonian("1", "1.75"), g, TimeGrid(1.0, opt.scheme == TimeScheme::imex ? 40 : 240), opt);
        for (double v : s.v) a_ok = a_ok && v == 1.75;
    }
    // (b) linear terminal, unit diffusion: v = x everywhere.
    double b_err = 0.0;
    for (auto opt : {HjbOptions{}, imex()}) {
        const auto s = solve(zero_hamiltonian("1", "x0"), g, TimeGrid(1.0, opt.scheme == TimeScheme::imex ? 40 : 240), opt);
        for (int k = 0; k <= s.time.steps; ++k)
            for (long j = 0; j < s.nodes(); ++j) b_err = std::max(b_err, std::abs(s.value(k, j) - s.grid.point(j)[0]));
    }
    // (c) quadratic terminal: v(0, x) = x^2 + T.
    double c_err = 0.0;
    {
        const auto s = solve(zero_hamiltonian("1", "x0*x0"), g, TimeGrid(1.0, 40), imex());
        for (long j = 1; j + 1 < s.nodes(); ++j) {
            const double x = s.grid.point(j)[0];
            c_err = std::max(c_err, std::abs(s.value(0, j) - x * x - 1.0));
        }
    }
    // (d) jumps of size -1 at mass 0.5: v(0, x) = x - 0.5 T; Monte Carlo at x = 0.5.
    const double mass = 0.5;
    auto jm = zero_hamiltonian("0", "x0", mass);
    const auto s = solve(jm, g, TimeGrid(1.0, 20));
    double d_err = 0.0;
    for (long j = 0; j < s.nodes(); ++j) {
        const double x = s.grid.point(j)[0];
        if (std::abs(x) <= 2.0) d_err = std::max(d_err, std::abs(s.value(0, j) - (x - mass)));
    }
    const PathBundle B = crosscheck_bundle(jm, 0.0, v1(0.5), 100, 20000, 601);
    const Estimate mc = estimate_expectation(B, terminal_coordinate(0));
    const double grid_v = s.interpolate(0, v1(0.5));
    const bool mc_ok = std::abs(mc.value - grid_v) <= 3.0 * mc.se + 1e-2;
    const bool pass = a_ok && b_err <= 1e-8 && c_err <= 1e-2 && d_err <= 1e-2 && mc_ok;
    return {pass, fmt("(a) %s; (b) max err %.1e; (c) max interior err %.1e; (d) max err %.1e, MC %.4f +- %.4f vs grid %.4f",
                      a_ok ? "exact" : "NOT exact", b_err, c_err, d_err, mc.value, mc.se, grid_v)};
}

Verdict fbsde_pide_crosscheck() {
    bool pass = true;
    std::string detail;
    struct Case {
        std::string name;
        int nodes, steps;
    };
    const std::vector<std::pair<double, double>> probes{{0.0, 0.0}, {0.2, 0.5}, {0.4, -0.5}, {0.6, 1.0}, {0.8, -1.0}};
    std::uint64_t seed = 700;
    for (const auto& [name, nodes, steps] : std::vector<Case>{{"holmstrom_milgrom", 81, 100}, {"capponi_frei", 41, 40}}) {
        auto m = builtin_model(name);
        const auto s = solve(m, SpaceGrid::from_box(m, nodes), TimeGrid(m.horizon, steps), imex());
        double worst = 0.0;
        for (const auto& [t, x] : probes) {
            const int k = static_cast<int>(std::lround(t / s.time.dt()));
            const double v = s.interpolate(k, v1(x));
            const int fsteps = std::max(1, static_cast<int>(std::lround(20.0 * (m.horizon - t) / m.horizon)));
            const PathBundle B = crosscheck_bundle(m, t, v1(x), fsteps, 1000, ++seed);
            const Estimate y = fbsde_crosscheck(m, t, v1(x), B);
            const double tol = std::max(5e-2, 3.0 * y.se);
            worst = std::max(worst, std::abs(y.value - v) / tol);
        }
        pass = pass && worst <= 1.0;
        detail += fmt("%s%s: max |Y - v| / tol = %.2e", detail.empty() ? "" : "; ", name.c_str(), worst);
    }
    return {pass, detail};
}

Verdict incentive_verdicts() {
    auto m = builtin_model("holmstrom_milgrom");
    const FeedbackPolicy pol = extract_policy(solve(m, SpaceGrid::from_box(m, 81), TimeGrid(1.0, 100), imex()));
    const ContractPolicy good = contract_policy(pol);
    ContractPolicy mutant = good;
    const ControlPolicy base = good.control;
    mutant.control = [base](double t, const Vec& x) {
        ControlPoint cp = base(t, x);
        cp.z *= 0.5;
        return cp;
    };
    int good_pass = 0, mutant_fail = 0;
    double mutant_gain = 1e300;
    for (std::uint64_t seed : {801u, 802u, 803u, 804u, 805u}) {
        for (const ContractPolicy* cp : {static_cast<const ContractPolicy*>(&good), static_cast<const ContractPolicy*>(&mutant)}) {
            const PathBundle B = simulate_paths(m, cp->response, TimeGrid(1.0, 20), 4000, seed);
            const auto c = synthesize_contract(m, *cp, B);
            const auto rep = verify_incentive_compatibility(m, *cp, c, default_deviations(m, cp->response), 4000, seed);
            if (cp == &good) {
                good_pass += rep.pass;
            } else {
                mutant_fail += !rep.pass;
                double g = -1e300;
                for (const auto& r : rep.rows) g = std::max(g, r.gain.value / std::max(r.gain.se, 1e-300));
                mutant_gain = std::min(mutant_gain, g);
            }
        }
    }
    return {good_pass == 5 && mutant_fail == 5,
            fmt("optimal contract passes %d/5 seeds; halved-z mutant fails %d/5 (smallest best gain %.1f se)", good_pass,
                mutant_fail, mutant_gain)};
}

Verdict jump_intensity_scan() {
    auto m = builtin_model("capponi_frei");
    std::mt19937_64 rng(901);
    std::uniform_real_distribution<double> uz(0.0, 1.5), uh(-1.0, 1.0);
    const double lmin = m.actions.lower[0][1], lmax = m.actions.upper[0][1];
    double worst = 0.0;
    for (int q = 0; q < 20; ++q) {
        ControlPoint cp = ControlPoint::zero(m);
        cp.z(0, 0) = uz(rng);
        cp.h(0, 0) = uh(rng);
        const auto br = best_response_fixed_point(m, 0.0, m.x0, Vec::Zero(1), cp, GeneratorMode::cara_g);
        double best = -1e300, arg = lmin;
        for (int r = 0; r < 1000; ++r) {
            Vec a = br.a;
            a[1] = lmin + (lmax - lmin) * r / 999.0;
            const double g = agent_generator_g(m, 0, 0.0, m.x0, cp, a);
            if (g > best) best = g, arg = a[1];
        }
        worst = std::max(worst, std::abs(br.a[1] - arg));
    }
    return {worst <= 1e-3, fmt("max |lambda* - grid argmax| = %.2e over 20 (z, h) probes", worst)};
}

Verdict comparison_and_shift() {
    bool pass = true;
    std::string detail;
    struct Case {
        std::string name;
        int nodes, steps;
    };
    for (const auto& [name, nodes, steps] : std::vector<Case>{
             {"holmstrom_milgrom", 21, 20}, {"capponi_frei", 21, 20}, {"multi_agent_cara", 9, 12}, {"market_maker", 5, 5}}) {
        auto m = builtin_model(name);
        const SpaceGrid g = SpaceGrid::from_box(m, nodes);
        const TimeGrid tg(m.horizon, steps);
        HjbOptions lo = imex(), hi = imex(), up = imex();
        const auto L = m.principal.liquidation;
        lo.terminal = [L](const Vec& x) { return L(x); };
        hi.terminal = [L](const Vec& x) { return L(x) + 0.05 * (1.0 + std::tanh(x[0])); };
        up.terminal = [L](const Vec& x) { return L(x) + 0.75; };
        const auto s1 = solve(m, g, tg, lo), s2 = solve(m, g, tg, hi), s3 = solve(m, g, tg, up);
        double cmp = -1e300, shift = 0.0;
        for (std::size_t n = 0; n < s1.v.size(); ++n) {
            cmp = std::max(cmp, s1.v[n] - s2.v[n]);
            shift = std::max(shift, std::abs(s1.v[n] + 0.75 - s3.v[n]));
        }
        pass = pass && cmp <= 1e-12 && shift <= 1e-12;
        detail += fmt("%s%s: max(v1 - v2) = %.1e, shift err %.1e", detail.empty() ? "" : "; ", name.c_str(), cmp, shift);
    }
    return {pass, detail};
}

struct Criterion {
    int id;
    const char* title;
    std::function<Verdict()> run;
};

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "Holmstrom-Milgrom benchmark", holmstrom_milgrom_benchmark},
        {2, "Girsanov suite", girsanov_suite},
        {3, "BSDE roundtrip and Monte Carlo rate", bsde_roundtrip},
        {4, "Nash/BSDE equivalence probes", nash_bsde_probes},
        {5, "CE/utility representation identity", ce_utility_identity},
        {6, "PIDE analytic cases", pide_analytic},
        {7, "FBSDE/PIDE cross-check", fbsde_pide_crosscheck},
        {8, "Incentive compatibility verdicts", incentive_verdicts},
        {9, "Jump-model intensity vs grid scan", jump_intensity_scan},
        {10, "Discrete comparison and shift invariance", comparison_and_shift},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int ran = 0, passed = 0;
    for (const auto& c : all) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        ++ran;
        passed += v.pass;
        std::printf("[%s] %2d [PRIMARY] %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", c.id, c.title, v.detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", passed, ran);
    return passed == ran ? 0 : 1;
}
