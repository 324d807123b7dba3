#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <sstream>

#include "pmc/hjb.hpp"
#include "pmc/model_io.hpp"

using namespace pmc;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

ModelSpec hm() { return builtin_model("holmstrom_milgrom"); }

// One agent, b = 0, rho = 0: H = 0 for every gradient. Optional single jump atom.
ModelSpec zero_h(const std::string& sigma, const std::string& liquidation, double jump_mass = 0.0,
                 const std::string& jump_size = "-1") {
    json j = json::parse(R"({"spec": {
        "agents": 1, "block_dim": 1, "noise_dim": 1, "horizon": 1.0,
        "x0": [0.0], "state_box": {"lo": [-4.0], "hi": [4.0]},
        "drift": ["0"],
        "actions": [{"lo": [0.0], "hi": [1.0]}],
        "agent_specs": [{"cara": true, "risk_aversion": 1.0, "reservation": -1.0}]}})");
    j["spec"]["sigma"] = json::array({json::array({sigma})});
    j["spec"]["principal"] = {{"liquidation", liquidation}};
    if (jump_mass > 0.0)
        j["spec"]["jumps"] = json::array({{{"atoms", json::array({{{"mark", 1.0}, {"weight", jump_mass}}})},
                                           {"size", json::array({jump_size})}}});
    return model_from_json(j);
}

HjbOptions imex() {
    HjbOptions o;
    o.scheme = TimeScheme::imex;
    return o;
}

double max_abs_diff(const ValueSurface& a, const ValueSurface& b, double shift = 0.0) {
    double e = 0.0;
    for (std::size_t n = 0; n < a.v.size(); ++n) e = std::max(e, std::abs(a.v[n] + shift - b.v[n]));
    return e;
}

} // namespace

TEST(SpaceGrid, LayoutAndInterpolation) {
    SpaceGrid g(Vec::Constant(2, -1.0), Vec::Constant(2, 1.0), {5, 9});
    EXPECT_EQ(g.size(), 45);
    EXPECT_DOUBLE_EQ(g.dx()[0], 0.5);
    EXPECT_DOUBLE_EQ(g.dx()[1], 0.25);
    EXPECT_EQ(g.point(44), Vec::Constant(2, 1.0));
    std::vector<double> f(45);
    for (long j = 0; j < 45; ++j) f[static_cast<std::size_t>(j)] = 2.0 * g.point(j)[0] - g.point(j)[1] + 0.5;
    Vec x(2);
    x << 0.3, -0.7;
    EXPECT_NEAR(g.interpolate(f.data(), x), 2.0 * 0.3 + 0.7 + 0.5, 1e-14);
    std::vector<std::pair<long, double>> st;
    g.stencil(x, st);
    double w = 0.0;
    for (const auto& e : st) w += e.second;
    EXPECT_NEAR(w, 1.0, 1e-15);
    EXPECT_THROW(SpaceGrid(v1(0.0), v1(1.0), {4}), ConfigError);
    EXPECT_THROW(SpaceGrid(v1(1.0), v1(0.0), {5}), ConfigError);
}

TEST(IntegralOperator, LinearShiftDown) {
    auto m = zero_h("1", "x0", 1.0, "-1");
    SpaceGrid g(v1(-4.0), v1(4.0), {9});
    std::vector<double> v(9);
    for (long j = 0; j < 9; ++j) v[static_cast<std::size_t>(j)] = g.point(j)[0];
    for (long j = 0; j < 9; ++j) EXPECT_NEAR(integral_operator_apply(m, g, v, j), -1.0, 1e-14) << j;
}

TEST(IntegralOperator, ConstantVanishes) {
    auto m = zero_h("1", "x0", 0.7, "-0.3");
    SpaceGrid g(v1(-4.0), v1(4.0), {17});
    std::vector<double> v(17, 2.5);
    for (long j = 1; j < 17; ++j) EXPECT_EQ(integral_operator_apply(m, g, v, j), 0.0);
}

TEST(IntegralOperator, QuadraticAtomSum) {
    auto m = zero_h("1", "x0", 2.0, "1");
    SpaceGrid g(v1(-5.0), v1(5.0), {11});
    std::vector<double> v(11);
    for (long j = 0; j < 11; ++j) v[static_cast<std::size_t>(j)] = g.point(j)[0] * g.point(j)[0];
    // Atom loop: weight * (v(x + beta) - v(x)).
    const double oracle = 2.0 * (16.0 - 9.0);
    EXPECT_NEAR(integral_operator_apply(m, g, v, 8), oracle, 1e-12);
}

TEST(Step, NoDynamicsLeavesSliceUnchanged) {
    auto m = zero_h("0", "x0*x0*x0 + 1");
    const auto s = solve(m, SpaceGrid(v1(-4.0), v1(4.0), {41}), TimeGrid(1.0, 5));
    for (long j = 0; j < s.nodes(); ++j) EXPECT_NEAR(s.value(0, j), s.value(5, j), 1e-14);
}

TEST(Step, ConstantTerminalStaysConstant) {
    auto m = zero_h("1", "1.75");
    const auto s = solve(m, SpaceGrid(v1(-4.0), v1(4.0), {41}), TimeGrid(1.0, 60));
    for (double v : s.v) EXPECT_EQ(v, 1.75);
}

TEST(Step, LinearTerminalUnderDiffusion) {
    auto m = zero_h("1", "x0");
    for (auto opt : {HjbOptions{}, imex()}) {
        const int M = opt.scheme == TimeScheme::imex ? 20 : 60;
        const auto s = solve(m, SpaceGrid(v1(-4.0), v1(4.0), {41}), TimeGrid(1.0, M), opt);
        double e = 0.0;
        for (int k = 0; k <= M; ++k)
            for (long j = 0; j < s.nodes(); ++j) e = std::max(e, std::abs(s.value(k, j) - s.grid.point(j)[0]));
        EXPECT_LT(e, 1e-10) << scheme_name(opt.scheme);
    }
}

TEST(Solve, TerminalSliceAndStoredArgmax) {
    auto m = builtin_model("capponi_frei");
    const auto s = solve(m, SpaceGrid::from_box(m, 21), TimeGrid(1.0, 40), imex());
    const HamiltonianProblem prob(m);
    for (long j = 0; j < s.nodes(); ++j) EXPECT_EQ(s.value(s.time.steps, j), s.grid.point(j)[0]);
    for (int k : {0, 17, 40})
        for (long j = 0; j < s.nodes(); j += 3) {
            const double re = prob.objective(s.time.t(k), s.grid.point(j), s.gradient(k, j), s.control(k, j));
            EXPECT_NEAR(re, s.hamiltonian(k, j), 1e-8) << k << " " << j;
        }
}

TEST(Solve, HolmstromMilgromDesk) {
    auto m = hm();
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = solve(m, SpaceGrid::from_box(m, 201), TimeGrid(1.0, 200), imex());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // v(t, x) = x + 0.25 (T - t) with z* = 1 / (1 + kappa R sigma^2) = 0.5.
    EXPECT_NEAR(s.value_at_x0, 0.25, 0.02 * 0.25);
    EXPECT_NEAR(s.principal_value, 0.25, 5e-3);
    double zdev = 0.0;
    for (int k = 0; k <= 200; ++k)
        for (long j = 1; j + 1 < s.nodes(); ++j) zdev = std::max(zdev, std::abs(s.control(k, j).z(0, 0) - 0.5));
    EXPECT_LT(zdev, 0.01);
    EXPECT_LT(secs, 30.0);
    EXPECT_EQ(s.boundary_argmax, 0);
}

TEST(Solve, QuadraticTerminalAddsVariance) {
    auto m = zero_h("1", "x0*x0");
    const auto s = solve(m, SpaceGrid::from_box(m, 81), TimeGrid(1.0, 40), imex());
    for (long j = 0; j < s.nodes(); ++j) {
        const double x = s.grid.point(j)[0];
        if (std::abs(x) <= 2.0) {
            EXPECT_NEAR(s.value(0, j), x * x + 1.0, 1e-2) << x;
        }
    }
}

TEST(Solve, JumpOnlyDrift) {
    const double mass = 0.8;
    auto m = zero_h("0", "x0", mass, "-1");
    const auto s = solve(m, SpaceGrid::from_box(m, 81), TimeGrid(1.0, 20));
    for (long j = 0; j < s.nodes(); ++j) {
        const double x = s.grid.point(j)[0];
        if (std::abs(x) <= 2.0) {
            EXPECT_NEAR(s.value(0, j), x - mass * 1.0, 1e-2) << x;
        }
    }
}

TEST(Solve, GridRefinement) {
    // The desk itself is reproduced to rounding on every grid.
    auto m = hm();
    for (int nodes : {41, 81}) {
        const int M = nodes == 41 ? 25 : 100;
        const auto s = solve(m, SpaceGrid::from_box(m, nodes), TimeGrid(1.0, M), imex());
        double e = 0.0;
        for (int k = 0; k <= M; ++k)
            for (long j = 0; j < s.nodes(); ++j)
                e = std::max(e, std::abs(s.value(k, j) - s.grid.point(j)[0] - 0.25 * (1.0 - s.time.t(k))));
        EXPECT_LT(e, 1e-9) << nodes;
    }
    // Curved terminal data: self-convergence on three nested grids.
    json j = json::parse(R"({"builtin": "holmstrom_milgrom"})");
    auto curved = model_from_json(j);
    curved.principal.liquidation = [](const Vec& x) { return x[0] + 0.5 * std::tanh(x[0]); };
    std::vector<ValueSurface> s;
    int nodes = 41, M = 25;
    for (int r = 0; r < 3; ++r, nodes = 2 * nodes - 1, M *= 4)
        s.push_back(solve(curved, SpaceGrid::from_box(curved, nodes), TimeGrid(1.0, M), imex()));
    auto err = [&](int c) {
        double e = 0.0;
        for (long jj = 0; jj < s[static_cast<std::size_t>(c)].nodes(); ++jj)
            e = std::max(e, std::abs(s[static_cast<std::size_t>(c)].value(0, jj) - s[static_cast<std::size_t>(c) + 1].value(0, 2 * jj)));
        return e;
    };
    const double e1 = err(0), e2 = err(1);
    EXPECT_GT(e1 / e2, 1.5) << e1 << " " << e2;
}

TEST(Solve, ComparisonAndShift) {
    for (const std::string name : {"holmstrom_milgrom", "capponi_frei"}) {
        auto m = builtin_model(name);
        const SpaceGrid g = SpaceGrid::from_box(m, 21);
        const TimeGrid tg(1.0, 20);
        HjbOptions lo = imex(), hi = imex(), up = imex();
        const auto& L = m.principal.liquidation;
        lo.terminal = [L](const Vec& x) { return L(x); };
        hi.terminal = [L](const Vec& x) { return L(x) + 0.05 * (1.0 + std::tanh(x[0])); };
        up.terminal = [L](const Vec& x) { return L(x) + 0.75; };
        const auto s1 = solve(m, g, tg, lo), s2 = solve(m, g, tg, hi), s3 = solve(m, g, tg, up);
        double worst = -1e300;
        for (std::size_t n = 0; n < s1.v.size(); ++n) worst = std::max(worst, s1.v[n] - s2.v[n]);
        EXPECT_LE(worst, 1e-12) << name;
        EXPECT_LE(max_abs_diff(s1, s3, 0.75), 1e-12) << name;
    }
}

TEST(Solve, Guards) {
    auto big = builtin_model("multi_agent_cara", {{"agents", 4}});
    EXPECT_THROW(solve(big, SpaceGrid(big.box_lo, big.box_hi, {5, 5, 5, 5}), TimeGrid(1.0, 10)), ConfigError);
    auto m = hm();
    try {
        solve(m, SpaceGrid::from_box(m, 201), TimeGrid(1.0, 10));
        FAIL() << "expected a CFL error";
    } catch (const SolverError& e) {
        EXPECT_NE(std::string(e.what()).find("time steps"), std::string::npos);
    }
    // X_0 too close to a face.
    EXPECT_THROW(solve(m, SpaceGrid(v1(-1.0), v1(8.0), {41}), TimeGrid(1.0, 40), imex()), ConfigError);
    auto frozen = zero_h("1 + t", "x0");
    EXPECT_THROW(solve(frozen, SpaceGrid::from_box(frozen, 21), TimeGrid(1.0, 20), imex()), ModelError);
}

TEST(Policy, HolmstromMilgromFeedback) {
    auto m = hm();
    auto s = std::make_shared<const ValueSurface>(solve(m, SpaceGrid::from_box(m, 81), TimeGrid(1.0, 100), imex()));
    const auto pol = extract_policy(s);
    EXPECT_TRUE(pol.quality().passed) << pol.quality().warning;
    for (double t : {0.0, 0.33, 0.9})
        for (double x : {-2.0, -0.37, 0.0, 1.7}) {
            EXPECT_NEAR(pol.control(t, v1(x)).z(0, 0), 0.5, 0.01);
            const Vec a = pol.action(t, v1(x));
            EXPECT_NEAR(a[0], 0.5, 1e-4);
        }
    // Outside the box the controls clamp to the faces.
    EXPECT_NEAR(pol.control(0.5, v1(40.0)).z(0, 0), 0.5, 0.01);
}

TEST(Policy, ZeroHamiltonianGivesZeroControls) {
    auto m = zero_h("1", "x0");
    const auto pol = extract_policy(solve(m, SpaceGrid::from_box(m, 41), TimeGrid(1.0, 20), imex()));
    const auto& s = pol.surface();
    for (int k = 0; k <= 20; ++k)
        for (long j = 0; j < s.nodes(); ++j) {
            EXPECT_NEAR(s.control(k, j).z(0, 0), 0.0, 1e-6);
            EXPECT_EQ(s.control(k, j).k[0], 0.0);
        }
}

TEST(Policy, SymmetricAgentsSwap) {
    auto m = builtin_model("multi_agent_cara", {{"agents", 2}, {"coupling", 0.2}});
    const auto s = solve(m, SpaceGrid::from_box(m, 9), TimeGrid(1.0, 12), imex());
    const SpaceGrid& g = s.grid;
    for (int k : {0, 5, 12})
        for (int i0 = 0; i0 < 9; ++i0)
            for (int i1 = 0; i1 < 9; ++i1) {
                const long j = i0 + 9L * i1, js = i1 + 9L * i0;
                const ControlPoint a = s.control(k, j), b = s.control(k, js);
                EXPECT_NEAR(a.z(0, 0), b.z(1, 1), 1e-5) << g.point(j).transpose();
                EXPECT_NEAR(a.z(0, 1), b.z(1, 0), 1e-5) << g.point(j).transpose();
            }
}

TEST(Fbsde, MartingaleTerminal) {
    auto m = zero_h("1", "x0");
    const auto B = crosscheck_bundle(m, 0.0, v1(0.3), 10, 4000, 11);
    const auto est = fbsde_crosscheck(m, 0.0, v1(0.3), B);
    // Exact up to the Hamiltonian sup tolerance.
    EXPECT_NEAR(est.value, 0.3, 3.0 * est.se + 1e-9);
}

TEST(Fbsde, ConstantTerminal) {
    auto m = zero_h("1", "2.5");
    const auto B = crosscheck_bundle(m, 0.25, v1(-0.5), 8, 1000, 3);
    const auto est = fbsde_crosscheck(m, 0.25, v1(-0.5), B);
    EXPECT_NEAR(est.value, 2.5, 1e-9);
    EXPECT_LE(est.se, 1e-9);
}

TEST(Fbsde, HolmstromMilgromMatchesPide) {
    auto m = hm();
    const auto B = crosscheck_bundle(m, 0.0, m.x0, 20, 4000, 7);
    const auto est = fbsde_crosscheck(m, 0.0, m.x0, B);
    EXPECT_NEAR(est.value, 0.25, std::max(5e-2, 3.0 * est.se));
    EXPECT_THROW(fbsde_crosscheck(m, 0.5, m.x0, B), DomainError);
}

TEST(Export, CsvAndCache) {
    auto m = hm();
    const SpaceGrid g = SpaceGrid::from_box(m, 21);
    const TimeGrid tg(1.0, 12);
    const auto s = solve(m, g, tg, imex());
    std::ostringstream csv;
    write_surface_csv(s, csv);
    const std::string text = csv.str();
    EXPECT_EQ(text.substr(0, text.find('\n')), "t,x0,v,grad_norm,z_0_0,chi_0");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 13 * 21);

    const std::string key = surface_cache_key(m, g, tg, imex());
    EXPECT_EQ(key, surface_cache_key(builtin_model("holmstrom_milgrom"), g, tg, imex()));
    EXPECT_NE(key, surface_cache_key(m, g, TimeGrid(1.0, 13), imex()));
    std::stringstream bin;
    save_surface(s, key, bin);
    const std::string bytes = bin.str();
    {
        std::istringstream in(bytes);
        auto back = load_surface(in, key, m);
        ASSERT_TRUE(back.has_value());
        EXPECT_EQ(back->v, s.v);
        EXPECT_EQ(back->z, s.z);
        EXPECT_EQ(back->principal_value, s.principal_value);
    }
    {
        std::istringstream in(bytes);
        EXPECT_FALSE(load_surface(in, "other", m).has_value());
    }
    std::istringstream junk("not a cache");
    EXPECT_THROW(load_surface(junk, key, m), DomainError);
    std::istringstream cut(bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_surface(cut, key, m), DomainError);
}
