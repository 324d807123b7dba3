#pragma once
// Built-in model instances drawn from the contracting literature.

#include <cmath>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "pmc/model.hpp"

namespace pmc {

using Params = std::map<std::string, double>;

namespace detail {

inline double take(Params& known, const Params& given, const std::string& key, double fallback) {
    auto it = given.find(key);
    double v = it == given.end() ? fallback : it->second;
    known[key] = v;
    return v;
}

inline void reject_unknown(const std::string& model, const Params& given, const Params& known) {
    for (const auto& [k, v] : given)
        if (!known.count(k)) {
            std::string names;
            for (const auto& [kk, vv] : known) names += (names.empty() ? "" : ", ") + kk;
            throw ConfigError("builtin '" + model + "': unknown parameter '" + k + "' (known: " + names + ")");
        }
}

inline void require_positive(const std::string& model, const std::string& key, double v) {
    if (!(v > 0.0) || !std::isfinite(v))
        throw ConfigError("builtin '" + model + "': parameter '" + key + "' must be positive, got " + std::to_string(v));
}

inline AgentSpec cara_agent(double risk_aversion, double reservation,
                            std::function<double(double, const Vec&, const Vec&, const Vec&)> discount) {
    AgentSpec ag;
    ag.cara = true;
    ag.risk_aversion = risk_aversion;
    ag.reservation = reservation;
    ag.discount = std::move(discount);
    ag.cost = [](double, const Vec&, const Vec&) { return 0.0; };
    ag.flow_utility = [](const Vec&) { return 0.0; };
    ag.terminal_utility = [risk_aversion](double y) { return -std::exp(-risk_aversion * y); };
    ag.terminal_utility_inverse = [risk_aversion](double u) { return -std::log(-u) / risk_aversion; };
    return ag;
}

inline PrincipalSpec risk_neutral_principal(std::function<double(const Vec&)> liquidation) {
    PrincipalSpec p;
    p.risk_neutral = true;
    p.liquidation = std::move(liquidation);
    p.terminal_utility = [](double v) { return v; };
    p.flow_disutility = [](const Vec& k) { return k.sum(); };
    p.discount = [](double, const Vec&) { return 0.0; };
    return p;
}

inline JumpSpec no_jumps() {
    JumpSpec js;
    js.size = [](double, const Vec&, double) { return Vec::Zero(1); };
    js.intensity = [](double, const Vec&, const Vec&, double) { return 1.0; };
    return js;
}

inline nlohmann::json source_of(const std::string& name, const Params& p) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [k, v] : p) params[k] = v;
    return {{"builtin", name}, {"params", params}};
}

// Single agent, d = n = 1: dX = a dt + sigma dW^a, quadratic effort cost.
inline ModelSpec holmstrom_milgrom(const Params& given) {
    Params p;
    const double kappa = take(p, given, "kappa", 1.0);
    const double ra = take(p, given, "risk_aversion", 1.0);
    const double sigma = take(p, given, "sigma", 1.0);
    const double T = take(p, given, "horizon", 1.0);
    const double x0 = take(p, given, "x0", 0.0);
    const double r0 = take(p, given, "reservation", -1.0);
    const double amin = take(p, given, "action_min", 0.0);
    const double amax = take(p, given, "action_max", 2.0);
    const double half = take(p, given, "box_half_width", 4.0);
    reject_unknown("holmstrom_milgrom", given, p);
    for (auto [k, v] : {std::pair{"kappa", kappa}, {"risk_aversion", ra}, {"sigma", sigma}, {"horizon", T}, {"box_half_width", half}})
        require_positive("holmstrom_milgrom", k, v);

    ModelSpec m;
    m.name = "holmstrom_milgrom";
    m.agents = 1;
    m.block_dim = 1;
    m.noise_dim = 1;
    m.horizon = T;
    m.x0 = Vec::Constant(1, x0);
    m.box_lo = Vec::Constant(1, x0 - half);
    m.box_hi = Vec::Constant(1, x0 + half);
    m.actions.lower = {Vec::Constant(1, amin)};
    m.actions.upper = {Vec::Constant(1, amax)};
    m.sigma = [sigma](double, const Vec&) { return Mat::Constant(1, 1, sigma); };
    m.drift = [sigma](double, const Vec&, const Vec& a) { return Vec::Constant(1, a[0] / sigma); };
    m.jumps = {no_jumps()};
    // rho = -R_A c(a) with c(a) = kappa a^2 / 2
    m.agent = {cara_agent(ra, r0, [ra, kappa](double, const Vec&, const Vec&, const Vec& a) {
        return -ra * kappa * a[0] * a[0] / 2.0;
    })};
    m.principal = risk_neutral_principal([](const Vec& x) { return x[0]; });
    m.source = source_of(m.name, p);
    return m;
}

// Single agent controlling drift u and loss intensity lambda of a compound
// Poisson process of downward jumps.
inline ModelSpec capponi_frei(const Params& given) {
    Params p;
    const double kappa = take(p, given, "kappa", 1.0);
    const double kappa_l = take(p, given, "kappa_lambda", 1.0);
    const double ra = take(p, given, "risk_aversion", 1.0);
    const double sigma = take(p, given, "sigma", 1.0);
    const double mu0 = take(p, given, "drift", 0.0);
    const double loss = take(p, given, "loss", 1.0);
    const double spread = take(p, given, "loss_spread", 0.0);
    const double base = take(p, given, "base_intensity", 1.0);
    const double lmin = take(p, given, "lambda_min", 0.5);
    const double lmax = take(p, given, "lambda_max", 2.0);
    const double umax = take(p, given, "effort_max", 2.0);
    const double T = take(p, given, "horizon", 1.0);
    const double x0 = take(p, given, "x0", 0.0);
    const double r0 = take(p, given, "reservation", -1.0);
    const double half = take(p, given, "box_half_width", 4.0);
    reject_unknown("capponi_frei", given, p);
    for (auto [k, v] : {std::pair{"kappa", kappa}, {"kappa_lambda", kappa_l}, {"risk_aversion", ra}, {"sigma", sigma},
                        {"loss", loss}, {"base_intensity", base}, {"lambda_min", lmin}, {"horizon", T}, {"box_half_width", half}})
        require_positive("capponi_frei", k, v);
    if (!(lmax >= lmin)) throw ConfigError("builtin 'capponi_frei': lambda_max < lambda_min");
    if (spread < 0.0 || spread >= loss) throw ConfigError("builtin 'capponi_frei': loss_spread must lie in [0, loss)");

    ModelSpec m;
    m.name = "capponi_frei";
    m.agents = 1;
    m.block_dim = 1;
    m.noise_dim = 1;
    m.horizon = T;
    m.x0 = Vec::Constant(1, x0);
    m.box_lo = Vec::Constant(1, x0 - half);
    m.box_hi = Vec::Constant(1, x0 + half);
    Vec lo(2), hi(2);
    lo << 0.0, lmin;
    hi << umax, lmax;
    m.actions.lower = {lo};
    m.actions.upper = {hi};
    m.sigma = [sigma](double, const Vec&) { return Mat::Constant(1, 1, sigma); };
    m.drift = [sigma, mu0](double, const Vec&, const Vec& a) { return Vec::Constant(1, (mu0 + a[0]) / sigma); };
    JumpSpec js;
    if (spread == 0.0) {
        js.atoms = {{loss, base, false}};
    } else {
        js.atoms = {{loss - spread, 0.5 * base, false}, {loss + spread, 0.5 * base, false}};
    }
    js.size = [](double, const Vec&, double e) { return Vec::Constant(1, -e); };
    js.intensity = [](double, const Vec&, const Vec& a, double) { return a[1]; };
    m.jumps = {js};
    m.agent = {cara_agent(ra, r0, [ra, kappa, kappa_l, lmax](double, const Vec&, const Vec&, const Vec& a) {
        const double gap = lmax - a[1];
        return -ra * (kappa * a[0] * a[0] / 2.0 + kappa_l * gap * gap / 2.0);
    })};
    m.principal = risk_neutral_principal([](const Vec& x) { return x[0]; });
    m.source = source_of(m.name, p);
    return m;
}

// One market maker: mid price S plus ask/bid fill counts. The agent quotes
// spreads (delta_a, delta_b); fills arrive at rate A exp(-decay delta); the
// expected spread revenue enters through rho and the exchange collects a fee
// per fill.
inline ModelSpec market_maker(const Params& given) {
    Params p;
    const double sigma = take(p, given, "sigma", 1.0);
    const double base = take(p, given, "base_intensity", 1.0);
    const double decay = take(p, given, "decay", 1.0);
    const double smin = take(p, given, "spread_min", 0.0);
    const double smax = take(p, given, "spread_max", 3.0);
    const double fee = take(p, given, "fee", 1.0);
    const double ra = take(p, given, "risk_aversion", 1.0);
    const double T = take(p, given, "horizon", 1.0);
    const double r0 = take(p, given, "reservation", -1.0);
    const double half = take(p, given, "box_half_width", 4.0);
    reject_unknown("market_maker", given, p);
    for (auto [k, v] : {std::pair{"sigma", sigma}, {"base_intensity", base}, {"decay", decay}, {"risk_aversion", ra},
                        {"horizon", T}, {"box_half_width", half}})
        require_positive("market_maker", k, v);
    if (!(smax >= smin)) throw ConfigError("builtin 'market_maker': spread_max < spread_min");

    ModelSpec m;
    m.name = "market_maker";
    m.agents = 1;
    m.block_dim = 3;
    m.noise_dim = 1;
    m.horizon = T;
    m.x0 = Vec::Zero(3);
    m.box_lo = Vec::Constant(3, -half);
    m.box_hi = Vec::Constant(3, half);
    m.actions.lower = {Vec::Constant(2, smin)};
    m.actions.upper = {Vec::Constant(2, smax)};
    m.sigma = [sigma](double, const Vec&) {
        Mat s = Mat::Zero(3, 1);
        s(0, 0) = sigma;
        return s;
    };
    m.drift = [](double, const Vec&, const Vec&) { return Vec::Zero(1); };
    JumpSpec js;
    js.atoms = {{0.0, base, false}, {1.0, base, false}};  // mark 0 = ask fill, 1 = bid fill
    js.size = [](double, const Vec&, double e) {
        Vec v = Vec::Zero(3);
        v[e < 0.5 ? 1 : 2] = 1.0;
        return v;
    };
    js.intensity = [decay](double, const Vec&, const Vec& a, double e) { return std::exp(-decay * a[e < 0.5 ? 0 : 1]); };
    m.jumps = {js};
    m.agent = {cara_agent(ra, r0, [ra, base, decay](double, const Vec&, const Vec&, const Vec& a) {
        double revenue = 0.0;
        for (int s = 0; s < 2; ++s) revenue += base * a[s] * std::exp(-decay * a[s]);
        return ra * revenue;
    })};
    m.principal = risk_neutral_principal([fee](const Vec& x) { return fee * (x[1] + x[2]); });
    m.source = source_of(m.name, p);
    return m;
}

// N symmetric CARA agents, one output each, own Brownian driver; coupling
// lets agent j's effort leak into the others' outputs.
inline ModelSpec multi_agent_cara(const Params& given) {
    Params p;
    const double nag = take(p, given, "agents", 2.0);
    const double kappa = take(p, given, "kappa", 1.0);
    const double ra = take(p, given, "risk_aversion", 1.0);
    const double sigma = take(p, given, "sigma", 1.0);
    const double coupling = take(p, given, "coupling", 0.0);
    const double T = take(p, given, "horizon", 1.0);
    const double r0 = take(p, given, "reservation", -1.0);
    const double amin = take(p, given, "action_min", 0.0);
    const double amax = take(p, given, "action_max", 2.0);
    const double half = take(p, given, "box_half_width", 4.0);
    reject_unknown("multi_agent_cara", given, p);
    for (auto [k, v] : {std::pair{"kappa", kappa}, {"risk_aversion", ra}, {"sigma", sigma}, {"horizon", T}, {"box_half_width", half}})
        require_positive("multi_agent_cara", k, v);
    const int N = static_cast<int>(nag);
    if (N < 1 || N > 16 || static_cast<double>(N) != nag)
        throw ConfigError("builtin 'multi_agent_cara': 'agents' must be an integer in [1, 16]");

    ModelSpec m;
    m.name = "multi_agent_cara";
    m.agents = N;
    m.block_dim = 1;
    m.noise_dim = N;
    m.horizon = T;
    m.x0 = Vec::Zero(N);
    m.box_lo = Vec::Constant(N, -half);
    m.box_hi = Vec::Constant(N, half);
    for (int i = 0; i < N; ++i) {
        m.actions.lower.push_back(Vec::Constant(1, amin));
        m.actions.upper.push_back(Vec::Constant(1, amax));
    }
    m.sigma = [sigma, N](double, const Vec&) { return Mat(sigma * Mat::Identity(N, N)); };
    m.drift = [sigma, coupling, N](double, const Vec&, const Vec& a) {
        const double total = a.sum();
        Vec b(N);
        for (int j = 0; j < N; ++j) b[j] = (a[j] + coupling * (total - a[j])) / sigma;
        return b;
    };
    for (int i = 0; i < N; ++i) {
        m.jumps.push_back(no_jumps());
        m.agent.push_back(cara_agent(ra, r0, [ra, kappa, i](double, const Vec&, const Vec&, const Vec& a) {
            return -ra * kappa * a[i] * a[i] / 2.0;
        }));
    }
    m.principal = risk_neutral_principal([](const Vec& x) { return x.sum(); });
    m.source = source_of(m.name, p);
    return m;
}

} // namespace detail

inline const std::vector<std::string>& builtin_names() {
    static const std::vector<std::string> names{"holmstrom_milgrom", "capponi_frei", "market_maker", "multi_agent_cara"};
    return names;
}

/// Build one of the named reference models. Missing parameters take the
/// documented defaults; unknown names or parameters throw ConfigError.
inline ModelSpec builtin_model(const std::string& name, const Params& params = {}) {
    if (name == "holmstrom_milgrom") return detail::holmstrom_milgrom(params);
    if (name == "capponi_frei") return detail::capponi_frei(params);
    if (name == "market_maker") return detail::market_maker(params);
    if (name == "multi_agent_cara") return detail::multi_agent_cara(params);
    std::string list;
    for (const auto& n : builtin_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown builtin model '" + name + "' (supported: " + list + ")");
}

} // namespace pmc
