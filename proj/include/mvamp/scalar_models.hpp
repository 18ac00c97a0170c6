#pragma once

#include <cmath>
#include <functional>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "mvamp/errors.hpp"
#include "mvamp/quadrature.hpp"
#include "mvamp/rng.hpp"

namespace mvamp {

using nlohmann::json;

enum class BetaMode { mmse, map };

inline const char* to_string(BetaMode m) { return m == BetaMode::mmse ? "mmse" : "map"; }

// Denoiser value and its derivative in h.
struct GD {
    double g;
    double dg;
};

struct XDenoiser {
    std::string name;
    BetaMode mode = BetaMode::mmse;
    json params = json::object();
    std::function<GD(double, double)> eval;                 // (h, Q)
    std::function<std::vector<double>(double)> kinks;       // h locations where dg jumps, given Q

    double g(double h, double q) const { return eval(h, q).g; }
    double dg(double h, double q) const { return eval(h, q).dg; }
    std::vector<double> kink_points(double q) const { return kinks ? kinks(q) : std::vector<double>{}; }
};

struct ZDenoiser {
    std::string name;
    BetaMode mode = BetaMode::mmse;
    json params = json::object();
    std::function<GD(double, double, double)> eval;               // (h, Q, y)
    std::function<std::vector<double>(double, double)> kinks;     // (Q, y)

    double g(double h, double q, double y) const { return eval(h, q, y).g; }
    double dg(double h, double q, double y) const { return eval(h, q, y).dg; }
    std::vector<double> kink_points(double q, double y) const {
        return kinks ? kinks(q, y) : std::vector<double>{};
    }
};

// ---- postulated x-side denoisers ----

inline XDenoiser gaussian_prior_denoiser(double variance) {
    if (!(variance > 0.0)) throw InvalidParameter("gaussian_prior_denoiser: variance must be > 0");
    XDenoiser d;
    d.name = "gaussian";
    d.params = {{"variance", variance}};
    const double iv = 1.0 / variance;
    d.eval = [iv](double h, double q) {
        const double p = q + iv;
        if (!(p > 0.0)) throw InvalidPrecision("gaussian_prior_denoiser: Q + 1/v must be > 0");
        return GD{h / p, 1.0 / p};
    };
    return d;
}

inline XDenoiser laplace_map_denoiser(double gamma) {
    if (!(gamma > 0.0)) throw InvalidParameter("laplace_map_denoiser: gamma must be > 0");
    XDenoiser d;
    d.name = "laplace_map";
    d.mode = BetaMode::map;
    d.params = {{"gamma", gamma}};
    d.eval = [gamma](double h, double q) {
        if (!(q > 0.0)) throw InvalidPrecision("laplace_map_denoiser: Q must be > 0");
        const double a = std::abs(h) - gamma;
        if (a <= 0.0) return GD{0.0, 0.0};
        return GD{std::copysign(a, h) / q, 1.0 / q};
    };
    d.kinks = [gamma](double) { return std::vector<double>{-gamma, gamma}; };
    return d;
}

// Prior on {-1, +1}; the Q x^2 / 2 term is constant there and drops out.
inline XDenoiser ising_denoiser() {
    XDenoiser d;
    d.name = "ising";
    d.eval = [](double h, double) {
        const double t = std::tanh(h);
        return GD{t, 1.0 - t * t};
    };
    return d;
}

// ---- postulated z-side denoisers ----

inline ZDenoiser gaussian_channel_map_denoiser(double noise_variance) {
    if (!(noise_variance > 0.0)) throw InvalidParameter("gaussian_channel_map_denoiser: variance must be > 0");
    ZDenoiser d;
    d.name = "gaussian_map";
    d.mode = BetaMode::map;
    d.params = {{"variance", noise_variance}};
    const double iv = 1.0 / noise_variance;
    d.eval = [iv](double h, double q, double y) {
        const double p = q + iv;
        if (!(p > 0.0)) throw InvalidPrecision("gaussian_channel_map_denoiser: Q + 1/v must be > 0");
        return GD{(h + y * iv) / p, 1.0 / p};
    };
    return d;
}

namespace detail {

// For t ~ N(0,1) conditioned on t > a: lambda = E[t | t > a] and
// var = Var[t | t > a]. Beyond a = 8 the Mills ratio comes from its
// continued fraction, written so that neither output cancels.
inline std::pair<double, double> truncated_normal_moments(double a) {
    if (a < 8.0) {
        const double tail = 0.5 * std::erfc(a / std::sqrt(2.0));
        const double lam = std::exp(-0.5 * a * a) / std::sqrt(2.0 * M_PI) / tail;
        return {lam, 1.0 - lam * (lam - a)};
    }
    // lambda - a = T = 1/(a + S2), S2 = 2/(a + 3/(a + 4/(a + ...)))
    double s = 0.0;
    for (int k = 200; k >= 2; --k) s = k / (a + s);
    const double t = 1.0 / (a + s);
    return {a + t, t * (s - t)};
}

}  // namespace detail

// Posterior mean of z under N(h/Q, 1/Q) restricted to sign(z) = y.
inline ZDenoiser probit_theta_denoiser() {
    ZDenoiser d;
    d.name = "probit_theta";
    d.eval = [](double h, double q, double y) {
        if (!(q > 0.0)) throw InvalidPrecision("probit_theta_denoiser: Q must be > 0");
        if (y != 1.0 && y != -1.0) throw InvalidParameter("probit_theta_denoiser: y must be +1 or -1");
        const double sd = 1.0 / std::sqrt(q);
        const double a = -y * h * sd;
        auto [lam, var] = detail::truncated_normal_moments(a);
        return GD{h / q + y * sd * lam, sd * sd * var};
    };
    return d;
}

// ---- generic denoisers by Gauss-Hermite quadrature of the tilted measure ----

// Postulated density: point masses plus an optional continuous pdf.
struct PostulatedDensity {
    std::vector<std::pair<double, double>> atoms;  // (value, weight)
    std::function<double(double)> pdf;
};

namespace detail {

// Mean and variance of p(x) exp(h x - Q x^2 / 2), normalized. The
// continuous part is integrated by Gauss-Hermite against a reference
// Gaussian N(c, s^2): first the tilt itself, then twice more centred on the
// current posterior of the continuous part, so that a prior much narrower
// than the tilt is still resolved.
inline GD tilted_moments(const std::vector<std::pair<double, double>>& atoms, const std::function<double(double)>& pdf,
                         double h, double q, int nodes) {
    if (!(q > 0.0)) throw InvalidPrecision("quadrature denoiser: Q must be > 0");
    const double mu = h / q, sd = 1.0 / std::sqrt(q);
    std::vector<double> x, lw;
    auto continuous = [&](double c, double s) {
        x.clear();
        lw.clear();
        const auto& r = gauss_hermite(nodes);
        const double lc = std::log(s * std::sqrt(2.0 * M_PI));
        for (std::size_t i = 0; i < r.x.size(); ++i) {
            const double xi = c + s * r.x[i];
            const double p = pdf(xi);
            if (p > 0.0 && r.w[i] > 0.0) {
                x.push_back(xi);
                lw.push_back(lc + std::log(r.w[i]) + std::log(p) - 0.5 * q * (xi - mu) * (xi - mu) +
                             0.5 * r.x[i] * r.x[i]);
            }
        }
    };
    auto moments = [&](std::size_t from, double& lmax, double& m, double& v) {
        lmax = -INFINITY;
        for (std::size_t i = from; i < lw.size(); ++i) lmax = std::max(lmax, lw[i]);
        double z = 0.0;
        m = 0.0;
        for (std::size_t i = from; i < x.size(); ++i) {
            const double w = std::exp(lw[i] - lmax);
            z += w;
            m += w * x[i];
        }
        m /= z;
        v = 0.0;
        for (std::size_t i = from; i < x.size(); ++i) v += std::exp(lw[i] - lmax) * (x[i] - m) * (x[i] - m);
        v /= z;
    };
    if (pdf) {
        auto log_mass = [&]() -> double {
            if (x.empty()) return -INFINITY;
            double lmax, m, v;
            moments(0, lmax, m, v);
            double z = 0.0;
            for (double l : lw) z += std::exp(l - lmax);
            return lmax + std::log(z);
        };
        auto chain = [&](double c, double s) {
            continuous(c, s);
            for (int pass = 0; pass < 2 && !x.empty(); ++pass) {
                double lmax, m, v;
                moments(0, lmax, m, v);
                if (!(v > 0.0) || !std::isfinite(m) || !std::isfinite(lmax)) break;
                continuous(m, std::sqrt(v));
            }
            return log_mass();
        };
        // A tilt far from the density's mass sees only the density's tail;
        // one node then dominates and the recentred grid collapses onto it,
        // which shows up as lost mass. Chains started at the origin are
        // tried as well and the one keeping the most mass wins. Near-ties
        // go to the earlier start so that g stays smooth in h.
        const std::pair<double, double> starts[] = {{mu, sd}, {0.0, 1.0}, {0.0, 10.0}};
        int pick = 0;
        double best = chain(mu, sd);
        for (int k = 1; k < 3; ++k) {
            const double lm = chain(starts[k].first, starts[k].second);
            if (lm > best + 1e-3 || (!std::isfinite(best) && std::isfinite(lm))) best = lm, pick = k;
        }
        if (pick != 2) chain(starts[pick].first, starts[pick].second);
    }
    for (const auto& [a, w] : atoms) {
        if (w <= 0.0) continue;
        x.push_back(a);
        lw.push_back(std::log(w) - 0.5 * q * (a - mu) * (a - mu));
    }
    double lmax = -INFINITY;
    for (double l : lw) lmax = std::max(lmax, l);
    // The common factor exp(h^2 / 2Q) is left out of every term.
    if (x.empty() || !std::isfinite(lmax))
        throw DegeneratePosterior("quadrature denoiser: normalizer underflows");
    double m, v;
    moments(0, lmax, m, v);
    return GD{m, v};
}

}  // namespace detail

inline XDenoiser quadrature_x_denoiser(PostulatedDensity density, int nodes = 121) {
    if (nodes < 21) throw InvalidParameter("quadrature denoiser needs at least 21 nodes");
    if (!density.pdf && density.atoms.empty()) throw InvalidParameter("quadrature denoiser: empty density");
    XDenoiser d;
    d.name = "quadrature";
    d.params = {{"nodes", nodes}};
    d.eval = [density = std::move(density), nodes](double h, double q) {
        return detail::tilted_moments(density.atoms, density.pdf, h, q, nodes);
    };
    return d;
}

// likelihood(z, y) is the postulated p(y | z).
inline ZDenoiser quadrature_z_denoiser(std::function<double(double, double)> likelihood, int nodes = 121) {
    if (nodes < 21) throw InvalidParameter("quadrature denoiser needs at least 21 nodes");
    if (!likelihood) throw InvalidParameter("quadrature denoiser: empty likelihood");
    ZDenoiser d;
    d.name = "quadrature";
    d.params = {{"nodes", nodes}};
    d.eval = [likelihood = std::move(likelihood), nodes](double h, double q, double y) {
        std::function<double(double)> pdf = [&](double z) { return likelihood(z, y); };
        return detail::tilted_moments({}, pdf, h, q, nodes);
    };
    return d;
}

// ---- actual data-generating models ----

struct GaussComponent {
    double weight;
    double mean;
    double var;
};

// Mixture of point masses and Gaussian components.
struct ActualPrior {
    std::string name;
    json params = json::object();
    std::vector<std::pair<double, double>> atoms;  // (value, weight)
    std::vector<GaussComponent> gaussians;

    double second_moment() const {
        double t = 0.0;
        for (const auto& [a, w] : atoms) t += w * a * a;
        for (const auto& c : gaussians) t += c.weight * (c.var + c.mean * c.mean);
        return t;
    }

    double total_weight() const {
        double t = 0.0;
        for (const auto& a : atoms) t += a.second;
        for (const auto& c : gaussians) t += c.weight;
        return t;
    }

    double sample(RngStream& rng) const {
        double u = rng.uniform();
        for (const auto& [a, w] : atoms) {
            if (u < w) return a;
            u -= w;
        }
        for (const auto& c : gaussians) {
            if (u < c.weight) return c.mean + std::sqrt(c.var) * rng.normal();
            u -= c.weight;
        }
        // Rounding left u past the last weight.
        if (!gaussians.empty()) return gaussians.back().mean + std::sqrt(gaussians.back().var) * rng.normal();
        return atoms.back().first;
    }
};

inline ActualPrior mixture_prior(std::vector<std::pair<double, double>> atoms, std::vector<GaussComponent> gaussians,
                                 std::string name = "mixture") {
    ActualPrior p;
    p.name = std::move(name);
    p.atoms = std::move(atoms);
    p.gaussians = std::move(gaussians);
    for (const auto& a : p.atoms)
        if (!(a.second >= 0.0)) throw InvalidParameter("prior weights must be >= 0");
    for (const auto& c : p.gaussians)
        if (!(c.weight >= 0.0) || !(c.var > 0.0)) throw InvalidParameter("prior components need weight >= 0, var > 0");
    if (std::abs(p.total_weight() - 1.0) > 1e-12) throw InvalidParameter("prior weights must sum to 1");
    return p;
}

inline ActualPrior bernoulli_gauss_prior(double rho) {
    if (!(rho > 0.0 && rho <= 1.0)) throw InvalidParameter("bernoulli_gauss_prior: rho must lie in (0, 1]");
    std::vector<std::pair<double, double>> atoms;
    if (rho < 1.0) atoms.push_back({0.0, 1.0 - rho});
    ActualPrior p = mixture_prior(std::move(atoms), {{rho, 0.0, 1.0}}, "bernoulli_gauss");
    p.params = {{"rho", rho}};
    return p;
}

inline ActualPrior gaussian_prior(double variance) {
    if (!(variance > 0.0)) throw InvalidParameter("gaussian_prior: variance must be > 0");
    ActualPrior p = mixture_prior({}, {{1.0, 0.0, variance}}, "gaussian");
    p.params = {{"variance", variance}};
    return p;
}

inline ActualPrior rademacher_prior() { return mixture_prior({{-1.0, 0.5}, {1.0, 0.5}}, {}, "rademacher"); }

enum class ChannelKind { sign, random_label, additive_gaussian };

struct ActualChannel {
    std::string name;
    json params = json::object();
    ChannelKind kind = ChannelKind::sign;
    double noise_var = 0.0;

    bool discrete() const { return kind != ChannelKind::additive_gaussian; }
    std::vector<double> alphabet() const {
        if (!discrete()) return {};
        return {-1.0, 1.0};
    }

    double sample(double z, RngStream& rng) const {
        switch (kind) {
            case ChannelKind::sign:
                return z >= 0.0 ? 1.0 : -1.0;
            case ChannelKind::random_label:
                return rng.coin() ? 1.0 : -1.0;
            case ChannelKind::additive_gaussian:
                return z + std::sqrt(noise_var) * rng.normal();
        }
        return 0.0;
    }

    // q(y | z); a density in y for the continuous channel.
    double density(double y, double z) const {
        switch (kind) {
            case ChannelKind::sign:
                return (y == (z >= 0.0 ? 1.0 : -1.0)) ? 1.0 : 0.0;
            case ChannelKind::random_label:
                return (y == 1.0 || y == -1.0) ? 0.5 : 0.0;
            case ChannelKind::additive_gaussian: {
                const double u = (y - z) / std::sqrt(noise_var);
                return std::exp(-0.5 * u * u) / std::sqrt(2.0 * M_PI * noise_var);
            }
        }
        return 0.0;
    }

    // z locations where q(y | z) jumps.
    std::vector<double> z_breakpoints() const {
        if (kind == ChannelKind::sign) return {0.0};
        return {};
    }
};

inline ActualChannel sign_channel() {
    ActualChannel c;
    c.name = "sign";
    c.kind = ChannelKind::sign;
    return c;
}

inline ActualChannel random_label_channel() {
    ActualChannel c;
    c.name = "random_label";
    c.kind = ChannelKind::random_label;
    return c;
}

inline ActualChannel gaussian_noise_channel(double variance) {
    if (!(variance > 0.0)) throw InvalidParameter("gaussian_noise_channel: variance must be > 0");
    ActualChannel c;
    c.name = "gaussian";
    c.kind = ChannelKind::additive_gaussian;
    c.noise_var = variance;
    c.params = {{"variance", variance}};
    return c;
}

struct ScalarModelPair {
    ActualPrior prior;
    ActualChannel channel;
    XDenoiser x_denoiser;
    ZDenoiser z_denoiser;
};

}  // namespace mvamp
