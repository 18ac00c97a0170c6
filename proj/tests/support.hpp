#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvamp/ensembles.hpp"
#include "mvamp/rng.hpp"
#include "mvamp/scalar_models.hpp"
#include "mvamp/state_evolution.hpp"

namespace mvamp::testing {

inline ScalarModelPair gaussian_models(double v = 1.0, double noise = 1.0) {
    return {gaussian_prior(v), gaussian_noise_channel(noise), gaussian_prior_denoiser(v),
            gaussian_channel_map_denoiser(noise)};
}

inline ScalarModelPair perceptron_models() {
    return {gaussian_prior(1.0), random_label_channel(), ising_denoiser(), probit_theta_denoiser()};
}

inline ScalarModelPair lasso_models(double gamma = 0.01) {
    return {bernoulli_gauss_prior(0.1), sign_channel(), laplace_map_denoiser(gamma),
            gaussian_channel_map_denoiser(1.0)};
}

inline SEProblem perceptron_problem(double delta) {
    return {perceptron_models(), marchenko_pastur_measure(delta), delta};
}

inline SEProblem lasso_problem(double delta = 0.4, double gamma = 0.01) {
    return {lasso_models(gamma), SpectralMeasure::from_atoms({{1.0, delta}, {0.0, 1.0 - delta}}), delta};
}

// ---- Monte-Carlo moments ----

struct MCEstimate {
    std::array<double, 4> mean{}, se{};  // m, chi, q, chi2
};

namespace detail {

// Neumaier summation: 1e7 plain additions drift by ~1e-9 relative, which
// matters for moments that are constant in the sample.
struct Sum {
    double s = 0.0, c = 0.0;
    void add(double v) {
        const double t = s + v;
        c += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
        s = t;
    }
    double value() const { return s + c; }
};

struct Accum {
    std::array<Sum, 4> s1{}, sq{};
    long n = 0;
    void add(const std::array<double, 4>& v) {
        for (int k = 0; k < 4; ++k) {
            s1[k].add(v[k]);
            sq[k].add(v[k] * v[k]);
        }
        ++n;
    }
    MCEstimate done() const {
        MCEstimate e;
        for (int k = 0; k < 4; ++k) {
            e.mean[k] = s1[k].value() / n;
            const double var = std::max(0.0, sq[k].value() / n - e.mean[k] * e.mean[k]);
            e.se[k] = std::sqrt(var / (n - 1));
        }
        return e;
    }
};

}  // namespace detail

// x0 ~ prior, h = mh x0 + sqrt(chih) xi.
inline MCEstimate mc_factorized_x(const ScalarModelPair& m, double mh, double chih, double Q, long n, RngStream& rng) {
    detail::Accum a;
    const double s = std::sqrt(chih);
    for (long i = 0; i < n; ++i) {
        const double x0 = m.prior.sample(rng);
        const double h = mh * x0 + s * rng.normal();
        const GD v = m.x_denoiser.eval(h, Q);
        a.add({x0 * v.g, v.dg, v.g * v.g, v.dg * v.dg});
    }
    return a.done();
}

// z0 ~ N(0, Tz), y ~ channel, h = mh z0 + sqrt(chih) xi.
inline MCEstimate mc_factorized_z(const ScalarModelPair& m, double Tz, double mh, double chih, double Q, long n,
                                  RngStream& rng) {
    detail::Accum a;
    const double s = std::sqrt(chih), sz = std::sqrt(Tz);
    for (long i = 0; i < n; ++i) {
        const double z0 = sz * rng.normal();
        const double y = m.channel.sample(z0, rng);
        const double h = mh * z0 + s * rng.normal();
        const GD v = m.z_denoiser.eval(h, Q, y);
        a.add({z0 * v.g, v.dg, v.g * v.g, v.dg * v.dg});
    }
    return a.done();
}

inline std::array<double, 4> as_array(const FactorizedMoments& f) { return {f.m, f.chi, f.q, f.chi2}; }

// ---- Closed-form fixed point of the matched Gaussian model ----
//
// Prior N(0, v), additive noise of variance s2, both matched. The x-side
// denoiser passes precision 1/v and no signal; the z-side passes the data
// term y / s2. Everything else is a ridge-regression spectral average,
// summed directly over a finite set of atoms.

inline MacroState matched_gaussian_fixed_point(double v, double s2, const std::vector<Atom>& atoms, double delta) {
    double e_inv = 0, e_sig = 0, e_q2x = 0, e_m2z = 0, e_chiz = 0, e_q2z = 0, e_lam = 0;
    for (const auto& a : atoms) {
        const double l = a.lambda, w = a.weight;
        const double den = 1.0 / v + l / s2;
        e_inv += w / den;
        e_sig += w * (l / s2) / den;
        e_q2x += w * l * (l * v + s2) / (s2 * s2 * den * den);
        e_m2z += w * l * l / (s2 * den);
        e_chiz += w * l / den;
        e_q2z += w * l * l * (l * v + s2) / (den * den);
        e_lam += w * l;
    }
    MacroState s;
    s.Tx = v;
    s.Tz = e_lam * v / delta;
    s.chi2x = e_inv;
    s.m2x = v * e_sig;
    s.q2x = e_q2x;
    s.m2z = v / delta * e_m2z;
    s.chi2z = e_chiz / delta;
    s.q2z = e_q2z / (delta * s2 * s2);
    s.m1x = s.m2x, s.chi1x = s.chi2x, s.q1x = s.q2x;
    s.m1z = s.m2z, s.chi1z = s.chi2z, s.q1z = s.q2z;
    s.Q2x = 1.0 / v, s.mh2x = 0, s.chih2x = 0;
    s.Q2z = 1.0 / s2, s.mh2z = 1.0 / s2, s.chih2z = 1.0 / s2;
    s.Q1x = 1.0 / s.chi1x - s.Q2x;
    s.mh1x = s.m1x / (s.Tx * s.chi1x) - s.mh2x;
    s.chih1x = s.q1x / (s.chi1x * s.chi1x) - s.m1x * s.m1x / (s.Tx * s.chi1x * s.chi1x) - s.chih2x;
    s.Q1z = 1.0 / s.chi1z - s.Q2z;
    s.mh1z = s.m1z / (s.Tz * s.chi1z) - s.mh2z;
    s.chih1z = s.q1z / (s.chi1z * s.chi1z) - s.m1z * s.m1z / (s.Tz * s.chi1z * s.chi1z) - s.chih2z;
    return s;
}

// ---- Numerically extremized F ----
//
// 2F(cx, cz) = extr_{gx, gy} [cx gx + delta cz gy - E log(gx + lambda gy)] - log cx - delta log cz.
// The inner problem is convex in (gx, gy); Newton on the stationarity
// conditions cx = E[1/den], delta cz = E[lambda/den].

struct NumericalF {
    SpectralMeasure measure;
    double delta;

    NumericalF(SpectralMeasure m, double d) : measure(std::move(m)), delta(d) {
        // Second differences amplify integration error by 1/h^2.
        measure.quad.rel_tol = 1e-14;
        measure.quad.abs_tol = 1e-300;
    }

    Eigen::Vector2d solve_gamma(double cx, double cz, Eigen::Vector2d g) const {
        for (int it = 0; it < 100; ++it) {
            Eigen::ArrayXd e = moments(g);
            Eigen::Vector2d r(cx - e[0], delta * cz - e[1]);
            Eigen::Matrix2d J;
            J << e[2], e[3], e[3], e[4];  // d r / d g
            Eigen::Vector2d step = J.inverse() * (-r);
            // Keep the denominator positive on the support.
            double t = 1.0;
            while (t > 1e-12) {
                Eigen::Vector2d gn = g + t * step;
                if (gn[0] + measure.support_min() * gn[1] > 0 && gn[0] + measure.support_max() * gn[1] > 0) {
                    g = gn;
                    break;
                }
                t *= 0.5;
            }
            if (step.norm() < 1e-15 * (1.0 + g.norm())) break;
        }
        return g;
    }

    // E[1/den], E[l/den], E[1/den^2], E[l/den^2], E[l^2/den^2], E[log den]
    Eigen::ArrayXd moments(const Eigen::Vector2d& g) const {
        return measure.expect(
            [&](double l) {
                const double d = g[0] + l * g[1];
                Eigen::ArrayXd r(6);
                r << 1.0 / d, l / d, 1.0 / (d * d), l / (d * d), l * l / (d * d), std::log(d);
                return r;
            },
            6);
    }

    double twice_f(double cx, double cz, const Eigen::Vector2d& g0) const {
        const Eigen::Vector2d g = solve_gamma(cx, cz, g0);
        const double elog = moments(g)[5];
        return cx * g[0] + delta * cz * g[1] - elog - std::log(cx) - delta * std::log(cz);
    }

    // Centered second differences of F (not 2F).
    std::array<double, 3> second_derivatives(double cx, double cz, const Eigen::Vector2d& g0, double h) const {
        auto f = [&](double a, double b) { return 0.5 * twice_f(a, b, g0); };
        const double hx = h * cx, hz = h * cz;
        const double f00 = f(cx, cz);
        const double fxx = (f(cx + hx, cz) - 2 * f00 + f(cx - hx, cz)) / (hx * hx);
        const double fzz = (f(cx, cz + hz) - 2 * f00 + f(cx, cz - hz)) / (hz * hz);
        const double fxz =
            (f(cx + hx, cz + hz) - f(cx + hx, cz - hz) - f(cx - hx, cz + hz) + f(cx - hx, cz - hz)) / (4 * hx * hz);
        return {fxx, fzz, fxz};
    }
};

}  // namespace mvamp::testing
