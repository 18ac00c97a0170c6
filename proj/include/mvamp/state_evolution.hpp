#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mvamp/ensembles.hpp"
#include "mvamp/errors.hpp"
#include "mvamp/quadrature.hpp"
#include "mvamp/scalar_models.hpp"

namespace mvamp {

// Every scalar of the recursion. "h" marks a conjugate (hat) variable.
struct MacroState {
    double m1x = 0, chi1x = 0, q1x = 0, m1z = 0, chi1z = 0, q1z = 0;
    double m2x = 0, chi2x = 0, q2x = 0, m2z = 0, chi2z = 0, q2z = 0;
    double mh1x = 0, chih1x = 1, Q1x = 1, mh1z = 0, chih1z = 1, Q1z = 1;
    double mh2x = 0, chih2x = 0, Q2x = 0, mh2z = 0, chih2z = 0, Q2z = 0;
    double Tx = 1, Tz = 1;
    // Mean squared denoiser derivatives, filled with the factorized moments.
    double chix2 = 0, chiz2 = 0;

    double That_z() const { return 1.0 / Tz; }

    static const std::vector<std::string>& field_names() {
        static const std::vector<std::string> n{
            "m1x",  "chi1x",  "q1x", "m1z",  "chi1z",  "q1z", "m2x",  "chi2x",  "q2x", "m2z",  "chi2z",  "q2z",
            "mh1x", "chih1x", "Q1x", "mh1z", "chih1z", "Q1z", "mh2x", "chih2x", "Q2x", "mh2z", "chih2z", "Q2z"};
        return n;
    }
    std::array<double, 24> fields() const {
        return {m1x,  chi1x,  q1x, m1z,  chi1z,  q1z, m2x,  chi2x,  q2x, m2z,  chi2z,  q2z,
                mh1x, chih1x, Q1x, mh1z, chih1z, Q1z, mh2x, chih2x, Q2x, mh2z, chih2z, Q2z};
    }
    // The 12 overlaps plus the 6 conjugates that drive the next iteration.
    std::array<double, 18> evolving() const {
        return {m1x, chi1x, q1x, m1z, chi1z, q1z, m2x, chi2x, q2x, m2z, chi2z, q2z, mh1x, chih1x, Q1x, mh1z, chih1z, Q1z};
    }
};

struct SEInputs {
    double mh1x = 0, chih1x = 1, Q1x = 1, mh1z = 0, chih1z = 1, Q1z = 1;
};

inline SEInputs inputs_of(const MacroState& s) { return {s.mh1x, s.chih1x, s.Q1x, s.mh1z, s.chih1z, s.Q1z}; }

struct SEOptions {
    GaussianQuadOptions quad{};
    bool verify = false;          // recompute factorized moments with doubled nodes
    double verify_tol = 1e-7;
    double chi_floor = 1e-12;
    double chihat_snap = 1e-10;   // negative chi-hat above -snap becomes 0
};

struct FactorizedMoments {
    double m, chi, q, chi2;
};

namespace detail {

inline GaussianQuadOptions refined(const GaussianQuadOptions& q) {
    GaussianQuadOptions r = q;
    r.gh_nodes = std::min(2 * q.gh_nodes, 1000);
    r.gk.rel_tol = std::max(q.gk.rel_tol * 1e-2, 1e-14);
    return r;
}

template <class Fn>
FactorizedMoments with_verification(Fn&& compute, const SEOptions& opt) {
    Eigen::ArrayXd a = compute(opt.quad);
    if (opt.verify) {
        Eigen::ArrayXd b = compute(refined(opt.quad));
        const double diff = (a - b).abs().maxCoeff();
        if (!(diff <= opt.verify_tol))
            throw AccuracyError("quadrature changed by " + std::to_string(diff) + " under node doubling");
    }
    return {a[0], a[1], a[2], a[3]};
}

}  // namespace detail

// h = mh x0 + sqrt(chih) xi. Moments m = E[x0 g], chi = E[g'], q = E[g^2],
// chi2 = E[g'^2]. Gaussian prior components are integrated in closed form
// over x0 given h, which leaves one integral over h per component.
inline FactorizedMoments se_factorized_x(const ScalarModelPair& models, double mh, double chih, double Q,
                                         const SEOptions& opt = {}) {
    if (!(chih >= 0.0)) throw InvalidParameter("se_factorized_x: chi-hat must be >= 0");
    const auto& den = models.x_denoiser;
    const auto kinks = den.kink_points(Q);
    auto compute = [&](const GaussianQuadOptions& qo) {
        Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(4);
        for (const auto& [a, w] : models.prior.atoms) {
            if (w == 0.0) continue;
            auto f = [&](double h) {
                GD v = den.eval(h, Q);
                Eigen::ArrayXd r(4);
                r << a * v.g, v.dg, v.g * v.g, v.dg * v.dg;
                return r;
            };
            acc += w * gaussian_expectation(f, mh * a, std::sqrt(chih), 4, kinks, qo);
        }
        for (const auto& c : models.prior.gaussians) {
            if (c.weight == 0.0) continue;
            const double s2 = mh * mh * c.var + chih;
            const double mean = mh * c.mean;
            const double coef = s2 > 0.0 ? mh * c.var / s2 : 0.0;
            auto f = [&](double h) {
                GD v = den.eval(h, Q);
                const double ex0 = c.mean + coef * (h - mean);  // E[x0 | h]
                Eigen::ArrayXd r(4);
                r << ex0 * v.g, v.dg, v.g * v.g, v.dg * v.dg;
                return r;
            };
            acc += c.weight * gaussian_expectation(f, mean, std::sqrt(s2), 4, kinks, qo);
        }
        return acc;
    };
    return detail::with_verification(compute, opt);
}

// z0 ~ N(0, Tz), y ~ q(.|z0), h = mh z0 + sqrt(chih) xi.
inline FactorizedMoments se_factorized_z(const ScalarModelPair& models, double Tz, double mh, double chih, double Q,
                                         const SEOptions& opt = {}) {
    if (!(Tz > 0.0)) throw InvalidParameter("se_factorized_z: Tz must be > 0");
    if (!(chih >= 0.0)) throw InvalidParameter("se_factorized_z: chi-hat must be >= 0");
    const auto& den = models.z_denoiser;
    const auto& ch = models.channel;
    auto compute = [&](const GaussianQuadOptions& qo) {
        auto inner = [&](double z0, double y) {
            auto f = [&](double h) {
                GD v = den.eval(h, Q, y);
                Eigen::ArrayXd r(4);
                r << z0 * v.g, v.dg, v.g * v.g, v.dg * v.dg;
                return r;
            };
            return gaussian_expectation(f, mh * z0, std::sqrt(chih), 4, den.kink_points(Q, y), qo);
        };
        auto outer = [&](double z0) -> Eigen::ArrayXd {
            Eigen::ArrayXd r = Eigen::ArrayXd::Zero(4);
            if (ch.discrete()) {
                for (double y : ch.alphabet()) {
                    const double p = ch.density(y, z0);
                    if (p > 0.0) r += p * inner(z0, y);
                }
                return r;
            }
            const auto& gh = gauss_hermite(qo.gh_nodes);
            const double sn = std::sqrt(ch.noise_var);
            for (std::size_t i = 0; i < gh.x.size(); ++i) r += gh.w[i] * inner(z0, z0 + sn * gh.x[i]);
            return r;
        };
        return gaussian_expectation(outer, 0.0, std::sqrt(Tz), 4, ch.z_breakpoints(), qo);
    };
    return detail::with_verification(compute, opt);
}

struct GaussianMoments {
    double m2x, chi2x, q2x, m2z, chi2z, q2z;
};

namespace detail {

inline void check_precision_on_support(const SpectralMeasure& measure, double Q2x, double Q2z) {
    for (double l : {measure.support_min(), measure.support_max()}) {
        const double e = Q2x + l * Q2z;
        if (!(e > 0.0))
            throw IndefinitePrecision("Q2x + lambda Q2z <= 0 at lambda = " + std::to_string(l), e, l);
    }
}

}  // namespace detail

inline GaussianMoments se_gaussian_part(const SpectralMeasure& measure, double Tx, double delta, double mh2x,
                                        double mh2z, double chih2x, double chih2z, double Q2x, double Q2z) {
    detail::check_precision_on_support(measure, Q2x, Q2z);
    Eigen::ArrayXd e = measure.expect(
        [&](double l) {
            const double den = Q2x + l * Q2z;
            const double sig = mh2x + l * mh2z;
            const double noi = chih2x + l * chih2z;
            Eigen::ArrayXd r(8);
            r << 1.0 / den, l / den, sig / den, l * sig / den, noi / (den * den), l * noi / (den * den),
                sig * sig / (den * den), l * sig * sig / (den * den);
            return r;
        },
        8);
    return {Tx * e[2], e[0], e[4] + Tx * e[6], Tx * e[3] / delta, e[1] / delta, (e[5] + Tx * e[7]) / delta};
}

namespace detail {

inline double snap_chihat(double v, const SEOptions& opt, const char* which) {
    if (v >= 0.0) return v;
    if (v > -opt.chihat_snap) return 0.0;
    throw NegativeVariance(std::string(which) + " is negative: " + std::to_string(v), v);
}

inline void check_chi(double chi, const SEOptions& opt, const char* which) {
    if (!(chi > opt.chi_floor)) throw DegenerateDivergence(std::string(which) + " at or below the floor", chi);
}

}  // namespace detail

enum class Direction { FtoG, GtoF };

// FtoG fills the 2-side conjugates from the 1-side moments; GtoF the reverse.
// The variance update uses the overlap m (not its conjugate) squared.
inline MacroState se_message_pass(Direction dir, MacroState s, const SEOptions& opt = {}) {
    if (dir == Direction::FtoG) {
        detail::check_chi(s.chi1x, opt, "chi1x");
        detail::check_chi(s.chi1z, opt, "chi1z");
        const double cx = s.chi1x, cz = s.chi1z;
        s.Q2x = 1.0 / cx - s.Q1x;
        s.mh2x = s.m1x / (s.Tx * cx) - s.mh1x;
        s.chih2x = detail::snap_chihat(s.q1x / (cx * cx) - s.m1x * s.m1x / (s.Tx * cx * cx) - s.chih1x, opt, "chih2x");
        s.Q2z = 1.0 / cz - s.Q1z;
        s.mh2z = s.m1z / (s.Tz * cz) - s.mh1z;
        s.chih2z = detail::snap_chihat(s.q1z / (cz * cz) - s.m1z * s.m1z / (s.Tz * cz * cz) - s.chih1z, opt, "chih2z");
    } else {
        detail::check_chi(s.chi2x, opt, "chi2x");
        detail::check_chi(s.chi2z, opt, "chi2z");
        const double cx = s.chi2x, cz = s.chi2z;
        s.Q1x = 1.0 / cx - s.Q2x;
        s.mh1x = s.m2x / (s.Tx * cx) - s.mh2x;
        s.chih1x = detail::snap_chihat(s.q2x / (cx * cx) - s.m2x * s.m2x / (s.Tx * cx * cx) - s.chih2x, opt, "chih1x");
        s.Q1z = 1.0 / cz - s.Q2z;
        s.mh1z = s.m2z / (s.Tz * cz) - s.mh2z;
        s.chih1z = detail::snap_chihat(s.q2z / (cz * cz) - s.m2z * s.m2z / (s.Tz * cz * cz) - s.chih2z, opt, "chih1z");
    }
    return s;
}

// Problem-level constants for the recursion.
struct SEProblem {
    ScalarModelPair models;
    SpectralMeasure measure;
    double delta;

    double Tx() const { return models.prior.second_moment(); }
    double Tz() const { return spectral_expectation(measure, [](double l) { return l; }) * Tx() / delta; }
};

// Factorized part, FtoG and Gaussian part for the given 1-side inputs.
inline MacroState se_forward(const SEProblem& pb, const SEInputs& in, double Tx, double Tz,
                             const SEOptions& opt = {}) {
    MacroState s;
    s.Tx = Tx;
    s.Tz = Tz;
    s.mh1x = in.mh1x;
    s.chih1x = in.chih1x;
    s.Q1x = in.Q1x;
    s.mh1z = in.mh1z;
    s.chih1z = in.chih1z;
    s.Q1z = in.Q1z;
    FactorizedMoments fx = se_factorized_x(pb.models, s.mh1x, s.chih1x, s.Q1x, opt);
    FactorizedMoments fz = se_factorized_z(pb.models, Tz, s.mh1z, s.chih1z, s.Q1z, opt);
    s.m1x = fx.m;
    s.chi1x = fx.chi;
    s.q1x = fx.q;
    s.chix2 = fx.chi2;
    s.m1z = fz.m;
    s.chi1z = fz.chi;
    s.q1z = fz.q;
    s.chiz2 = fz.chi2;
    s = se_message_pass(Direction::FtoG, s, opt);
    GaussianMoments g =
        se_gaussian_part(pb.measure, Tx, pb.delta, s.mh2x, s.mh2z, s.chih2x, s.chih2z, s.Q2x, s.Q2z);
    s.m2x = g.m2x;
    s.chi2x = g.chi2x;
    s.q2x = g.q2x;
    s.m2z = g.m2z;
    s.chi2z = g.chi2z;
    s.q2z = g.q2z;
    return s;
}

inline SEInputs se_backward(const MacroState& s, const SEOptions& opt = {}) {
    return inputs_of(se_message_pass(Direction::GtoF, s, opt));
}

inline SEInputs blend(const SEInputs& nw, const SEInputs& old, double a) {
    auto b = [a](double x, double y) { return a * x + (1.0 - a) * y; };
    return {b(nw.mh1x, old.mh1x), b(nw.chih1x, old.chih1x), b(nw.Q1x, old.Q1x),
            b(nw.mh1z, old.mh1z), b(nw.chih1z, old.chih1z), b(nw.Q1z, old.Q1z)};
}

struct SETrajectoryError : Error {
    SETrajectoryError(const std::string& what, int t_) : Error(what), t(t_) {}
    int t;
};

// Row t holds the moments produced by the inputs of iteration t, which
// matches what the engine records at the same t.
inline std::vector<MacroState> se_trajectory(const SEProblem& pb, SEInputs init, int T, double damping = 1.0,
                                             const SEOptions& opt = {}) {
    if (!(init.Q1x > 0.0) || !(init.Q1z > 0.0)) throw InvalidParameter("se_trajectory: initial Q1 must be > 0");
    if (!(damping > 0.0 && damping <= 1.0)) throw InvalidParameter("damping must lie in (0, 1]");
    const double Tx = pb.Tx(), Tz = pb.Tz();
    std::vector<MacroState> out;
    SEInputs in = init;
    for (int t = 1; t <= T; ++t) {
        try {
            MacroState s = se_forward(pb, in, Tx, Tz, opt);
            out.push_back(s);
            if (t < T) in = blend(se_backward(s, opt), in, damping);
        } catch (const Error& e) {
            throw SETrajectoryError(std::string(e.what()) + " (iteration " + std::to_string(t) + ")", t);
        }
    }
    return out;
}

struct SEFixedPoint {
    MacroState state;
    bool converged = false;
    int iterations = 0;
    double change = INFINITY;        // last max change over the 18 evolving fields
    double part_gap = INFINITY;      // max |m1-m2|, |q1-q2|, |chi1-chi2| over x and z
    double residual = INFINITY;      // rs_saddle_residual at the returned state
};

inline double rs_saddle_residual(const MacroState& s, const SEProblem& pb, const SEOptions& opt = {}) {
    MacroState r = se_forward(pb, inputs_of(s), s.Tx, s.Tz, opt);
    SEInputs b = se_backward(r, opt);
    r.mh1x = b.mh1x;
    r.chih1x = b.chih1x;
    r.Q1x = b.Q1x;
    r.mh1z = b.mh1z;
    r.chih1z = b.chih1z;
    r.Q1z = b.Q1z;
    auto fa = s.fields(), fb = r.fields();
    double m = 0.0;
    for (std::size_t i = 0; i < fa.size(); ++i) m = std::max(m, std::abs(fa[i] - fb[i]));
    return m;
}

inline double part_gap(const MacroState& s) {
    return std::max({std::abs(s.m1x - s.m2x), std::abs(s.q1x - s.q2x), std::abs(s.chi1x - s.chi2x),
                     std::abs(s.m1z - s.m2z), std::abs(s.q1z - s.q2z), std::abs(s.chi1z - s.chi2z)});
}

// Damped iteration until the 18 evolving fields move by less than tol.
// Running out of iterations is reported, not thrown.
inline SEFixedPoint se_fixed_point(const SEProblem& pb, SEInputs init, double damping = 0.5, double tol = 1e-11,
                                   int max_iter = 20000, const SEOptions& opt = {}) {
    if (!(init.Q1x > 0.0) || !(init.Q1z > 0.0)) throw InvalidParameter("se_fixed_point: initial Q1 must be > 0");
    if (!(damping > 0.0 && damping <= 1.0)) throw InvalidParameter("damping must lie in (0, 1]");
    const double Tx = pb.Tx(), Tz = pb.Tz();
    SEFixedPoint fp;
    SEInputs in = init;
    std::array<double, 18> prev{};
    bool have_prev = false;
    for (int t = 1; t <= max_iter; ++t) {
        MacroState s = se_forward(pb, in, Tx, Tz, opt);
        auto cur = s.evolving();
        fp.state = s;
        fp.iterations = t;
        if (have_prev) {
            double c = 0.0;
            for (std::size_t i = 0; i < cur.size(); ++i) c = std::max(c, std::abs(cur[i] - prev[i]));
            fp.change = c;
            if (c < tol) {
                fp.converged = true;
                break;
            }
        }
        prev = cur;
        have_prev = true;
        in = blend(se_backward(s, opt), in, damping);
    }
    fp.part_gap = part_gap(fp.state);
    fp.residual = rs_saddle_residual(fp.state, pb, opt);
    return fp;
}

}  // namespace mvamp
