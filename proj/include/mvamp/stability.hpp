#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <functional>
#include <json.hpp>
#include <optional>

#include "mvamp/ensembles.hpp"
#include "mvamp/errors.hpp"
#include "mvamp/state_evolution.hpp"

namespace mvamp {

struct Zeta {
    double z0, z1, z2;
    double det() const { return z0 * z2 - z1 * z1; }
};

// zeta_k = E[lambda^k / (Q2x + lambda Q2z)^2].
inline Zeta zeta_moments(double Q2x, double Q2z, const SpectralMeasure& measure) {
    detail::check_precision_on_support(measure, Q2x, Q2z);
    Eigen::ArrayXd e = measure.expect(
        [&](double l) {
            const double d = 1.0 / ((Q2x + l * Q2z) * (Q2x + l * Q2z));
            Eigen::ArrayXd r(3);
            r << d, l * d, l * l * d;
            return r;
        },
        3);
    return {e[0], e[1], e[2]};
}

struct FSecond {
    double Fxx, Fzz, Fxz;
};

namespace detail {

inline double checked_det(const Zeta& z) {
    const double d = z.det();
    if (!(d > 1e-13 * z.z0 * z.z2)) throw SingularMeasure("zeta0 zeta2 - zeta1^2 vanishes (single-atom spectrum)");
    return d;
}

}  // namespace detail

inline FSecond f_second_derivatives(double chix, double chiz, const Zeta& z, double delta) {
    if (!(chix > 0.0) || !(chiz > 0.0)) throw InvalidParameter("f_second_derivatives: chi must be > 0");
    const double D = detail::checked_det(z);
    return {0.5 * (1.0 / (chix * chix) - z.z2 / D), 0.5 * delta * (1.0 / (chiz * chiz) - delta * z.z0 / D),
            0.5 * delta * z.z1 / D};
}

// Negative means the replica-symmetric point is unstable. The cross term
// enters squared, as the determinant of the linearized map requires.
inline double at_condition(const MacroState& fixed, const SpectralMeasure& measure, double delta, double chix2,
                           double chiz2) {
    const Zeta z = zeta_moments(fixed.Q2x, fixed.Q2z, measure);
    const FSecond f = f_second_derivatives(fixed.chi1x, fixed.chi1z, z, delta);
    return (1.0 - 2.0 * f.Fxx * chix2) * (1.0 - 2.0 / delta * f.Fzz * chiz2) -
           4.0 / delta * f.Fxz * f.Fxz * chix2 * chiz2;
}

// The expanded form of the perturbation-growth condition.
inline double micro_instability(const MacroState& fixed, const SpectralMeasure& measure, double delta, double chix2,
                                double chiz2) {
    const Zeta z = zeta_moments(fixed.Q2x, fixed.Q2z, measure);
    const double D = detail::checked_det(z);
    const double cx = fixed.chi1x * fixed.chi1x, cz = fixed.chi1z * fixed.chi1z;
    return 1.0 - (1.0 / cx - z.z2 / D) * chix2 - (1.0 / cz - delta * z.z0 / D) * chiz2 +
           (1.0 / (cx * cz) - delta * z.z0 / (cx * D) - z.z2 / (cz * D) + delta / D) * chix2 * chiz2;
}

struct GrowthMatrix {
    Eigen::Matrix2d G;
    double max_eigenvalue;  // spectral radius
};

// Per-iteration growth of the perturbation variances (x, z).
inline GrowthMatrix growth_matrix(const MacroState& fixed, const SpectralMeasure& measure, double delta,
                                  double chix2, double chiz2) {
    const Zeta z = zeta_moments(fixed.Q2x, fixed.Q2z, measure);
    const double cx = fixed.chi1x * fixed.chi1x, cz = fixed.chi1z * fixed.chi1z;
    const double a = chix2 / cx - 1.0, b = chiz2 / cz - 1.0;
    GrowthMatrix g;
    g.G << (z.z0 / cx - 1.0) * a, (z.z1 / cx) * b, (z.z1 / (delta * cz)) * a, (z.z2 / (delta * cz) - 1.0) * b;
    const double tr = g.G.trace(), det = g.G.determinant();
    const std::complex<double> disc = std::sqrt(std::complex<double>(tr * tr / 4.0 - det, 0.0));
    g.max_eigenvalue = std::max(std::abs(tr / 2.0 + disc), std::abs(tr / 2.0 - disc));
    return g;
}

struct StabilityReport {
    double zeta0 = 0, zeta1 = 0, zeta2 = 0;
    double chi_x = 0, chi_z = 0, chi_x2 = 0, chi_z2 = 0;
    double F_xx = 0, F_zz = 0, F_xz = 0;
    double at_lhs = 0, micro_lhs = 0;
    Eigen::Matrix2d growth = Eigen::Matrix2d::Zero();
    double growth_eigenvalue = 0;
    bool stable = false;
};

inline StabilityReport stability_report(const MacroState& fixed, const SpectralMeasure& measure, double delta) {
    StabilityReport r;
    const Zeta z = zeta_moments(fixed.Q2x, fixed.Q2z, measure);
    r.zeta0 = z.z0;
    r.zeta1 = z.z1;
    r.zeta2 = z.z2;
    r.chi_x = fixed.chi1x;
    r.chi_z = fixed.chi1z;
    r.chi_x2 = fixed.chix2;
    r.chi_z2 = fixed.chiz2;
    const FSecond f = f_second_derivatives(r.chi_x, r.chi_z, z, delta);
    r.F_xx = f.Fxx;
    r.F_zz = f.Fzz;
    r.F_xz = f.Fxz;
    r.at_lhs = at_condition(fixed, measure, delta, r.chi_x2, r.chi_z2);
    r.micro_lhs = micro_instability(fixed, measure, delta, r.chi_x2, r.chi_z2);
    GrowthMatrix g = growth_matrix(fixed, measure, delta, r.chi_x2, r.chi_z2);
    r.growth = g.G;
    r.growth_eigenvalue = g.max_eigenvalue;
    r.stable = g.max_eigenvalue < 1.0;
    return r;
}

inline nlohmann::json to_json(const StabilityReport& r) {
    return {{"zeta0", r.zeta0},
            {"zeta1", r.zeta1},
            {"zeta2", r.zeta2},
            {"chi_x", r.chi_x},
            {"chi_z", r.chi_z},
            {"chi_x2", r.chi_x2},
            {"chi_z2", r.chi_z2},
            {"F_xx", r.F_xx},
            {"F_zz", r.F_zz},
            {"F_xz", r.F_xz},
            {"at_lhs", r.at_lhs},
            {"micro_lhs", r.micro_lhs},
            {"growth_matrix", {{r.growth(0, 0), r.growth(0, 1)}, {r.growth(1, 0), r.growth(1, 1)}}},
            {"growth_eigenvalue", r.growth_eigenvalue},
            {"stable", r.stable},
            {"signs_agree", (r.at_lhs > 0) == (r.micro_lhs > 0) && (r.micro_lhs > 0) == r.stable}};
}

struct ThresholdOptions {
    double tol = 1e-3;
    double damping = 0.5;
    double se_tol = 1e-11;
    int max_iter = 20000;
    SEOptions se{};
};

struct ThresholdResult {
    double delta_at;
    double lo, hi;
    double at_lo, at_hi;
    int evaluations;
};

// Bisection on delta -> at_condition at the SE fixed point, warm-starting
// each solve from the previous fixed point.
inline ThresholdResult find_at_threshold(const std::function<SEProblem(double)>& family, double lo, double hi,
                                         const ThresholdOptions& opt = {}) {
    if (!(lo < hi)) throw BracketError("bracket must satisfy lo < hi");
    if (!(opt.tol > 0.0)) throw InvalidParameter("threshold tol must be > 0");
    std::optional<SEInputs> warm;
    int evals = 0;
    auto at_of = [&](double d) {
        SEProblem pb = family(d);
        SEFixedPoint fp = se_fixed_point(pb, warm.value_or(SEInputs{}), opt.damping, opt.se_tol, opt.max_iter, opt.se);
        ++evals;
        if (!fp.converged)
            throw NonConvergence("SE did not converge at delta = " + std::to_string(d) +
                                 " (last change " + std::to_string(fp.change) + ")");
        warm = inputs_of(fp.state);
        return at_condition(fp.state, pb.measure, d, fp.state.chix2, fp.state.chiz2);
    };
    double flo = at_of(lo), fhi = at_of(hi);
    const double at_lo = flo, at_hi = fhi;
    if ((flo > 0) == (fhi > 0))
        throw BracketError("at_condition has the same sign at both ends (" + std::to_string(flo) + ", " +
                           std::to_string(fhi) + ")");
    while (hi - lo >= opt.tol) {
        const double mid = 0.5 * (lo + hi);
        const double fm = at_of(mid);
        if ((fm > 0) == (flo > 0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
            fhi = fm;
        }
    }
    return {0.5 * (lo + hi), lo, hi, at_lo, at_hi, evals};
}

}  // namespace mvamp
