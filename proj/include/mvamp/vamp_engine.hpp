#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mvamp/ensembles.hpp"
#include "mvamp/errors.hpp"
#include "mvamp/rng.hpp"
#include "mvamp/scalar_models.hpp"

namespace mvamp {

using Eigen::VectorXd;

struct ProblemInstance {
    std::shared_ptr<const MeasurementMatrix> A;
    VectorXd x0, z0, y;
    ScalarModelPair models;

    Eigen::Index M() const { return A->rows(); }
    Eigen::Index N() const { return A->cols(); }
};

// x0 from the prior, z0 = A x0, y from the channel, all from one stream.
inline ProblemInstance make_problem(std::shared_ptr<const MeasurementMatrix> a, ScalarModelPair models,
                                    RngStream& rng) {
    ProblemInstance p;
    p.A = std::move(a);
    p.models = std::move(models);
    const auto M = p.A->rows(), N = p.A->cols();
    p.x0.resize(N);
    for (Eigen::Index i = 0; i < N; ++i) p.x0[i] = p.models.prior.sample(rng);
    p.z0 = p.A->entries() * p.x0;
    p.y.resize(M);
    for (Eigen::Index i = 0; i < M; ++i) p.y[i] = p.models.channel.sample(p.z0[i], rng);
    return p;
}

struct EngineState {
    VectorXd h1x, h1z, h2x, h2z;
    double Q1x = 1.0, Q1z = 1.0, Q2x = 0.0, Q2z = 0.0;
    int t = 1;
};

// h1 entries i.i.d. N(0, h_variance); Q1 values as given.
inline EngineState default_init(const ProblemInstance& p, RngStream& rng, double h_variance = 1.0, double Q1x = 1.0,
                                double Q1z = 1.0) {
    if (!(Q1x > 0.0) || !(Q1z > 0.0)) throw InvalidParameter("initial Q1x and Q1z must be > 0");
    if (!(h_variance >= 0.0)) throw InvalidParameter("initial h variance must be >= 0");
    EngineState s;
    const double sd = std::sqrt(h_variance);
    s.h1x.resize(p.N());
    s.h1z.resize(p.M());
    for (Eigen::Index i = 0; i < p.N(); ++i) s.h1x[i] = sd * rng.normal();
    for (Eigen::Index i = 0; i < p.M(); ++i) s.h1z[i] = sd * rng.normal();
    s.h2x = VectorXd::Zero(p.N());
    s.h2z = VectorXd::Zero(p.M());
    s.Q1x = Q1x;
    s.Q1z = Q1z;
    return s;
}

struct FactorizedResult {
    VectorXd x1;
    double chi1x;
    VectorXd z1;
    double chi1z;
};

inline constexpr double default_chi_floor = 1e-12;

inline FactorizedResult factorized_step(const EngineState& s, const ProblemInstance& p,
                                        double chi_floor = default_chi_floor) {
    FactorizedResult r;
    const auto N = s.h1x.size(), M = s.h1z.size();
    r.x1.resize(N);
    r.z1.resize(M);
    double cx = 0.0, cz = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
        GD v = p.models.x_denoiser.eval(s.h1x[i], s.Q1x);
        r.x1[i] = v.g;
        cx += v.dg;
    }
    for (Eigen::Index i = 0; i < M; ++i) {
        GD v = p.models.z_denoiser.eval(s.h1z[i], s.Q1z, p.y[i]);
        r.z1[i] = v.g;
        cz += v.dg;
    }
    r.chi1x = cx / double(N);
    r.chi1z = cz / double(M);
    if (!(r.chi1x > chi_floor)) throw DegenerateDivergence("chi1x at or below the floor", r.chi1x);
    if (!(r.chi1z > chi_floor)) throw DegenerateDivergence("chi1z at or below the floor", r.chi1z);
    return r;
}

struct LmmseResult {
    VectorXd x2, z2;
    double chi2x, chi2z;
};

// x2 = K^{-1}(h2x + A^T h2z), K = Q2x I + Q2z A^T A, in the SVD basis.
inline LmmseResult lmmse_step(const VectorXd& h2x, const VectorXd& h2z, double Q2x, double Q2z,
                              const MeasurementMatrix& A) {
    const auto N = A.cols(), M = A.rows(), r = A.rank_dim();
    const VectorXd& s = A.s();
    double min_eig = std::numeric_limits<double>::infinity(), at_lambda = 0.0;
    auto consider = [&](double lam) {
        const double e = Q2x + lam * Q2z;
        if (e < min_eig) {
            min_eig = e;
            at_lambda = lam;
        }
    };
    // Eigenvalues of A^T A are s^2 plus N - r zeros; the extremes suffice.
    consider(s[0] * s[0]);
    consider(s[r - 1] * s[r - 1]);
    if (r < N) consider(0.0);
    if (!(min_eig > 0.0) || !std::isfinite(min_eig))
        throw IndefinitePrecision("K = Q2x I + Q2z A^T A is not positive definite", min_eig, at_lambda);

    const VectorXd a = A.v().transpose() * h2x;
    const VectorXd b = A.u().transpose() * h2z;
    VectorXd w(r);
    double sx = 0.0, sz = 0.0;
    for (Eigen::Index i = 0; i < r; ++i) {
        const double lam = s[i] * s[i];
        const double den = Q2x + lam * Q2z;
        w[i] = (a[i] + s[i] * b[i]) / den;
        sx += 1.0 / den;
        sz += lam / den;
    }
    LmmseResult out;
    if (r < N)
        out.x2 = h2x / Q2x + A.v() * (w - a / Q2x);
    else
        out.x2 = A.v() * w;
    out.z2 = A.u() * s.cwiseProduct(w);
    out.chi2x = (sx + double(N - r) / Q2x) / double(N);
    out.chi2z = sz / double(M);
    return out;
}

struct Messages {
    VectorXd h;
    double Q;
};

inline Messages message_pass(const VectorXd& est, double chi, const VectorXd& h_in, double Q_in,
                             double chi_floor = default_chi_floor) {
    if (!(chi > chi_floor)) throw DegenerateDivergence("divergence at or below the floor", chi);
    return {est / chi - h_in, 1.0 / chi - Q_in};
}

struct TrajectoryRow {
    int t;
    double m1x, q1x, chi1x, m1z, q1z, chi1z;
    double m2x, q2x, chi2x, m2z, q2z, chi2z;
    double d;
    double Q1x, Q1z, Q2x, Q2z;
};

inline const std::vector<std::string>& trajectory_columns() {
    static const std::vector<std::string> c{"t",   "m1x", "q1x",   "chi1x", "m1z", "q1z", "chi1z", "m2x", "q2x",
                                            "chi2x", "m2z", "q2z", "chi2z", "d",   "Q1x", "Q1z",   "Q2x", "Q2z"};
    return c;
}

inline std::vector<double> row_values(const TrajectoryRow& r) {
    return {double(r.t), r.m1x, r.q1x, r.chi1x, r.m1z, r.q1z, r.chi1z, r.m2x, r.q2x,
            r.chi2x,     r.m2z, r.q2z, r.chi2z, r.d,   r.Q1x, r.Q1z,   r.Q2x, r.Q2z};
}

enum class AbortReason { none, degenerate_divergence, indefinite_precision, non_finite };

inline const char* to_string(AbortReason a) {
    switch (a) {
        case AbortReason::none: return "none";
        case AbortReason::degenerate_divergence: return "degenerate_divergence";
        case AbortReason::indefinite_precision: return "indefinite_precision";
        case AbortReason::non_finite: return "non_finite";
    }
    return "unknown";
}

struct Trajectory {
    std::vector<TrajectoryRow> rows;
    bool converged = false;
    AbortReason abort = AbortReason::none;
    std::string abort_message;
    int abort_iteration = 0;
    VectorXd x1;
    // Largest relative gap between the engine's chi2 values and the
    // empirical-spectrum expectations, when trace checking is on.
    double trace_identity_error = 0.0;
    // Filled at convergence: ||z1 - z2||^2 / M and |chi1z - chi2z|.
    double fixed_point_z_gap = NAN;
    double fixed_point_chi_gap = NAN;
};

struct RunOptions {
    int T_iter = 10000;
    double damping = 1.0;
    double conv_tol = 1e-15;
    double chi_floor = default_chi_floor;
    bool check_trace_identity = false;
};

// One pass of lines 4-16. On return `s` holds the next h1, Q1 (damped).
struct StepOutput {
    TrajectoryRow row;
    FactorizedResult f;
    LmmseResult l;
};

namespace detail {

inline double rel_gap(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace detail

inline StepOutput vamp_step(EngineState& s, const ProblemInstance& p, const RunOptions& opt,
                            const SpectralMeasure* spectrum = nullptr, double* trace_err = nullptr) {
    const double N = double(p.N()), M = double(p.M());
    StepOutput o;
    o.f = factorized_step(s, p, opt.chi_floor);
    Messages fx = message_pass(o.f.x1, o.f.chi1x, s.h1x, s.Q1x, opt.chi_floor);
    Messages fz = message_pass(o.f.z1, o.f.chi1z, s.h1z, s.Q1z, opt.chi_floor);
    s.h2x = std::move(fx.h);
    s.h2z = std::move(fz.h);
    s.Q2x = fx.Q;
    s.Q2z = fz.Q;
    o.l = lmmse_step(s.h2x, s.h2z, s.Q2x, s.Q2z, *p.A);
    if (spectrum && trace_err) {
        const double qx = s.Q2x, qz = s.Q2z;
        Eigen::ArrayXd e = spectrum->expect(
            [&](double l) {
                Eigen::ArrayXd v(2);
                v << 1.0 / (qx + l * qz), l / (qx + l * qz);
                return v;
            },
            2);
        *trace_err = std::max({*trace_err, detail::rel_gap(o.l.chi2x, e[0]), detail::rel_gap(o.l.chi2z, e[1] / p.A->delta())});
    }
    auto& r = o.row;
    r.t = s.t;
    r.m1x = p.x0.dot(o.f.x1) / N;
    r.q1x = o.f.x1.squaredNorm() / N;
    r.chi1x = o.f.chi1x;
    r.m1z = p.z0.dot(o.f.z1) / M;
    r.q1z = o.f.z1.squaredNorm() / M;
    r.chi1z = o.f.chi1z;
    r.m2x = p.x0.dot(o.l.x2) / N;
    r.q2x = o.l.x2.squaredNorm() / N;
    r.chi2x = o.l.chi2x;
    r.m2z = p.z0.dot(o.l.z2) / M;
    r.q2z = o.l.z2.squaredNorm() / M;
    r.chi2z = o.l.chi2z;
    r.d = (o.f.x1 - o.l.x2).squaredNorm() / N;
    r.Q1x = s.Q1x;
    r.Q1z = s.Q1z;
    r.Q2x = s.Q2x;
    r.Q2z = s.Q2z;
    return o;
}

// Backward messages (lines 15-16), blended with the previous h1, Q1.
inline void vamp_backward(EngineState& s, const StepOutput& o, const RunOptions& opt) {
    Messages bx = message_pass(o.l.x2, o.l.chi2x, s.h2x, s.Q2x, opt.chi_floor);
    Messages bz = message_pass(o.l.z2, o.l.chi2z, s.h2z, s.Q2z, opt.chi_floor);
    const double a = opt.damping;
    if (a == 1.0) {
        s.h1x = std::move(bx.h);
        s.h1z = std::move(bz.h);
        s.Q1x = bx.Q;
        s.Q1z = bz.Q;
    } else {
        s.h1x = a * bx.h + (1.0 - a) * s.h1x;
        s.h1z = a * bz.h + (1.0 - a) * s.h1z;
        s.Q1x = a * bx.Q + (1.0 - a) * s.Q1x;
        s.Q1z = a * bz.Q + (1.0 - a) * s.Q1z;
    }
    ++s.t;
}

inline Trajectory run_vamp(const ProblemInstance& p, EngineState s, const RunOptions& opt = {}) {
    if (!(opt.damping > 0.0 && opt.damping <= 1.0)) throw InvalidParameter("damping must lie in (0, 1]");
    if (opt.T_iter < 1) throw InvalidParameter("T_iter must be >= 1");
    Trajectory tr;
    std::optional<SpectralMeasure> spec;
    if (opt.check_trace_identity) spec = empirical_spectrum(*p.A);
    for (int it = 0; it < opt.T_iter; ++it) {
        const int t_now = s.t;
        try {
            StepOutput o = vamp_step(s, p, opt, spec ? &*spec : nullptr, &tr.trace_identity_error);
            const bool finite = std::isfinite(o.row.m1x) && std::isfinite(o.row.q1x) && std::isfinite(o.row.d) &&
                                std::isfinite(o.row.m2x) && std::isfinite(o.row.q2x);
            if (!finite) {
                tr.abort = AbortReason::non_finite;
                tr.abort_message = "non-finite macroscopic observable";
                tr.abort_iteration = t_now;
                return tr;
            }
            tr.rows.push_back(o.row);
            tr.x1 = o.f.x1;
            if (o.row.d < opt.conv_tol) {
                tr.converged = true;
                tr.fixed_point_z_gap = (o.f.z1 - o.l.z2).squaredNorm() / double(p.M());
                tr.fixed_point_chi_gap = std::abs(o.f.chi1z - o.l.chi2z);
                return tr;
            }
            vamp_backward(s, o, opt);
        } catch (const DegenerateDivergence& e) {
            tr.abort = AbortReason::degenerate_divergence;
            tr.abort_message = e.what();
            tr.abort_iteration = t_now;
            return tr;
        } catch (const IndefinitePrecision& e) {
            tr.abort = AbortReason::indefinite_precision;
            tr.abort_message = e.what();
            tr.abort_iteration = t_now;
            return tr;
        } catch (const InvalidPrecision& e) {
            // A denoiser refused the incoming Q1; the run cannot continue.
            tr.abort = AbortReason::indefinite_precision;
            tr.abort_message = e.what();
            tr.abort_iteration = t_now;
            return tr;
        }
    }
    return tr;
}

inline EngineState inject_perturbation(EngineState s, double eps_x, double eps_z, RngStream& rng) {
    if (!(eps_x >= 0.0) || !(eps_z >= 0.0)) throw InvalidParameter("perturbation sizes must be >= 0");
    const double ax = std::sqrt(eps_x), az = std::sqrt(eps_z);
    for (Eigen::Index i = 0; i < s.h1x.size(); ++i) s.h1x[i] += ax * rng.normal();
    for (Eigen::Index i = 0; i < s.h1z.size(); ++i) s.h1z[i] += az * rng.normal();
    return s;
}

struct GrowthOptions {
    double eps = 1e-10;
    int n_iters = 40;
    double ceiling = 1e-2;          // stop fitting once the gap exceeds this
    bool require_fixed_point = true;  // demand d < 1e-12 at the starting state
    RunOptions run{};
};

// Least-squares slope of log(||h1x' - h1x||^2 / N) per iteration between a
// perturbed and an unperturbed copy of the dynamics. -inf when the gap
// contracts to exactly zero.
inline double measure_growth_rate(const ProblemInstance& p, const EngineState& fixed_state, RngStream& rng,
                                  const GrowthOptions& opt = {}) {
    if (!(opt.eps > 0.0)) throw InvalidParameter("growth eps must be > 0");
    if (opt.n_iters < 2) throw InvalidParameter("growth n_iters must be >= 2");
    if (opt.require_fixed_point) {
        EngineState probe = fixed_state;
        StepOutput o = vamp_step(probe, p, opt.run);
        if (!(o.row.d < 1e-12)) throw InvalidParameter("measure_growth_rate: starting state is not a fixed point");
    }
    EngineState a = fixed_state;
    EngineState b = inject_perturbation(fixed_state, opt.eps, opt.eps, rng);
    std::vector<double> ts, ls;
    for (int k = 0; k < opt.n_iters; ++k) {
        StepOutput oa = vamp_step(a, p, opt.run);
        vamp_backward(a, oa, opt.run);
        StepOutput ob = vamp_step(b, p, opt.run);
        vamp_backward(b, ob, opt.run);
        const double gap = (a.h1x - b.h1x).squaredNorm() / double(p.N());
        if (gap == 0.0) return -std::numeric_limits<double>::infinity();
        if (!std::isfinite(gap) || gap > opt.ceiling) break;
        ts.push_back(k + 1);
        ls.push_back(std::log(gap));
    }
    if (ts.size() < 2) throw InvalidParameter("measure_growth_rate: fewer than two points in the linear regime");
    const double n = double(ts.size());
    double mt = 0, ml = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        mt += ts[i];
        ml += ls[i];
    }
    mt /= n;
    ml /= n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        sxy += (ts[i] - mt) * (ls[i] - ml);
        sxx += (ts[i] - mt) * (ts[i] - mt);
    }
    return sxy / sxx;
}

}  // namespace mvamp
