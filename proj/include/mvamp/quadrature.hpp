#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <queue>
#include <vector>

#include "mvamp/errors.hpp"

namespace mvamp {

// Nodes and weights for E[f(xi)], xi ~ N(0,1). Weights sum to one.
struct GaussHermiteRule {
    std::vector<double> x;
    std::vector<double> w;
};

namespace detail {

// Physicists' rule. Golub-Welsch eigenvalues give the nodes, Newton on the
// orthonormal recurrence polishes them and supplies accurate weights.
inline GaussHermiteRule compute_gauss_hermite(int n) {
    const double pim4 = 0.7511255444649425;  // pi^(-1/4)
    std::vector<double> x(n), w(n);
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n), sub(std::max(n - 1, 0));
    for (int k = 1; k < n; ++k) sub[k - 1] = std::sqrt(0.5 * k);
    Eigen::VectorXd ev = Eigen::VectorXd::Zero(1);
    if (n > 1) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
        es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
        ev = es.eigenvalues();
    }
    for (int i = 0; i < n; ++i) {
        double z = ev[n - 1 - i], pp = 0.0;
        int it = 0;
        for (; it < 100; ++it) {
            double p1 = pim4, p2 = 0.0;
            for (int j = 0; j < n; ++j) {
                double p3 = p2;
                p2 = p1;
                p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(double(j) / (j + 1)) * p3;
            }
            pp = std::sqrt(2.0 * n) * p2;
            const double z1 = z;
            z = z1 - p1 / pp;
            if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) break;
        }
        if (it == 100) throw AccuracyError("Gauss-Hermite Newton iteration did not converge");
        x[i] = z;
        w[i] = 2.0 / (pp * pp);
    }
    for (int i = 0; i < n / 2; ++i) {
        const double a = 0.5 * (x[i] - x[n - 1 - i]), b = 0.5 * (w[i] + w[n - 1 - i]);
        x[i] = a;
        x[n - 1 - i] = -a;
        w[i] = w[n - 1 - i] = b;
    }
    if (n % 2) x[n / 2] = 0.0;
    GaussHermiteRule r;
    r.x.resize(n);
    r.w.resize(n);
    const double rpi = 1.0 / std::sqrt(M_PI);
    for (int i = 0; i < n; ++i) {
        r.x[i] = std::sqrt(2.0) * x[n - 1 - i];
        r.w[i] = w[n - 1 - i] * rpi;
    }
    return r;
}

}  // namespace detail

inline const GaussHermiteRule& gauss_hermite(int n) {
    if (n < 1 || n > 1000) throw InvalidParameter("Gauss-Hermite node count out of range");
    static std::mutex mu;
    static std::map<int, GaussHermiteRule> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, detail::compute_gauss_hermite(n)).first;
    return it->second;
}

struct QuadResult {
    Eigen::ArrayXd value;
    Eigen::ArrayXd error;
    int evaluations = 0;
    int intervals = 0;
};

namespace detail {

struct GkSegment {
    double a, b;
    Eigen::ArrayXd value, error, absval;
    double priority;
    bool operator<(const GkSegment& o) const { return priority < o.priority; }
};

template <class F>
GkSegment gk15(F& f, double a, double b, int k) {
    static const double xgk[8] = {0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
                                  0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
                                  0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
                                  0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
    static const double wgk[8] = {0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
                                  0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
                                  0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
                                  0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
    static const double wg[4] = {0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                                 0.381830050505118944950369775488975, 0.417959183673469387755102040816327};
    const double c = 0.5 * (a + b), h = 0.5 * (b - a);
    Eigen::ArrayXd fc = f(c);
    Eigen::ArrayXd rk = wgk[7] * fc, rg = wg[3] * fc, ra = wgk[7] * fc.abs();
    for (int j = 0; j < 7; ++j) {
        Eigen::ArrayXd f1 = f(c - h * xgk[j]);
        Eigen::ArrayXd f2 = f(c + h * xgk[j]);
        rk += wgk[j] * (f1 + f2);
        ra += wgk[j] * (f1.abs() + f2.abs());
        if (j % 2 == 1) rg += wg[j / 2] * (f1 + f2);
    }
    GkSegment s{a, b, rk * h, ((rk - rg) * h).abs(), ra * std::abs(h), 0.0};
    if (s.value.size() != k) throw InvalidParameter("integrand returned wrong number of components");
    return s;
}

}  // namespace detail

struct GkOptions {
    double rel_tol = 1e-10;
    double abs_tol = 1e-300;
    int max_intervals = 4000;
};

// Adaptive Gauss-Kronrod (7/15) for a vector-valued integrand on [a,b].
// Each component j must satisfy err_j <= max(abs_tol, rel_tol * int |f_j|).
template <class F>
QuadResult integrate_gk(F&& f, double a, double b, int k, const GkOptions& opt = {}) {
    QuadResult out;
    out.value = Eigen::ArrayXd::Zero(k);
    out.error = Eigen::ArrayXd::Zero(k);
    if (a == b) return out;
    std::priority_queue<detail::GkSegment> heap;
    Eigen::ArrayXd val = Eigen::ArrayXd::Zero(k), err = Eigen::ArrayXd::Zero(k), absv = Eigen::ArrayXd::Zero(k);
    auto push = [&](detail::GkSegment s) {
        val += s.value;
        err += s.error;
        absv += s.absval;
        s.priority = s.error.maxCoeff();
        heap.push(std::move(s));
    };
    push(detail::gk15(f, a, b, k));
    int n_int = 1;
    auto done = [&] {
        for (int j = 0; j < k; ++j)
            if (err[j] > std::max(opt.abs_tol, opt.rel_tol * absv[j])) return false;
        return true;
    };
    while (!done()) {
        if (n_int >= opt.max_intervals) throw AccuracyError("adaptive quadrature hit the interval limit");
        detail::GkSegment s = heap.top();
        heap.pop();
        val -= s.value;
        err -= s.error;
        absv -= s.absval;
        const double m = 0.5 * (s.a + s.b);
        if (!(m > s.a && m < s.b)) throw AccuracyError("adaptive quadrature interval underflow");
        push(detail::gk15(f, s.a, m, k));
        push(detail::gk15(f, m, s.b, k));
        ++n_int;
    }
    // Re-sum to shed the drift from repeated add/subtract.
    out.value.setZero();
    out.error.setZero();
    while (!heap.empty()) {
        out.value += heap.top().value;
        out.error += heap.top().error;
        heap.pop();
    }
    out.intervals = n_int;
    out.evaluations = 15 * (2 * n_int - 1);
    return out;
}

struct GaussianQuadOptions {
    int gh_nodes = 121;
    GkOptions gk{1e-11, 1e-300, 4000};
    double span = 40.0;  // in standard deviations, for the piecewise path
};

// E[f(mean + sd*xi)] for xi ~ N(0,1). Breakpoints are points in h where f
// has kinks or jumps; when any fall within the span the integral is split
// there and done adaptively, otherwise Gauss-Hermite is used.
template <class F>
Eigen::ArrayXd gaussian_expectation(F&& f, double mean, double sd, int k, const std::vector<double>& breakpoints = {},
                                    const GaussianQuadOptions& opt = {}) {
    if (sd == 0.0) return f(mean);
    if (!(sd > 0.0) || !std::isfinite(mean)) throw InvalidParameter("gaussian_expectation: bad mean or sd");
    const double lo = mean - opt.span * sd, hi = mean + opt.span * sd;
    std::vector<double> cuts;
    for (double b : breakpoints)
        if (b > lo && b < hi) cuts.push_back(b);
    if (cuts.empty()) {
        const auto& r = gauss_hermite(opt.gh_nodes);
        Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(k);
        for (std::size_t i = 0; i < r.x.size(); ++i) acc += r.w[i] * f(mean + sd * r.x[i]);
        return acc;
    }
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    cuts.insert(cuts.begin(), lo);
    cuts.push_back(hi);
    const double norm = 1.0 / (sd * std::sqrt(2.0 * M_PI));
    auto g = [&](double h) -> Eigen::ArrayXd {
        const double u = (h - mean) / sd;
        return f(h) * (norm * std::exp(-0.5 * u * u));
    };
    Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(k);
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) acc += integrate_gk(g, cuts[i], cuts[i + 1], k, opt.gk).value;
    return acc;
}

}  // namespace mvamp
