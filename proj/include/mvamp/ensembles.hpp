#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mvamp/errors.hpp"
#include "mvamp/quadrature.hpp"
#include "mvamp/rng.hpp"

namespace mvamp {

using nlohmann::json;

struct Atom {
    double lambda;
    double weight;
};

// Continuous part on [lo, hi]. The density is w(lambda), multiplied by
// sqrt((hi - lambda)(lambda - lo)) when sqrt_edges is set. Integration runs
// in theta with lambda = lo + (hi - lo) sin^2(theta/2), which removes the
// square-root edges and integrable 1/sqrt singularities.
struct SpectralDensity {
    double lo = 0.0;
    double hi = 0.0;
    std::function<double(double)> w;
    bool sqrt_edges = false;
    json descriptor = json{{"kind", "custom"}};
};

class SpectralMeasure {
public:
    SpectralMeasure() = default;

    static SpectralMeasure from_atoms(std::vector<Atom> atoms) {
        SpectralMeasure m;
        m.atoms_ = std::move(atoms);
        m.check_atoms();
        return m;
    }

    static SpectralMeasure with_density(std::vector<Atom> atoms, SpectralDensity d) {
        if (!(d.lo >= 0.0) || !(d.hi > d.lo) || !d.w) throw InvalidMeasure("density needs 0 <= lo < hi and a function");
        SpectralMeasure m;
        m.atoms_ = std::move(atoms);
        m.check_atoms();
        m.density_ = std::move(d);
        Eigen::ArrayXd mass = m.integrate_density([](double) { return Eigen::ArrayXd::Ones(1); }, 1);
        m.continuous_mass_ = mass[0];
        return m;
    }

    static SpectralMeasure empirical(std::vector<double> eigenvalues) {
        if (eigenvalues.empty()) throw InvalidMeasure("empirical measure needs at least one eigenvalue");
        for (double l : eigenvalues)
            if (!(l >= 0.0) || !std::isfinite(l)) throw InvalidMeasure("eigenvalues must be finite and >= 0");
        SpectralMeasure m;
        m.samples_ = std::move(eigenvalues);
        m.empirical_ = true;
        return m;
    }

    bool is_empirical() const { return empirical_; }
    const std::vector<Atom>& atoms() const { return atoms_; }
    const std::vector<double>& samples() const { return samples_; }
    const std::optional<SpectralDensity>& density() const { return density_; }
    double continuous_mass() const { return continuous_mass_; }

    double total_mass() const {
        if (empirical_) return 1.0;
        double t = continuous_mass_;
        for (const auto& a : atoms_) t += a.weight;
        return t;
    }

    void validate(double tol = 1e-10) const {
        if (std::abs(total_mass() - 1.0) > tol) throw InvalidMeasure("spectral measure mass differs from 1");
    }

    // Smallest and largest eigenvalue that carries mass.
    double support_min() const { return support(true); }
    double support_max() const { return support(false); }

    // Points where an integrand linear in lambda attains its extremes.
    std::vector<double> extreme_points() const { return {support_min(), support_max()}; }

    // sum w_i f(l_i) + int f rho. f returns k components.
    template <class F>
    Eigen::ArrayXd expect(F&& f, int k) const {
        Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(k);
        auto checked = [&](double l) -> Eigen::ArrayXd {
            Eigen::ArrayXd v = f(l);
            if (v.size() != k) throw InvalidParameter("integrand returned wrong number of components");
            if (!v.allFinite()) throw EvaluationError("integrand not finite at lambda = " + std::to_string(l), l);
            return v;
        };
        if (empirical_) {
            for (double l : samples_) acc += checked(l);
            return acc / double(samples_.size());
        }
        for (const auto& a : atoms_) acc += a.weight * checked(a.lambda);
        if (density_) acc += integrate_density(checked, k);
        return acc;
    }

    GkOptions quad{1e-10, 1e-300, 4000};

private:
    void check_atoms() const {
        for (const auto& a : atoms_) {
            if (!(a.lambda >= 0.0) || !std::isfinite(a.lambda)) throw InvalidMeasure("atom eigenvalue must be >= 0");
            if (!(a.weight > 0.0 && a.weight <= 1.0)) throw InvalidMeasure("atom weight must lie in (0, 1]");
        }
    }

    double support(bool lower) const {
        double v = lower ? INFINITY : -INFINITY;
        auto take = [&](double l) { v = lower ? std::min(v, l) : std::max(v, l); };
        if (empirical_)
            for (double l : samples_) take(l);
        for (const auto& a : atoms_) take(a.lambda);
        if (density_) take(lower ? density_->lo : density_->hi);
        return v;
    }

    template <class F>
    Eigen::ArrayXd integrate_density(F&& f, int k) const {
        const auto& d = *density_;
        const double span = d.hi - d.lo;
        auto g = [&](double th) -> Eigen::ArrayXd {
            const double s = std::sin(0.5 * th);
            const double l = d.lo + span * s * s;
            double jac = 0.5 * span * std::sin(th);
            if (d.sqrt_edges) jac *= 0.5 * span * std::sin(th);
            return f(l) * (d.w(l) * jac);
        };
        return integrate_gk(g, 0.0, M_PI, k, quad).value;
    }

    std::vector<Atom> atoms_;
    std::optional<SpectralDensity> density_;
    double continuous_mass_ = 0.0;
    std::vector<double> samples_;
    bool empirical_ = false;
};

template <class F>
double spectral_expectation(const SpectralMeasure& m, F&& f) {
    return m.expect([&](double l) { return Eigen::ArrayXd::Constant(1, f(l)); }, 1)[0];
}

// Limiting law of A^T A for M x N A with i.i.d. entries of variance 1/N.
inline SpectralMeasure marchenko_pastur_measure(double delta) {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw InvalidParameter("marchenko_pastur_measure: delta must be > 0");
    const double r = std::sqrt(delta);
    SpectralDensity d;
    d.lo = (1.0 - r) * (1.0 - r);
    d.hi = (1.0 + r) * (1.0 + r);
    d.w = [](double l) { return 1.0 / (2.0 * M_PI * l); };
    d.sqrt_edges = true;
    d.descriptor = json{{"kind", "marchenko_pastur"}, {"delta", delta}};
    std::vector<Atom> atoms;
    if (delta < 1.0) atoms.push_back({0.0, 1.0 - delta});
    return SpectralMeasure::with_density(std::move(atoms), std::move(d));
}

inline json to_json(const SpectralMeasure& m) {
    json j;
    if (m.is_empirical()) {
        j["samples"] = m.samples();
        return j;
    }
    j["atoms"] = json::array();
    for (const auto& a : m.atoms()) j["atoms"].push_back({a.lambda, a.weight});
    j["density"] = m.density() ? m.density()->descriptor : json(nullptr);
    return j;
}

inline SpectralMeasure spectral_measure_from_json(const json& j) {
    if (!j.is_object()) throw InvalidMeasure("spectral measure JSON must be an object");
    for (const auto& [k, v] : j.items())
        if (k != "atoms" && k != "density" && k != "samples") throw InvalidMeasure("unknown spectral measure key: " + k);
    if (j.contains("samples")) return SpectralMeasure::empirical(j.at("samples").get<std::vector<double>>());
    std::vector<Atom> atoms;
    if (j.contains("atoms"))
        for (const auto& a : j.at("atoms")) {
            if (!a.is_array() || a.size() != 2) throw InvalidMeasure("atoms are [lambda, weight] pairs");
            atoms.push_back({a[0].get<double>(), a[1].get<double>()});
        }
    if (j.contains("density") && !j.at("density").is_null()) {
        const auto& d = j.at("density");
        if (d.value("kind", "") != "marchenko_pastur")
            throw InvalidMeasure("only marchenko_pastur densities can be read back from JSON");
        SpectralMeasure mp = marchenko_pastur_measure(d.at("delta").get<double>());
        for (const auto& a : mp.atoms()) atoms.push_back(a);
        return SpectralMeasure::with_density(std::move(atoms), *mp.density());
    }
    return SpectralMeasure::from_atoms(std::move(atoms));
}

// A with thin SVD factors: u is M x r, v is N x r, r = min(M, N), and the
// singular values are sorted in decreasing order.
class MeasurementMatrix {
public:
    MeasurementMatrix() = default;

    static MeasurementMatrix from_entries(Eigen::MatrixXd a, json provenance = json::object()) {
        if (a.rows() < 1 || a.cols() < 1) throw InvalidAspect("matrix must be at least 1 x 1");
        MeasurementMatrix m;
        Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
        m.a_ = std::move(a);
        m.u_ = svd.matrixU();
        m.s_ = svd.singularValues();
        m.v_ = svd.matrixV();
        m.provenance_ = std::move(provenance);
        return m;
    }

    static MeasurementMatrix from_factors(Eigen::MatrixXd u, Eigen::VectorXd s, Eigen::MatrixXd v,
                                          json provenance = json::object()) {
        if (u.cols() != s.size() || v.cols() != s.size() || s.size() != std::min(u.rows(), v.rows()))
            throw InvalidAspect("factor shapes do not form a thin SVD");
        std::vector<Eigen::Index> order(s.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return s[i] > s[j]; });
        MeasurementMatrix m;
        m.u_.resize(u.rows(), s.size());
        m.v_.resize(v.rows(), s.size());
        m.s_.resize(s.size());
        for (Eigen::Index k = 0; k < s.size(); ++k) {
            m.u_.col(k) = u.col(order[k]);
            m.v_.col(k) = v.col(order[k]);
            m.s_[k] = s[order[k]];
        }
        m.a_ = m.u_ * m.s_.asDiagonal() * m.v_.transpose();
        m.provenance_ = std::move(provenance);
        return m;
    }

    Eigen::Index rows() const { return a_.rows(); }
    Eigen::Index cols() const { return a_.cols(); }
    Eigen::Index rank_dim() const { return s_.size(); }
    double delta() const { return double(rows()) / double(cols()); }
    const Eigen::MatrixXd& entries() const { return a_; }
    const Eigen::MatrixXd& u() const { return u_; }
    const Eigen::VectorXd& s() const { return s_; }
    const Eigen::MatrixXd& v() const { return v_; }
    const json& provenance() const { return provenance_; }

private:
    Eigen::MatrixXd a_, u_, v_;
    Eigen::VectorXd s_;
    json provenance_;
};

// First k columns of a Haar orthogonal n x n matrix: thin QR of a Gaussian
// n x k matrix with the R diagonal made positive.
inline Eigen::MatrixXd haar_columns(Eigen::Index n, Eigen::Index k, RngStream& rng) {
    Eigen::MatrixXd g(n, k);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < k; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, k);
    for (Eigen::Index j = 0; j < k; ++j)
        if (qr.matrixQR()(j, j) < 0.0) q.col(j) *= -1.0;
    return q;
}

inline MeasurementMatrix sample_row_orthogonal(int M, int N, double scale, RngStream& rng) {
    if (M < 1 || N < 1) throw InvalidAspect("sample_row_orthogonal: sizes must be positive");
    if (M > N) throw InvalidAspect("sample_row_orthogonal: requires M <= N");
    if (!(scale > 0.0)) throw InvalidParameter("sample_row_orthogonal: scale must be > 0");
    Eigen::MatrixXd q = haar_columns(N, M, rng);
    json prov{{"ensemble", "row_orthogonal"}, {"M", M}, {"N", N}, {"scale", scale}, {"stream_key", rng.key()}};
    MeasurementMatrix m = MeasurementMatrix::from_factors(Eigen::MatrixXd::Identity(M, M),
                                                          Eigen::VectorXd::Constant(M, scale), q, prov);
    return m;
}

// Singular values of an M x N matrix with i.i.d. N(0,1) entries, drawn from
// the bidiagonal model with chi-distributed entries. Sorted decreasing.
inline Eigen::VectorXd gaussian_singular_values(int M, int N, RngStream& rng) {
    const int m = std::max(M, N), n = std::min(M, N);
    auto chi = [&](int dof) { return std::sqrt(std::chi_squared_distribution<double>(dof)(rng.engine())); };
    Eigen::VectorXd d(n), e(std::max(n - 1, 0));
    for (int i = 0; i < n; ++i) d[i] = chi(m - i);
    for (int i = 0; i + 1 < n; ++i) e[i] = chi(n - 1 - i);
    Eigen::VectorXd diag(n), sub(std::max(n - 1, 0));
    for (int i = 0; i < n; ++i) diag[i] = d[i] * d[i] + (i > 0 ? e[i - 1] * e[i - 1] : 0.0);
    for (int i = 0; i + 1 < n; ++i) sub[i] = d[i] * e[i];
    Eigen::VectorXd ev;
    if (n == 1) {
        ev = diag;
    } else {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
        es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
        ev = es.eigenvalues();
    }
    Eigen::VectorXd s(n);
    for (int i = 0; i < n; ++i) s[i] = std::sqrt(std::max(ev[n - 1 - i], 0.0));
    return s;
}

enum class GaussianSampling { direct, rotational };

// direct: draws the M*N entries row by row and factors with a dense SVD.
// rotational: A = U S V^T with Haar U, V and S from the bidiagonal model;
// the law of A is the same, and the SVD comes for free.
inline MeasurementMatrix sample_iid_gaussian(int M, int N, RngStream& rng,
                                             GaussianSampling method = GaussianSampling::direct) {
    if (M < 1 || N < 1) throw InvalidAspect("sample_iid_gaussian: sizes must be positive");
    const double sc = 1.0 / std::sqrt(double(N));
    json prov{{"ensemble", "iid_gaussian"},
              {"M", M},
              {"N", N},
              {"sampling", method == GaussianSampling::direct ? "direct" : "rotational"},
              {"stream_key", rng.key()}};
    if (method == GaussianSampling::direct) {
        Eigen::MatrixXd a(M, N);
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) a(i, j) = sc * rng.normal();
        return MeasurementMatrix::from_entries(std::move(a), prov);
    }
    const int r = std::min(M, N);
    Eigen::VectorXd s = gaussian_singular_values(M, N, rng) * sc;
    Eigen::MatrixXd u = haar_columns(M, r, rng);
    Eigen::MatrixXd v = haar_columns(N, r, rng);
    return MeasurementMatrix::from_factors(std::move(u), std::move(s), std::move(v), prov);
}

namespace detail {

// Largest-remainder rounding of weights * total so the counts sum to total.
inline std::vector<long> resolve_counts(const std::vector<double>& weights, long total) {
    std::vector<long> c(weights.size());
    std::vector<std::pair<double, std::size_t>> rem;
    long used = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double x = weights[i] * double(total);
        c[i] = long(std::floor(x));
        used += c[i];
        rem.push_back({x - std::floor(x), i});
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
    for (std::size_t k = 0; used < total && k < rem.size(); ++k, ++used) ++c[rem[k].second];
    return c;
}

// n quantile points (k + 1/2)/n of the normalized continuous part.
inline std::vector<double> density_quantiles(const SpectralDensity& d, long n) {
    if (n <= 0) return {};
    const int panels = 8192;
    const double span = d.hi - d.lo, h = M_PI / panels;
    auto g = [&](double th) {
        const double s = std::sin(0.5 * th);
        const double l = d.lo + span * s * s;
        double jac = 0.5 * span * std::sin(th);
        if (d.sqrt_edges) jac *= 0.5 * span * std::sin(th);
        return (th <= 0.0 || th >= M_PI) ? 0.0 : d.w(l) * jac;
    };
    std::vector<double> cdf(panels + 1, 0.0);
    for (int i = 0; i < panels; ++i) {
        const double a = i * h;
        cdf[i + 1] = cdf[i] + h / 6.0 * (g(a) + 4.0 * g(a + 0.5 * h) + g(a + h));
    }
    const double total = cdf.back();
    std::vector<double> out(n);
    int j = 0;
    for (long k = 0; k < n; ++k) {
        const double target = (double(k) + 0.5) / double(n) * total;
        while (j < panels - 1 && cdf[j + 1] < target) ++j;
        const double frac = (target - cdf[j]) / std::max(cdf[j + 1] - cdf[j], 1e-300);
        const double th = (j + std::clamp(frac, 0.0, 1.0)) * h;
        const double s = std::sin(0.5 * th);
        out[k] = d.lo + span * s * s;
    }
    return out;
}

}  // namespace detail

// N eigenvalues of A^T A drawn deterministically from the measure: atoms
// by count, the continuous part by its quantiles. Sorted decreasing.
inline std::vector<double> resolve_eigenvalues(const SpectralMeasure& m, long N) {
    m.validate();
    std::vector<double> out;
    if (m.is_empirical()) {
        const auto& s = m.samples();
        std::vector<double> w(s.size(), 1.0 / double(s.size()));
        auto c = detail::resolve_counts(w, N);
        for (std::size_t i = 0; i < s.size(); ++i) out.insert(out.end(), c[i], s[i]);
    } else {
        std::vector<double> w;
        for (const auto& a : m.atoms()) w.push_back(a.weight);
        if (m.density()) w.push_back(m.continuous_mass());
        auto c = detail::resolve_counts(w, N);
        for (std::size_t i = 0; i < m.atoms().size(); ++i) out.insert(out.end(), c[i], m.atoms()[i].lambda);
        if (m.density()) {
            auto q = detail::density_quantiles(*m.density(), c.back());
            out.insert(out.end(), q.begin(), q.end());
        }
    }
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

inline MeasurementMatrix sample_haar_with_spectrum(const SpectralMeasure& measure, int M, int N, RngStream& rng) {
    if (M < 1 || N < 1) throw InvalidAspect("sample_haar_with_spectrum: sizes must be positive");
    if (std::abs(measure.total_mass() - 1.0) > 1e-10) throw InvalidMeasure("spectral measure mass differs from 1");
    const int r = std::min(M, N);
    std::vector<double> lam = resolve_eigenvalues(measure, N);
    for (std::size_t i = r; i < lam.size(); ++i)
        if (lam[i] > 0.0) throw InvalidMeasure("measure puts mass on more than min(M,N) nonzero eigenvalues");
    Eigen::VectorXd s(r);
    for (int i = 0; i < r; ++i) s[i] = std::sqrt(lam[i]);
    Eigen::MatrixXd u = haar_columns(M, r, rng);
    Eigen::MatrixXd v = haar_columns(N, r, rng);
    json prov{{"ensemble", "haar_spectrum"}, {"M", M}, {"N", N}, {"measure", to_json(measure)},
              {"stream_key", rng.key()}};
    return MeasurementMatrix::from_factors(std::move(u), std::move(s), std::move(v), prov);
}

// N eigenvalues of A^T A: squared singular values, then zeros.
inline SpectralMeasure empirical_spectrum(const MeasurementMatrix& a) {
    std::vector<double> ev(a.cols(), 0.0);
    for (Eigen::Index i = 0; i < a.rank_dim(); ++i) ev[i] = a.s()[i] * a.s()[i];
    return SpectralMeasure::empirical(std::move(ev));
}

// Binary container: "MVAMPMAT", u32 version, u64 rows, u64 cols,
// u64 provenance length, provenance JSON bytes, rows*cols float64 row-major.
// Little-endian host byte order.
inline void save_matrix(const std::string& path, const MeasurementMatrix& a) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    const std::string prov = a.provenance().dump();
    const std::uint32_t ver = 1;
    const std::uint64_t r = a.rows(), c = a.cols(), pl = prov.size();
    f.write("MVAMPMAT", 8);
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.write(reinterpret_cast<const char*>(&r), 8);
    f.write(reinterpret_cast<const char*>(&c), 8);
    f.write(reinterpret_cast<const char*>(&pl), 8);
    f.write(prov.data(), std::streamsize(pl));
    for (std::uint64_t i = 0; i < r; ++i)
        for (std::uint64_t j = 0; j < c; ++j) {
            const double x = a.entries()(i, j);
            f.write(reinterpret_cast<const char*>(&x), 8);
        }
    if (!f) throw IoError("write failed for " + path);
}

inline MeasurementMatrix load_matrix(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[8];
    std::uint32_t ver = 0;
    std::uint64_t r = 0, c = 0, pl = 0;
    f.read(magic, 8);
    f.read(reinterpret_cast<char*>(&ver), 4);
    f.read(reinterpret_cast<char*>(&r), 8);
    f.read(reinterpret_cast<char*>(&c), 8);
    f.read(reinterpret_cast<char*>(&pl), 8);
    if (!f || std::string(magic, 8) != "MVAMPMAT" || ver != 1) throw IoError("not a matrix container: " + path);
    std::string prov(pl, '\0');
    f.read(prov.data(), std::streamsize(pl));
    Eigen::MatrixXd a(r, c);
    for (std::uint64_t i = 0; i < r; ++i)
        for (std::uint64_t j = 0; j < c; ++j) f.read(reinterpret_cast<char*>(&a(i, j)), 8);
    if (!f) throw IoError("truncated matrix container: " + path);
    return MeasurementMatrix::from_entries(std::move(a), json::parse(prov));
}

}  // namespace mvamp
