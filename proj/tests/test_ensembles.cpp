#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mvamp/ensembles.hpp"

using namespace mvamp;

namespace {

double orthogonality_error(const Eigen::MatrixXd& q) {
    return (q.transpose() * q - Eigen::MatrixXd::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

double reconstruction_error(const MeasurementMatrix& a) {
    Eigen::MatrixXd r = a.u() * a.s().asDiagonal() * a.v().transpose();
    return (r - a.entries()).norm() / a.entries().norm();
}

std::vector<double> eigenvalues(const MeasurementMatrix& a) { return empirical_spectrum(a).samples(); }

// MP(1) has CDF (theta + sin theta) / pi with lambda = 4 sin^2(theta / 2).
double mp1_cdf(double l) {
    const double th = 2.0 * std::asin(std::sqrt(std::clamp(l / 4.0, 0.0, 1.0)));
    return (th + std::sin(th)) / M_PI;
}

double ks_mp1(std::vector<double> ev) {
    std::sort(ev.begin(), ev.end());
    const double n = double(ev.size());
    double d = 0.0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
        const double f = mp1_cdf(ev[i]);
        d = std::max({d, std::abs(f - double(i) / n), std::abs(f - double(i + 1) / n)});
    }
    return d;
}

}  // namespace

TEST(RowOrthogonal, SmallIsIsometry) {
    RngStream rng(1);
    auto a = sample_row_orthogonal(2, 5, 1.0, rng);
    Eigen::MatrixXd aat = a.entries() * a.entries().transpose();
    EXPECT_LT((aat - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_DOUBLE_EQ(a.delta(), 0.4);
}

TEST(RowOrthogonal, SpectrumCounts) {
    RngStream rng(2);
    auto a = sample_row_orthogonal(410, 1024, 1.0, rng);
    auto ev = eigenvalues(a);
    ASSERT_EQ(ev.size(), 1024u);
    int ones = 0, zeros = 0;
    for (double l : ev) {
        if (std::abs(l - 1.0) < 1e-10) ++ones;
        if (l == 0.0) ++zeros;
    }
    EXPECT_EQ(ones, 410);
    EXPECT_EQ(zeros, 614);
    Eigen::MatrixXd aat = a.entries() * a.entries().transpose();
    EXPECT_LT((aat - Eigen::MatrixXd::Identity(410, 410)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RowOrthogonal, SquareIsOrthogonal) {
    RngStream rng(3);
    auto a = sample_row_orthogonal(4, 4, 1.0, rng);
    EXPECT_LT(orthogonality_error(a.entries()), 1e-12);
    for (double l : eigenvalues(a)) EXPECT_NEAR(l, 1.0, 1e-12);
}

TEST(RowOrthogonal, ScaleAndErrors) {
    RngStream rng(4);
    auto a = sample_row_orthogonal(3, 7, 2.0, rng);
    Eigen::MatrixXd aat = a.entries() * a.entries().transpose();
    EXPECT_LT((aat - 4.0 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_THROW(sample_row_orthogonal(5, 4, 1.0, rng), InvalidAspect);
    EXPECT_THROW(sample_row_orthogonal(2, 4, 0.0, rng), InvalidParameter);
}

TEST(RowOrthogonal, FactorsAreConsistent) {
    RngStream rng(5);
    auto a = sample_row_orthogonal(30, 70, 1.0, rng);
    EXPECT_LT(reconstruction_error(a), 1e-8);
    EXPECT_LT(orthogonality_error(a.u()), 1e-10);
    EXPECT_LT(orthogonality_error(a.v()), 1e-10);
}

TEST(RowOrthogonal, Deterministic) {
    RngStream r1(77), r2(77);
    auto a = sample_row_orthogonal(20, 50, 1.0, r1);
    auto b = sample_row_orthogonal(20, 50, 1.0, r2);
    EXPECT_TRUE((a.entries().array() == b.entries().array()).all());
}

TEST(IidGaussian, SquareMeanEigenvalue) {
    RngStream rng(6);
    auto a = sample_iid_gaussian(1000, 1000, rng);
    auto ev = eigenvalues(a);
    double m = 0.0;
    for (double l : ev) m += l;
    EXPECT_NEAR(m / 1000.0, 1.0, 0.05);
    EXPECT_LT(reconstruction_error(a), 1e-8);
    EXPECT_LT(orthogonality_error(a.u()), 1e-10);
    EXPECT_LT(orthogonality_error(a.v()), 1e-10);
}

TEST(IidGaussian, WideHasZeroModes) {
    RngStream rng(7);
    auto a = sample_iid_gaussian(400, 1000, rng);
    auto ev = eigenvalues(a);
    int small = 0;
    for (double l : ev) small += l < 1e-8;
    EXPECT_EQ(small, 600);
}

TEST(IidGaussian, EntryMomentsAndDeterminism) {
    RngStream r1(8), r2(8);
    auto a = sample_iid_gaussian(2, 2, r1);
    auto b = sample_iid_gaussian(2, 2, r2);
    EXPECT_TRUE((a.entries().array() == b.entries().array()).all());

    RngStream r3(9);
    auto c = sample_iid_gaussian(300, 400, r3);
    const double n = 300.0 * 400.0;
    const double mean = c.entries().mean();
    const double var = (c.entries().array() - mean).square().sum() / n;
    EXPECT_NEAR(mean, 0.0, 4.0 * std::sqrt(1.0 / 400.0 / n));
    EXPECT_NEAR(var * 400.0, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(IidGaussian, RotationalSamplerFactors) {
    RngStream rng(10);
    auto a = sample_iid_gaussian(60, 90, rng, GaussianSampling::rotational);
    EXPECT_LT(reconstruction_error(a), 1e-10);
    EXPECT_LT(orthogonality_error(a.u()), 1e-10);
    EXPECT_LT(orthogonality_error(a.v()), 1e-10);
    for (Eigen::Index i = 1; i < a.s().size(); ++i) EXPECT_GE(a.s()[i - 1], a.s()[i]);
}

// Both samplers against E tr((A^T A)^2) / N = delta (delta + 1 + 1/N).
TEST(IidGaussian, SamplersAgreeOnSecondSpectralMoment) {
    const int M = 100, N = 200, reps = 40;
    const double delta = double(M) / N, exact = delta * (delta + 1.0 + 1.0 / N);
    for (auto method : {GaussianSampling::direct, GaussianSampling::rotational}) {
        RngStream root(11);
        std::vector<double> v;
        for (int r = 0; r < reps; ++r) {
            RngStream s = root.split(r);
            auto a = sample_iid_gaussian(M, N, s, method);
            double m2 = 0.0;
            for (double l : eigenvalues(a)) m2 += l * l;
            v.push_back(m2 / N);
        }
        double m = 0.0, s2 = 0.0;
        for (double x : v) m += x;
        m /= reps;
        for (double x : v) s2 += (x - m) * (x - m);
        const double se = std::sqrt(s2 / (reps - 1) / reps);
        EXPECT_LT(std::abs(m - exact), 4.0 * se) << (method == GaussianSampling::direct ? "direct" : "rotational");
    }
}

TEST(IidGaussian, EmpiricalSpectrumMatchesMarchenkoPastur) {
    RngStream r1(12);
    EXPECT_LT(ks_mp1(eigenvalues(sample_iid_gaussian(2048, 2048, r1))), 0.05);
    RngStream r2(13);
    EXPECT_LT(ks_mp1(eigenvalues(sample_iid_gaussian(2048, 2048, r2, GaussianSampling::rotational))), 0.05);
}

TEST(HaarSpectrum, AtomResolution) {
    RngStream rng(14);
    auto a = sample_haar_with_spectrum(SpectralMeasure::from_atoms({{1.0, 0.4}, {0.0, 0.6}}), 4, 10, rng);
    ASSERT_EQ(a.s().size(), 4);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(a.s()[i], 1.0, 1e-14);
    EXPECT_LT(reconstruction_error(a), 1e-10);
}

TEST(HaarSpectrum, SingleAtomSquareIsOrthogonal) {
    RngStream rng(15);
    auto a = sample_haar_with_spectrum(SpectralMeasure::from_atoms({{1.0, 1.0}}), 6, 6, rng);
    EXPECT_LT(orthogonality_error(a.entries()), 1e-12);
}

TEST(HaarSpectrum, EigenvaluesAreSquaredSingularValues) {
    RngStream rng(16);
    auto a = sample_haar_with_spectrum(SpectralMeasure::from_atoms({{2.0, 0.5}, {0.0, 0.5}}), 8, 8, rng);
    auto ev = eigenvalues(a);
    std::sort(ev.begin(), ev.end());
    for (int i = 0; i < 4; ++i) EXPECT_EQ(ev[i], 0.0);
    for (int i = 4; i < 8; ++i) EXPECT_NEAR(ev[i], 2.0, 1e-12);
    Eigen::MatrixXd ata = a.entries().transpose() * a.entries();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ata);
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(es.eigenvalues()[i], ev[i], 1e-10);
}

TEST(HaarSpectrum, RejectsBadMass) {
    RngStream rng(17);
    EXPECT_THROW(sample_haar_with_spectrum(SpectralMeasure::from_atoms({{1.0, 0.4}, {0.0, 0.5}}), 4, 10, rng),
                 InvalidMeasure);
}

TEST(HaarSpectrum, LargestRemainderCounts) {
    auto c = detail::resolve_counts({1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}, 10);
    EXPECT_EQ(c[0] + c[1] + c[2], 10);
    EXPECT_EQ(*std::max_element(c.begin(), c.end()) - *std::min_element(c.begin(), c.end()), 1);
}

TEST(HaarSpectrum, ContinuousMeasureMoments) {
    RngStream rng(18);
    auto mp = marchenko_pastur_measure(0.5);
    auto a = sample_haar_with_spectrum(mp, 500, 1000, rng);
    double m1 = 0.0;
    for (double l : eigenvalues(a)) m1 += l;
    EXPECT_NEAR(m1 / 1000.0, 0.5, 1e-3);
}

TEST(EmpiricalSpectrum, RowOrthogonalAtoms) {
    RngStream rng(19);
    auto a = sample_row_orthogonal(410, 1024, 1.0, rng);
    auto m = empirical_spectrum(a);
    const double w1 = spectral_expectation(m, [](double l) { return l > 0.5 ? 1.0 : 0.0; });
    EXPECT_NEAR(w1, 410.0 / 1024.0, 1e-15);
    auto sq = sample_haar_with_spectrum(SpectralMeasure::from_atoms({{1.0, 1.0}}), 5, 5, rng);
    auto msq = empirical_spectrum(sq);
    for (double l : msq.samples()) EXPECT_NEAR(l, 1.0, 1e-12);
}

TEST(EmpiricalSpectrum, ExactlySquaredSingularValues) {
    RngStream rng(20);
    auto a = sample_iid_gaussian(7, 11, rng);
    auto ev = eigenvalues(a);
    for (Eigen::Index i = 0; i < 7; ++i) EXPECT_EQ(ev[i], a.s()[i] * a.s()[i]);
    for (int i = 7; i < 11; ++i) EXPECT_EQ(ev[i], 0.0);
}

TEST(SpectralExpectation, AtomExamples) {
    auto m = SpectralMeasure::from_atoms({{1.0, 0.4}, {0.0, 0.6}});
    EXPECT_NEAR(spectral_expectation(m, [](double l) { return l; }), 0.4, 1e-15);
    EXPECT_NEAR(spectral_expectation(m, [](double l) { return 1.0 / (1.0 + l); }), 0.8, 1e-15);
}

TEST(SpectralExpectation, NonFiniteCarriesLambda) {
    auto m = SpectralMeasure::from_atoms({{1.0, 0.4}, {0.0, 0.6}});
    try {
        spectral_expectation(m, [](double l) { return 1.0 / l; });
        FAIL() << "expected EvaluationError";
    } catch (const EvaluationError& e) {
        EXPECT_EQ(e.lambda, 0.0);
    }
}

TEST(MarchenkoPastur, ShapeAndMoments) {
    auto q = marchenko_pastur_measure(0.25);
    ASSERT_EQ(q.atoms().size(), 1u);
    EXPECT_EQ(q.atoms()[0].lambda, 0.0);
    EXPECT_NEAR(q.atoms()[0].weight, 0.75, 1e-15);
    auto one = marchenko_pastur_measure(1.0);
    EXPECT_TRUE(one.atoms().empty());
    EXPECT_DOUBLE_EQ(one.support_min(), 0.0);
    EXPECT_DOUBLE_EQ(one.support_max(), 4.0);
    EXPECT_NEAR(spectral_expectation(one, [](double l) { return l; }), 1.0, 1e-6);
    for (double d : {0.1, 0.25, 0.4, 0.8, 1.0, 1.015, 1.3, 2.5, 7.0}) {
        auto m = marchenko_pastur_measure(d);
        EXPECT_NEAR(m.total_mass(), 1.0, 1e-10) << d;
        EXPECT_NEAR(spectral_expectation(m, [](double l) { return l; }), d, 1e-8) << d;
        // second moment delta (1 + delta)
        EXPECT_NEAR(spectral_expectation(m, [](double l) { return l * l; }), d * (1.0 + d), 1e-8) << d;
    }
    EXPECT_THROW(marchenko_pastur_measure(0.0), InvalidParameter);
    EXPECT_THROW(marchenko_pastur_measure(-1.0), InvalidParameter);
}

TEST(MarchenkoPastur, ResolventAgainstClosedForm) {
    // m(z) = E[1/(lambda - z)] solves z m^2 + (z - delta + 1) m + 1 = 0; at delta = 1, z = -1 it is the golden ratio conjugate.
    const double z = -1.0;
    const double m = (-z - std::sqrt(z * z - 4.0 * z)) / (2.0 * z);
    auto mp = marchenko_pastur_measure(1.0);
    EXPECT_NEAR(spectral_expectation(mp, [&](double l) { return 1.0 / (l - z); }), m, 1e-10);
}

TEST(Serialization, MeasureJsonRoundTrip) {
    auto a = SpectralMeasure::from_atoms({{1.0, 0.4}, {0.0, 0.6}});
    auto b = spectral_measure_from_json(to_json(a));
    ASSERT_EQ(b.atoms().size(), 2u);
    EXPECT_EQ(b.atoms()[0].weight, 0.4);
    auto mp = spectral_measure_from_json(to_json(marchenko_pastur_measure(0.7)));
    EXPECT_NEAR(spectral_expectation(mp, [](double l) { return l; }), 0.7, 1e-8);
    EXPECT_THROW(spectral_measure_from_json(json{{"bogus", 1}}), InvalidMeasure);
}

TEST(Serialization, MatrixRoundTrip) {
    RngStream rng(21);
    auto a = sample_iid_gaussian(5, 9, rng);
    const auto path = std::filesystem::temp_directory_path() / "mvamp_matrix_roundtrip.bin";
    save_matrix(path.string(), a);
    auto b = load_matrix(path.string());
    EXPECT_TRUE((a.entries().array() == b.entries().array()).all());
    EXPECT_EQ(b.provenance().at("ensemble"), "iid_gaussian");
    std::filesystem::remove(path);
}
