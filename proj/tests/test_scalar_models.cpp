#include <gtest/gtest.h>

#include <cmath>

#include "mvamp/quadrature.hpp"
#include "mvamp/scalar_models.hpp"

using namespace mvamp;

namespace {

const std::vector<double> h_grid{-6.0, -3.1, -1.7, -0.9, -0.35, -0.05, 0.0, 0.12, 0.6, 1.3, 2.4, 4.9, 9.0};
const std::vector<double> q_grid{0.05, 0.3, 1.0, 2.5, 11.0};

double fd(const std::function<double(double)>& f, double h) {
    const double e = 1e-6;
    return (f(h + e) - f(h - e)) / (2.0 * e);
}

bool near_kink(double h, const std::vector<double>& kinks) {
    for (double k : kinks)
        if (std::abs(h - k) < 1e-4) return true;
    return false;
}

void check_x_derivative(const XDenoiser& d) {
    for (double q : q_grid)
        for (double h : h_grid) {
            if (near_kink(h, d.kink_points(q))) continue;
            EXPECT_NEAR(d.dg(h, q), fd([&](double x) { return d.g(x, q); }, h), 1e-5) << d.name << " h=" << h << " q=" << q;
        }
}

void check_z_derivative(const ZDenoiser& d, const std::vector<double>& ys) {
    for (double y : ys)
        for (double q : q_grid)
            for (double h : h_grid) {
                if (near_kink(h, d.kink_points(q, y))) continue;
                EXPECT_NEAR(d.dg(h, q, y), fd([&](double x) { return d.g(x, q, y); }, h), 1e-5)
                    << d.name << " h=" << h << " q=" << q << " y=" << y;
            }
}

}  // namespace

TEST(GaussianPrior, Examples) {
    auto d1 = gaussian_prior_denoiser(1.0);
    EXPECT_DOUBLE_EQ(d1.g(1.0, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(d1.g(0.0, 3.7), 0.0);
    EXPECT_DOUBLE_EQ(gaussian_prior_denoiser(2.0).g(3.0, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(d1.dg(0.2, 1.0), 0.5);
    EXPECT_THROW(gaussian_prior_denoiser(0.0), InvalidParameter);
}

TEST(LaplaceMap, Examples) {
    auto d = laplace_map_denoiser(0.5);
    EXPECT_DOUBLE_EQ(d.g(2.0, 1.0), 1.5);
    EXPECT_DOUBLE_EQ(d.g(0.3, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(d.g(-2.0, 2.0), -0.75);
    EXPECT_DOUBLE_EQ(d.dg(2.0, 2.0), 0.5);
    EXPECT_DOUBLE_EQ(d.dg(0.3, 2.0), 0.0);
    EXPECT_THROW(d.g(1.0, 0.0), InvalidPrecision);
    EXPECT_THROW(d.g(1.0, -1.0), InvalidPrecision);
    EXPECT_THROW(laplace_map_denoiser(0.0), InvalidParameter);
    EXPECT_EQ(d.mode, BetaMode::map);
}

TEST(LaplaceMap, Nonexpansive) {
    auto d = laplace_map_denoiser(0.7);
    for (double q : q_grid)
        for (double a : h_grid)
            for (double b : h_grid) {
                const double bound = std::abs(a - b) / q;
                EXPECT_LE(std::abs(d.g(a, q) - d.g(b, q)), bound * (1.0 + 1e-12));
            }
}

TEST(Ising, Examples) {
    auto d = ising_denoiser();
    EXPECT_EQ(d.g(0.0, 1.0), 0.0);
    EXPECT_EQ(d.dg(0.0, 1.0), 1.0);
    EXPECT_NEAR(d.g(40.0, 1.0), 1.0, 1e-15);
    // Two-point posterior mean on {-1, +1} with weights exp(+-h - Q/2).
    for (double q : {0.3, 1.0, 4.0}) {
        const double wp = std::exp(1.0 - 0.5 * q), wm = std::exp(-1.0 - 0.5 * q);
        EXPECT_NEAR(d.g(1.0, q), (wp - wm) / (wp + wm), 1e-15);
    }
    EXPECT_NEAR(d.g(1.0, 1.0), 0.76159, 1e-5);
}

TEST(GaussianChannelMap, Examples) {
    auto d = gaussian_channel_map_denoiser(1.0);
    EXPECT_DOUBLE_EQ(d.g(1.0, 1.0, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(d.g(0.0, 1.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(d.g(-1.0, 3.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(d.dg(0.4, 3.0, 1.0), 0.25);
    EXPECT_THROW(d.g(0.0, -1.0, 0.0), InvalidPrecision);
    EXPECT_THROW(d.g(0.0, -2.0, 0.0), InvalidPrecision);
    EXPECT_NO_THROW(d.g(0.0, -0.5, 0.0));
}

TEST(ProbitTheta, HalfNormalMeanByQuadrature) {
    // E[z | z > 0] for z ~ N(0,1), by adaptive quadrature.
    auto num = integrate_gk([](double z) { return Eigen::ArrayXd::Constant(1, z * std::exp(-0.5 * z * z)); }, 0.0, 40.0, 1);
    auto den = integrate_gk([](double z) { return Eigen::ArrayXd::Constant(1, std::exp(-0.5 * z * z)); }, 0.0, 40.0, 1);
    const double oracle = num.value[0] / den.value[0];
    auto d = probit_theta_denoiser();
    EXPECT_NEAR(d.g(0.0, 1.0, 1.0), oracle, 1e-12);
    EXPECT_NEAR(oracle, 0.79788, 1e-5);
    EXPECT_NEAR(d.g(0.0, 1.0, -1.0), -oracle, 1e-12);
    EXPECT_NEAR(d.g(10.0, 1.0, 1.0), 10.0, 1e-6);
    EXPECT_THROW(d.g(0.0, 0.0, 1.0), InvalidPrecision);
}

TEST(ProbitTheta, SignAndMagnitude) {
    auto d = probit_theta_denoiser();
    for (double y : {-1.0, 1.0})
        for (double q : q_grid)
            for (double h : h_grid) {
                const double g = d.g(h, q, y);
                EXPECT_GT(g * y, 0.0) << h << " " << q;
                if ((h > 0) == (y > 0) && h != 0.0) EXPECT_GE(std::abs(g), std::abs(h / q) - 1e-12);
                EXPECT_GT(d.dg(h, q, y), 0.0);
            }
}

TEST(ProbitTheta, ContinuousAcrossAsymptoticSwitch) {
    // a = -y h / sqrt(Q) crosses 8 here.
    auto d = probit_theta_denoiser();
    const double below = d.g(-8.0 + 1e-9, 1.0, 1.0), above = d.g(-8.0 - 1e-9, 1.0, 1.0);
    EXPECT_NEAR(below, above, 1e-8);
    EXPECT_NEAR(d.dg(-8.0 + 1e-9, 1.0, 1.0), d.dg(-8.0 - 1e-9, 1.0, 1.0), 1e-8);
    // Far tail: E[t | t > a] ~ a + 1/a, Var ~ 1/a^2.
    auto [lam, var] = detail::truncated_normal_moments(1e4);
    EXPECT_NEAR(lam - 1e4, 1e-4, 1e-11);
    EXPECT_NEAR(var * 1e8, 1.0, 1e-6);
    auto d2 = probit_theta_denoiser();
    EXPECT_TRUE(std::isfinite(d2.g(-60.0, 1.0, 1.0)));
    EXPECT_GT(d2.g(-60.0, 1.0, 1.0), 0.0);
}

TEST(Derivatives, AllBuiltInsMatchFiniteDifferences) {
    check_x_derivative(gaussian_prior_denoiser(1.0));
    check_x_derivative(gaussian_prior_denoiser(0.3));
    check_x_derivative(laplace_map_denoiser(0.5));
    check_x_derivative(laplace_map_denoiser(0.01));
    check_x_derivative(ising_denoiser());
    check_z_derivative(gaussian_channel_map_denoiser(1.0), {-1.0, 0.0, 0.7, 1.0});
    check_z_derivative(probit_theta_denoiser(), {-1.0, 1.0});
}

TEST(QuadratureDenoiser, GaussianMatchesClosedForm) {
    PostulatedDensity g{{}, [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }};
    auto qd = quadrature_x_denoiser(g, 121);
    auto cf = gaussian_prior_denoiser(1.0);
    for (double q : q_grid)
        for (double h : {-3.0, -0.5, 0.0, 0.2, 1.0, 2.5}) {
            EXPECT_NEAR(qd.g(h, q), cf.g(h, q), 1e-10) << h << " " << q;
            EXPECT_NEAR(qd.dg(h, q), cf.dg(h, q), 1e-10) << h << " " << q;
        }
}

TEST(QuadratureDenoiser, TwoAtomsMatchIsing) {
    PostulatedDensity pm{{{-1.0, 0.5}, {1.0, 0.5}}, nullptr};
    auto qd = quadrature_x_denoiser(pm, 21);
    auto is = ising_denoiser();
    for (double q : q_grid)
        for (double h : h_grid) {
            EXPECT_NEAR(qd.g(h, q), is.g(h, q), 1e-12);
            EXPECT_NEAR(qd.dg(h, q), is.dg(h, q), 1e-12);
        }
}

TEST(QuadratureDenoiser, SymmetricAtZeroAndNodeDoubling) {
    auto lap = [](double x) { return 0.5 * std::exp(-std::abs(x)); };
    PostulatedDensity g{{}, [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }};
    PostulatedDensity bg{{{0.0, 0.9}}, [](double x) { return 0.1 * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }};
    EXPECT_NEAR(quadrature_x_denoiser(PostulatedDensity{{}, lap}).g(0.0, 1.0), 0.0, 1e-15);
    for (const auto& dens : {g, bg}) {
        auto a = quadrature_x_denoiser(dens, 101), b = quadrature_x_denoiser(dens, 201);
        for (double q : {0.3, 1.0, 2.5})
            for (double h : {-2.0, -0.4, 0.0, 0.7, 1.9}) {
                EXPECT_NEAR(a.g(h, q), b.g(h, q), 1e-9);
                EXPECT_NEAR(a.dg(h, q), b.dg(h, q), 1e-9);
            }
    }
}

TEST(QuadratureDenoiser, GaussianLikelihoodMatchesClosedForm) {
    // A smooth likelihood: Gaussian channel at beta = 1 gives (h + y) / (Q + 1).
    auto gl = quadrature_z_denoiser([](double z, double y) { return std::exp(-0.5 * (y - z) * (y - z)); }, 121);
    EXPECT_NEAR(gl.g(0.4, 1.5, -0.3), (0.4 - 0.3) / 2.5, 1e-10);
    EXPECT_NEAR(gl.dg(0.4, 1.5, -0.3), 1.0 / 2.5, 1e-10);
    // Weak tilts far from the likelihood's mass.
    for (auto [h, q, y] : {std::array{4.9, 0.05, -0.4}, std::array{-6.0, 0.05, 1.2}, std::array{9.0, 2.5, 1.2}}) {
        EXPECT_NEAR(gl.g(h, q, y), (h + y) / (q + 1.0), 1e-9) << h << " " << q;
        EXPECT_NEAR(gl.dg(h, q, y), 1.0 / (q + 1.0), 1e-9) << h << " " << q;
    }
}

TEST(QuadratureDenoiser, Errors) {
    EXPECT_THROW(quadrature_x_denoiser(PostulatedDensity{{{1.0, 1.0}}, nullptr}, 11), InvalidParameter);
    // Mass far from the tilt and from the origin.
    auto far =
        quadrature_x_denoiser(PostulatedDensity{{}, [](double x) { return std::abs(x - 1e3) < 1 ? 0.5 : 0.0; }}, 21);
    EXPECT_THROW(far.g(-1e4, 1.0), DegeneratePosterior);
    // Far from the tilt but near the origin: the posterior sits at the edge
    // (the jump itself is beyond what Gauss-Hermite resolves).
    auto box = quadrature_x_denoiser(PostulatedDensity{{}, [](double x) { return std::abs(x) < 1 ? 0.5 : 0.0; }}, 121);
    const double edge = box.g(1e4, 1.0);
    EXPECT_TRUE(edge > 0.0 && edge <= 1.0);
}

TEST(BernoulliGauss, SecondMomentAndSampling) {
    EXPECT_NEAR(bernoulli_gauss_prior(0.1).second_moment(), 0.1, 1e-15);
    EXPECT_NEAR(bernoulli_gauss_prior(1.0).second_moment(), 1.0, 1e-15);
    EXPECT_TRUE(bernoulli_gauss_prior(1.0).atoms.empty());
    EXPECT_THROW(bernoulli_gauss_prior(0.0), InvalidParameter);
    EXPECT_THROW(bernoulli_gauss_prior(1.5), InvalidParameter);
    auto p = bernoulli_gauss_prior(0.1);
    RngStream rng(3);
    const int n = 1000000;
    int zeros = 0;
    double s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = p.sample(rng);
        zeros += x == 0.0;
        s2 += x * x;
    }
    EXPECT_NEAR(double(zeros) / n, 0.9, 0.002);
    EXPECT_NEAR(s2 / n, 0.1, 4.0 * std::sqrt(0.1 * 3.0 / n));
}

TEST(Channels, Sign) {
    auto c = sign_channel();
    RngStream rng(1);
    EXPECT_EQ(c.sample(-0.3, rng), -1.0);
    EXPECT_EQ(c.sample(0.0, rng), 1.0);
    EXPECT_EQ(c.density(1.0, 0.5), 1.0);
    EXPECT_EQ(c.density(-1.0, 0.5), 0.0);
    for (double z : {-2.0, -1e-9, 0.0, 0.3})
        EXPECT_NEAR(c.density(1.0, z) + c.density(-1.0, z), 1.0, 1e-10);
}

TEST(Channels, RandomLabelIndependent) {
    auto c = random_label_channel();
    RngStream rng(2);
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        const double v = c.sample(z, rng) * z;
        s += v;
        s2 += v * v;
    }
    const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
    EXPECT_LT(std::abs(m), 3.0 * se);
    for (double z : {-1.0, 0.0, 2.0}) EXPECT_NEAR(c.density(1.0, z) + c.density(-1.0, z), 1.0, 1e-10);
}

TEST(Channels, GaussianNoise) {
    auto c = gaussian_noise_channel(0.5);
    auto one = integrate_gk([&](double y) { return Eigen::ArrayXd::Constant(1, c.density(y, 0.7)); }, -30, 30, 1);
    EXPECT_NEAR(one.value[0], 1.0, 1e-10);
    EXPECT_FALSE(c.discrete());
}
