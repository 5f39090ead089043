#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <covnn/brainage.hpp>
#include <covnn/covariance.hpp>
#include <covnn/rng.hpp>
#include <covnn/stats.hpp>
#include <covnn/vnn.hpp>

using namespace covnn;
using Catch::Matchers::WithinAbs;

TEST_CASE("regularized incomplete beta matches closed forms") {
    // I_x(2, 3) via the binomial identity: P(Bin(4, x) >= 2); at x = 1/2 it
    // is 11/16 = 0.6875.
    REQUIRE_THAT(regularized_incomplete_beta(2.0, 3.0, 0.5), WithinAbs(0.6875, 1e-12));
    // I_x(1, 1) = x
    REQUIRE_THAT(regularized_incomplete_beta(1.0, 1.0, 0.3), WithinAbs(0.3, 1e-12));
    // symmetry I_x(a, b) = 1 - I_{1-x}(b, a)
    const double lhs = regularized_incomplete_beta(2.5, 4.0, 0.2);
    const double rhs = 1.0 - regularized_incomplete_beta(4.0, 2.5, 0.8);
    REQUIRE_THAT(lhs, WithinAbs(rhs, 1e-12));
}

TEST_CASE("student t tail probabilities hit table values") {
    // 2.228139 is the 97.5th percentile of t with 10 dof.
    REQUIRE_THAT(student_t_two_sided_p(2.228139, 10.0), WithinAbs(0.05, 1e-5));
    // symmetric: two_sided(t) == two_sided(-t), one_sided(0) == 0.5
    REQUIRE_THAT(student_t_two_sided_p(-2.228139, 10.0), WithinAbs(0.05, 1e-5));
    REQUIRE_THAT(student_t_one_sided_p(0.0, 7.0), WithinAbs(0.5, 1e-12));
    // F on (1, nu) is t-squared: identical p values
    const double t = 1.7, nu = 23.0;
    REQUIRE_THAT(f_survival(t * t, 1.0, nu), WithinAbs(student_t_two_sided_p(t, nu), 1e-12));
}

TEST_CASE("pearson p for r = 0.352 at n = 70 lands near 0.0027") {
    REQUIRE_THAT(pearson_p_value(0.352, 70), WithinAbs(0.0027, 2e-4));
    REQUIRE(pearson_p_value(0.0, 50) == 1.0);

    // pearson() recovers hand r on a tiny set: x={1,2,3}, y={1,2,4} has
    // r = 3/sqrt(2*14/3)/... easier: exact colinearity gives r = 1, p = 0.
    const PearsonResult exact = pearson({1.0, 2.0, 3.0}, {2.0, 4.0, 6.0});
    REQUIRE_THAT(exact.r, WithinAbs(1.0, 1e-12));
    REQUIRE(exact.p == 0.0);
    REQUIRE(exact.n == 3);
}

TEST_CASE("welch one-sided p values of swapped groups sum to one") {
    const Vector a{3.1, 2.9, 3.4, 3.8, 2.5};
    const Vector b{2.0, 2.2, 1.7, 2.6};
    const WelchResult ab = welch_one_sided(a, b);
    const WelchResult ba = welch_one_sided(b, a);
    REQUIRE_THAT(ab.p_one_sided + ba.p_one_sided, WithinAbs(1.0, 1e-10));
    REQUIRE(ab.t > 0.0);
    REQUIRE_THAT(ba.t, WithinAbs(-ab.t, 1e-12));
    REQUIRE(ab.p_one_sided < 0.05);  // clearly separated samples

    const WelchResult same = welch_one_sided(a, a);
    REQUIRE_THAT(same.p_one_sided, WithinAbs(0.5, 1e-12));
    REQUIRE_THROWS_AS(welch_one_sided({1.0, 1.0}, {1.0, 1.0}), DegenerateInput);
}

TEST_CASE("ancova detects a planted group shift and adjusts for age") {
    Rng rng(301);
    const std::size_t n = 60;
    Vector ages_a(n), ages_b(n), va(n), vb(n);
    for (std::size_t i = 0; i < n; ++i) {
        ages_a[i] = rng.uniform(50.0, 90.0);
        ages_b[i] = rng.uniform(50.0, 90.0);
        // same age slope in both groups, group b shifted down by 0.5
        va[i] = 1.0 - 0.01 * ages_a[i] + 0.05 * rng.normal();
        vb[i] = 0.5 - 0.01 * ages_b[i] + 0.05 * rng.normal();
    }
    const AncovaRegionResult hit = ancova_one_region(va, ages_a, vb, ages_b, 50);
    REQUIRE(hit.p_bonferroni < 1e-6);
    REQUIRE_THAT(hit.adj_mean_b - hit.adj_mean_a, WithinAbs(-0.5, 0.05));
    REQUIRE(hit.p_bonferroni >= hit.p_raw);

    // no shift: F should be unremarkable
    for (std::size_t i = 0; i < n; ++i) vb[i] = 1.0 - 0.01 * ages_b[i] + 0.05 * rng.normal();
    const AncovaRegionResult miss = ancova_one_region(va, ages_a, vb, ages_b, 50);
    REQUIRE(miss.p_raw > 0.01);

    REQUIRE_THROWS_AS(
        ancova_one_region({1.0, 2.0}, {60.0, 60.0}, {1.0, 2.0}, {60.0, 60.0}, 1),
        DegenerateDesign);
}

TEST_CASE("bias fit recovers an exact linear prediction gap") {
    // y_hat = 0.8 y + 5, so gap = -0.2 y + 5 exactly: omega = -0.2, rho = 5.
    Vector y, y_hat;
    for (double a = 50.0; a <= 90.0; a += 5.0) {
        y.push_back(a);
        y_hat.push_back(0.8 * a + 5.0);
    }
    const AgeBiasModel bias = fit_bias(y, y_hat);
    REQUIRE_THAT(bias.omega, WithinAbs(-0.2, 1e-12));
    REQUIRE_THAT(bias.rho, WithinAbs(5.0, 1e-10));
    REQUIRE(bias.fit_n == y.size());

    for (std::size_t i = 0; i < y.size(); ++i) {
        const BiasApplied ba = apply_bias(bias, y[i], y_hat[i]);
        REQUIRE_THAT(ba.y_brain, WithinAbs(y[i], 1e-10));
        REQUIRE_THAT(ba.delta_age, WithinAbs(0.0, 1e-10));
    }
}

TEST_CASE("bias correction makes delta-age uncorrelated with age on the fit cohort") {
    Rng rng(307);
    const std::size_t n = 200;
    Vector y(n), y_hat(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = rng.uniform(50.0, 90.0);
        y_hat[i] = 0.6 * y[i] + 20.0 + 3.0 * rng.normal();  // regression dilution
    }
    const AgeBiasModel bias = fit_bias(y, y_hat);
    Vector deltas(n);
    for (std::size_t i = 0; i < n; ++i) deltas[i] = apply_bias(bias, y[i], y_hat[i]).delta_age;
    REQUIRE(std::abs(pearson(deltas, y).r) < 1e-10);

    REQUIRE_THROWS_AS(fit_bias({60.0, 60.0, 60.0}, {61.0, 59.0, 62.0}), DegenerateFit);
}

TEST_CASE("regional residuals are exactly centered") {
    Rng rng(311);
    Matrix b(8, 8);
    for (std::size_t i = 0; i < 64; ++i) b.data()[i] = rng.uniform(-1.0, 1.0);
    Matrix c(8, 8);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 8; ++k) acc += b(i, k) * b(j, k);
            c(i, j) = acc / 8.0;
        }
    CovarianceGraph cov;
    cov.op = eigendecompose(c);

    const VnnModel model = vnn_init(VnnConfig{}, 77);
    const VnnForwardTrace trace = vnn_forward(model, cov, rng.normals(8));
    const Vector r = regional_residuals(trace);
    double acc = 0.0;
    for (double v : r) acc += v;
    REQUIRE_THAT(acc, WithinAbs(0.0, 1e-12));
}

TEST_CASE("eigen alignment is a unit vector at full depth and flags flat profiles") {
    Rng rng(313);
    Matrix b(6, 6);
    for (std::size_t i = 0; i < 36; ++i) b.data()[i] = rng.uniform(-1.0, 1.0);
    Matrix c(6, 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) acc += b(i, k) * b(j, k);
            c(i, j) = acc / 6.0;
        }
    CovarianceGraph cov;
    cov.op = eigendecompose(c);

    Vector r = rng.normals(6);
    double m = 0.0;
    for (double v : r) m += v;
    for (double& v : r) v -= m / 6.0;

    const EigenAlignment full = eigen_alignment(r, cov, 6);
    double ss = 0.0;
    for (double cval : full.coeffs) ss += cval * cval;
    REQUIRE_THAT(ss, WithinAbs(1.0, 1e-12));
    REQUIRE(!full.zero_residual);

    const EigenAlignment top = eigen_alignment(r, cov, 2);
    REQUIRE(top.coeffs.size() == 2);
    REQUIRE_THAT(top.coeffs[0], WithinAbs(full.coeffs[0], 1e-15));

    const EigenAlignment flat = eigen_alignment(Vector(6, 0.0), cov, 6);
    REQUIRE(flat.zero_residual);
    for (double cval : flat.coeffs) REQUIRE(cval == 0.0);

    REQUIRE_THROWS_AS(eigen_alignment(r, cov, 0), InvalidRange);
    REQUIRE_THROWS_AS(eigen_alignment(r, cov, 7), InvalidRange);
}
