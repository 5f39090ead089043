#pragma once

// Dependency-free tail probabilities and small-sample tests. The only
// special function needed is the regularized incomplete beta, computed with
// the Lentz continued fraction; t and F tails reduce to it.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "covnn/errors.hpp"
#include "covnn/matrix.hpp"

namespace covnn {

namespace detail {

constexpr double kBetaAbsTol = 1e-10;
constexpr int kBetaMaxIter = 400;

// Continued fraction for I_x(a, b) (Lentz's method).
inline double beta_cf(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kBetaMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kBetaAbsTol) return h;
    }
    throw DivergenceError("regularized_incomplete_beta: continued fraction did not converge");
}

}  // namespace detail

// I_x(a, b), the regularized incomplete beta function, to ~1e-10 absolute.
inline double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0))
        throw InvalidRange("regularized_incomplete_beta: shape parameters must be positive");
    if (!(x >= 0.0) || !(x <= 1.0))
        throw InvalidRange("regularized_incomplete_beta: x must lie in [0, 1], got " +
                           std::to_string(x));
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    // Use the fraction on the side where it converges fast.
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
    return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// P(|T| > |t|) for Student's t with dof degrees of freedom.
inline double student_t_two_sided_p(double t, double dof) {
    if (!(dof > 0.0)) throw InvalidRange("student_t_two_sided_p: dof must be positive");
    if (!std::isfinite(t)) return 0.0;
    return regularized_incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
}

// P(T > t), one-sided.
inline double student_t_one_sided_p(double t, double dof) {
    const double two = student_t_two_sided_p(t, dof);
    return t >= 0.0 ? 0.5 * two : 1.0 - 0.5 * two;
}

// P(F > f) for an F distribution with (d1, d2) degrees of freedom.
inline double f_survival(double f, double d1, double d2) {
    if (!(d1 > 0.0) || !(d2 > 0.0)) throw InvalidRange("f_survival: dof must be positive");
    if (!std::isfinite(f)) return 0.0;
    if (f <= 0.0) return 1.0;
    return regularized_incomplete_beta(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f));
}

struct PearsonResult {
    double r = 0.0;
    double p = 1.0;  // two-sided
    std::size_t n = 0;
};

// Two-sided p for an observed correlation via t = r sqrt((n-2)/(1-r^2)).
inline double pearson_p_value(double r, std::size_t n) {
    if (n < 3) throw InsufficientSamples("pearson_p_value: need n >= 3");
    if (!(r > -1.0) || !(r < 1.0)) return 0.0;  // |r| == 1 pins p at 0
    const double dof = static_cast<double>(n - 2);
    const double t = r * std::sqrt(dof / (1.0 - r * r));
    return student_t_two_sided_p(t, dof);
}

inline PearsonResult pearson(const Vector& x, const Vector& y) {
    if (x.size() != y.size()) throw DimensionError("pearson: vectors differ in length");
    if (x.size() < 3) throw InsufficientSamples("pearson: need n >= 3");
    const std::size_t n = x.size();
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw DegenerateInput("pearson: a variable has zero variance");
    PearsonResult res;
    res.n = n;
    res.r = sxy / std::sqrt(sxx * syy);
    res.r = std::min(1.0, std::max(-1.0, res.r));
    res.p = pearson_p_value(res.r, n);
    return res;
}

struct WelchResult {
    double t = 0.0;
    double dof = 0.0;
    double p_one_sided = 1.0;  // P(mean(a) > mean(b)) evidence
};

// Welch's unequal-variance t test, one-sided alternative mean(a) > mean(b).
inline WelchResult welch_one_sided(const Vector& a, const Vector& b) {
    if (a.size() < 2 || b.size() < 2)
        throw InsufficientSamples("welch_one_sided: need at least 2 per group");
    auto var = [](const Vector& v, double m) {
        double acc = 0.0;
        for (double x : v) acc += (x - m) * (x - m);
        return acc / static_cast<double>(v.size() - 1);
    };
    const double ma = mean(a), mb = mean(b);
    const double va = var(a, ma) / static_cast<double>(a.size());
    const double vb = var(b, mb) / static_cast<double>(b.size());
    if (va + vb == 0.0) throw DegenerateInput("welch_one_sided: both groups are constant");
    WelchResult res;
    res.t = (ma - mb) / std::sqrt(va + vb);
    const double num = (va + vb) * (va + vb);
    const double den = va * va / static_cast<double>(a.size() - 1) +
                       vb * vb / static_cast<double>(b.size() - 1);
    res.dof = num / den;
    res.p_one_sided = student_t_one_sided_p(res.t, res.dof);
    return res;
}

struct AncovaRegionResult {
    double f_value = 0.0;
    double p_raw = 1.0;
    double p_bonferroni = 1.0;
    double adj_mean_a = 0.0;  // group means adjusted to the grand mean age
    double adj_mean_b = 0.0;
};

// One-region ANCOVA: value ~ intercept + age + group, F test for the group
// term on (1, n-3) degrees of freedom.
inline AncovaRegionResult ancova_one_region(const Vector& values_a, const Vector& ages_a,
                                            const Vector& values_b, const Vector& ages_b,
                                            std::size_t n_regions_for_bonferroni) {
    const std::size_t na = values_a.size(), nb = values_b.size();
    if (na != ages_a.size() || nb != ages_b.size())
        throw DimensionError("ancova: values and ages differ in length");
    const std::size_t n = na + nb;
    if (na < 2 || nb < 2 || n < 4)
        throw InsufficientSamples("ancova: need at least 2 subjects per group");

    Vector y, age, grp;
    y.reserve(n); age.reserve(n); grp.reserve(n);
    for (std::size_t i = 0; i < na; ++i) { y.push_back(values_a[i]); age.push_back(ages_a[i]); grp.push_back(0.0); }
    for (std::size_t i = 0; i < nb; ++i) { y.push_back(values_b[i]); age.push_back(ages_b[i]); grp.push_back(1.0); }

    const double age_mean = mean(age);
    double age_var = 0.0;
    for (double a : age) age_var += (a - age_mean) * (a - age_mean);
    if (age_var < 1e-12)
        throw DegenerateDesign("ancova: age covariate is constant across subjects");

    auto rss = [&](bool with_group, Vector* coef_out) {
        const std::size_t k = with_group ? 3 : 2;
        Matrix xtx(k, k, 0.0);
        Vector xty(k, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double row[3] = {1.0, age[i], grp[i]};
            for (std::size_t r = 0; r < k; ++r) {
                xty[r] += row[r] * y[i];
                for (std::size_t c = 0; c < k; ++c) xtx(r, c) += row[r] * row[c];
            }
        }
        Vector coef = solve_linear(xtx, xty);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double fit = coef[0] + coef[1] * age[i];
            if (with_group) fit += coef[2] * grp[i];
            const double e = y[i] - fit;
            acc += e * e;
        }
        if (coef_out) *coef_out = coef;
        return acc;
    };

    Vector full_coef;
    const double rss_reduced = rss(false, nullptr);
    const double rss_full = rss(true, &full_coef);

    AncovaRegionResult res;
    const double dof2 = static_cast<double>(n - 3);
    const double denom = rss_full / dof2;
    // Round-off can push the RSS difference a hair negative; F is >= 0.
    const double num = std::max(0.0, rss_reduced - rss_full);
    res.f_value = denom > 0.0 ? num / denom : (num > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    res.p_raw = f_survival(res.f_value, 1.0, dof2);
    res.p_bonferroni = std::min(1.0, res.p_raw * static_cast<double>(n_regions_for_bonferroni));
    res.adj_mean_a = full_coef[0] + full_coef[1] * age_mean;
    res.adj_mean_b = full_coef[0] + full_coef[1] * age_mean + full_coef[2];
    return res;
}

}  // namespace covnn
