#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

#include "covnn/stability.hpp"

using namespace covnn;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

VnnModel zeroed(const VnnConfig& cfg) {
    VnnModel model = vnn_init(cfg, 1);
    for (auto& layer : model.layers) {
        for (auto& per_out : layer.w)
            for (auto& taps : per_out)
                for (double& v : taps) v = 0.0;
        for (double& b : layer.bias) b = 0.0;
    }
    return model;
}

}  // namespace

TEST_CASE("quantile interpolates linearly between order statistics") {
    const Vector v{1.0, 2.0, 3.0, 4.0};
    CHECK_THAT(detail::quantile(v, 0.5), WithinAbs(2.5, 1e-15));
    CHECK_THAT(detail::quantile(v, 0.25), WithinAbs(1.75, 1e-15));
    CHECK_THAT(detail::quantile(v, 0.0), WithinAbs(1.0, 0.0));
    CHECK_THAT(detail::quantile(v, 1.0), WithinAbs(4.0, 0.0));
    CHECK_THAT(detail::quantile(Vector{7.0}, 0.9), WithinAbs(7.0, 0.0));
    CHECK_THROWS_AS(detail::quantile(Vector{}, 0.5), DegenerateInput);
}

TEST_CASE("loglog_slope recovers an exact power law") {
    const std::vector<std::size_t> ns{100, 400, 1600};
    Vector values;
    for (std::size_t n : ns) values.push_back(std::pow(static_cast<double>(n), -0.5));
    CHECK_THAT(detail::loglog_slope(ns, values), WithinAbs(-0.5, 1e-12));

    // a nonpositive value means no meaningful rate
    CHECK(detail::loglog_slope(ns, Vector{1.0, 0.0, 0.5}) == 0.0);
}

TEST_CASE("kernel ensemble is spectrally normalized") {
    const CovarianceGraph c = make_kernel_ensemble(12, 1.0, 0.25, 0.05);
    REQUIRE(c.dim() == 12);
    CHECK_THAT(c.op.eigvals.front(), WithinAbs(1.0, 1e-14));
    CHECK(c.op.eigvals.back() > 0.0);
    CHECK(c.scale > 0.0);

    CHECK_THROWS_AS(make_kernel_ensemble(1, 1.0, 0.25, 0.05), KernelError);
    CHECK_THROWS_AS(make_kernel_ensemble(8, 0.0, 0.25, 0.05), KernelError);
    CHECK_THROWS_AS(make_kernel_ensemble(8, 1.0, 0.0, 0.05), KernelError);
    CHECK_THROWS_AS(make_kernel_ensemble(8, 1.0, 0.25, -0.1), KernelError);
}

TEST_CASE("filter deviation scales linearly with the taps") {
    const CovarianceGraph c = make_kernel_ensemble(8, 1.0, 0.25, 0.05);
    const std::vector<std::size_t> ns{40, 80};
    const StabilityReport one = filter_stability_sweep(c, FilterTaps{{0.0, 1.0}}, ns, 3, 11);
    const StabilityReport two = filter_stability_sweep(c, FilterTaps{{0.0, 2.0}}, ns, 3, 11);
    REQUIRE(one.rows.size() == 6);
    REQUIRE(two.rows.size() == 6);
    for (std::size_t i = 0; i < one.rows.size(); ++i) {
        CHECK(one.rows[i].filter_deviation > 0.0);
        CHECK_THAT(two.rows[i].filter_deviation,
                   WithinRel(2.0 * one.rows[i].filter_deviation, 1e-12));
        CHECK(one.rows[i].vnn_deviation == 0.0);
        CHECK(one.rows[i].envelope == 0.0);
    }
    CHECK_FALSE(one.has_vnn);
}

TEST_CASE("constant filters never deviate") {
    const CovarianceGraph c = make_kernel_ensemble(6, 1.0, 0.25, 0.05);
    const StabilityReport rep =
        filter_stability_sweep(c, FilterTaps{{0.7}}, {50, 100}, 4, 3);
    for (const auto& row : rep.rows) CHECK(row.filter_deviation == 0.0);
    for (double med : rep.filter_median) CHECK(med == 0.0);
    CHECK(rep.filter_slope == 0.0);
    CHECK(rep.filter_lipschitz < 1e-9);
}

TEST_CASE("filter deviations shrink with sample size") {
    const CovarianceGraph c = make_kernel_ensemble(8, 1.0, 0.25, 0.05);
    const StabilityReport rep = filter_stability_sweep(
        c, default_stability_filter(), {50, 500, 5000}, 5, 17);
    REQUIRE(rep.filter_median.size() == 3);
    CHECK(rep.filter_median[0] > rep.filter_median[1]);
    CHECK(rep.filter_median[1] > rep.filter_median[2]);
    CHECK(rep.filter_slope < -0.3);
    CHECK_THAT(rep.filter_lipschitz, WithinAbs(1.0, 1e-6));
}

TEST_CASE("sweep argument validation") {
    const CovarianceGraph c = make_kernel_ensemble(6, 1.0, 0.25, 0.05);
    const FilterTaps h = default_stability_filter();
    CHECK_THROWS_AS(filter_stability_sweep(c, h, {}, 3, 1), ConfigError);
    CHECK_THROWS_AS(filter_stability_sweep(c, h, {10, 10}, 3, 1), ConfigError);
    CHECK_THROWS_AS(filter_stability_sweep(c, h, {40, 20}, 3, 1), ConfigError);
    CHECK_THROWS_AS(filter_stability_sweep(c, h, {1, 10}, 3, 1), ConfigError);
    CHECK_THROWS_AS(filter_stability_sweep(c, h, {10, 20}, 0, 1), ConfigError);

    Matrix one(1, 1);
    one(0, 0) = 2.0;
    CovarianceGraph tiny;
    tiny.op = eigendecompose(one);
    tiny.n_samples = 0;
    tiny.scale = 1.0;
    CHECK_THROWS_AS(filter_stability_sweep(tiny, h, {10, 20}, 3, 1), DimensionError);
}

TEST_CASE("normalize_model_taps rescales onto the unit response box") {
    VnnConfig cfg;
    cfg.layers = 1;
    cfg.taps_per_layer = {2};
    cfg.widths = {1, 1};
    VnnModel model = vnn_init(cfg, 5);
    model.layers[0].w[0][0] = {0.0, 10.0};  // sup |10 t| on [0,2] is 20
    model.layers[0].bias[0] = 0.25;

    const VnnModel scaled = normalize_model_taps(model, 0.0, 2.0);
    CHECK(scaled.layers[0].w[0][0][0] == 0.0);
    CHECK_THAT(scaled.layers[0].w[0][0][1], WithinAbs(0.5, 1e-15));
    CHECK(scaled.layers[0].bias[0] == 0.25);

    // already inside the box: untouched
    model.layers[0].w[0][0] = {0.1, 0.0};
    const VnnModel kept = normalize_model_taps(model, 0.0, 2.0);
    CHECK(kept.layers[0].w[0][0][0] == 0.1);
}

TEST_CASE("envelope factor is layers times max width to the layers minus one") {
    VnnConfig cfg;
    cfg.layers = 2;
    cfg.taps_per_layer = {3, 3};
    cfg.widths = {1, 4, 4};
    CHECK(envelope_factor(cfg) == 8.0);

    cfg.layers = 1;
    cfg.taps_per_layer = {3};
    cfg.widths = {1, 7};
    CHECK(envelope_factor(cfg) == 1.0);

    cfg.layers = 2;
    cfg.taps_per_layer = {2, 2};
    cfg.widths = {1, 2, 8};
    CHECK(envelope_factor(cfg) == 16.0);
}

TEST_CASE("default stability model has unit-normalized constituents") {
    const VnnModel model = default_stability_model(9);
    for (const auto& layer : model.layers) {
        for (const auto& per_out : layer.w) {
            for (const auto& taps : per_out) {
                const FilterTaps t{taps};
                CHECK(detail::sup_abs_response(t, 0.0, 2.0) <= 1.0 + 1e-12);
                CHECK(lipschitz_bound(t, 0.0, 2.0) <= 1.0 + 1e-12);
            }
        }
    }
}

TEST_CASE("zero network never deviates and sits inside the envelope") {
    VnnConfig cfg;
    cfg.layers = 1;
    cfg.taps_per_layer = {2};
    cfg.widths = {1, 2};
    cfg.nonlinearity = Nonlinearity::relu;
    const VnnModel model = zeroed(cfg);
    const CovarianceGraph c = make_kernel_ensemble(6, 1.0, 0.25, 0.05);

    const StabilityReport rep = vnn_stability_sweep(model, c, {30, 60}, 3, 21, 2);
    for (const auto& row : rep.rows) {
        CHECK(row.filter_deviation == 0.0);
        CHECK(row.vnn_deviation == 0.0);
        CHECK(row.envelope == 0.0);
    }
    CHECK(rep.envelope_fraction == 1.0);
    CHECK(rep.vnn_slope == 0.0);
    CHECK(rep.has_vnn);
}

TEST_CASE("vnn sweep respects the constituent-deviation envelope") {
    const VnnModel model = default_stability_model(13);
    const CovarianceGraph c = make_kernel_ensemble(8, 1.0, 0.25, 0.05);
    const StabilityReport rep = vnn_stability_sweep(model, c, {60, 240, 960}, 4, 7, 3);

    REQUIRE(rep.has_vnn);
    CHECK(rep.envelope_factor == 8.0);
    CHECK(rep.envelope_fraction >= 0.95);
    for (const auto& row : rep.rows) {
        CHECK(row.vnn_deviation > 0.0);
        CHECK_THAT(row.envelope, WithinRel(rep.envelope_factor * row.filter_deviation, 1e-12));
    }
    REQUIRE(rep.vnn_median.size() == 3);
    CHECK(rep.vnn_median[0] > rep.vnn_median[1]);
    CHECK(rep.vnn_median[1] > rep.vnn_median[2]);
    CHECK(rep.vnn_slope < -0.3);
    CHECK(rep.filter_slope < -0.3);
}

TEST_CASE("vnn sweep is deterministic and rejects degenerate setups") {
    const VnnModel model = default_stability_model(13);
    const CovarianceGraph c = make_kernel_ensemble(6, 1.0, 0.25, 0.05);
    const StabilityReport a = vnn_stability_sweep(model, c, {40, 80}, 2, 5, 2);
    const StabilityReport b = vnn_stability_sweep(model, c, {40, 80}, 2, 5, 2);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].filter_deviation == b.rows[i].filter_deviation);
        CHECK(a.rows[i].vnn_deviation == b.rows[i].vnn_deviation);
    }

    CHECK_THROWS_AS(vnn_stability_sweep(model, c, {40, 80}, 2, 5, 0), ConfigError);

    VnnConfig readout = model.config;
    readout.final_linear = true;
    VnnModel linear_tail = vnn_init(readout, 3);
    CHECK_THROWS_AS(vnn_stability_sweep(linear_tail, c, {40, 80}, 2, 5, 2), ConfigError);
}

TEST_CASE("spiked spectra have the documented leading structure") {
    const Vector nd = near_degenerate_spectrum(6);
    REQUIRE(nd.size() == 6);
    CHECK(nd[0] == 3.0);
    CHECK(nd[1] == 1.02);
    CHECK(nd[2] == 1.00);
    CHECK_THAT(nd[3], WithinAbs(0.6, 1e-15));
    CHECK_THAT(nd[4], WithinAbs(0.48, 1e-15));

    const Vector sep = separated_spectrum(6);
    CHECK(sep[0] == 3.0);
    CHECK(sep[1] == 1.5);
    CHECK(sep[2] == 0.7);

    // the contrast lives entirely in the second eigengap
    CHECK(nd[1] - nd[2] < 0.05);
    CHECK(sep[1] - sep[2] > 0.5);

    CHECK_THROWS_AS(near_degenerate_spectrum(3), ConfigError);
    CHECK_THROWS_AS(separated_spectrum(3), ConfigError);
}

TEST_CASE("spiked cohorts are deterministic with an orthonormal basis") {
    SpikedCohortSpec spec;
    spec.m = 6;
    spec.n = 40;
    spec.spectrum = separated_spectrum(6);
    const SpikedCohort a = make_spiked_cohort(spec, 31);
    const SpikedCohort b = make_spiked_cohort(spec, 31);

    REQUIRE(a.fm.n_subjects() == 40);
    REQUIRE(a.fm.n_regions() == 6);
    CHECK(a.fm.features.data()[7] == b.fm.features.data()[7]);
    CHECK(a.fm.ages == b.fm.ages);
    CHECK(a.fm.region_ids[0] == "000");
    CHECK(a.fm.subject_ids[0] == "s00000");
    for (const auto& g : a.fm.group) CHECK(g == "HC");

    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < 6; ++r) dot += a.basis(r, i) * a.basis(r, j);
            CHECK_THAT(dot, WithinAbs(i == j ? 1.0 : 0.0, 1e-9));
        }
    }

    const SpikedCohort other = make_spiked_cohort(spec, 32);
    CHECK(a.fm.features.data()[7] != other.fm.features.data()[7]);
}

TEST_CASE("spiked cohort validation") {
    SpikedCohortSpec spec;
    spec.m = 6;
    spec.n = 40;
    spec.spectrum = separated_spectrum(6);

    SpikedCohortSpec wrong = spec;
    wrong.spectrum = Vector{1.0, 2.0};
    CHECK_THROWS_AS(make_spiked_cohort(wrong, 1), ConfigError);

    wrong = spec;
    wrong.spectrum[3] = -0.1;
    CHECK_THROWS_AS(make_spiked_cohort(wrong, 1), ConfigError);

    wrong = spec;
    wrong.spectrum[1] = 5.0;  // increasing
    CHECK_THROWS_AS(make_spiked_cohort(wrong, 1), ConfigError);

    wrong = spec;
    wrong.n = 7;
    CHECK_THROWS_AS(make_spiked_cohort(wrong, 1), InsufficientSamples);

    wrong = spec;
    wrong.target_weights = Vector{};
    CHECK_THROWS_AS(make_spiked_cohort(wrong, 1), ConfigError);

    wrong = spec;
    wrong.target_noise_sd = -1.0;
    CHECK_THROWS_AS(make_spiked_cohort(wrong, 1), ConfigError);
}

TEST_CASE("full-rank score regression on a noiseless target is exact") {
    SpikedCohortSpec spec;
    spec.m = 6;
    spec.n = 50;
    spec.spectrum = separated_spectrum(6);
    spec.target_noise_sd = 0.0;
    const SpikedCohort cohort = make_spiked_cohort(spec, 41);

    // the target is affine in the features, so scores on any full-rank basis
    // carry all of it
    const PcaRegression model = fit_pca_regression(cohort.fm, 6);
    const Vector pred = pca_predict(model, cohort.fm, model.basis);
    for (std::size_t i = 0; i < pred.size(); ++i)
        CHECK_THAT(pred[i], WithinAbs(cohort.fm.ages[i], 1e-6));
}

TEST_CASE("pca regression and prediction validation") {
    SpikedCohortSpec spec;
    spec.m = 6;
    spec.n = 30;
    spec.spectrum = separated_spectrum(6);
    const SpikedCohort cohort = make_spiked_cohort(spec, 43);

    CHECK_THROWS_AS(fit_pca_regression(cohort.fm, 0), InvalidRange);
    CHECK_THROWS_AS(fit_pca_regression(cohort.fm, 7), InvalidRange);

    // spiked cohorts always satisfy n >= m + 2, so a too-small cohort has to
    // be assembled by hand
    FeatureMatrix small;
    small.features = Matrix(4, 4);
    Rng rng(44);
    for (std::size_t i = 0; i < 16; ++i) small.features.data()[i] = rng.normal();
    small.ages = {60.0, 65.0, 70.0, 75.0};
    small.group = {"HC", "HC", "HC", "HC"};
    small.subject_ids = {"a", "b", "c", "d"};
    small.region_ids = {"r0", "r1", "r2", "r3"};
    CHECK_THROWS_AS(fit_pca_regression(small, 3), InsufficientSamples);

    const PcaRegression model = fit_pca_regression(cohort.fm, 2);
    CHECK_THROWS_AS(pca_predict(model, cohort.fm, Matrix(5, 2)), DimensionError);
    CHECK_THROWS_AS(pca_predict(model, cohort.fm, Matrix(6, 1)), DimensionError);
}

TEST_CASE("keeping every subject leaves both predictors exactly still") {
    SpikedCohortSpec spec;
    spec.m = 6;
    spec.n = 40;
    spec.spectrum = near_degenerate_spectrum(6);
    const SpikedCohort cohort = make_spiked_cohort(spec, 51);

    PcaContrastOptions opt = default_pca_contrast_options();
    opt.vnn.taps_per_layer = {3};
    opt.vnn.widths = {1, 3};
    // tanh: a barely trained relu net can predict exactly 0 for a subject in
    // every resample, zeroing its variance
    opt.vnn.nonlinearity = Nonlinearity::tanh;
    opt.train.epochs = 2;
    opt.resamples = 3;

    const PcaContrastReport rep = pca_contrast(cohort.fm, 2, Vector{1.0, 0.5}, 61, opt);
    REQUIRE(rep.keep_fractions.size() == 2);
    CHECK(rep.pca_variance[0] == 0.0);
    CHECK(rep.vnn_variance[0] == 0.0);
    CHECK(rep.ratio[0] == 1.0);
    CHECK(rep.pca_variance_median[0] == 0.0);
    CHECK(rep.vnn_variance_median[0] == 0.0);
    CHECK(rep.ratio_median[0] == 1.0);
    CHECK(rep.pca_variance[1] > 0.0);
    CHECK(rep.vnn_variance[1] > 0.0);
    CHECK(rep.pca_variance_median[1] > 0.0);
    CHECK(rep.vnn_variance_median[1] > 0.0);
    CHECK(rep.rank == 2);
    CHECK(rep.resamples == 3);
}

TEST_CASE("pca_contrast validation") {
    SpikedCohortSpec spec;
    spec.m = 6;
    spec.n = 30;
    spec.spectrum = near_degenerate_spectrum(6);
    const SpikedCohort cohort = make_spiked_cohort(spec, 53);

    PcaContrastOptions opt = default_pca_contrast_options();
    opt.train.epochs = 1;

    CHECK_THROWS_AS(pca_contrast(cohort.fm, 2, Vector{}, 1, opt), ConfigError);
    CHECK_THROWS_AS(pca_contrast(cohort.fm, 2, Vector{0.0}, 1, opt), ConfigError);
    CHECK_THROWS_AS(pca_contrast(cohort.fm, 2, Vector{1.5}, 1, opt), ConfigError);

    opt.resamples = 1;
    CHECK_THROWS_AS(pca_contrast(cohort.fm, 2, Vector{0.8}, 1, opt), ConfigError);
}
