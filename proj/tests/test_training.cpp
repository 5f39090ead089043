#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <covnn/covariance.hpp>
#include <covnn/rng.hpp>
#include <covnn/synthcohort.hpp>
#include <covnn/training.hpp>

using namespace covnn;
using Catch::Matchers::WithinAbs;

namespace {

// Small learnable cohort: features drift with age, so a filter bank can
// recover the age signal.
FeatureMatrix learnable_cohort(std::size_t n, std::size_t m, std::uint64_t seed) {
    return sample_cohort(CortexSpec{}, nullptr, m, n, 50.0, 90.0, seed);
}

TrainConfig quick_config() {
    TrainConfig cfg;
    cfg.epochs = 12;
    cfg.batch_size = 16;
    cfg.learning_rate = 5e-3;
    cfg.patience = 12;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST_CASE("evaluate on an all-zero model reports the raw age moments") {
    const FeatureMatrix fm = learnable_cohort(24, 6, 61);
    const CovarianceGraph cov = normalize_spectrum(sample_covariance(fm));
    VnnConfig cfg;
    cfg.taps_per_layer = {2, 2};
    cfg.widths = {1, 2, 2};
    VnnModel model = vnn_init(cfg, 1);
    for (auto& layer : model.layers)
        for (auto& row : layer.w)
            for (auto& taps : row) std::fill(taps.begin(), taps.end(), 0.0);

    const EvalResult res = evaluate(model, cov, fm);
    double mae = 0.0, mse = 0.0;
    for (double a : fm.ages) {
        mae += std::abs(a);
        mse += a * a;
    }
    mae /= static_cast<double>(fm.n_subjects());
    mse /= static_cast<double>(fm.n_subjects());
    REQUIRE_THAT(res.mae, WithinAbs(mae, 1e-10));
    REQUIRE_THAT(res.mse, WithinAbs(mse, 1e-8));
    for (double p : res.predictions) REQUIRE(p == 0.0);
}

TEST_CASE("training is deterministic in the config seed") {
    const FeatureMatrix fm = learnable_cohort(40, 5, 67);
    const CovarianceGraph cov = normalize_spectrum(sample_covariance(fm));
    VnnConfig vcfg;
    vcfg.taps_per_layer = {2, 2};
    vcfg.widths = {1, 3, 3};
    const VnnModel init = vnn_init(vcfg, 11);

    const TrainReport a = train(init, cov, fm, quick_config());
    const TrainReport b = train(init, cov, fm, quick_config());
    REQUIRE(a.epochs.size() == b.epochs.size());
    for (std::size_t e = 0; e < a.epochs.size(); ++e) {
        REQUIRE(a.epochs[e].train_mse == b.epochs[e].train_mse);
        REQUIRE(a.epochs[e].val_mae == b.epochs[e].val_mae);
    }
    for (std::size_t l = 0; l < a.best_model.layers.size(); ++l)
        for (std::size_t f = 0; f < a.best_model.layers[l].w.size(); ++f)
            for (std::size_t g = 0; g < a.best_model.layers[l].w[f].size(); ++g)
                for (std::size_t k = 0; k < a.best_model.layers[l].w[f][g].size(); ++k)
                    REQUIRE(a.best_model.layers[l].w[f][g][k] ==
                            b.best_model.layers[l].w[f][g][k]);

    TrainConfig other = quick_config();
    other.seed = 4;
    const TrainReport c = train(init, cov, fm, other);
    REQUIRE(c.epochs.back().train_mse != a.epochs.back().train_mse);
}

TEST_CASE("training reduces the loss on a learnable cohort") {
    const FeatureMatrix fm = learnable_cohort(80, 8, 71);
    const CovarianceGraph cov = normalize_spectrum(sample_covariance(fm));
    VnnConfig vcfg;
    vcfg.taps_per_layer = {2, 4};
    vcfg.widths = {1, 6, 6};
    const VnnModel init = vnn_init(vcfg, 13);

    TrainConfig cfg = quick_config();
    cfg.epochs = 40;
    cfg.patience = 40;
    cfg.learning_rate = 1e-2;
    const TrainReport report = train(init, cov, fm, cfg);

    REQUIRE(report.epochs.size() == 40);
    REQUIRE(report.epochs.back().train_mse < 0.05 * report.epochs.front().train_mse);
    REQUIRE(report.best_val_mae < 15.0);  // ages span [50, 90]; untrained MAE is ~70

    // best_epoch indexes the minimum validation MAE (1-based)
    double best = report.epochs.front().val_mae;
    std::size_t best_at = 1;
    for (std::size_t e = 1; e < report.epochs.size(); ++e)
        if (report.epochs[e].val_mae < best) {
            best = report.epochs[e].val_mae;
            best_at = e + 1;
        }
    REQUIRE(report.best_epoch == best_at);
    REQUIRE_THAT(report.best_val_mae, WithinAbs(best, 1e-12));
}

TEST_CASE("early stopping halts after patience epochs without improvement") {
    const FeatureMatrix fm = learnable_cohort(40, 5, 73);
    const CovarianceGraph cov = normalize_spectrum(sample_covariance(fm));
    VnnConfig vcfg;
    vcfg.taps_per_layer = {2};
    vcfg.widths = {1, 2};
    vcfg.layers = 1;
    // All-zero relu parameters are a stationary point: gradients vanish, the
    // model never moves, and validation MAE cannot improve after epoch 1.
    VnnModel init = vnn_init(vcfg, 17);
    for (auto& layer : init.layers)
        for (auto& row : layer.w)
            for (auto& taps : row) std::fill(taps.begin(), taps.end(), 0.0);

    TrainConfig cfg = quick_config();
    cfg.epochs = 200;
    cfg.patience = 3;
    const TrainReport report = train(init, cov, fm, cfg);
    REQUIRE(report.early_stopped);
    REQUIRE(report.epochs.size() == cfg.patience + 2);
    REQUIRE(report.best_epoch == 1);
}

TEST_CASE("stratified split is deterministic and age-balanced") {
    const FeatureMatrix fm = learnable_cohort(100, 4, 79);
    std::vector<std::size_t> train_a, val_a, train_b, val_b;
    detail::stratified_split(fm, 0.2, 5, train_a, val_a);
    detail::stratified_split(fm, 0.2, 5, train_b, val_b);
    REQUIRE(train_a == train_b);
    REQUIRE(val_a == val_b);
    REQUIRE(train_a.size() + val_a.size() == 100);
    REQUIRE(val_a.size() >= 20);
    REQUIRE(val_a.size() <= 30);

    // disjoint
    std::vector<bool> seen(100, false);
    for (std::size_t r : train_a) seen[r] = true;
    for (std::size_t r : val_a) REQUIRE(!seen[r]);

    // validation mean age close to the cohort mean (stratification at work)
    double all = 0.0, val_mean = 0.0;
    for (double a : fm.ages) all += a;
    for (std::size_t r : val_a) val_mean += fm.ages[r];
    all /= 100.0;
    val_mean /= static_cast<double>(val_a.size());
    REQUIRE(std::abs(val_mean - all) < 4.0);
}

TEST_CASE("train config validation rejects broken settings") {
    TrainConfig cfg;
    cfg.epochs = 0;
    REQUIRE_THROWS_AS(validate(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.validation_fraction = 0.0;
    REQUIRE_THROWS_AS(validate(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.learning_rate = -1.0;
    REQUIRE_THROWS_AS(validate(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    REQUIRE_THROWS_AS(validate(cfg), ConfigError);
}
