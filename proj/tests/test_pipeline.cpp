#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "covnn/pipeline.hpp"

using namespace covnn;
using Catch::Matchers::WithinAbs;

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

FeatureMatrix tiny_cohort(std::size_t m, std::size_t n, std::uint64_t seed) {
    return sample_cohort(CortexSpec{}, nullptr, m, n, 50.0, 90.0, seed);
}

TrainRunOptions tiny_train_options() {
    TrainRunOptions opt;
    opt.vnn.layers = 2;
    opt.vnn.taps_per_layer = {2, 2};
    opt.vnn.widths = {1, 3, 3};
    opt.train.epochs = 2;
    opt.train.batch_size = 16;
    opt.train.learning_rate = 1e-3;
    opt.train.patience = 10;
    return opt;
}

}  // namespace

TEST_CASE("COVNN_THREADS caps the requested fan-out") {
    unsetenv("COVNN_THREADS");
    CHECK(threads_from_env(4) == 4);

    setenv("COVNN_THREADS", "2", 1);
    CHECK(threads_from_env(8) == 2);
    CHECK(threads_from_env(1) == 1);

    setenv("COVNN_THREADS", "0", 1);
    CHECK(threads_from_env(3) == 3);

    setenv("COVNN_THREADS", "lots", 1);
    CHECK(threads_from_env(3) == 3);

    unsetenv("COVNN_THREADS");
}

TEST_CASE("parse_json_file flags malformed input as a config problem") {
    const fs::path dir = fresh_dir("covnn_test_parse_json");
    write_file_atomic(dir / "good.json", "{\"a\": 1}\n");
    write_file_atomic(dir / "bad.json", "{\"a\": \n");

    CHECK(parse_json_file(dir / "good.json").at("a").get<int>() == 1);
    CHECK_THROWS_AS(parse_json_file(dir / "bad.json"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("vnn config json round trip and defaults") {
    VnnConfig cfg;
    cfg.layers = 2;
    cfg.taps_per_layer = {2, 6};
    cfg.widths = {1, 5, 5};
    cfg.nonlinearity = Nonlinearity::relu;
    cfg.final_linear = true;

    const VnnConfig back = vnn_config_from_json(to_json(cfg));
    CHECK(back.layers == cfg.layers);
    CHECK(back.taps_per_layer == cfg.taps_per_layer);
    CHECK(back.widths == cfg.widths);
    CHECK(back.nonlinearity == cfg.nonlinearity);
    CHECK(back.final_linear == cfg.final_linear);

    const VnnConfig defaults = vnn_config_from_json(nlohmann::json::object());
    CHECK(defaults.layers == VnnConfig{}.layers);
    CHECK(defaults.widths == VnnConfig{}.widths);

    CHECK_THROWS_AS(vnn_config_from_json({{"nonlinearity", "swish"}}), ConfigError);
    CHECK_THROWS_AS(vnn_config_from_json({{"layers", "two"}}), ConfigError);
    CHECK_THROWS_AS(vnn_config_from_json({{"layers", 0}}), ConfigError);
}

TEST_CASE("train config json round trip and rejection") {
    TrainConfig cfg;
    cfg.epochs = 7;
    cfg.batch_size = 9;
    cfg.learning_rate = 3e-4;
    cfg.optimizer = Optimizer::sgd;
    cfg.patience = 4;
    cfg.validation_fraction = 0.25;
    cfg.threads = 2;

    const TrainConfig back = train_config_from_json(to_json(cfg));
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.learning_rate == cfg.learning_rate);
    CHECK(back.optimizer == Optimizer::sgd);
    CHECK(back.patience == cfg.patience);
    CHECK(back.validation_fraction == cfg.validation_fraction);
    CHECK(back.threads == cfg.threads);

    CHECK_THROWS_AS(train_config_from_json({{"optimizer", "rmsprop"}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 0.0}}), ConfigError);
}

TEST_CASE("covariance artifact survives a json round trip") {
    const FeatureMatrix fm = tiny_cohort(6, 30, 71);
    const CovarianceGraph cov = normalize_spectrum(sample_covariance(fm));

    ZscoreParams z = fit_zscore(fm);
    const nlohmann::json j = covariance_to_json(cov, fm.region_ids, z);
    const CovarianceArtifact art = covariance_from_json(j);

    REQUIRE(art.cov.dim() == 6);
    for (std::size_t i = 0; i < 36; ++i)
        CHECK(art.cov.op.entries.data()[i] == cov.op.entries.data()[i]);
    // The loader re-decomposes the (bitwise preserved) entries, while the
    // in-memory graph rescaled its eigenvalues in place, so the spectra agree
    // only to roundoff.
    for (std::size_t i = 0; i < 6; ++i)
        CHECK_THAT(art.cov.op.eigvals[i], Catch::Matchers::WithinRel(cov.op.eigvals[i], 1e-12));
    const CovarianceArtifact art2 = covariance_from_json(j);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(art2.cov.op.eigvals[i] == art.cov.op.eigvals[i]);
    CHECK(art.cov.n_samples == cov.n_samples);
    CHECK(art.cov.scale == cov.scale);
    CHECK(art.region_ids == fm.region_ids);
    REQUIRE(art.zscore.has_value());
    CHECK(art.zscore->means == z.means);
    CHECK(art.zscore->sds == z.sds);

    const CovarianceArtifact plain =
        covariance_from_json(covariance_to_json(cov, fm.region_ids, std::nullopt));
    CHECK_FALSE(plain.zscore.has_value());
}

TEST_CASE("covariance artifact rejects tampering") {
    const FeatureMatrix fm = tiny_cohort(5, 20, 73);
    const CovarianceGraph cov = normalize_spectrum(sample_covariance(fm));
    const nlohmann::json j = covariance_to_json(cov, fm.region_ids, std::nullopt);

    nlohmann::json tampered = j;
    tampered["matrix"][0] = tampered["matrix"][0].get<double>() + 1e-9;
    CHECK_THROWS_AS(covariance_from_json(tampered), InvalidMatrix);

    nlohmann::json wrong_tag = j;
    wrong_tag["format"] = "covnn-model";
    CHECK_THROWS_AS(covariance_from_json(wrong_tag), ConfigError);

    nlohmann::json short_matrix = j;
    short_matrix["matrix"].erase(0);
    CHECK_THROWS_AS(covariance_from_json(short_matrix), ConfigError);

    nlohmann::json bad_ids = j;
    bad_ids["region_ids"].erase(0);
    CHECK_THROWS_AS(covariance_from_json(bad_ids), ConfigError);
}

TEST_CASE("bias artifact round trip") {
    AgeBiasModel bias;
    bias.omega = -0.375;
    bias.rho = 12.5;
    bias.fit_n = 123;

    const AgeBiasModel back = bias_from_json(bias_to_json(bias));
    CHECK(back.omega == bias.omega);
    CHECK(back.rho == bias.rho);
    CHECK(back.fit_n == bias.fit_n);

    nlohmann::json j = bias_to_json(bias);
    j["format"] = "something-else";
    CHECK_THROWS_AS(bias_from_json(j), ConfigError);
}

TEST_CASE("model bundle json carries the training summary and fingerprint") {
    const FeatureMatrix fm = tiny_cohort(6, 30, 79);
    const TrainRunOptions opt = tiny_train_options();
    const fs::path dir = fresh_dir("covnn_test_bundle");
    const TrainedPipeline trained = run_train(fm, opt, 5, dir);

    const nlohmann::json j =
        model_bundle_to_json(trained.model, fingerprint(trained.cov), trained.report);
    CHECK(j.at("training").at("epochs_run").get<std::size_t>() == trained.report.epochs.size());
    CHECK(j.at("training").at("best_epoch").get<std::size_t>() == trained.report.best_epoch);

    const ModelBundle bundle = model_bundle_from_json(j);
    const auto orig = parameter_view(const_cast<VnnModel&>(trained.model));
    auto copy_model = bundle.model;
    const auto copy = parameter_view(copy_model);
    REQUIRE(orig.size() == copy.size());
    for (std::size_t i = 0; i < orig.size(); ++i) CHECK(*orig[i] == *copy[i]);
    CHECK(bundle.fp.dimension == 6);
    CHECK(bundle.fp.sha256 == fingerprint(trained.cov).sha256);
    fs::remove_all(dir);
}

TEST_CASE("train run emits the full artifact set") {
    const FeatureMatrix fm = tiny_cohort(6, 32, 83);
    const fs::path dir = fresh_dir("covnn_test_train_run");
    const TrainedPipeline trained = run_train(fm, tiny_train_options(), 9, dir);

    for (const char* name : {"model.json", "bias.json", "covariance.json", "train_log.csv"})
        CHECK(fs::exists(dir / name));

    const std::string log = read_file(dir / "train_log.csv");
    CHECK(log.rfind("epoch,train_mse,train_mae,val_mse,val_mae\n", 0) == 0);
    CHECK(trained.report.epochs.size() >= 1);
    CHECK(std::isfinite(trained.bias.omega));
    CHECK(trained.train_eval.predictions.size() == 32);
    fs::remove_all(dir);
}

TEST_CASE("delta report round trips through json and csv has the right shape") {
    const FeatureMatrix fm = tiny_cohort(6, 24, 89);
    const fs::path dir = fresh_dir("covnn_test_delta_rt");
    const TrainedPipeline trained = run_train(fm, tiny_train_options(), 11, dir);
    const DeltaAgeReport report = run_predict(trained, fm, "train", dir, "train");

    const DeltaAgeReport back = delta_report_from_json(delta_report_to_json(report));
    REQUIRE(back.subjects.size() == report.subjects.size());
    CHECK(back.cohort_label == "train");
    CHECK(back.region_ids == report.region_ids);
    for (std::size_t i = 0; i < back.subjects.size(); ++i) {
        CHECK(back.subjects[i].subject_id == report.subjects[i].subject_id);
        CHECK(back.subjects[i].age == report.subjects[i].age);
        CHECK(back.subjects[i].y_hat == report.subjects[i].y_hat);
        CHECK(back.subjects[i].y_brain == report.subjects[i].y_brain);
        CHECK(back.subjects[i].delta_age == report.subjects[i].delta_age);
        CHECK(back.subjects[i].residuals == report.subjects[i].residuals);
        CHECK(back.subjects[i].aligned_coeffs == report.subjects[i].aligned_coeffs);
        CHECK(back.group[i] == report.group[i]);
    }

    const std::string csv = read_file(dir / "train_predictions.csv");
    CHECK(csv.rfind("subject_id,age,group,y_hat,y_brain,delta_age\n", 0) == 0);

    nlohmann::json j = delta_report_to_json(report);
    j["format"] = "other";
    CHECK_THROWS_AS(delta_report_from_json(j), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("file-based predict verifies the covariance fingerprint") {
    const fs::path dir_a = fresh_dir("covnn_test_fp_a");
    const fs::path dir_b = fresh_dir("covnn_test_fp_b");
    const fs::path dir_c = fresh_dir("covnn_test_fp_c");
    const fs::path out = fresh_dir("covnn_test_fp_out");

    const FeatureMatrix fm_a = tiny_cohort(6, 30, 91);
    const FeatureMatrix fm_b = tiny_cohort(6, 30, 92);   // same M, different covariance
    const FeatureMatrix fm_c = tiny_cohort(9, 30, 93);   // different M
    export_csv(fm_a, dir_a / "cohort.csv");

    run_train(fm_a, tiny_train_options(), 13, dir_a);
    run_train(fm_b, tiny_train_options(), 13, dir_b);
    run_train(fm_c, tiny_train_options(), 13, dir_c);

    const DeltaAgeReport ok =
        run_predict_files(dir_a / "model.json", dir_a / "bias.json", dir_a / "covariance.json",
                          dir_a / "cohort.csv", "train", out, "ok");
    CHECK(ok.subjects.size() == 30);
    CHECK(fs::exists(out / "ok_delta.json"));
    CHECK(fs::exists(out / "ok_predictions.csv"));

    CHECK_THROWS_AS(
        run_predict_files(dir_a / "model.json", dir_a / "bias.json", dir_c / "covariance.json",
                          dir_a / "cohort.csv", "x", out, "x"),
        DimensionError);
    CHECK_THROWS_AS(
        run_predict_files(dir_a / "model.json", dir_a / "bias.json", dir_b / "covariance.json",
                          dir_a / "cohort.csv", "x", out, "x"),
        InvalidMatrix);

    for (const auto& d : {dir_a, dir_b, dir_c, out}) fs::remove_all(d);
}

TEST_CASE("predicting a cohort with foreign region ids fails") {
    const fs::path dir = fresh_dir("covnn_test_region_ids");
    const FeatureMatrix fm = tiny_cohort(6, 24, 97);
    const TrainedPipeline trained = run_train(fm, tiny_train_options(), 17, dir);

    FeatureMatrix renamed = fm;
    renamed.region_ids[2] = "zzz";
    CHECK_THROWS_AS(predict_cohort(trained.model, trained.cov, trained.zscore, trained.bias,
                                   renamed, trained.region_ids, "x"),
                    DimensionError);
    fs::remove_all(dir);
}

TEST_CASE("group stats require matching regions and enough subjects") {
    const fs::path dir = fresh_dir("covnn_test_group_stats");
    const FeatureMatrix fm = tiny_cohort(6, 24, 101);
    const TrainedPipeline trained = run_train(fm, tiny_train_options(), 19, dir);
    const DeltaAgeReport report = run_predict(trained, fm, "a", dir, "a");

    DeltaAgeReport renamed = report;
    renamed.region_ids[0] = "zzz";
    CHECK_THROWS_AS(run_group_stats(report, renamed), DimensionError);

    DeltaAgeReport lonely = report;
    lonely.subjects.resize(1);
    lonely.group.resize(1);
    CHECK_THROWS_AS(run_group_stats(report, lonely), InsufficientSamples);
    fs::remove_all(dir);
}

TEST_CASE("demo runs are byte-identical under a fixed seed") {
    DemoOptions opt;
    opt.regions = 12;
    opt.n_train = 48;
    opt.n_test_hc = 12;
    opt.n_test_dis = 12;
    opt.train = tiny_train_options();
    opt.train.train.epochs = 3;
    opt.top_regions = 4;

    const fs::path dir_a = fresh_dir("covnn_test_demo_a");
    const fs::path dir_b = fresh_dir("covnn_test_demo_b");
    const DemoResult res_a = run_demo(opt, 23, dir_a);
    const DemoResult res_b = run_demo(opt, 23, dir_b);

    CHECK(res_a.train_mae == res_b.train_mae);
    CHECK(res_a.delta_gap == res_b.delta_gap);
    CHECK(res_a.top_regions == res_b.top_regions);
    CHECK(res_a.top_regions.size() == 4);

    std::vector<fs::path> names;
    for (const auto& entry : fs::directory_iterator(dir_a)) names.push_back(entry.path().filename());
    REQUIRE(names.size() >= 14);
    for (const auto& name : names) {
        REQUIRE(fs::exists(dir_b / name));
        CHECK(read_file(dir_a / name) == read_file(dir_b / name));
    }

    const nlohmann::json summary = parse_json_file(dir_a / "demo_summary.json");
    CHECK(summary.at("format").get<std::string>() == "covnn-demo-summary");
    CHECK(summary.at("planted_regions").size() >= 1);

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}
