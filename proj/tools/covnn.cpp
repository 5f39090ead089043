// covnn: synthetic-cortex brain-age pipeline driver.
//
// Subcommands cover the full workflow: cohort synthesis, training, prediction,
// group statistics, and the transfer / stability experiments. Configuration
// comes from an optional JSON file (--config); --seed and --out override the
// file. Every run is a pure function of (config, seed): reruns reproduce all
// output files byte for byte.
//
// Exit codes: 0 ok, 1 runtime error, 2 validation error. Errors print exactly
// one machine-parsable line on stderr: "error: <Code>: <message>".

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <covnn/pipeline.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::optional<std::string>& path) {
    if (!path) return json::object();
    if (!fs::exists(*path)) throw covnn::ConfigError(*path + ": config file does not exist");
    json cfg = covnn::parse_json_file(*path);
    if (!cfg.is_object()) throw covnn::ConfigError(*path + ": config must be a JSON object");
    return cfg;
}

void require_input(const std::string& path, const char* what) {
    if (!fs::exists(path))
        throw covnn::ConfigError(std::string(what) + " path does not exist: " + path);
}

fs::path prepare_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw covnn::ConfigError("output dir not creatable: " + out + " (" + ec.message() + ")");
    return fs::path(out);
}

covnn::CortexSpec cortex_from(const json& cfg) {
    if (cfg.contains("cortex")) return covnn::cortex_spec_from_json(cfg.at("cortex"));
    covnn::CortexSpec spec;
    covnn::validate(spec);
    return spec;
}

covnn::DiseaseSpec disease_from(const json& cfg) {
    if (cfg.contains("disease") && !cfg.at("disease").is_null())
        return covnn::disease_spec_from_json(cfg.at("disease"));
    return covnn::default_disease_spec();
}

covnn::TrainRunOptions train_run_from(const json& cfg, covnn::TrainRunOptions opt = {}) {
    if (cfg.contains("vnn")) opt.vnn = covnn::vnn_config_from_json(cfg.at("vnn"));
    if (cfg.contains("train")) opt.train = covnn::train_config_from_json(cfg.at("train"));
    if (cfg.contains("sparsify") && !cfg.at("sparsify").is_null()) {
        const json& s = cfg.at("sparsify");
        const std::string mode = s.value("mode", "hard");
        if (mode == "hard")
            opt.sparsify_mode = covnn::ThresholdMode::hard;
        else if (mode == "soft")
            opt.sparsify_mode = covnn::ThresholdMode::soft;
        else
            throw covnn::ConfigError("sparsify mode must be hard or soft, got '" + mode + "'");
        opt.sparsify_tau = s.value("tau", 0.0);
    }
    opt.zscore = cfg.value("zscore", false);
    return opt;
}

covnn::DemoOptions demo_from(const json& cfg) {
    covnn::DemoOptions opt;
    opt.cortex = cortex_from(cfg);
    opt.disease = disease_from(cfg);
    const json d = cfg.value("demo", json::object());
    opt.regions = d.value("regions", opt.regions);
    opt.n_train = d.value("n_train", opt.n_train);
    opt.n_test_hc = d.value("n_test_hc", opt.n_test_hc);
    opt.n_test_dis = d.value("n_test_dis", opt.n_test_dis);
    opt.age_lo = d.value("age_lo", opt.age_lo);
    opt.age_hi = d.value("age_hi", opt.age_hi);
    opt.top_regions = d.value("top_regions", opt.top_regions);
    // Keep the demo's hotter schedule unless the config spells one out.
    opt.train = train_run_from(cfg, opt.train);
    return opt;
}

covnn::TransferOptions transfer_from(const json& cfg) {
    covnn::TransferOptions opt = covnn::default_transfer_options();
    opt.cortex = cortex_from(cfg);
    if (cfg.contains("vnn")) opt.vnn = covnn::vnn_config_from_json(cfg.at("vnn"));
    if (cfg.contains("train")) opt.train = covnn::train_config_from_json(cfg.at("train"));
    const json t = cfg.value("transfer", json::object());
    opt.dims = t.value("dims", opt.dims);
    opt.train_dim = t.value("train_dim", opt.train_dim);
    opt.n_train = t.value("n_train", opt.n_train);
    opt.n_reference = t.value("n_reference", opt.n_reference);
    opt.n_test = t.value("n_test", opt.n_test);
    opt.matched_subjects = t.value("matched_subjects", opt.matched_subjects);
    opt.age_lo = t.value("age_lo", opt.age_lo);
    opt.age_hi = t.value("age_hi", opt.age_hi);
    opt.train.threads = covnn::threads_from_env(opt.train.threads);
    covnn::validate(opt);
    return opt;
}

covnn::StabilityRunOptions stability_from(const json& cfg) {
    covnn::StabilityRunOptions opt;
    const json s = cfg.value("stability", json::object());
    opt.regions = s.value("regions", opt.regions);
    opt.kernel_sigma2 = s.value("kernel_sigma2", opt.kernel_sigma2);
    opt.kernel_length = s.value("kernel_length", opt.kernel_length);
    opt.kernel_nugget = s.value("kernel_nugget", opt.kernel_nugget);
    opt.ns = s.value("ns", opt.ns);
    opt.trials = s.value("trials", opt.trials);
    opt.probes = s.value("probes", opt.probes);
    opt.keep_fractions = s.value("keep_fractions", opt.keep_fractions);
    opt.pca_rank = s.value("pca_rank", opt.pca_rank);
    opt.pca_regions = s.value("pca_regions", opt.pca_regions);
    opt.pca_subjects = s.value("pca_subjects", opt.pca_subjects);
    return opt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic-cortex brain-age pipeline (covariance neural networks)"};
    app.require_subcommand(1);
    app.fallthrough(true);

    std::string config_path_val, out_val;
    std::uint64_t seed_val = 0;
    auto* config_opt = app.add_option("--config", config_path_val, "JSON config file");
    auto* seed_opt = app.add_option("--seed", seed_val, "global RNG seed (overrides config)");
    auto* out_opt = app.add_option("--out", out_val, "output directory (overrides config)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort CSV");
    std::uint64_t synth_subjects = 0, synth_regions = 0;
    bool synth_diseased = false;
    std::string synth_name;
    auto* synth_subjects_opt = synth->add_option("--subjects", synth_subjects, "cohort size");
    auto* synth_regions_opt = synth->add_option("--regions", synth_regions, "region count");
    synth->add_flag("--diseased", synth_diseased, "plant the configured atrophy pattern");
    auto* synth_name_opt = synth->add_option("--name", synth_name, "output CSV filename");

    auto* train = app.add_subcommand("train", "estimate covariance, train, fit the age bias");
    std::string train_cohort;
    train->add_option("--cohort", train_cohort, "training cohort CSV")->required();

    auto* predict = app.add_subcommand("predict", "delta-age report for a cohort");
    std::string pr_model, pr_bias, pr_cov, pr_cohort, pr_label = "cohort", pr_prefix = "cohort";
    predict->add_option("--model", pr_model, "model JSON")->required();
    predict->add_option("--bias", pr_bias, "bias JSON")->required();
    predict->add_option("--covariance", pr_cov, "covariance JSON")->required();
    predict->add_option("--cohort", pr_cohort, "cohort CSV")->required();
    predict->add_option("--label", pr_label, "cohort label stored in the report");
    predict->add_option("--prefix", pr_prefix, "output file prefix");

    auto* group_stats =
        app.add_subcommand("group-stats", "region ANCOVA + delta-age contrast of two reports");
    std::string gs_a, gs_b;
    group_stats->add_option("--healthy", gs_a, "healthy cohort delta report JSON")->required();
    group_stats->add_option("--disease", gs_b, "disease cohort delta report JSON")->required();

    auto* transfer = app.add_subcommand("transfer", "train at one resolution, evaluate across");
    auto* stability = app.add_subcommand("stability", "covariance perturbation experiments");
    auto* demo = app.add_subcommand("demo", "full synthesize/train/predict/compare run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help and friends
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: ConfigError: %s\n", e.what());
        return 2;
    }

    try {
        std::optional<std::string> config_path;
        if (config_opt->count()) config_path = config_path_val;
        const json cfg = load_config(config_path);
        const std::uint64_t seed =
            seed_opt->count() ? seed_val : cfg.value("seed", std::uint64_t{1});
        const fs::path out =
            prepare_out_dir(out_opt->count() ? out_val : cfg.value("out", std::string{"out"}));

        if (app.got_subcommand(synth)) {
            covnn::SynthRunOptions opt;
            opt.cortex = cortex_from(cfg);
            const json s = cfg.value("synth", json::object());
            opt.regions = s.value("regions", opt.regions);
            opt.subjects = s.value("subjects", opt.subjects);
            opt.age_lo = s.value("age_lo", opt.age_lo);
            opt.age_hi = s.value("age_hi", opt.age_hi);
            if (synth_regions_opt->count()) opt.regions = synth_regions;
            if (synth_subjects_opt->count()) opt.subjects = synth_subjects;
            if (synth_diseased || s.value("diseased", false)) opt.disease = disease_from(cfg);
            std::string name = s.value("name", std::string{"cohort.csv"});
            if (synth_name_opt->count()) name = synth_name;
            covnn::run_synth(opt, seed, out / name);
        } else if (app.got_subcommand(train)) {
            require_input(train_cohort, "cohort");
            const covnn::FeatureMatrix cohort = covnn::import_csv(train_cohort);
            covnn::run_train(cohort, train_run_from(cfg), seed, out);
        } else if (app.got_subcommand(predict)) {
            require_input(pr_model, "model");
            require_input(pr_bias, "bias");
            require_input(pr_cov, "covariance");
            require_input(pr_cohort, "cohort");
            covnn::run_predict_files(pr_model, pr_bias, pr_cov, pr_cohort, pr_label, out,
                                     pr_prefix);
        } else if (app.got_subcommand(group_stats)) {
            require_input(gs_a, "healthy report");
            require_input(gs_b, "disease report");
            const covnn::DeltaAgeReport a =
                covnn::delta_report_from_json(covnn::parse_json_file(gs_a));
            const covnn::DeltaAgeReport b =
                covnn::delta_report_from_json(covnn::parse_json_file(gs_b));
            covnn::write_group_stats(covnn::run_group_stats(a, b), out);
        } else if (app.got_subcommand(transfer)) {
            covnn::run_transfer(transfer_from(cfg), seed, out);
        } else if (app.got_subcommand(stability)) {
            covnn::run_stability(stability_from(cfg), seed, out);
        } else if (app.got_subcommand(demo)) {
            covnn::run_demo(demo_from(cfg), seed, out);
        }
        return 0;
    } catch (const covnn::Error& e) {
        std::fprintf(stderr, "%s\n", e.formatted().c_str());
        return e.kind() == covnn::ErrorKind::validation ? 2 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: Unhandled: %s\n", e.what());
        return 1;
    }
}
