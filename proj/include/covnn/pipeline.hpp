#pragma once

// End-to-end pipeline runs shared by the CLI and the acceptance harness:
// cohort synthesis, covariance + training + age-bias fitting, prediction with
// fingerprint-checked artifacts, group statistics, and the transfer and
// stability experiments. Every artifact is written atomically and contains no
// wall-clock state, so a rerun with the same seed reproduces identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covnn/brainage.hpp"
#include "covnn/covariance.hpp"
#include "covnn/errors.hpp"
#include "covnn/io.hpp"
#include "covnn/stability.hpp"
#include "covnn/stats.hpp"
#include "covnn/synthcohort.hpp"
#include "covnn/training.hpp"
#include "covnn/transfer.hpp"
#include "covnn/vnn.hpp"

namespace covnn {

// COVNN_THREADS caps any requested fan-out; unset or malformed values leave
// the request untouched.
inline std::size_t threads_from_env(std::size_t requested) {
    const char* env = std::getenv("COVNN_THREADS");
    if (!env || !*env) return requested;
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || v == 0) return requested;
    return std::min<std::size_t>(requested, static_cast<std::size_t>(v));
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

// --- config (de)serialization -------------------------------------------------

inline nlohmann::json to_json(const VnnConfig& cfg) {
    return {{"layers", cfg.layers},
            {"taps_per_layer", cfg.taps_per_layer},
            {"widths", cfg.widths},
            {"nonlinearity", to_string(cfg.nonlinearity)},
            {"final_linear", cfg.final_linear}};
}

inline VnnConfig vnn_config_from_json(const nlohmann::json& j) {
    try {
        VnnConfig cfg;
        cfg.layers = j.value("layers", cfg.layers);
        cfg.taps_per_layer = j.value("taps_per_layer", cfg.taps_per_layer);
        cfg.widths = j.value("widths", cfg.widths);
        if (j.contains("nonlinearity"))
            cfg.nonlinearity = nonlinearity_from_string(j.at("nonlinearity").get<std::string>());
        cfg.final_linear = j.value("final_linear", cfg.final_linear);
        validate(cfg);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("vnn config json: ") + e.what());
    }
}

inline nlohmann::json to_json(const TrainConfig& cfg) {
    return {{"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"learning_rate", cfg.learning_rate},
            {"optimizer", cfg.optimizer == Optimizer::adam ? "adam" : "sgd"},
            {"adam_beta1", cfg.adam_beta1},
            {"adam_beta2", cfg.adam_beta2},
            {"adam_eps", cfg.adam_eps},
            {"patience", cfg.patience},
            {"validation_fraction", cfg.validation_fraction},
            {"threads", cfg.threads}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    try {
        TrainConfig cfg;
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        if (j.contains("optimizer")) {
            const std::string o = j.at("optimizer").get<std::string>();
            if (o == "adam")
                cfg.optimizer = Optimizer::adam;
            else if (o == "sgd")
                cfg.optimizer = Optimizer::sgd;
            else
                throw ConfigError("train config: unknown optimizer '" + o + "'");
        }
        cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
        cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
        cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
        cfg.patience = j.value("patience", cfg.patience);
        cfg.validation_fraction = j.value("validation_fraction", cfg.validation_fraction);
        cfg.threads = j.value("threads", cfg.threads);
        validate(cfg);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config json: ") + e.what());
    }
}

// --- covariance artifact --------------------------------------------------------

struct CovarianceArtifact {
    CovarianceGraph cov;
    std::vector<std::string> region_ids;
    std::optional<ZscoreParams> zscore;
};

inline nlohmann::json covariance_to_json(const CovarianceGraph& cov,
                                         const std::vector<std::string>& region_ids,
                                         const std::optional<ZscoreParams>& zscore) {
    if (region_ids.size() != cov.dim())
        throw DimensionError("covariance artifact: region id count disagrees with dimension");
    nlohmann::json j{{"format", "covnn-covariance"},
                     {"version", 1},
                     {"dimension", cov.dim()},
                     {"n_samples", cov.n_samples},
                     {"scale", cov.scale},
                     {"region_ids", region_ids},
                     {"matrix", cov.op.entries.data()},
                     {"sha256", sha256_hex(cov.op.entries.data())}};
    if (zscore)
        j["zscore"] = {{"means", zscore->means}, {"sds", zscore->sds}};
    else
        j["zscore"] = nullptr;
    return j;
}

inline CovarianceArtifact covariance_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "covnn-covariance")
            throw ConfigError("covariance json: unexpected format tag");
        CovarianceArtifact art;
        const std::size_t m = j.at("dimension").get<std::size_t>();
        const Vector flat = j.at("matrix").get<Vector>();
        if (m == 0 || flat.size() != m * m)
            throw ConfigError("covariance json: matrix size disagrees with dimension");
        if (j.at("sha256").get<std::string>() != sha256_hex(flat))
            throw InvalidMatrix("covariance json: matrix bytes do not match stored sha256");
        Matrix entries(m, m);
        std::copy(flat.begin(), flat.end(), entries.data().begin());
        art.cov.op = eigendecompose(entries);
        art.cov.n_samples = j.at("n_samples").get<std::size_t>();
        art.cov.scale = j.at("scale").get<double>();
        art.region_ids = j.at("region_ids").get<std::vector<std::string>>();
        if (art.region_ids.size() != m)
            throw ConfigError("covariance json: region id count disagrees with dimension");
        if (!j.at("zscore").is_null()) {
            ZscoreParams z;
            z.means = j.at("zscore").at("means").get<Vector>();
            z.sds = j.at("zscore").at("sds").get<Vector>();
            if (z.means.size() != m || z.sds.size() != m)
                throw ConfigError("covariance json: zscore parameter length disagrees");
            art.zscore = std::move(z);
        }
        return art;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("covariance json: ") + e.what());
    }
}

// --- model + bias artifacts ------------------------------------------------------

struct ModelBundle {
    VnnModel model;
    CovarianceFingerprint fp;
};

inline nlohmann::json model_bundle_to_json(const VnnModel& model, const CovarianceFingerprint& fp,
                                           const TrainReport& report) {
    nlohmann::json j = model_to_json(model, fp);
    j["training"] = {{"best_epoch", report.best_epoch},
                     {"best_val_mae", report.best_val_mae},
                     {"epochs_run", report.epochs.size()},
                     {"early_stopped", report.early_stopped}};
    return j;
}

inline ModelBundle model_bundle_from_json(const nlohmann::json& j) {
    ModelBundle bundle;
    bundle.model = model_from_json(j, &bundle.fp);
    return bundle;
}

inline nlohmann::json bias_to_json(const AgeBiasModel& bias) {
    return {{"format", "covnn-bias"},
            {"version", 1},
            {"omega", bias.omega},
            {"rho", bias.rho},
            {"fit_n", bias.fit_n}};
}

inline AgeBiasModel bias_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "covnn-bias")
            throw ConfigError("bias json: unexpected format tag");
        AgeBiasModel bias;
        bias.omega = j.at("omega").get<double>();
        bias.rho = j.at("rho").get<double>();
        bias.fit_n = j.at("fit_n").get<std::size_t>();
        return bias;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bias json: ") + e.what());
    }
}

// --- report serialization --------------------------------------------------------

inline std::string train_log_csv(const TrainReport& report) {
    std::string out = "epoch,train_mse,train_mae,val_mse,val_mae\n";
    for (const auto& e : report.epochs) {
        out += std::to_string(e.epoch);
        out += "," + format_double(e.train_mse);
        out += "," + format_double(e.train_mae);
        out += "," + format_double(e.val_mse);
        out += "," + format_double(e.val_mae);
        out += "\n";
    }
    return out;
}

inline nlohmann::json delta_report_to_json(const DeltaAgeReport& report) {
    nlohmann::json subjects = nlohmann::json::array();
    for (std::size_t i = 0; i < report.subjects.size(); ++i) {
        const SubjectDelta& s = report.subjects[i];
        subjects.push_back({{"subject_id", s.subject_id},
                            {"group", report.group[i]},
                            {"age", s.age},
                            {"y_hat", s.y_hat},
                            {"y_brain", s.y_brain},
                            {"delta_age", s.delta_age},
                            {"zero_residual", s.zero_residual},
                            {"residuals", s.residuals},
                            {"alignment", s.aligned_coeffs}});
    }
    return {{"format", "covnn-delta-report"},
            {"version", 1},
            {"cohort_label", report.cohort_label},
            {"region_ids", report.region_ids},
            {"subjects", subjects}};
}

inline DeltaAgeReport delta_report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "covnn-delta-report")
            throw ConfigError("delta report json: unexpected format tag");
        DeltaAgeReport report;
        report.cohort_label = j.at("cohort_label").get<std::string>();
        report.region_ids = j.at("region_ids").get<std::vector<std::string>>();
        for (const auto& sj : j.at("subjects")) {
            SubjectDelta s;
            s.subject_id = sj.at("subject_id").get<std::string>();
            s.age = sj.at("age").get<double>();
            s.y_hat = sj.at("y_hat").get<double>();
            s.y_brain = sj.at("y_brain").get<double>();
            s.delta_age = sj.at("delta_age").get<double>();
            s.zero_residual = sj.at("zero_residual").get<bool>();
            s.residuals = sj.at("residuals").get<Vector>();
            s.aligned_coeffs = sj.at("alignment").get<Vector>();
            if (s.residuals.size() != report.region_ids.size())
                throw ConfigError("delta report json: residual length disagrees with regions");
            report.group.push_back(sj.at("group").get<std::string>());
            report.subjects.push_back(std::move(s));
        }
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("delta report json: ") + e.what());
    }
}

inline std::string predictions_csv(const DeltaAgeReport& report) {
    std::string out = "subject_id,age,group,y_hat,y_brain,delta_age\n";
    for (std::size_t i = 0; i < report.subjects.size(); ++i) {
        const SubjectDelta& s = report.subjects[i];
        out += s.subject_id;
        out += "," + format_double(s.age);
        out += "," + report.group[i];
        out += "," + format_double(s.y_hat);
        out += "," + format_double(s.y_brain);
        out += "," + format_double(s.delta_age);
        out += "\n";
    }
    return out;
}

inline nlohmann::json group_stats_to_json(const GroupStatsReport& report) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : report.regions)
        regions.push_back({{"region_id", r.region_id},
                           {"f_value", r.test.f_value},
                           {"p_raw", r.test.p_raw},
                           {"p_bonferroni", r.test.p_bonferroni},
                           {"adj_mean_a", r.test.adj_mean_a},
                           {"adj_mean_b", r.test.adj_mean_b}});
    auto summary = [](const GroupSummary& g) {
        return nlohmann::json{
            {"label", g.label}, {"n", g.n}, {"delta_mean", g.delta_mean}, {"delta_sd", g.delta_sd}};
    };
    auto pearson_json = [](const PearsonResult& p) {
        return nlohmann::json{{"r", p.r}, {"p_two_sided", p.p}, {"n", p.n}};
    };
    return {{"format", "covnn-group-stats"},
            {"version", 1},
            {"regions", regions},
            {"group_a", summary(report.group_a)},
            {"group_b", summary(report.group_b)},
            {"delta_contrast",
             {{"t", report.delta_contrast.t},
              {"dof", report.delta_contrast.dof},
              {"p_one_sided", report.delta_contrast.p_one_sided}}},
            {"delta_vs_age_a", pearson_json(report.delta_vs_age_a)},
            {"delta_vs_age_b", pearson_json(report.delta_vs_age_b)}};
}

inline std::string region_stats_csv(const GroupStatsReport& report) {
    std::string out = "region_id,f_value,p_raw,p_bonferroni,adj_mean_a,adj_mean_b\n";
    for (const auto& r : report.regions) {
        out += r.region_id;
        out += "," + format_double(r.test.f_value);
        out += "," + format_double(r.test.p_raw);
        out += "," + format_double(r.test.p_bonferroni);
        out += "," + format_double(r.test.adj_mean_a);
        out += "," + format_double(r.test.adj_mean_b);
        out += "\n";
    }
    return out;
}

inline nlohmann::json transfer_report_to_json(const TransferReport& report) {
    nlohmann::json mae_matrix = nlohmann::json::array();
    for (std::size_t i = 0; i < report.dims.size(); ++i)
        mae_matrix.push_back({{"train_dim", report.train_dim},
                              {"eval_dim", report.dims[i]},
                              {"mae", report.mae_by_dim[i]}});
    nlohmann::json pairs = nlohmann::json::array();
    for (std::size_t i = 0; i + 1 < report.dims.size(); ++i)
        pairs.push_back({{"dims", {report.dims[i], report.dims[i + 1]}},
                         {"median_distance", report.matched_pair_median_distance[i]}});
    return {{"format", "covnn-transfer"},
            {"version", 1},
            {"train_dim", report.train_dim},
            {"dims", report.dims},
            {"mae_matrix", mae_matrix},
            {"max_rel_mae_deviation", report.max_rel_mae_deviation},
            {"operator_distance_to_train", report.operator_distance_to_train},
            {"matched_pairs", pairs},
            {"best_val_mae", report.best_val_mae},
            {"model_parameters", report.model_parameters}};
}

inline nlohmann::json stability_report_to_json(const StabilityReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"n", r.n},
                        {"trial", r.trial},
                        {"filter_deviation", r.filter_deviation},
                        {"vnn_deviation", r.vnn_deviation},
                        {"envelope", r.envelope}});
    return {{"ns", report.ns},
            {"filter_median", report.filter_median},
            {"filter_iqr", report.filter_iqr},
            {"vnn_median", report.vnn_median},
            {"vnn_iqr", report.vnn_iqr},
            {"filter_slope", report.filter_slope},
            {"vnn_slope", report.vnn_slope},
            {"filter_lipschitz", report.filter_lipschitz},
            {"has_vnn", report.has_vnn},
            {"envelope_factor", report.envelope_factor},
            {"envelope_fraction", report.envelope_fraction},
            {"rows", rows}};
}

inline nlohmann::json pca_contrast_to_json(const PcaContrastReport& report) {
    return {{"keep_fractions", report.keep_fractions},
            {"pca_variance", report.pca_variance},
            {"vnn_variance", report.vnn_variance},
            {"pca_variance_median", report.pca_variance_median},
            {"vnn_variance_median", report.vnn_variance_median},
            {"ratio", report.ratio},
            {"ratio_median", report.ratio_median},
            {"rank", report.rank},
            {"resamples", report.resamples},
            {"pca_fit_mae", report.pca_fit_mae},
            {"vnn_fit_mae", report.vnn_fit_mae}};
}

// Tidy long-format rows for plotting: experiment,n,trial,metric,value.
inline void append_tidy_rows(std::string& csv, const std::string& experiment,
                             const StabilityReport& report) {
    for (const auto& r : report.rows) {
        const std::string prefix =
            experiment + "," + std::to_string(r.n) + "," + std::to_string(r.trial) + ",";
        csv += prefix + "filter_deviation," + format_double(r.filter_deviation) + "\n";
        if (report.has_vnn) {
            csv += prefix + "vnn_deviation," + format_double(r.vnn_deviation) + "\n";
            csv += prefix + "envelope," + format_double(r.envelope) + "\n";
        }
    }
}

inline void append_tidy_rows(std::string& csv, const std::string& experiment,
                             const PcaContrastReport& report) {
    for (std::size_t li = 0; li < report.keep_fractions.size(); ++li) {
        const std::string prefix =
            experiment + "," +
            std::to_string(static_cast<long long>(std::llround(report.keep_fractions[li] * 1000))) +
            ",0,";
        csv += prefix + "pca_variance," + format_double(report.pca_variance[li]) + "\n";
        csv += prefix + "vnn_variance," + format_double(report.vnn_variance[li]) + "\n";
        csv += prefix + "ratio," + format_double(report.ratio[li]) + "\n";
    }
}

// --- pipeline runs ----------------------------------------------------------------

struct SynthRunOptions {
    CortexSpec cortex{};
    std::optional<DiseaseSpec> disease;  // absent -> healthy cohort
    std::size_t regions = 50;
    std::size_t subjects = 500;
    double age_lo = 50.0;
    double age_hi = 90.0;
};

inline FeatureMatrix run_synth(const SynthRunOptions& opt, std::uint64_t seed,
                               const std::filesystem::path& out_csv) {
    const FeatureMatrix fm =
        sample_cohort(opt.cortex, opt.disease ? &*opt.disease : nullptr, opt.regions,
                      opt.subjects, opt.age_lo, opt.age_hi, seed);
    export_csv(fm, out_csv);
    return fm;
}

struct TrainRunOptions {
    VnnConfig vnn{};
    TrainConfig train{};
    std::optional<ThresholdMode> sparsify_mode;  // absent -> dense covariance
    double sparsify_tau = 0.0;
    bool zscore = false;  // features are used raw unless set
};

struct TrainedPipeline {
    VnnModel model;
    CovarianceGraph cov;  // the shift operator the model was trained on
    std::vector<std::string> region_ids;
    std::optional<ZscoreParams> zscore;
    AgeBiasModel bias;
    TrainReport report;
    EvalResult train_eval;  // best model on the full training cohort
};

// Covariance estimation (+ optional sparsify), spectral normalization,
// training, then the age-bias fit on the full training cohort. Artifacts:
// model.json, covariance.json, train_log.csv.
inline TrainedPipeline run_train(const FeatureMatrix& cohort, const TrainRunOptions& opt,
                                 std::uint64_t seed, const std::filesystem::path& out_dir) {
    validate(cohort, "run_train");
    TrainedPipeline out;
    FeatureMatrix fm = cohort;
    if (opt.zscore) {
        out.zscore = fit_zscore(fm);
        apply_zscore(fm, *out.zscore);
    }
    CovarianceGraph cov = sample_covariance(fm);
    if (opt.sparsify_mode) cov = sparsify(cov, *opt.sparsify_mode, opt.sparsify_tau);
    out.cov = normalize_spectrum(cov);
    out.region_ids = fm.region_ids;

    TrainConfig cfg = opt.train;
    cfg.seed = derive_seed(seed, {0x747261696eULL});
    cfg.threads = threads_from_env(cfg.threads);
    const VnnModel init = vnn_init(opt.vnn, derive_seed(seed, {0x696e6974ULL}));
    out.report = train(init, out.cov, fm, cfg);
    out.model = out.report.best_model;
    out.train_eval = evaluate(out.model, out.cov, fm);
    out.bias = fit_bias(fm.ages, out.train_eval.predictions);

    write_file_atomic(out_dir / "model.json",
                      model_bundle_to_json(out.model, fingerprint(out.cov), out.report).dump(2) +
                          "\n");
    write_file_atomic(out_dir / "bias.json", bias_to_json(out.bias).dump(2) + "\n");
    write_file_atomic(out_dir / "covariance.json",
                      covariance_to_json(out.cov, out.region_ids, out.zscore).dump(2) + "\n");
    write_file_atomic(out_dir / "train_log.csv", train_log_csv(out.report));
    return out;
}

// Prediction core: forward every subject, apply the age-bias correction,
// attach residual profiles and eigenvector alignments.
inline DeltaAgeReport predict_cohort(const VnnModel& model, const CovarianceGraph& cov,
                                     const std::optional<ZscoreParams>& zscore,
                                     const AgeBiasModel& bias, const FeatureMatrix& cohort,
                                     const std::vector<std::string>& expected_region_ids,
                                     const std::string& label) {
    validate(cohort, "predict_cohort");
    if (cohort.n_regions() != cov.dim())
        throw DimensionError("predict: cohort has " + std::to_string(cohort.n_regions()) +
                             " regions but the covariance has " + std::to_string(cov.dim()));
    if (cohort.region_ids != expected_region_ids)
        throw DimensionError("predict: cohort region ids disagree with the model's covariance");

    FeatureMatrix fm = cohort;
    if (zscore) apply_zscore(fm, *zscore);

    DeltaAgeReport report;
    report.cohort_label = label;
    report.region_ids = fm.region_ids;
    report.group = fm.group;
    Vector x(fm.n_regions());
    for (std::size_t i = 0; i < fm.n_subjects(); ++i) {
        for (std::size_t j = 0; j < fm.n_regions(); ++j) x[j] = fm.features(i, j);
        const VnnForwardTrace trace = vnn_forward(model, cov, x);
        SubjectDelta s;
        s.subject_id = fm.subject_ids[i];
        s.age = fm.ages[i];
        s.y_hat = trace.y_hat;
        const BiasApplied ba = apply_bias(bias, s.age, s.y_hat);
        s.y_brain = ba.y_brain;
        s.delta_age = ba.delta_age;
        s.residuals = regional_residuals(trace);
        const EigenAlignment align = eigen_alignment(s.residuals, cov, cov.dim());
        s.aligned_coeffs = align.coeffs;
        s.zero_residual = align.zero_residual;
        report.subjects.push_back(std::move(s));
    }
    return report;
}

inline DeltaAgeReport run_predict(const TrainedPipeline& trained, const FeatureMatrix& cohort,
                                  const std::string& label, const std::filesystem::path& out_dir,
                                  const std::string& prefix) {
    const DeltaAgeReport report = predict_cohort(trained.model, trained.cov, trained.zscore,
                                                 trained.bias, cohort, trained.region_ids, label);
    write_file_atomic(out_dir / (prefix + "_delta.json"),
                      delta_report_to_json(report).dump(2) + "\n");
    write_file_atomic(out_dir / (prefix + "_predictions.csv"), predictions_csv(report));
    return report;
}

// File-based predict: loads the model, bias, and covariance artifacts, verifies
// the covariance against the model's stored fingerprint, then predicts.
inline DeltaAgeReport run_predict_files(const std::filesystem::path& model_path,
                                        const std::filesystem::path& bias_path,
                                        const std::filesystem::path& covariance_path,
                                        const std::filesystem::path& cohort_csv,
                                        const std::string& label,
                                        const std::filesystem::path& out_dir,
                                        const std::string& prefix) {
    const ModelBundle bundle = model_bundle_from_json(parse_json_file(model_path));
    const AgeBiasModel bias = bias_from_json(parse_json_file(bias_path));
    const CovarianceArtifact art = covariance_from_json(parse_json_file(covariance_path));
    const CovarianceFingerprint actual = fingerprint(art.cov);
    if (actual.dimension != bundle.fp.dimension)
        throw DimensionError("predict: covariance dimension " + std::to_string(actual.dimension) +
                             " disagrees with model fingerprint " +
                             std::to_string(bundle.fp.dimension));
    if (actual.sha256 != bundle.fp.sha256)
        throw InvalidMatrix("predict: covariance matrix does not match the model's fingerprint");
    if (actual.scale != bundle.fp.scale)
        throw InvalidMatrix("predict: covariance scale does not match the model's fingerprint");

    const FeatureMatrix cohort = import_csv(cohort_csv);
    const DeltaAgeReport report =
        predict_cohort(bundle.model, art.cov, art.zscore, bias, cohort, art.region_ids, label);
    write_file_atomic(out_dir / (prefix + "_delta.json"),
                      delta_report_to_json(report).dump(2) + "\n");
    write_file_atomic(out_dir / (prefix + "_predictions.csv"), predictions_csv(report));
    return report;
}

// Region-wise ANCOVA (age covariate, Bonferroni over regions) plus Delta-Age
// group summaries; group a is the first report's cohort, group b the second.
inline GroupStatsReport run_group_stats(const DeltaAgeReport& a, const DeltaAgeReport& b) {
    if (a.region_ids != b.region_ids)
        throw DimensionError("group stats: cohorts have different region ids");
    if (a.subjects.size() < 2 || b.subjects.size() < 2)
        throw InsufficientSamples("group stats: need at least 2 subjects per cohort");

    const std::size_t m = a.region_ids.size();
    auto residual_matrix = [m](const DeltaAgeReport& r) {
        Matrix res(r.subjects.size(), m);
        for (std::size_t i = 0; i < r.subjects.size(); ++i)
            for (std::size_t j = 0; j < m; ++j) res(i, j) = r.subjects[i].residuals[j];
        return res;
    };
    auto ages_of = [](const DeltaAgeReport& r) {
        Vector v(r.subjects.size());
        for (std::size_t i = 0; i < r.subjects.size(); ++i) v[i] = r.subjects[i].age;
        return v;
    };
    auto deltas_of = [](const DeltaAgeReport& r) {
        Vector v(r.subjects.size());
        for (std::size_t i = 0; i < r.subjects.size(); ++i) v[i] = r.subjects[i].delta_age;
        return v;
    };
    auto summarize = [](const DeltaAgeReport& r, const Vector& deltas) {
        GroupSummary g;
        g.label = r.cohort_label;
        g.n = deltas.size();
        g.delta_mean = mean(deltas);
        double ss = 0.0;
        for (double d : deltas) ss += (d - g.delta_mean) * (d - g.delta_mean);
        g.delta_sd = std::sqrt(ss / static_cast<double>(deltas.size() - 1));
        return g;
    };

    const Vector ages_a = ages_of(a), ages_b = ages_of(b);
    const Vector deltas_a = deltas_of(a), deltas_b = deltas_of(b);
    GroupStatsReport report;
    report.regions =
        ancova_region_test(residual_matrix(a), ages_a, residual_matrix(b), ages_b, a.region_ids);
    report.group_a = summarize(a, deltas_a);
    report.group_b = summarize(b, deltas_b);
    report.delta_contrast = welch_one_sided(deltas_b, deltas_a);  // evidence: b exceeds a
    report.delta_vs_age_a = pearson(deltas_a, ages_a);
    report.delta_vs_age_b = pearson(deltas_b, ages_b);
    return report;
}

inline void write_group_stats(const GroupStatsReport& report,
                              const std::filesystem::path& out_dir) {
    write_file_atomic(out_dir / "group_stats.json", group_stats_to_json(report).dump(2) + "\n");
    write_file_atomic(out_dir / "region_stats.csv", region_stats_csv(report));
}

// --- demo: the full synthesize/train/predict/compare loop -------------------------

// Ages stay in raw years, so the optimizer has to carry the readout from its
// near-zero start into the 50-90 band. Adam moves a coordinate by about one
// learning rate per step; the stock schedule (1e-3 over 200 epochs of ~14
// batches) travels only ~3 years, so the demo runs hotter and longer. Early
// stopping usually ends the run near epoch 130.
inline TrainRunOptions demo_train_options() {
    TrainRunOptions opt;
    opt.train.learning_rate = 5e-2;
    opt.train.epochs = 400;
    return opt;
}

struct DemoOptions {
    CortexSpec cortex{};
    DiseaseSpec disease = default_disease_spec();
    std::size_t regions = 50;
    std::size_t n_train = 500;
    std::size_t n_test_hc = 100;
    std::size_t n_test_dis = 100;
    double age_lo = 50.0;
    double age_hi = 90.0;
    TrainRunOptions train = demo_train_options();
    std::size_t top_regions = 8;
};

struct DemoResult {
    TrainedPipeline trained;
    DeltaAgeReport train_report;
    DeltaAgeReport hc_report;
    DeltaAgeReport dis_report;
    GroupStatsReport group_stats;
    double train_mae = 0.0;
    double train_delta_age_corr = 0.0;  // corr(delta, age) on the bias-fit cohort
    double hc_mean_delta = 0.0;
    double dis_mean_delta = 0.0;
    double delta_gap = 0.0;
    double welch_p = 1.0;
    std::vector<std::string> top_regions;  // by ANCOVA F, descending
};

inline std::vector<std::string> top_regions_by_f(const GroupStatsReport& stats, std::size_t k) {
    std::vector<std::size_t> order(stats.regions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (stats.regions[x].test.f_value != stats.regions[y].test.f_value)
            return stats.regions[x].test.f_value > stats.regions[y].test.f_value;
        return stats.regions[x].region_id < stats.regions[y].region_id;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i)
        out.push_back(stats.regions[order[i]].region_id);
    return out;
}

inline DemoResult run_demo(const DemoOptions& opt, std::uint64_t seed,
                           const std::filesystem::path& out_dir) {
    validate(opt.cortex);
    validate(opt.disease);
    SynthRunOptions synth;
    synth.cortex = opt.cortex;
    synth.regions = opt.regions;
    synth.age_lo = opt.age_lo;
    synth.age_hi = opt.age_hi;

    synth.subjects = opt.n_train;
    const FeatureMatrix train_fm =
        run_synth(synth, derive_seed(seed, {0x73747261696eULL}), out_dir / "train.csv");
    synth.subjects = opt.n_test_hc;
    const FeatureMatrix hc_fm =
        run_synth(synth, derive_seed(seed, {0x736863ULL}), out_dir / "test_hc.csv");
    synth.subjects = opt.n_test_dis;
    synth.disease = opt.disease;
    const FeatureMatrix dis_fm =
        run_synth(synth, derive_seed(seed, {0x73646973ULL}), out_dir / "test_dis.csv");

    DemoResult result;
    result.trained = run_train(train_fm, opt.train, derive_seed(seed, {0x7472ULL}), out_dir);
    result.train_report = run_predict(result.trained, train_fm, "train", out_dir, "train");
    result.hc_report = run_predict(result.trained, hc_fm, "test_hc", out_dir, "hc");
    result.dis_report = run_predict(result.trained, dis_fm, "test_dis", out_dir, "dis");
    result.group_stats = run_group_stats(result.hc_report, result.dis_report);
    write_group_stats(result.group_stats, out_dir);

    result.train_mae = result.trained.train_eval.mae;
    {
        Vector deltas(result.train_report.subjects.size()), ages(result.train_report.subjects.size());
        for (std::size_t i = 0; i < result.train_report.subjects.size(); ++i) {
            deltas[i] = result.train_report.subjects[i].delta_age;
            ages[i] = result.train_report.subjects[i].age;
        }
        result.train_delta_age_corr = pearson(deltas, ages).r;
    }
    result.hc_mean_delta = result.group_stats.group_a.delta_mean;
    result.dis_mean_delta = result.group_stats.group_b.delta_mean;
    result.delta_gap = result.dis_mean_delta - result.hc_mean_delta;
    result.welch_p = result.group_stats.delta_contrast.p_one_sided;
    result.top_regions = top_regions_by_f(result.group_stats, opt.top_regions);

    nlohmann::json planted = nlohmann::json::array();
    for (std::size_t j = 0; j < opt.regions; ++j)
        if (opt.disease.covers(cell_center(j, opt.regions)))
            planted.push_back(region_id(j, opt.regions));
    const nlohmann::json summary{
        {"format", "covnn-demo-summary"},
        {"version", 1},
        {"seed", seed},
        {"regions", opt.regions},
        {"n_train", opt.n_train},
        {"n_test_hc", opt.n_test_hc},
        {"n_test_dis", opt.n_test_dis},
        {"train_mae", result.train_mae},
        {"train_best_val_mae", result.trained.report.best_val_mae},
        {"train_delta_age_corr", result.train_delta_age_corr},
        {"hc_mean_delta", result.hc_mean_delta},
        {"dis_mean_delta", result.dis_mean_delta},
        {"delta_gap", result.delta_gap},
        {"welch_p_one_sided", result.welch_p},
        {"top_regions_by_f", result.top_regions},
        {"planted_regions", planted}};
    write_file_atomic(out_dir / "demo_summary.json", summary.dump(2) + "\n");
    return result;
}

// --- transfer and stability runs ----------------------------------------------------

inline TransferReport run_transfer(const TransferOptions& opt, std::uint64_t seed,
                                   const std::filesystem::path& out_dir) {
    const TransferReport report = transfer_experiment(opt, seed);
    write_file_atomic(out_dir / "transfer.json", transfer_report_to_json(report).dump(2) + "\n");
    return report;
}

struct StabilityRunOptions {
    std::size_t regions = 24;
    double kernel_sigma2 = 1.0;
    double kernel_length = 0.25;
    double kernel_nugget = 0.05;
    std::vector<std::size_t> ns{100, 400, 1600, 6400};
    std::size_t trials = 20;
    std::size_t probes = 5;
    Vector keep_fractions{1.0, 0.8};
    // Rank 3 spans the near-degenerate pair no matter how the fit-time
    // eigenbasis is oriented inside it.
    std::size_t pca_rank = 3;
    std::size_t pca_regions = 20;
    std::size_t pca_subjects = 500;
};

struct StabilityRunResult {
    StabilityReport filter;
    StabilityReport vnn;
    PcaContrastReport pca_degenerate;
    PcaContrastReport pca_control;
};

inline StabilityRunResult run_stability(const StabilityRunOptions& opt, std::uint64_t seed,
                                        const std::filesystem::path& out_dir) {
    const CovarianceGraph ensemble =
        make_kernel_ensemble(opt.regions, opt.kernel_sigma2, opt.kernel_length, opt.kernel_nugget);
    StabilityRunResult result;
    result.filter = filter_stability_sweep(ensemble, default_stability_filter(), opt.ns,
                                           opt.trials, derive_seed(seed, {0x66696c74ULL}));
    const VnnModel probe_model = default_stability_model(derive_seed(seed, {0x6d6f64656cULL}));
    result.vnn = vnn_stability_sweep(probe_model, ensemble, opt.ns, opt.trials,
                                     derive_seed(seed, {0x766e6eULL}), opt.probes);

    SpikedCohortSpec spiked;
    spiked.m = opt.pca_regions;
    spiked.n = opt.pca_subjects;
    spiked.spectrum = near_degenerate_spectrum(opt.pca_regions);
    const SpikedCohort degenerate = make_spiked_cohort(spiked, derive_seed(seed, {0x64656730ULL}));
    result.pca_degenerate = pca_contrast(degenerate.fm, opt.pca_rank, opt.keep_fractions,
                                         derive_seed(seed, {0x64656731ULL}));
    spiked.spectrum = separated_spectrum(opt.pca_regions);
    const SpikedCohort control = make_spiked_cohort(spiked, derive_seed(seed, {0x63746c30ULL}));
    result.pca_control = pca_contrast(control.fm, opt.pca_rank, opt.keep_fractions,
                                      derive_seed(seed, {0x63746c31ULL}));

    const nlohmann::json j{{"format", "covnn-stability"},
                           {"version", 1},
                           {"filter_sweep", stability_report_to_json(result.filter)},
                           {"vnn_sweep", stability_report_to_json(result.vnn)},
                           {"pca_contrast",
                            {{"degenerate", pca_contrast_to_json(result.pca_degenerate)},
                             {"control", pca_contrast_to_json(result.pca_control)}}}};
    write_file_atomic(out_dir / "stability.json", j.dump(2) + "\n");

    std::string tidy = "experiment,n,trial,metric,value\n";
    append_tidy_rows(tidy, "filter_sweep", result.filter);
    append_tidy_rows(tidy, "vnn_sweep", result.vnn);
    append_tidy_rows(tidy, "pca_degenerate", result.pca_degenerate);
    append_tidy_rows(tidy, "pca_control", result.pca_control);
    write_file_atomic(out_dir / "stability.csv", tidy);
    return result;
}

}  // namespace covnn
