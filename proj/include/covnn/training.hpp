#pragma once

// Mini-batch gradient-descent training of a VNN against MSE in raw years.
// Deterministic for a fixed seed: the validation split keys on subject ids
// (not row positions), batches follow a seeded shuffle of a canonical order,
// and gradient accumulation is in fixed subject order even when the per-batch
// work fans out across threads.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "covnn/covariance.hpp"
#include "covnn/errors.hpp"
#include "covnn/rng.hpp"
#include "covnn/vnn.hpp"

namespace covnn {

enum class Optimizer { sgd, adam };

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    Optimizer optimizer = Optimizer::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t patience = 20;        // epochs without validation MAE improvement
    double validation_fraction = 0.2; // in (0, 0.5]
    std::uint64_t seed = 1;
    std::size_t threads = 1;          // per-batch fan-out cap
};

inline void validate(const TrainConfig& cfg) {
    if (cfg.epochs == 0) throw ConfigError("train: epochs must be positive");
    if (cfg.batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
        throw ConfigError("train: learning_rate must be positive and finite");
    if (!(cfg.validation_fraction > 0.0) || cfg.validation_fraction > 0.5)
        throw ConfigError("train: validation_fraction must be in (0, 0.5]");
    if (cfg.threads == 0) throw ConfigError("train: threads must be positive");
}

struct EpochStats {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double train_mae = 0.0;
    double val_mse = 0.0;
    double val_mae = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    VnnModel best_model;
    std::size_t best_epoch = 0;   // 1-based epoch whose validation MAE was kept
    double best_val_mae = 0.0;
    bool early_stopped = false;
    double wall_seconds = 0.0;    // informational; excluded from pipeline artifacts
};

struct EvalResult {
    double mae = 0.0;
    double mse = 0.0;
    Vector predictions;
};

inline EvalResult evaluate(const VnnModel& model, const CovarianceGraph& cov,
                           const FeatureMatrix& fm) {
    validate(fm, "evaluate");
    if (fm.n_regions() != cov.dim())
        throw DimensionError("evaluate: cohort regions " + std::to_string(fm.n_regions()) +
                             " vs covariance dim " + std::to_string(cov.dim()));
    EvalResult res;
    res.predictions.resize(fm.n_subjects());
    double se = 0.0, ae = 0.0;
    Vector x(fm.n_regions());
    for (std::size_t i = 0; i < fm.n_subjects(); ++i) {
        for (std::size_t j = 0; j < fm.n_regions(); ++j) x[j] = fm.features(i, j);
        const double y_hat = vnn_forward(model, cov, x).y_hat;
        res.predictions[i] = y_hat;
        const double e = y_hat - fm.ages[i];
        se += e * e;
        ae += std::abs(e);
    }
    const double n = static_cast<double>(fm.n_subjects());
    res.mse = se / n;
    res.mae = ae / n;
    return res;
}

namespace detail {

// Subject-level split stratified by age decile. Keyed on (age, subject_id)
// plus a seeded hash of the id, so permuting input rows cannot change which
// subjects land in validation.
inline void stratified_split(const FeatureMatrix& fm, double fraction, std::uint64_t seed,
                             std::vector<std::size_t>& train_rows,
                             std::vector<std::size_t>& val_rows) {
    const std::size_t n = fm.n_subjects();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (fm.ages[a] != fm.ages[b]) return fm.ages[a] < fm.ages[b];
        return fm.subject_ids[a] < fm.subject_ids[b];
    });

    const std::size_t buckets = std::max<std::size_t>(1, std::min<std::size_t>(10, n / 10));
    auto id_hash = [&](std::size_t row) {
        std::uint64_t h = splitmix64(seed);
        for (char c : fm.subject_ids[row]) h = splitmix64(h ^ static_cast<std::uint64_t>(c));
        return h;
    };

    train_rows.clear();
    val_rows.clear();
    for (std::size_t b = 0; b < buckets; ++b) {
        const std::size_t lo = b * n / buckets;
        const std::size_t hi = (b + 1) * n / buckets;
        std::vector<std::size_t> bucket(order.begin() + lo, order.begin() + hi);
        std::sort(bucket.begin(), bucket.end(), [&](std::size_t a, std::size_t c) {
            const auto ha = id_hash(a), hc = id_hash(c);
            if (ha != hc) return ha < hc;
            return fm.subject_ids[a] < fm.subject_ids[c];
        });
        std::size_t take = static_cast<std::size_t>(
            std::ceil(fraction * static_cast<double>(bucket.size())));
        take = std::min(take, bucket.size());
        for (std::size_t i = 0; i < bucket.size(); ++i)
            (i < take ? val_rows : train_rows).push_back(bucket[i]);
    }
    if (val_rows.empty() || train_rows.empty())
        throw InsufficientSamples("train: cohort too small to split (" + std::to_string(n) +
                                  " subjects)");
    // Canonical processing order, independent of input row order.
    auto canonical = [&](std::vector<std::size_t>& rows) {
        std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
            return fm.subject_ids[a] < fm.subject_ids[b];
        });
    };
    canonical(train_rows);
    canonical(val_rows);
}

inline EvalResult evaluate_rows(const VnnModel& model, const CovarianceGraph& cov,
                                const FeatureMatrix& fm, const std::vector<std::size_t>& rows) {
    EvalResult res;
    res.predictions.resize(rows.size());
    double se = 0.0, ae = 0.0;
    Vector x(fm.n_regions());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < fm.n_regions(); ++j) x[j] = fm.features(rows[i], j);
        const double y_hat = vnn_forward(model, cov, x).y_hat;
        res.predictions[i] = y_hat;
        const double e = y_hat - fm.ages[rows[i]];
        se += e * e;
        ae += std::abs(e);
    }
    const double n = static_cast<double>(rows.size());
    res.mse = se / n;
    res.mae = ae / n;
    return res;
}

}  // namespace detail

inline TrainReport train(const VnnModel& init, const CovarianceGraph& cov,
                         const FeatureMatrix& cohort, const TrainConfig& cfg) {
    validate(cfg);
    validate(cohort, "train");
    validate(init.config);
    if (cohort.n_regions() != cov.dim())
        throw DimensionError("train: cohort regions " + std::to_string(cohort.n_regions()) +
                             " vs covariance dim " + std::to_string(cov.dim()));
    if (cohort.n_subjects() < 2) throw InsufficientSamples("train: need at least 2 subjects");

    const auto t0 = std::chrono::steady_clock::now();

    std::vector<std::size_t> train_rows, val_rows;
    detail::stratified_split(cohort, cfg.validation_fraction, cfg.seed, train_rows, val_rows);

    VnnModel model = init;
    std::vector<double*> params = parameter_view(model);
    const std::size_t p = params.size();
    Vector m1(p, 0.0), m2(p, 0.0);  // adam moments
    std::size_t step = 0;

    TrainReport report;
    report.best_model = model;
    report.best_val_mae = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    Rng shuffle_rng(derive_seed(cfg.seed, {0x7368756666ULL}));
    const std::size_t nt = train_rows.size();
    std::vector<std::size_t> epoch_order = train_rows;

    Vector grad_flat(p, 0.0);
    Vector x(cohort.n_regions());

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(epoch_order);
        for (std::size_t start = 0; start < nt; start += cfg.batch_size) {
            const std::size_t stop = std::min(start + cfg.batch_size, nt);
            const std::size_t bsz = stop - start;

            std::fill(grad_flat.begin(), grad_flat.end(), 0.0);
            // dLoss/dy_hat for the batch-mean MSE is 2 (y_hat - y) / batch.
            auto subject_grads = [&](std::size_t row) {
                Vector xi(cohort.n_regions());
                for (std::size_t j = 0; j < cohort.n_regions(); ++j) xi[j] = cohort.features(row, j);
                const VnnForwardTrace trace = vnn_forward(model, cov, xi);
                const double d = 2.0 * (trace.y_hat - cohort.ages[row]) / static_cast<double>(bsz);
                return vnn_backward(model, cov, trace, d);
            };

            if (cfg.threads <= 1 || bsz == 1) {
                for (std::size_t b = start; b < stop; ++b) {
                    const VnnGradients g = subject_grads(epoch_order[b]);
                    const auto view = parameter_view(g);
                    for (std::size_t i = 0; i < p; ++i) grad_flat[i] += *view[i];
                }
            } else {
                // Per-subject gradient slots filled in parallel, summed in
                // batch order afterwards: the fan-out width cannot change the
                // result bits.
                std::vector<VnnGradients> slots(bsz);
                const std::size_t workers = std::min(cfg.threads, bsz);
                std::vector<std::thread> pool;
                pool.reserve(workers);
                for (std::size_t w = 0; w < workers; ++w) {
                    pool.emplace_back([&, w]() {
                        for (std::size_t b = w; b < bsz; b += workers)
                            slots[b] = subject_grads(epoch_order[start + b]);
                    });
                }
                for (auto& t : pool) t.join();
                for (std::size_t b = 0; b < bsz; ++b) {
                    const auto view = parameter_view(slots[b]);
                    for (std::size_t i = 0; i < p; ++i) grad_flat[i] += *view[i];
                }
            }

            ++step;
            if (cfg.optimizer == Optimizer::adam) {
                const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
                const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
                for (std::size_t i = 0; i < p; ++i) {
                    m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * grad_flat[i];
                    m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * grad_flat[i] * grad_flat[i];
                    *params[i] -= cfg.learning_rate * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.adam_eps);
                }
            } else {
                for (std::size_t i = 0; i < p; ++i) *params[i] -= cfg.learning_rate * grad_flat[i];
            }
        }

        const EvalResult tr = detail::evaluate_rows(model, cov, cohort, train_rows);
        const EvalResult va = detail::evaluate_rows(model, cov, cohort, val_rows);
        if (!std::isfinite(tr.mse) || !std::isfinite(va.mse))
            throw DivergenceError("train: loss became non-finite at epoch " + std::to_string(epoch) +
                                  " (last stable epoch " + std::to_string(epoch - 1) + ")");
        report.epochs.push_back({epoch, tr.mse, tr.mae, va.mse, va.mae});

        if (va.mae < report.best_val_mae) {
            report.best_val_mae = va.mae;
            report.best_model = model;
            report.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best > cfg.patience) {
            report.early_stopped = true;
            break;
        }
    }

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace covnn
