#pragma once

// Transference across grid resolutions. Signals and operators living on an
// M-cell grid are embedded as step functions on [0, 1], with cell widths
// proportional to the covariance diagonal (the marginal variances), so
// outputs produced at different resolutions become comparable in one L2
// space. transfer_experiment trains a single model at one resolution and
// evaluates it, unchanged, at the others.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "covnn/covariance.hpp"
#include "covnn/errors.hpp"
#include "covnn/matrix.hpp"
#include "covnn/rng.hpp"
#include "covnn/synthcohort.hpp"
#include "covnn/training.hpp"
#include "covnn/vnn.hpp"

namespace covnn {

struct StepFunction1D {
    Vector breaks;  // size n+1, breaks[0] == 0, breaks[n] == 1, nondecreasing
    Vector values;  // size n
};

struct StepFunction2D {
    Vector breaks;  // shared row/column partition of [0, 1]
    Matrix values;  // n x n, value on cell (i, j)
};

namespace detail {

inline Vector partition_from_weights(const Vector& weights) {
    double total = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0)
            throw DegenerateEmbedding("embedding weights must be nonnegative and finite");
        total += w;
    }
    if (!(total > 0.0)) throw DegenerateEmbedding("embedding weights sum to zero");
    Vector breaks(weights.size() + 1);
    breaks[0] = 0.0;
    double acc = 0.0;
    for (std::size_t j = 0; j < weights.size(); ++j) {
        acc += weights[j];
        breaks[j + 1] = acc / total;
    }
    breaks.back() = 1.0;
    return breaks;
}

// Index of the cell of `breaks` containing the point t.
inline std::size_t cell_index(const Vector& breaks, double t) {
    const auto it = std::upper_bound(breaks.begin(), breaks.end(), t);
    const std::size_t idx = static_cast<std::size_t>(it - breaks.begin());
    if (idx == 0) return 0;
    return std::min(idx - 1, breaks.size() - 2);
}

inline Vector merge_breaks(const Vector& a, const Vector& b) {
    Vector merged;
    merged.reserve(a.size() + b.size());
    std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(merged));
    merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
    return merged;
}

inline double median(Vector v) {
    if (v.empty()) throw DegenerateInput("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline Vector diagonal_of(const CovarianceGraph& cov) {
    Vector d(cov.dim());
    for (std::size_t j = 0; j < cov.dim(); ++j) d[j] = cov.op.entries(j, j);
    return d;
}

}  // namespace detail

// Embeds a graph signal as a step function whose interval widths are the
// covariance's marginal variances, C_jj / trace(C).
inline StepFunction1D embed_signal(const Vector& x, const CovarianceGraph& cov) {
    if (x.empty() || x.size() != cov.dim())
        throw DimensionError("embed_signal: signal length must equal covariance dimension");
    return {detail::partition_from_weights(detail::diagonal_of(cov)), x};
}

// Embeds the covariance operator itself on the product partition.
inline StepFunction2D embed_operator(const CovarianceGraph& cov) {
    if (cov.dim() == 0) throw DimensionError("embed_operator: empty covariance");
    return {detail::partition_from_weights(detail::diagonal_of(cov)), cov.op.entries};
}

// Exact L2([0,1]) distance: both step functions are constant on every cell of
// the common refinement, so the integral is a finite sum.
inline double l2_distance(const StepFunction1D& f, const StepFunction1D& g) {
    const Vector merged = detail::merge_breaks(f.breaks, g.breaks);
    double acc = 0.0;
    for (std::size_t k = 0; k + 1 < merged.size(); ++k) {
        const double width = merged[k + 1] - merged[k];
        if (width <= 0.0) continue;
        const double mid = 0.5 * (merged[k] + merged[k + 1]);
        const double d = f.values[detail::cell_index(f.breaks, mid)] -
                         g.values[detail::cell_index(g.breaks, mid)];
        acc += d * d * width;
    }
    return std::sqrt(acc);
}

// Exact L2([0,1]^2) distance between embedded operators.
inline double l2_distance(const StepFunction2D& f, const StepFunction2D& g) {
    const Vector merged = detail::merge_breaks(f.breaks, g.breaks);
    const std::size_t cells = merged.size() - 1;
    std::vector<std::size_t> fi(cells), gi(cells);
    Vector widths(cells);
    for (std::size_t k = 0; k < cells; ++k) {
        widths[k] = merged[k + 1] - merged[k];
        const double mid = 0.5 * (merged[k] + merged[k + 1]);
        fi[k] = detail::cell_index(f.breaks, mid);
        gi[k] = detail::cell_index(g.breaks, mid);
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < cells; ++r) {
        if (widths[r] <= 0.0) continue;
        for (std::size_t c = 0; c < cells; ++c) {
            if (widths[c] <= 0.0) continue;
            const double d = f.values(fi[r], fi[c]) - g.values(gi[r], gi[c]);
            acc += d * d * widths[r] * widths[c];
        }
    }
    return std::sqrt(acc);
}

inline double value_at(const StepFunction1D& f, double t) {
    if (!(t >= 0.0) || !(t <= 1.0)) throw InvalidRange("value_at: t must lie in [0, 1]");
    return f.values[detail::cell_index(f.breaks, t)];
}

struct TransferOptions {
    std::vector<std::size_t> dims{50, 100, 200};  // strictly ascending
    std::size_t train_dim = 50;
    std::size_t n_train = 400;
    // Cohort size behind each per-dim covariance estimate. Kept larger than
    // n_train so the operator sequence is close to its continuum limit and the
    // matched-subject distances reflect resolution, not estimation noise.
    std::size_t n_reference = 2000;
    std::size_t n_test = 100;
    std::size_t matched_subjects = 20;
    double age_lo = 50.0;
    double age_hi = 90.0;
    CortexSpec cortex{};
    VnnConfig vnn{};
    TrainConfig train{};
};

inline TransferOptions default_transfer_options() {
    TransferOptions opt;
    opt.train.epochs = 60;
    opt.train.learning_rate = 1e-2;
    return opt;
}

inline void validate(const TransferOptions& opt) {
    if (opt.dims.empty()) throw ConfigError("transfer: need at least one grid resolution");
    for (std::size_t i = 0; i + 1 < opt.dims.size(); ++i)
        if (opt.dims[i] >= opt.dims[i + 1])
            throw ConfigError("transfer: dims must be strictly ascending");
    if (opt.dims.front() < 2) throw ConfigError("transfer: dims must be >= 2");
    if (std::find(opt.dims.begin(), opt.dims.end(), opt.train_dim) == opt.dims.end())
        throw ConfigError("transfer: train_dim must be one of dims");
    if (opt.dims.size() > 1 && opt.matched_subjects < 2)
        throw ConfigError("transfer: need >= 2 matched subjects");
    if (opt.n_reference < 2) throw ConfigError("transfer: need >= 2 reference subjects");
    validate(opt.cortex);
    validate(opt.vnn);
    validate(opt.train);
}

struct TransferReport {
    std::size_t train_dim = 0;
    std::vector<std::size_t> dims;
    Vector mae_by_dim;              // model trained at train_dim, tested per dim
    double train_dim_mae = 0.0;     // the (train_dim, train_dim) entry
    double max_rel_mae_deviation = 0.0;   // max over other dims of |mae - train| / train
    Vector operator_distance_to_train;    // embedded covariance vs train-dim covariance
    Vector matched_pair_median_distance;  // consecutive dim pairs, embedded readouts
    double best_val_mae = 0.0;
    std::size_t model_parameters = 0;
};

// Trains one model at train_dim, then reuses it verbatim at every other
// resolution: per-dim covariance comes from an n_reference cohort at that
// resolution, the training features are a separate n_train draw, test subjects
// are fresh draws, and the matched subjects are the same continuous
// individuals sampled at each grid (no per-grid iid noise).
inline TransferReport transfer_experiment(const TransferOptions& opt, std::uint64_t seed) {
    validate(opt);

    std::vector<CovarianceGraph> covs;
    covs.reserve(opt.dims.size());
    for (std::size_t di = 0; di < opt.dims.size(); ++di) {
        const std::size_t m = opt.dims[di];
        const FeatureMatrix ref = sample_cohort(opt.cortex, nullptr, m, opt.n_reference,
                                                opt.age_lo, opt.age_hi,
                                                derive_seed(seed, {0x726566ULL, m}));
        covs.push_back(normalize_spectrum(sample_covariance(ref)));
    }
    const std::size_t train_idx = static_cast<std::size_t>(
        std::find(opt.dims.begin(), opt.dims.end(), opt.train_dim) - opt.dims.begin());
    const FeatureMatrix train_cohort =
        sample_cohort(opt.cortex, nullptr, opt.train_dim, opt.n_train, opt.age_lo, opt.age_hi,
                      derive_seed(seed, {0x74636f68ULL, opt.train_dim}));

    VnnModel init = vnn_init(opt.vnn, derive_seed(seed, {0x696e6974ULL}));
    TrainConfig cfg = opt.train;
    cfg.seed = derive_seed(seed, {0x747261696eULL});
    const TrainReport trained = train(init, covs[train_idx], train_cohort, cfg);
    const VnnModel& model = trained.best_model;

    TransferReport report;
    report.train_dim = opt.train_dim;
    report.dims = opt.dims;
    report.best_val_mae = trained.best_val_mae;
    report.model_parameters = parameter_count(model.config);

    for (std::size_t di = 0; di < opt.dims.size(); ++di) {
        const std::size_t m = opt.dims[di];
        const FeatureMatrix test = sample_cohort(opt.cortex, nullptr, m, opt.n_test, opt.age_lo,
                                                 opt.age_hi, derive_seed(seed, {0x74657374ULL, m}));
        report.mae_by_dim.push_back(evaluate(model, covs[di], test).mae);
    }
    report.train_dim_mae = report.mae_by_dim[train_idx];
    for (std::size_t di = 0; di < opt.dims.size(); ++di) {
        if (di == train_idx) continue;
        const double rel = std::abs(report.mae_by_dim[di] - report.train_dim_mae) /
                           std::max(report.train_dim_mae, 1e-12);
        report.max_rel_mae_deviation = std::max(report.max_rel_mae_deviation, rel);
    }

    const StepFunction2D train_op = embed_operator(covs[train_idx]);
    for (std::size_t di = 0; di < opt.dims.size(); ++di)
        report.operator_distance_to_train.push_back(
            di == train_idx ? 0.0 : l2_distance(embed_operator(covs[di]), train_op));

    if (opt.dims.size() < 2) return report;

    // Matched subjects: one field basis and one set of (age, field) draws,
    // sampled consistently at every resolution.
    const FieldBasis basis = make_field_basis(opt.cortex, derive_seed(seed, {0x6d617463ULL}));
    Rng subj_rng(derive_seed(seed, {0x7375626aULL}));
    std::vector<ContinuousSubject> subjects(opt.matched_subjects);
    for (auto& s : subjects) {
        s.age = subj_rng.uniform(opt.age_lo, opt.age_hi);
        s.diseased = false;
        s.field_coeffs = subj_rng.normals(basis.size());
    }

    std::vector<std::vector<StepFunction1D>> embedded(opt.dims.size());
    for (std::size_t di = 0; di < opt.dims.size(); ++di) {
        const std::size_t m = opt.dims[di];
        for (const auto& s : subjects) {
            const Vector x =
                sample_subject_features(opt.cortex, nullptr, basis, s, m, false, nullptr);
            const VnnForwardTrace trace = vnn_forward(model, covs[di], x);
            embedded[di].push_back(embed_signal(trace.readout, covs[di]));
        }
    }
    for (std::size_t di = 0; di + 1 < opt.dims.size(); ++di) {
        Vector dists(opt.matched_subjects);
        for (std::size_t s = 0; s < opt.matched_subjects; ++s)
            dists[s] = l2_distance(embedded[di][s], embedded[di + 1][s]);
        report.matched_pair_median_distance.push_back(detail::median(dists));
    }
    return report;
}

}  // namespace covnn
