#pragma once

// Anatomical-covariance estimation and conditioning: the unbiased sample
// covariance, off-diagonal thresholding, spectral normalization, and seeded
// subject subsampling for perturbation studies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "covnn/errors.hpp"
#include "covnn/gsp.hpp"
#include "covnn/matrix.hpp"
#include "covnn/rng.hpp"

namespace covnn {

// Subjects-by-regions feature table plus per-subject age and group label.
struct FeatureMatrix {
    Matrix features;                       // n_subjects x n_regions
    Vector ages;                           // years, > 0
    std::vector<std::string> group;        // e.g. "HC", "DIS"
    std::vector<std::string> subject_ids;
    std::vector<std::string> region_ids;   // unique, length n_regions

    [[nodiscard]] std::size_t n_subjects() const noexcept { return features.rows(); }
    [[nodiscard]] std::size_t n_regions() const noexcept { return features.cols(); }
};

inline void validate(const FeatureMatrix& fm, const char* where) {
    const std::string w(where);
    if (fm.n_regions() == 0) throw DegenerateInput(w + ": cohort has no regions");
    if (fm.ages.size() != fm.n_subjects() || fm.group.size() != fm.n_subjects() ||
        fm.subject_ids.size() != fm.n_subjects())
        throw DimensionError(w + ": per-subject columns disagree with the feature table");
    if (fm.region_ids.size() != fm.n_regions())
        throw DimensionError(w + ": region id list disagrees with the feature table");
    if (!all_finite(fm.features)) throw DegenerateInput(w + ": features contain non-finite values");
    for (double a : fm.ages)
        if (!std::isfinite(a) || a <= 0.0) throw DegenerateInput(w + ": ages must be finite and > 0");
    std::vector<std::string> ids = fm.region_ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw DegenerateInput(w + ": region ids must be unique");
}

// Covariance graph: symmetric operator plus estimation metadata. `scale` is
// the cumulative spectral normalization that has been divided out (1 = raw).
struct CovarianceGraph {
    SymmetricOperator op;
    std::size_t n_samples = 0;
    double scale = 1.0;

    [[nodiscard]] std::size_t dim() const noexcept { return op.dim(); }
};

namespace detail {

// Acceptance band for estimator round-off: eigenvalues in [-tol, 0) are
// clamped to zero, anything lower is a real PSD violation.
constexpr double kPsdTolScale = 1e-8;

inline void clamp_psd(SymmetricOperator& op, const char* where) {
    if (op.eigvals.empty()) return;
    const double phi1 = op.eigvals.front();
    const double tol = kPsdTolScale * std::max(phi1, 0.0);
    for (double& lam : op.eigvals) {
        if (lam < 0.0) {
            if (lam < -tol)
                throw InvalidMatrix(std::string(where) + ": matrix is not PSD (eigenvalue " +
                                    std::to_string(lam) + ")");
            lam = 0.0;
        }
    }
}

inline Matrix covariance_of_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
    const std::size_t n = rows.size();
    const std::size_t m = x.cols();
    Vector mean_vec(m, 0.0);
    for (std::size_t r : rows)
        for (std::size_t j = 0; j < m; ++j) mean_vec[j] += x(r, j);
    for (double& v : mean_vec) v /= static_cast<double>(n);

    Matrix c(m, m, 0.0);
    Vector centered(m, 0.0);
    for (std::size_t r : rows) {
        for (std::size_t j = 0; j < m; ++j) centered[j] = x(r, j) - mean_vec[j];
        for (std::size_t j = 0; j < m; ++j) {
            const double cj = centered[j];
            if (cj == 0.0) continue;
            double* crow = c.row_ptr(j);
            for (std::size_t k = j; k < m; ++k) crow[k] += cj * centered[k];
        }
    }
    const double norm = 1.0 / static_cast<double>(n - 1);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = j; k < m; ++k) {
            c(j, k) *= norm;
            c(k, j) = c(j, k);
        }
    return c;
}

}  // namespace detail

// Unbiased sample covariance C = 1/(n-1) sum (x_i - mean)(x_i - mean)^T.
inline CovarianceGraph sample_covariance(const FeatureMatrix& fm) {
    validate(fm, "sample_covariance");
    if (fm.n_subjects() < 2)
        throw InsufficientSamples("sample_covariance: need at least 2 subjects, got " +
                                  std::to_string(fm.n_subjects()));
    std::vector<std::size_t> rows(fm.n_subjects());
    std::iota(rows.begin(), rows.end(), std::size_t{0});

    CovarianceGraph cov;
    cov.op = eigendecompose(detail::covariance_of_rows(fm.features, rows));
    detail::clamp_psd(cov.op, "sample_covariance");
    cov.n_samples = fm.n_subjects();
    cov.scale = 1.0;
    return cov;
}

enum class ThresholdMode { hard, soft };

// Thresholds off-diagonal entries (diagonal untouched), then re-symmetrizes
// and re-eigendecomposes. Thresholding does not preserve PSD in general, so
// the result keeps its true (possibly mildly indefinite) spectrum.
inline CovarianceGraph sparsify(const CovarianceGraph& cov, ThresholdMode mode, double tau) {
    if (!std::isfinite(tau) || tau < 0.0)
        throw InvalidThreshold("sparsify: threshold must be finite and >= 0, got " +
                               std::to_string(tau));
    const std::size_t m = cov.dim();
    Matrix t = cov.op.entries;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            double& v = t(i, j);
            if (mode == ThresholdMode::hard) {
                if (std::abs(v) <= tau) v = 0.0;
            } else {
                const double mag = std::abs(v) - tau;
                v = mag > 0.0 ? (v > 0.0 ? mag : -mag) : 0.0;
            }
        }
    }
    CovarianceGraph out;
    out.op = eigendecompose(t);
    out.n_samples = cov.n_samples;
    out.scale = cov.scale;
    return out;
}

// Divides the matrix by its largest eigenvalue phi_1 so the spectral norm of
// a PSD input becomes 1; the applied factor accumulates into `scale`.
inline CovarianceGraph normalize_spectrum(const CovarianceGraph& cov) {
    if (cov.op.eigvals.empty() || cov.op.eigvals.front() <= 0.0)
        throw DegenerateCovariance("normalize_spectrum: largest eigenvalue is not positive");
    const double phi1 = cov.op.eigvals.front();
    CovarianceGraph out;
    out.op.entries = cov.op.entries;
    for (double& v : out.op.entries.data()) v /= phi1;
    out.op.eigvecs = cov.op.eigvecs;
    out.op.eigvals = cov.op.eigvals;
    for (double& lam : out.op.eigvals) lam /= phi1;
    out.n_samples = cov.n_samples;
    out.scale = cov.scale * phi1;
    return out;
}

// Sample covariance of a seeded subject subsample (without replacement).
// keep == n reproduces sample_covariance exactly for any seed.
inline CovarianceGraph perturb_by_subsampling(const FeatureMatrix& fm, std::size_t keep,
                                              std::uint64_t seed) {
    validate(fm, "perturb_by_subsampling");
    if (keep < 2 || keep > fm.n_subjects())
        throw InvalidSubsample("perturb_by_subsampling: keep must be in [2, n_subjects], got " +
                               std::to_string(keep));
    std::vector<std::size_t> rows(fm.n_subjects());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(rows);
    rows.resize(keep);
    std::sort(rows.begin(), rows.end());  // summation order independent of the draw order

    CovarianceGraph cov;
    cov.op = eigendecompose(detail::covariance_of_rows(fm.features, rows));
    detail::clamp_psd(cov.op, "perturb_by_subsampling");
    cov.n_samples = keep;
    cov.scale = 1.0;
    return cov;
}

// Per-region standardization parameters, used when the pipeline is configured
// to build covariance on z-scored features.
struct ZscoreParams {
    Vector means;
    Vector sds;  // regions with zero variance keep sd = 1 (center only)
};

inline ZscoreParams fit_zscore(const FeatureMatrix& fm) {
    validate(fm, "fit_zscore");
    if (fm.n_subjects() < 2) throw InsufficientSamples("fit_zscore: need at least 2 subjects");
    const std::size_t n = fm.n_subjects(), m = fm.n_regions();
    ZscoreParams p;
    p.means.assign(m, 0.0);
    p.sds.assign(m, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) p.means[j] += fm.features(i, j);
    for (double& v : p.means) v /= static_cast<double>(n);
    for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = fm.features(i, j) - p.means[j];
            acc += d * d;
        }
        const double sd = std::sqrt(acc / static_cast<double>(n - 1));
        if (sd > 0.0) p.sds[j] = sd;
    }
    return p;
}

inline void apply_zscore(FeatureMatrix& fm, const ZscoreParams& p) {
    if (p.means.size() != fm.n_regions() || p.sds.size() != fm.n_regions())
        throw DimensionError("apply_zscore: parameter length disagrees with cohort regions");
    for (std::size_t i = 0; i < fm.n_subjects(); ++i)
        for (std::size_t j = 0; j < fm.n_regions(); ++j)
            fm.features(i, j) = (fm.features(i, j) - p.means[j]) / p.sds[j];
}

}  // namespace covnn
