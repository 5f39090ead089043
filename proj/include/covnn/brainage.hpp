#pragma once

// Brain-age post-processing: the age-bias correction (regress y_hat - y on y,
// subtract the fitted trend), per-region residual profiles, their alignment
// with covariance eigenvectors, and the cross-group regional ANCOVA table.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "covnn/covariance.hpp"
#include "covnn/errors.hpp"
#include "covnn/matrix.hpp"
#include "covnn/stats.hpp"
#include "covnn/vnn.hpp"

namespace covnn {

struct AgeBiasModel {
    double omega = 0.0;  // slope of (y_hat - y) on y
    double rho = 0.0;    // intercept
    std::size_t fit_n = 0;
};

// OLS of the raw prediction gap on chronological age. Fitting on the healthy
// training cohort and freezing it is what makes later delta-age group
// comparisons age-unconfounded.
inline AgeBiasModel fit_bias(const Vector& y, const Vector& y_hat) {
    if (y.size() != y_hat.size()) throw DimensionError("fit_bias: vectors differ in length");
    if (y.size() < 3) throw InsufficientSamples("fit_bias: need at least 3 subjects");
    const double my = mean(y);
    double syy = 0.0, syd = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double dy = y[i] - my;
        syy += dy * dy;
        syd += dy * (y_hat[i] - y[i]);
    }
    if (syy < 1e-12) throw DegenerateFit("fit_bias: ages have zero variance");
    AgeBiasModel model;
    model.omega = syd / syy;
    double md = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) md += y_hat[i] - y[i];
    md /= static_cast<double>(y.size());
    model.rho = md - model.omega * my;
    model.fit_n = y.size();
    return model;
}

struct BiasApplied {
    double y_brain = 0.0;   // bias-corrected prediction
    double delta_age = 0.0; // y_brain - y
};

inline BiasApplied apply_bias(const AgeBiasModel& model, double y, double y_hat) {
    BiasApplied out;
    out.y_brain = y_hat - (model.omega * y + model.rho);
    out.delta_age = out.y_brain - y;
    return out;
}

// r_j = p_x[j] - y_hat: how much each region pulls the prediction away from
// the cohort-level readout. Sums to zero by construction.
inline Vector regional_residuals(const VnnForwardTrace& trace) {
    if (trace.readout.empty()) throw TraceMismatch("regional_residuals: trace has no readout");
    Vector r(trace.readout.size());
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = trace.readout[j] - trace.y_hat;
    return r;
}

struct EigenAlignment {
    Vector coeffs;             // <r_bar, v_i> for the top_k leading eigenvectors
    bool zero_residual = false;  // flat profile: alignment undefined, coeffs zeroed
};

inline EigenAlignment eigen_alignment(const Vector& residuals, const CovarianceGraph& cov,
                                      std::size_t top_k) {
    if (residuals.size() != cov.dim())
        throw DimensionError("eigen_alignment: residual length vs covariance dim");
    if (top_k == 0 || top_k > cov.dim())
        throw InvalidRange("eigen_alignment: top_k must be in [1, dim]");
    EigenAlignment out;
    out.coeffs.assign(top_k, 0.0);
    const double norm = norm2(residuals);
    if (norm == 0.0) {
        out.zero_residual = true;
        return out;
    }
    for (std::size_t i = 0; i < top_k; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cov.dim(); ++j) acc += residuals[j] * cov.op.eigvecs(j, i);
        out.coeffs[i] = acc / norm;
    }
    return out;
}

struct SubjectDelta {
    std::string subject_id;
    double age = 0.0;
    double y_hat = 0.0;
    double y_brain = 0.0;
    double delta_age = 0.0;
    Vector residuals;       // length M
    Vector aligned_coeffs;  // length M, eigenvector order
    bool zero_residual = false;
};

struct DeltaAgeReport {
    std::string cohort_label;
    std::vector<std::string> region_ids;
    std::vector<std::string> group;  // per subject
    std::vector<SubjectDelta> subjects;
};

struct RegionStat {
    std::string region_id;
    AncovaRegionResult test;
};

struct GroupSummary {
    std::string label;
    std::size_t n = 0;
    double delta_mean = 0.0;
    double delta_sd = 0.0;
};

struct GroupStatsReport {
    std::vector<RegionStat> regions;       // input region order
    GroupSummary group_a;                  // e.g. healthy controls
    GroupSummary group_b;                  // e.g. disease
    WelchResult delta_contrast;            // one-sided, group_b > group_a
    PearsonResult delta_vs_age_a;          // sanity: ~0 when bias fit held out
    PearsonResult delta_vs_age_b;
};

// Region-wise ANCOVA of residual profiles between two cohorts, Bonferroni
// corrected over regions.
inline std::vector<RegionStat> ancova_region_test(const Matrix& residuals_a, const Vector& ages_a,
                                                  const Matrix& residuals_b, const Vector& ages_b,
                                                  const std::vector<std::string>& region_ids) {
    if (residuals_a.cols() != residuals_b.cols() || residuals_a.cols() != region_ids.size())
        throw DimensionError("ancova_region_test: region counts disagree");
    if (residuals_a.rows() != ages_a.size() || residuals_b.rows() != ages_b.size())
        throw DimensionError("ancova_region_test: subject counts disagree with ages");
    const std::size_t m = region_ids.size();
    std::vector<RegionStat> stats;
    stats.reserve(m);
    Vector va(residuals_a.rows()), vb(residuals_b.rows());
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < residuals_a.rows(); ++i) va[i] = residuals_a(i, j);
        for (std::size_t i = 0; i < residuals_b.rows(); ++i) vb[i] = residuals_b(i, j);
        stats.push_back({region_ids[j], ancova_one_region(va, ages_a, vb, ages_b, m)});
    }
    return stats;
}

}  // namespace covnn
