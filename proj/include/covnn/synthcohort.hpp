#pragma once

// Synthetic cortical-thickness cohorts on the unit interval. A cohort spec
// fixes a smooth baseline profile m(a), a non-positive aging slope beta(a), a
// stationary Gaussian correlation kernel, and iid measurement noise; a
// disease spec adds excess thinning on chosen sub-intervals past an onset
// age. Subjects are continuous objects (the correlated field is a random
// cosine-feature expansion of the kernel), so the same subject can be sampled
// consistently at any grid resolution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covnn/covariance.hpp"
#include "covnn/errors.hpp"
#include "covnn/io.hpp"
#include "covnn/matrix.hpp"
#include "covnn/rng.hpp"

namespace covnn {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

struct CortexSpec {
    // kernel W(a,b) = sigma2 * exp(-|a-b|^2 / length^2) + nugget * 1[a == b]
    double kernel_sigma2 = 0.01;
    double kernel_length = 0.1;
    double kernel_nugget = 0.002;
    // m(a) = baseline_mean + baseline_amp * sin(2 pi a), kept within [1, 5] mm
    double baseline_mean = 2.5;
    double baseline_amp = 0.4;
    // beta(a) = -(slope_base + slope_amp * (1 + cos(2 pi a)) / 2), always <= 0
    double slope_base = 0.008;
    double slope_amp = 0.006;
    double noise_sd = 0.05;  // iid per-region measurement noise, mm

    [[nodiscard]] double baseline(double a) const {
        return baseline_mean + baseline_amp * std::sin(kTwoPi * a);
    }
    [[nodiscard]] double aging_slope(double a) const {
        return -(slope_base + slope_amp * 0.5 * (1.0 + std::cos(kTwoPi * a)));
    }
};

inline void validate(const CortexSpec& spec) {
    if (!(spec.kernel_sigma2 >= 0.0) || !(spec.kernel_nugget >= 0.0) || !(spec.kernel_length > 0.0))
        throw KernelError("cortex spec: kernel needs sigma2 >= 0, nugget >= 0, length > 0");
    if (!(spec.noise_sd >= 0.0)) throw KernelError("cortex spec: noise_sd must be >= 0");
    if (spec.baseline_mean - std::abs(spec.baseline_amp) < 1.0 ||
        spec.baseline_mean + std::abs(spec.baseline_amp) > 5.0)
        throw ConfigError("cortex spec: baseline profile must stay within [1, 5] mm");
    if (spec.slope_base < 0.0 || spec.slope_amp < 0.0)
        throw ConfigError("cortex spec: aging slope must be <= 0 everywhere");
}

struct AtrophyInterval {
    double lo = 0.0;
    double hi = 0.0;  // half-open [lo, hi)
};

struct DiseaseSpec {
    std::vector<AtrophyInterval> regions;
    double excess_slope = -0.02;  // mm per year past onset, <= 0
    double onset_age = 55.0;

    [[nodiscard]] bool covers(double a) const {
        for (const auto& iv : regions)
            if (a >= iv.lo && a < iv.hi) return true;
        return false;
    }
};

inline void validate(const DiseaseSpec& spec) {
    if (spec.excess_slope > 0.0) throw ConfigError("disease spec: excess_slope must be <= 0");
    if (!(spec.onset_age > 0.0)) throw ConfigError("disease spec: onset_age must be positive");
    for (const auto& iv : spec.regions)
        if (!(iv.lo >= 0.0) || !(iv.hi <= 1.0) || !(iv.lo < iv.hi))
            throw ConfigError("disease spec: atrophy intervals must satisfy 0 <= lo < hi <= 1");
}

inline CortexSpec default_cortex_spec() { return CortexSpec{}; }

// Five contiguous cells at M = 50 resolution, mild excess thinning from 55.
inline DiseaseSpec default_disease_spec() { return DiseaseSpec{{{0.3, 0.4}}, -0.02, 55.0}; }

constexpr double kReferenceAge = 60.0;  // aging term is (y - 60) * beta(a)

// Random cosine-feature expansion of the Gaussian kernel. With coefficients
// zeta ~ N(0, I) the field sigma * sqrt(2/D) * sum_d zeta_d cos(w_d a + b_d)
// is a stationary Gaussian process whose expected covariance is exactly
// sigma2 * exp(-|a-b|^2/length^2); it is PSD by construction and evaluable at
// any coordinate, which is what makes matched multi-resolution subjects exact.
struct FieldBasis {
    Vector freqs;
    Vector phases;
    double sigma = 0.0;

    [[nodiscard]] std::size_t size() const noexcept { return freqs.size(); }

    [[nodiscard]] double value(const Vector& coeffs, double a) const {
        double acc = 0.0;
        for (std::size_t d = 0; d < freqs.size(); ++d)
            acc += coeffs[d] * std::cos(freqs[d] * a + phases[d]);
        return sigma * std::sqrt(2.0 / static_cast<double>(freqs.size())) * acc;
    }
};

inline FieldBasis make_field_basis(const CortexSpec& spec, std::uint64_t seed,
                                   std::size_t features = 128) {
    validate(spec);
    FieldBasis basis;
    basis.sigma = std::sqrt(spec.kernel_sigma2);
    basis.freqs.resize(features);
    basis.phases.resize(features);
    Rng rng(derive_seed(seed, {0x6669656c64ULL}));
    const double freq_sd = std::sqrt(2.0) / spec.kernel_length;
    for (std::size_t d = 0; d < features; ++d) basis.freqs[d] = freq_sd * rng.normal();
    for (std::size_t d = 0; d < features; ++d) basis.phases[d] = rng.uniform(0.0, kTwoPi);
    return basis;
}

// One subject, independent of any grid: age, disease status, and the
// coefficients of its correlated field.
struct ContinuousSubject {
    double age = 0.0;
    bool diseased = false;
    Vector field_coeffs;
};

inline double cell_center(std::size_t j, std::size_t m) {
    return (static_cast<double>(j) + 0.5) / static_cast<double>(m);
}

inline std::string region_id(std::size_t j, std::size_t m) {
    std::size_t width = 3;
    for (std::size_t v = m; v > 1000; v /= 10) ++width;
    std::string s = std::to_string(j);
    return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

// Noise-free profile value at coordinate a (baseline + aging + disease).
inline double deterministic_profile(const CortexSpec& spec, const DiseaseSpec* disease,
                                    double age, double a) {
    double v = spec.baseline(a) + (age - kReferenceAge) * spec.aging_slope(a);
    if (disease && age > disease->onset_age && disease->covers(a))
        v += disease->excess_slope * (age - disease->onset_age);
    return v;
}

// Samples one subject's features on the M-cell grid. The correlated field
// carries the 1/sqrt(M) grid scaling (grid noise covariance W/M); iid noise
// adds nugget/M + noise_sd^2 on the diagonal. Pass include_iid_noise = false
// for matched multi-resolution sampling, where resolution-specific noise has
// no counterpart.
inline Vector sample_subject_features(const CortexSpec& spec, const DiseaseSpec* disease,
                                      const FieldBasis& basis, const ContinuousSubject& subject,
                                      std::size_t m, bool include_iid_noise, Rng* noise_rng) {
    Vector x(m);
    const double field_scale = 1.0 / std::sqrt(static_cast<double>(m));
    const double nugget_sd = std::sqrt(spec.kernel_nugget / static_cast<double>(m));
    for (std::size_t j = 0; j < m; ++j) {
        const double a = cell_center(j, m);
        double v = deterministic_profile(spec, subject.diseased ? disease : nullptr, subject.age, a);
        v += field_scale * basis.value(subject.field_coeffs, a);
        if (include_iid_noise)
            v += nugget_sd * noise_rng->normal() + spec.noise_sd * noise_rng->normal();
        x[j] = v;
    }
    return x;
}

// Draws an n-subject cohort at resolution M with ages uniform on
// [age_lo, age_hi]. All subjects are diseased when a disease spec is given.
inline FeatureMatrix sample_cohort(const CortexSpec& spec, const DiseaseSpec* disease,
                                   std::size_t m, std::size_t n, double age_lo, double age_hi,
                                   std::uint64_t seed) {
    validate(spec);
    if (disease) validate(*disease);
    if (m == 0) throw ConfigError("sample_cohort: need at least one region");
    if (!(age_lo > 0.0) || !(age_lo < age_hi))
        throw ConfigError("sample_cohort: need 0 < age_lo < age_hi");

    const FieldBasis basis = make_field_basis(spec, seed);
    Rng age_rng(derive_seed(seed, {0x61676573ULL}));
    Rng coeff_rng(derive_seed(seed, {0x636f656666ULL}));
    Rng noise_rng(derive_seed(seed, {0x6e6f697365ULL}));

    FeatureMatrix fm;
    fm.features = Matrix(n, m);
    fm.ages.resize(n);
    fm.group.assign(n, disease ? "DIS" : "HC");
    fm.subject_ids.resize(n);
    fm.region_ids.resize(m);
    for (std::size_t j = 0; j < m; ++j) fm.region_ids[j] = region_id(j, m);

    for (std::size_t i = 0; i < n; ++i) {
        ContinuousSubject subject;
        subject.age = age_rng.uniform(age_lo, age_hi);
        subject.diseased = disease != nullptr;
        subject.field_coeffs = coeff_rng.normals(basis.size());
        const Vector x =
            sample_subject_features(spec, disease, basis, subject, m, true, &noise_rng);
        for (std::size_t j = 0; j < m; ++j) fm.features(i, j) = x[j];
        fm.ages[i] = subject.age;
        char buf[32];
        std::snprintf(buf, sizeof buf, "s%05zu", i);
        fm.subject_ids[i] = buf;
    }
    validate(fm, "sample_cohort");
    return fm;
}

// Analytic grid kernel of the noiseless, aging-free ensemble: W(a_i, a_j)/M.
inline Matrix grid_kernel_matrix(const CortexSpec& spec, std::size_t m) {
    validate(spec);
    if (m == 0) throw KernelError("grid_kernel_matrix: need at least one cell");
    Matrix k(m, m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double d = cell_center(i, m) - cell_center(j, m);
            double v = spec.kernel_sigma2 * std::exp(-d * d / (spec.kernel_length * spec.kernel_length));
            if (i == j) v += spec.kernel_nugget;
            k(i, j) = v / static_cast<double>(m);
        }
    }
    return k;
}

// --- CSV schema: subject_id, age, group, r_<region_id>... -------------------

inline std::string export_csv_string(const FeatureMatrix& fm) {
    std::string out = "subject_id,age,group";
    for (const auto& id : fm.region_ids) out += ",r_" + id;
    out += "\n";
    for (std::size_t i = 0; i < fm.n_subjects(); ++i) {
        out += fm.subject_ids[i];
        out += ",";
        out += format_double(fm.ages[i]);
        out += ",";
        out += fm.group[i];
        for (std::size_t j = 0; j < fm.n_regions(); ++j) {
            out += ",";
            out += format_double(fm.features(i, j));
        }
        out += "\n";
    }
    return out;
}

inline void export_csv(const FeatureMatrix& fm, const std::filesystem::path& path) {
    write_file_atomic(path, export_csv_string(fm));
}

inline FeatureMatrix import_csv(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    std::vector<std::string> lines;
    std::string cur;
    for (char c : content) {
        if (c == '\n') {
            lines.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) lines.push_back(cur);
    if (lines.empty()) throw CsvFormatError(path.string() + ": empty file");

    const auto header = split_csv_line(lines[0]);
    if (header.size() < 4 || header[0] != "subject_id" || header[1] != "age" || header[2] != "group")
        throw CsvFormatError(path.string() + ": header must start subject_id,age,group,r_...");

    FeatureMatrix fm;
    const std::size_t m = header.size() - 3;
    fm.region_ids.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        const std::string& col = header[j + 3];
        if (col.rfind("r_", 0) != 0)
            throw CsvFormatError(path.string() + ": feature column '" + col + "' must be named r_<region_id>");
        fm.region_ids[j] = col.substr(2);
    }

    const std::size_t n = lines.size() - 1;
    if (n < 2)
        throw InsufficientSamples(path.string() + ": need at least 2 subject rows, found " +
                                  std::to_string(n));
    fm.features = Matrix(n, m);
    fm.ages.resize(n);
    fm.group.resize(n);
    fm.subject_ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto fields = split_csv_line(lines[i + 1]);
        if (fields.size() != header.size())
            throw CsvFormatError(path.string() + ": row " + std::to_string(i + 2) + " has " +
                                 std::to_string(fields.size()) + " fields, expected " +
                                 std::to_string(header.size()));
        fm.subject_ids[i] = fields[0];
        fm.ages[i] = parse_double(fields[1], "age");
        fm.group[i] = fields[2];
        for (std::size_t j = 0; j < m; ++j)
            fm.features(i, j) = parse_double(fields[j + 3], "feature");
    }
    validate(fm, ("import_csv(" + path.string() + ")").c_str());
    return fm;
}

// --- JSON round-trip for specs ----------------------------------------------

inline nlohmann::json to_json(const CortexSpec& spec) {
    return {{"kernel_sigma2", spec.kernel_sigma2}, {"kernel_length", spec.kernel_length},
            {"kernel_nugget", spec.kernel_nugget}, {"baseline_mean", spec.baseline_mean},
            {"baseline_amp", spec.baseline_amp},   {"slope_base", spec.slope_base},
            {"slope_amp", spec.slope_amp},         {"noise_sd", spec.noise_sd}};
}

inline CortexSpec cortex_spec_from_json(const nlohmann::json& j) {
    try {
        CortexSpec spec;
        spec.kernel_sigma2 = j.value("kernel_sigma2", spec.kernel_sigma2);
        spec.kernel_length = j.value("kernel_length", spec.kernel_length);
        spec.kernel_nugget = j.value("kernel_nugget", spec.kernel_nugget);
        spec.baseline_mean = j.value("baseline_mean", spec.baseline_mean);
        spec.baseline_amp = j.value("baseline_amp", spec.baseline_amp);
        spec.slope_base = j.value("slope_base", spec.slope_base);
        spec.slope_amp = j.value("slope_amp", spec.slope_amp);
        spec.noise_sd = j.value("noise_sd", spec.noise_sd);
        validate(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("cortex spec json: ") + e.what());
    }
}

inline nlohmann::json to_json(const DiseaseSpec& spec) {
    nlohmann::json intervals = nlohmann::json::array();
    for (const auto& iv : spec.regions) intervals.push_back({iv.lo, iv.hi});
    return {{"atrophy_intervals", intervals},
            {"excess_slope", spec.excess_slope},
            {"onset_age", spec.onset_age}};
}

inline DiseaseSpec disease_spec_from_json(const nlohmann::json& j) {
    try {
        DiseaseSpec spec;
        spec.regions.clear();
        for (const auto& iv : j.at("atrophy_intervals"))
            spec.regions.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
        spec.excess_slope = j.value("excess_slope", spec.excess_slope);
        spec.onset_age = j.value("onset_age", spec.onset_age);
        validate(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("disease spec json: ") + e.what());
    }
}

}  // namespace covnn
