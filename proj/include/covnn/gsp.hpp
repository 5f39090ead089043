#pragma once

// Graph-signal primitives on symmetric operators: eigendecomposition, the
// shift z = Ax, polynomial filters z = sum_k h_k A^k x evaluated by iterated
// shifts, the graph Fourier transform pair, and filter frequency responses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "covnn/errors.hpp"
#include "covnn/matrix.hpp"

namespace covnn {

// Symmetric operator with its eigendecomposition cached. Eigenvalues are
// sorted descending; each eigenvector's largest-magnitude entry is positive
// (ties broken by lowest index) so decompositions are reproducible.
struct SymmetricOperator {
    Matrix entries;
    Matrix eigvecs;   // columns are eigenvectors, same order as eigvals
    Vector eigvals;

    [[nodiscard]] std::size_t dim() const noexcept { return entries.rows(); }
};

struct FilterTaps {
    Vector h;  // h[k] multiplies A^k x; size K+1

    [[nodiscard]] std::size_t order() const noexcept { return h.empty() ? 0 : h.size() - 1; }
};

namespace detail {

constexpr double kJacobiTolScale = 1e-12;   // off(A) < scale * ||A||_F stops the sweep loop
constexpr int kJacobiMaxSweeps = 100;
constexpr double kOrthoTol = 1e-10;         // ||U^T U - I||_inf acceptance
constexpr double kRecomposeTol = 1e-8;      // ||U L U^T - A||_inf <= tol * max|A|

inline double offdiag_norm(const Matrix& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) acc += a(i, j) * a(i, j);
    return std::sqrt(acc);
}

// One cyclic Jacobi pass over all (p, q) pairs of the symmetric matrix `a`,
// accumulating rotations into `v`.
inline void jacobi_sweep(Matrix& a, Matrix& v) {
    const std::size_t n = a.rows();
    for (std::size_t p = 0; p + 1 < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) {
            const double apq = a(p, q);
            if (apq == 0.0) continue;
            const double app = a(p, p), aqq = a(q, q);
            const double tau = (aqq - app) / (2.0 * apq);
            const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
            const double c = 1.0 / std::sqrt(1.0 + t * t);
            const double s = t * c;

            a(p, p) = app - t * apq;
            a(q, q) = aqq + t * apq;
            a(p, q) = 0.0;
            a(q, p) = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (i == p || i == q) continue;
                const double aip = a(i, p), aiq = a(i, q);
                a(i, p) = c * aip - s * aiq;
                a(p, i) = a(i, p);
                a(i, q) = s * aip + c * aiq;
                a(q, i) = a(i, q);
            }
            for (std::size_t i = 0; i < n; ++i) {
                const double vip = v(i, p), viq = v(i, q);
                v(i, p) = c * vip - s * viq;
                v(i, q) = s * vip + c * viq;
            }
        }
    }
}

}  // namespace detail

// Full eigendecomposition of a (symmetrized) square matrix by cyclic Jacobi
// rotations. Deterministic: identical input bytes give identical output bytes.
inline SymmetricOperator eigendecompose(const Matrix& input) {
    const std::size_t n = input.rows();
    if (n == 0 || input.cols() != n)
        throw InvalidMatrix("eigendecompose: expected a non-empty square matrix, got " +
                            std::to_string(input.rows()) + "x" + std::to_string(input.cols()));
    if (!all_finite(input)) throw InvalidMatrix("eigendecompose: matrix has non-finite entries");

    SymmetricOperator op;
    op.entries = symmetrize(input);

    Matrix a = op.entries;
    Matrix v = Matrix::identity(n);
    const double fro = frobenius_norm(a);
    const double tol = detail::kJacobiTolScale * fro;

    int sweep = 0;
    while (detail::offdiag_norm(a) > tol) {
        if (++sweep > detail::kJacobiMaxSweeps)
            throw EigenNoConvergence("eigendecompose: Jacobi did not converge in " +
                                     std::to_string(detail::kJacobiMaxSweeps) + " sweeps");
        detail::jacobi_sweep(a, v);
    }

    // Sort descending by eigenvalue; stable so exact ties keep rotation order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    op.eigvals.resize(n);
    op.eigvecs = Matrix(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t src = order[c];
        op.eigvals[c] = a(src, src);
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double mag = std::abs(v(i, src));
            if (mag > best) {  // strict > keeps the lowest index on ties
                best = mag;
                arg = i;
            }
        }
        const double flip = v(arg, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i) op.eigvecs(i, c) = flip * v(i, src);
    }

    // Cheap invariant checks relative to the O(n^3) decomposition itself.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            double d = 0.0;
            for (std::size_t r = 0; r < n; ++r) d += op.eigvecs(r, i) * op.eigvecs(r, j);
            if (std::abs(d - (i == j ? 1.0 : 0.0)) > detail::kOrthoTol)
                throw EigenNoConvergence("eigendecompose: eigenvector basis lost orthonormality");
        }
    }
    const double scale = std::max(max_abs(op.entries), 1e-300);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double r = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                r += op.eigvecs(i, k) * op.eigvals[k] * op.eigvecs(j, k);
            if (std::abs(r - op.entries(i, j)) > detail::kRecomposeTol * scale)
                throw EigenNoConvergence("eigendecompose: recomposition drifted beyond tolerance");
        }
    }
    return op;
}

inline void check_signal(const SymmetricOperator& op, const Vector& x, const char* where) {
    if (x.size() != op.dim())
        throw DimensionError(std::string(where) + ": operator dim " + std::to_string(op.dim()) +
                             " vs signal length " + std::to_string(x.size()));
    if (!all_finite(x)) throw DegenerateInput(std::string(where) + ": signal has non-finite values");
}

inline Vector shift(const SymmetricOperator& op, const Vector& x) {
    check_signal(op, x, "shift");
    return matvec(op.entries, x);
}

inline void check_taps(const FilterTaps& taps, const char* where) {
    if (taps.h.empty()) throw DegenerateInput(std::string(where) + ": filter has no taps");
    if (!all_finite(taps.h))
        throw DegenerateInput(std::string(where) + ": filter taps contain non-finite values");
}

// z = sum_k h_k A^k x via K iterated shifts; A^k is never materialized.
inline Vector apply_filter(const SymmetricOperator& op, const FilterTaps& taps, const Vector& x) {
    check_signal(op, x, "apply_filter");
    check_taps(taps, "apply_filter");
    Vector z(x.size(), 0.0);
    axpy(taps.h[0], x, z);
    Vector cur = x;
    for (std::size_t k = 1; k < taps.h.size(); ++k) {
        cur = matvec(op.entries, cur);
        axpy(taps.h[k], cur, z);
    }
    return z;
}

inline Vector gft(const SymmetricOperator& op, const Vector& x) {
    check_signal(op, x, "gft");
    Vector xt(x.size(), 0.0);
    for (std::size_t i = 0; i < op.dim(); ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < op.dim(); ++r) acc += op.eigvecs(r, i) * x[r];
        xt[i] = acc;
    }
    return xt;
}

inline Vector igft(const SymmetricOperator& op, const Vector& xt) {
    check_signal(op, xt, "igft");
    return matvec(op.eigvecs, xt);
}

// h(lambda) for each supplied eigenvalue, evaluated by Horner's scheme.
inline Vector frequency_response(const FilterTaps& taps, const Vector& lambdas) {
    check_taps(taps, "frequency_response");
    if (!all_finite(lambdas))
        throw DegenerateInput("frequency_response: eigenvalues contain non-finite values");
    Vector out(lambdas.size(), 0.0);
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        double acc = 0.0;
        for (std::size_t k = taps.h.size(); k-- > 0;) acc = acc * lambdas[i] + taps.h[k];
        out[i] = acc;
    }
    return out;
}

// Empirical Lipschitz constant of the frequency response on [lo, hi]:
// max of |h'| over a 1024-point grid, widened with the adjacent-pair secant
// slopes of h so the result dominates every secant achievable on the grid
// (non-adjacent secants are weighted means of adjacent ones).
inline double lipschitz_bound(const FilterTaps& taps, double lo, double hi) {
    check_taps(taps, "lipschitz_bound");
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
        throw InvalidRange("lipschitz_bound: need a finite interval with lo <= hi");

    constexpr std::size_t kGrid = 1024;
    const std::size_t kp1 = taps.h.size();

    auto response = [&](double lam) {
        double acc = 0.0;
        for (std::size_t k = kp1; k-- > 0;) acc = acc * lam + taps.h[k];
        return acc;
    };
    auto derivative = [&](double lam) {
        double acc = 0.0;
        for (std::size_t k = kp1; k-- > 1;) acc = acc * lam + static_cast<double>(k) * taps.h[k];
        return acc;
    };

    if (lo == hi) return std::abs(derivative(lo));

    const double step = (hi - lo) / static_cast<double>(kGrid - 1);
    double bound = 0.0;
    double prev_resp = 0.0;
    for (std::size_t i = 0; i < kGrid; ++i) {
        const double lam = lo + step * static_cast<double>(i);
        bound = std::max(bound, std::abs(derivative(lam)));
        const double r = response(lam);
        if (i > 0) bound = std::max(bound, std::abs(r - prev_resp) / step);
        prev_resp = r;
    }
    return bound;
}

// Largest-magnitude eigenvalue of a symmetric matrix, i.e. its operator norm.
inline double operator_norm(const Matrix& symmetric) {
    const SymmetricOperator op = eigendecompose(symmetric);
    double m = 0.0;
    for (double lam : op.eigvals) m = std::max(m, std::abs(lam));
    return m;
}

// Materialized filter matrix sum_k h_k A^k, for operator-norm comparisons in
// the stability harnesses (apply_filter itself never forms powers).
inline Matrix filter_matrix(const Matrix& a, const FilterTaps& taps) {
    check_taps(taps, "filter_matrix");
    if (a.rows() != a.cols()) throw DimensionError("filter_matrix: operator must be square");
    const std::size_t n = a.rows();
    Matrix acc(n, n);
    for (std::size_t i = 0; i < n; ++i) acc(i, i) = taps.h[0];
    Matrix power = Matrix::identity(n);
    for (std::size_t k = 1; k < taps.h.size(); ++k) {
        power = matmul(power, a);
        for (std::size_t i = 0; i < n * n; ++i) acc.data()[i] += taps.h[k] * power.data()[i];
    }
    return acc;
}

inline Matrix filter_matrix(const SymmetricOperator& op, const FilterTaps& taps) {
    return filter_matrix(op.entries, taps);
}

}  // namespace covnn
