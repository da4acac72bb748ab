#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/random.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <vector>

namespace sgplvm {

/// Diagonal loadings tried in order by stable_cholesky.
inline constexpr std::array<double, 5> kDefaultJitterSchedule{0.0, 1e-10, 1e-8, 1e-6, 1e-4};

/// Lower Cholesky factor of a symmetric positive-definite matrix, with the
/// diagonal loading that was needed to obtain it.
class CholFactor {
public:
    CholFactor() = default;
    CholFactor(Eigen::MatrixXd lower, double jitter_used)
        : lower_(std::move(lower)), jitter_(jitter_used) {
        log_det_ = 2.0 * lower_.diagonal().array().log().sum();
    }

    [[nodiscard]] const Eigen::MatrixXd& matrix_l() const noexcept { return lower_; }
    [[nodiscard]] double log_det() const noexcept { return log_det_; }
    [[nodiscard]] double jitter_used() const noexcept { return jitter_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return lower_.rows(); }

    /// Solves (L Lᵀ) X = B.
    template <typename Derived>
    [[nodiscard]] Eigen::MatrixXd solve(const Eigen::MatrixBase<Derived>& b) const {
        Eigen::MatrixXd x = lower_.triangularView<Eigen::Lower>().solve(b);
        lower_.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
        return x;
    }

    /// Solves L X = B.
    template <typename Derived>
    [[nodiscard]] Eigen::MatrixXd solve_lower(const Eigen::MatrixBase<Derived>& b) const {
        return lower_.triangularView<Eigen::Lower>().solve(b);
    }

    [[nodiscard]] Eigen::MatrixXd inverse() const {
        return solve(Eigen::MatrixXd::Identity(size(), size()));
    }

    [[nodiscard]] Eigen::MatrixXd reconstruct() const { return lower_ * lower_.transpose(); }

private:
    Eigen::MatrixXd lower_;
    double log_det_ = 0.0;
    double jitter_ = 0.0;
};

namespace detail {

inline bool try_cholesky(const Eigen::MatrixXd& m, Eigen::MatrixXd& lower) {
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) return false;
    lower = llt.matrixL();
    const auto diag = lower.diagonal().array();
    return diag.allFinite() && (diag > 0.0).all();
}

} // namespace detail

/// Factorizes M + cI for the first c in `schedule` that succeeds.
inline CholFactor stable_cholesky(const Eigen::MatrixXd& m,
                                  std::span<const double> schedule = kDefaultJitterSchedule) {
    if (m.rows() != m.cols()) throw InputError("stable_cholesky: matrix is not square");
    if (!m.allFinite()) throw InputError("stable_cholesky: matrix has non-finite entries");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
        throw InputError("stable_cholesky: matrix is not symmetric");
    if (schedule.empty()) throw InputError("stable_cholesky: empty jitter schedule");

    Eigen::MatrixXd lower;
    double c = 0.0;
    for (double jitter : schedule) {
        c = jitter;
        Eigen::MatrixXd loaded = m;
        loaded.diagonal().array() += jitter;
        if (detail::try_cholesky(loaded, lower)) return CholFactor(std::move(lower), jitter);
    }
    std::ostringstream msg;
    msg << "stable_cholesky: factorization failed for " << m.rows() << "x" << m.cols()
        << " matrix up to jitter " << c;
    throw FactorizationError(msg.str(), c);
}

/// Sum over columns of log N(col | 0, L Lᵀ).
inline double gaussian_columns_logpdf(const CholFactor& cov, const Eigen::MatrixXd& cols) {
    const double n = static_cast<double>(cols.rows());
    const Eigen::MatrixXd w = cov.solve_lower(cols);
    const double k = static_cast<double>(cols.cols());
    return -0.5 * w.squaredNorm() - 0.5 * k * cov.log_det() - 0.5 * k * n * kLog2Pi;
}

/// Numerically stable log(Σ exp(v)).
inline double log_sum_exp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

} // namespace sgplvm
