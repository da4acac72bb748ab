#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/linalg.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace sgplvm {

inline constexpr double kDefaultJitter = 1e-6;

/// Input→latent kernel: unit-magnitude SE-ARD plus white-noise jitter.
/// Precisions multiply squared distances inside the exponent.
struct SigmaKernelParams {
    Eigen::VectorXd precisions;
    double jitter = kDefaultJitter;

    [[nodiscard]] Eigen::Index dim() const noexcept { return precisions.size(); }

    void validate() const {
        if (precisions.size() == 0) throw InputError("sigma: no precisions");
        if (!precisions.allFinite() || (precisions.array() < 0.0).any())
            throw InputError("sigma: precisions must be finite and non-negative");
        if (!std::isfinite(jitter) || jitter < 0.0) throw InputError("sigma: jitter must be >= 0");
    }
};

/// Latent→output kernel: θ_S exp(-½ Σ θ_j (z_j - z'_j)²).
struct ThetaKernelParams {
    double signal_variance = 1.0;
    Eigen::VectorXd precisions;

    [[nodiscard]] Eigen::Index dim() const noexcept { return precisions.size(); }

    void validate() const {
        if (precisions.size() == 0) throw InputError("theta: no precisions");
        if (!std::isfinite(signal_variance) || signal_variance < 0.0)
            throw InputError("theta: signal variance must be finite and non-negative");
        if (!precisions.allFinite() || (precisions.array() < 0.0).any())
            throw InputError("theta: precisions must be finite and non-negative");
    }
};

namespace detail {

inline void check_points(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::Index dim,
                         const char* who) {
    if (a.cols() != dim || b.cols() != dim)
        throw InputError(std::string(who) + ": point dimension does not match kernel");
    if (!a.allFinite() || !b.allFinite())
        throw InputError(std::string(who) + ": non-finite input points");
}

/// exp(-½ Σ_l w_l (a_l - b_l)²) for every row pair.
inline Eigen::MatrixXd se_ard(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const Eigen::VectorXd& w) {
    Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(a.rows(), b.rows());
    for (Eigen::Index l = 0; l < w.size(); ++l) {
        if (w[l] == 0.0) continue;
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                const double d = a(i, l) - b(j, l);
                d2(i, j) += w[l] * d * d;
            }
    }
    return (-0.5 * d2.array()).exp().matrix();
}

} // namespace detail

/// K_z entries between input point sets; `with_jitter` adds ε on the diagonal
/// and requires A and B to be the same set.
inline Eigen::MatrixXd kz_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                 const SigmaKernelParams& sigma, bool with_jitter) {
    sigma.validate();
    detail::check_points(a, b, sigma.dim(), "kz_matrix");
    Eigen::MatrixXd k = detail::se_ard(a, b, sigma.precisions);
    if (with_jitter) {
        if (a.rows() != b.rows()) throw InputError("kz_matrix: jitter needs a square point set");
        k.diagonal().array() += sigma.jitter;
    }
    return k;
}

inline Eigen::MatrixXd kz_matrix(const Eigen::MatrixXd& x, const SigmaKernelParams& sigma) {
    return kz_matrix(x, x, sigma, true);
}

/// K_f entries between latent point sets.
inline Eigen::MatrixXd kf_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                 const ThetaKernelParams& theta) {
    theta.validate();
    detail::check_points(a, b, theta.dim(), "kf_matrix");
    return theta.signal_variance * detail::se_ard(a, b, theta.precisions);
}

} // namespace sgplvm
