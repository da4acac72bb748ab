#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/kernels.hpp"
#include "sgplvm/linalg.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sgplvm {

/// Observed inputs X (N×k_x) and outputs Y (N×k_y).
struct Dataset {
    Eigen::MatrixXd X;
    Eigen::MatrixXd Y;

    [[nodiscard]] Eigen::Index size() const noexcept { return X.rows(); }
    [[nodiscard]] Eigen::Index input_dim() const noexcept { return X.cols(); }
    [[nodiscard]] Eigen::Index output_dim() const noexcept { return Y.cols(); }

    void validate() const {
        if (X.rows() != Y.rows()) throw InputError("dataset: X and Y row counts differ");
        if (X.rows() < 2) throw InputError("dataset: need at least two points");
        if (X.cols() < 1 || Y.cols() < 1) throw InputError("dataset: empty input or output");
        if (!X.allFinite() || !Y.allFinite()) throw InputError("dataset: non-finite entries");
    }
};

/// Kernel hyperparameters and noise precision ξ = (σ, θ, β).
///
/// The flat "natural" ordering used for priors, blocks and traces is
/// [σ_1..σ_kx, θ_1..θ_kz, θ_S, β]. The jitter is a fixed constant and is not
/// part of the flat vector.
struct HyperParams {
    SigmaKernelParams sigma;
    ThetaKernelParams theta;
    double beta = 1.0;

    [[nodiscard]] Eigen::Index input_dim() const noexcept { return sigma.dim(); }
    [[nodiscard]] Eigen::Index latent_dim() const noexcept { return theta.dim(); }
    [[nodiscard]] Eigen::Index flat_size() const noexcept { return sigma.dim() + theta.dim() + 2; }

    [[nodiscard]] Eigen::VectorXd to_vector() const {
        Eigen::VectorXd v(flat_size());
        v << sigma.precisions, theta.precisions, theta.signal_variance, beta;
        return v;
    }

    [[nodiscard]] static HyperParams from_vector(const Eigen::VectorXd& v, Eigen::Index kx,
                                                 Eigen::Index kz, double jitter = kDefaultJitter) {
        if (v.size() != kx + kz + 2) throw InputError("hyperparameter vector has wrong length");
        HyperParams h;
        h.sigma.precisions = v.head(kx);
        h.sigma.jitter = jitter;
        h.theta.precisions = v.segment(kx, kz);
        h.theta.signal_variance = v[kx + kz];
        h.beta = v[kx + kz + 1];
        return h;
    }

    void validate() const {
        sigma.validate();
        theta.validate();
        if (!(beta > 0.0) || !std::isfinite(beta)) throw InputError("beta must be positive");
        if ((sigma.precisions.array() <= 0.0).any() || (theta.precisions.array() <= 0.0).any() ||
            !(theta.signal_variance > 0.0))
            throw InputError("hyperparameters must be strictly positive");
    }
};

/// Component names in flat order, e.g. sigma_1, theta_1, theta_2, theta_S, beta.
inline std::vector<std::string> hyper_names(Eigen::Index kx, Eigen::Index kz) {
    std::vector<std::string> names;
    for (Eigen::Index l = 0; l < kx; ++l) names.push_back("sigma_" + std::to_string(l + 1));
    for (Eigen::Index j = 0; j < kz; ++j) names.push_back("theta_" + std::to_string(j + 1));
    names.emplace_back("theta_S");
    names.emplace_back("beta");
    return names;
}

/// Gamma(shape, scale) prior on one hyperparameter component; mean = shape·scale.
/// With `on_reciprocal` the Gamma governs 1/x (e.g. a prior on β⁻¹) and the
/// density is transformed back onto x.
struct GammaPrior {
    double shape = 1.0;
    double scale = 1.0;
    std::string target;
    bool on_reciprocal = false;

    [[nodiscard]] double mean() const noexcept { return shape * scale; }
};

inline double gamma_log_pdf(double x, double shape, double scale) {
    if (!(x > 0.0) || !std::isfinite(x)) return -std::numeric_limits<double>::infinity();
    return (shape - 1.0) * std::log(x) - x / scale - std::lgamma(shape) - shape * std::log(scale);
}

inline double gamma_prior_log_density(const GammaPrior& p, double x) {
    if (!(p.shape > 0.0) || !(p.scale > 0.0)) throw InputError("gamma prior needs shape, scale > 0");
    if (!(x > 0.0) || !std::isfinite(x)) return -std::numeric_limits<double>::infinity();
    if (!p.on_reciprocal) return gamma_log_pdf(x, p.shape, p.scale);
    // p_x(x) = p_v(1/x) / x²
    return gamma_log_pdf(1.0 / x, p.shape, p.scale) - 2.0 * std::log(x);
}

/// Priors resolved against the flat hyperparameter ordering.
class PriorTable {
public:
    PriorTable() = default;
    PriorTable(std::vector<GammaPrior> priors, Eigen::Index kx, Eigen::Index kz)
        : priors_(std::move(priors)) {
        const auto names = hyper_names(kx, kz);
        index_.assign(names.size(), -1);
        for (std::size_t p = 0; p < priors_.size(); ++p) {
            std::size_t hit = names.size();
            for (std::size_t c = 0; c < names.size(); ++c)
                if (names[c] == priors_[p].target) hit = c;
            if (hit == names.size())
                throw InputError("prior targets unknown component '" + priors_[p].target + "'");
            if (index_[hit] >= 0)
                throw InputError("component '" + names[hit] + "' has more than one prior");
            index_[hit] = static_cast<int>(p);
        }
        for (std::size_t c = 0; c < names.size(); ++c)
            if (index_[c] < 0) throw InputError("component '" + names[c] + "' has no prior");
    }

    [[nodiscard]] double log_density(const Eigen::VectorXd& flat) const {
        if (static_cast<std::size_t>(flat.size()) != index_.size())
            throw InputError("prior table: hyperparameter vector has wrong length");
        double total = 0.0;
        for (std::size_t c = 0; c < index_.size(); ++c) {
            const double lp = gamma_prior_log_density(priors_[index_[c]], flat[c]);
            if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
            total += lp;
        }
        return total;
    }

    [[nodiscard]] const std::vector<GammaPrior>& priors() const noexcept { return priors_; }

private:
    std::vector<GammaPrior> priors_;
    std::vector<int> index_;
};

/// Σ of Gamma log densities over all hyperparameter components.
/// Returns -inf outside the positive orthant.
inline double log_prior_hyper(const HyperParams& xi, const std::vector<GammaPrior>& priors) {
    const PriorTable table(priors, xi.input_dim(), xi.latent_dim());
    return table.log_density(xi.to_vector());
}

/// Factor of K_f + β⁻¹I at latent points Z.
inline CholFactor output_covariance_factor(const Eigen::MatrixXd& z, const ThetaKernelParams& theta,
                                           double beta) {
    Eigen::MatrixXd k = kf_matrix(z, z, theta);
    k.diagonal().array() += 1.0 / beta;
    return stable_cholesky(k);
}

/// Factor of K_z (jitter included) at inputs X.
inline CholFactor latent_prior_factor(const Eigen::MatrixXd& x, const SigmaKernelParams& sigma) {
    return stable_cholesky(kz_matrix(x, sigma));
}

/// log p(Y | Z, θ, β) = Σ_i log N(y_:,i | 0, K_f + β⁻¹I).
inline double log_py_given_z(const Eigen::MatrixXd& y, const Eigen::MatrixXd& z,
                             const ThetaKernelParams& theta, double beta) {
    if (y.rows() != z.rows()) throw InputError("log_py_given_z: Y and Z row counts differ");
    if (!(beta > 0.0)) throw InputError("log_py_given_z: beta must be positive");
    return gaussian_columns_logpdf(output_covariance_factor(z, theta, beta), y);
}

/// log p(Z | X, σ) = Σ_j log N(z_:,j | 0, K_z).
inline double log_pz_given_x(const Eigen::MatrixXd& z, const Eigen::MatrixXd& x,
                             const SigmaKernelParams& sigma) {
    if (z.rows() != x.rows()) throw InputError("log_pz_given_x: Z and X row counts differ");
    return gaussian_columns_logpdf(latent_prior_factor(x, sigma), z);
}

/// log p(Y, Z | X, ξ).
inline double log_joint(const Dataset& data, const Eigen::MatrixXd& z, const HyperParams& xi) {
    return log_py_given_z(data.Y, z, xi.theta, xi.beta) + log_pz_given_x(z, data.X, xi.sigma);
}

} // namespace sgplvm
