#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/kernels.hpp"
#include "sgplvm/linalg.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/random.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

namespace sgplvm {

/// Counts of negative predictive variances that were clamped to zero.
struct PredictDiagnostics {
    long latent_clamps = 0;
    long output_clamps = 0;
};

struct LatentPrediction {
    Eigen::VectorXd mean;   // k_z
    double variance = 0.0;  // shared across latent dimensions
    Eigen::VectorXd draw;   // one z* sample
};

struct OutputPrediction {
    Eigen::VectorXd mean;   // k_y
    double variance = 0.0;  // S + β⁻¹, shared across features
};

/// One posterior draw (ξ^(g), Z^(g)) with its factorizations cached for
/// repeated predictions at many test inputs.
class DrawPredictor {
public:
    DrawPredictor(const Dataset& data, HyperParams xi, Eigen::MatrixXd z)
        : x_(data.X), y_(data.Y), xi_(std::move(xi)), z_(std::move(z)) {
        if (z_.rows() != x_.rows()) throw InputError("DrawPredictor: Z rows differ from X");
        kz_ = latent_prior_factor(x_, xi_.sigma);
        kz_inv_z_ = kz_.solve(z_);
        kf_ = output_covariance_factor(z_, xi_.theta, xi_.beta);
        kf_inv_y_ = kf_.solve(y_);
        fingerprint_ = 0x243F6A8885A308D3ULL;
        const Eigen::VectorXd v = xi_.to_vector();
        for (Eigen::Index k = 0; k < v.size(); ++k) fingerprint_ = mix_seed(fingerprint_ ^ std::bit_cast<std::uint64_t>(v[k]));
        for (Eigen::Index k = 0; k < z_.size(); ++k)
            fingerprint_ = mix_seed(fingerprint_ ^ std::bit_cast<std::uint64_t>(z_.data()[k]));
    }

    [[nodiscard]] const HyperParams& hyper() const noexcept { return xi_; }
    [[nodiscard]] const Eigen::MatrixXd& latents() const noexcept { return z_; }
    /// Content hash; seeds the z* draw so results do not depend on draw order.
    [[nodiscard]] std::uint64_t fingerprint() const noexcept { return fingerprint_; }

    [[nodiscard]] LatentPrediction latent(const Eigen::RowVectorXd& x_star, Rng& rng,
                                          PredictDiagnostics* diag = nullptr) const {
        const Eigen::VectorXd k_star = kz_matrix(x_, x_star, xi_.sigma, false);
        LatentPrediction out;
        out.mean = kz_inv_z_.transpose() * k_star;
        const Eigen::VectorXd w = kz_.solve_lower(k_star);
        double s = 1.0 + xi_.sigma.jitter - w.squaredNorm();
        if (s < 0.0) {
            s = 0.0;
            if (diag != nullptr) ++diag->latent_clamps;
        }
        out.variance = s;
        out.draw = out.mean + std::sqrt(s) * standard_normal_matrix(out.mean.size(), 1, rng);
        return out;
    }

    [[nodiscard]] OutputPrediction output(const Eigen::VectorXd& z_star, PredictDiagnostics* diag = nullptr) const {
        const Eigen::VectorXd k_star = kf_matrix(z_, z_star.transpose(), xi_.theta);
        OutputPrediction out;
        out.mean = kf_inv_y_.transpose() * k_star;
        const Eigen::VectorXd w = kf_.solve_lower(k_star);
        double s = xi_.theta.signal_variance - w.squaredNorm();
        if (s < 0.0) {
            s = 0.0;
            if (diag != nullptr) ++diag->output_clamps;
        }
        out.variance = s + 1.0 / xi_.beta;
        return out;
    }

private:
    Eigen::MatrixXd x_;
    Eigen::MatrixXd y_;
    HyperParams xi_;
    Eigen::MatrixXd z_;
    CholFactor kz_;
    Eigen::MatrixXd kz_inv_z_;
    CholFactor kf_;
    Eigen::MatrixXd kf_inv_y_;
    std::uint64_t fingerprint_ = 0;
};

/// p(z* | x*, X, Z, σ): mean K_z*ᵀK_z⁻¹z_:,j, variance k_z(x*,x*) - K_z*ᵀK_z⁻¹K_z*.
inline LatentPrediction predict_latent(const Eigen::RowVectorXd& x_star, const Eigen::MatrixXd& x,
                                       const Eigen::MatrixXd& z, const SigmaKernelParams& sigma, Rng& rng,
                                       PredictDiagnostics* diag = nullptr) {
    if (x_star.size() != x.cols()) throw InputError("predict_latent: x* has wrong dimension");
    if (z.rows() != x.rows()) throw InputError("predict_latent: Z rows differ from X");
    const CholFactor kz = latent_prior_factor(x, sigma);
    const Eigen::VectorXd k_star = kz_matrix(x, x_star, sigma, false);
    LatentPrediction out;
    out.mean = z.transpose() * kz.solve(k_star);
    double s = 1.0 + sigma.jitter - kz.solve_lower(k_star).squaredNorm();
    if (s < 0.0) {
        s = 0.0;
        if (diag != nullptr) ++diag->latent_clamps;
    }
    out.variance = s;
    out.draw = out.mean + std::sqrt(s) * standard_normal_matrix(out.mean.size(), 1, rng);
    return out;
}

/// p(y* | z*, Z, Y, θ, β) = ∏_i N(A y_:,i, S + β⁻¹).
inline OutputPrediction predict_output(const Eigen::VectorXd& z_star, const Eigen::MatrixXd& z,
                                       const Eigen::MatrixXd& y, const ThetaKernelParams& theta, double beta,
                                       PredictDiagnostics* diag = nullptr) {
    if (z_star.size() != z.cols()) throw InputError("predict_output: z* has wrong dimension");
    if (z.rows() != y.rows()) throw InputError("predict_output: Z and Y row counts differ");
    const CholFactor kf = output_covariance_factor(z, theta, beta);
    const Eigen::VectorXd k_star = kf_matrix(z, z_star.transpose(), theta);
    OutputPrediction out;
    out.mean = y.transpose() * kf.solve(k_star);
    double s = theta.signal_variance - kf.solve_lower(k_star).squaredNorm();
    if (s < 0.0) {
        s = 0.0;
        if (diag != nullptr) ++diag->output_clamps;
    }
    out.variance = s + 1.0 / beta;
    return out;
}

struct PredictOptions {
    int latent_draws_per_sample = 1;
};

namespace detail {

inline Rng draw_rng(std::uint64_t base, const DrawPredictor& p, std::uint64_t point) {
    return Rng(derive_seed(base ^ p.fingerprint(), point, 3));
}

} // namespace detail

/// Monte Carlo mixture (1/G) Σ_g N(y | A^(g) y_:,i, S^(g) + 1/β^(g)) on a grid.
/// `y_grid` holds one column of grid values per feature; the result has the
/// same shape. `seed` drives the z* draws, keyed by draw content so the
/// result does not depend on draw order.
inline Eigen::MatrixXd predictive_density(const Eigen::RowVectorXd& x_star, const Eigen::MatrixXd& y_grid,
                                          const std::vector<DrawPredictor>& draws, std::uint64_t seed,
                                          std::uint64_t point_index = 0, const PredictOptions& opt = {},
                                          PredictDiagnostics* diag = nullptr) {
    if (draws.empty()) throw InputError("predictive_density: no posterior draws");
    if (opt.latent_draws_per_sample < 1) throw InputError("predictive_density: need >= 1 latent draw");
    Eigen::MatrixXd dens = Eigen::MatrixXd::Zero(y_grid.rows(), y_grid.cols());
    const double weight = 1.0 / (static_cast<double>(draws.size()) * opt.latent_draws_per_sample);
    for (const auto& d : draws) {
        Rng rng = detail::draw_rng(seed, d, point_index);
        for (int r = 0; r < opt.latent_draws_per_sample; ++r) {
            const auto lat = d.latent(x_star, rng, diag);
            const auto out = d.output(lat.draw, diag);
            if (out.mean.size() != y_grid.cols()) throw InputError("predictive_density: grid has wrong feature count");
            const double sd = std::sqrt(out.variance);
            const double norm = weight / (std::sqrt(kTwoPi) * sd);
            for (Eigen::Index i = 0; i < y_grid.cols(); ++i)
                dens.col(i).array() += norm * (-0.5 * ((y_grid.col(i).array() - out.mean[i]) / sd).square()).exp();
        }
    }
    return dens;
}

/// (1/G) Σ_g K_f*ᵀ (K_f + β⁻¹I)⁻¹ Y at a sampled z*^(g).
inline Eigen::VectorXd posterior_mean(const Eigen::RowVectorXd& x_star, const std::vector<DrawPredictor>& draws,
                                      std::uint64_t seed, std::uint64_t point_index = 0,
                                      PredictDiagnostics* diag = nullptr) {
    if (draws.empty()) throw InputError("posterior_mean: no posterior draws");
    Eigen::VectorXd mean;
    for (const auto& d : draws) {
        Rng rng = detail::draw_rng(seed, d, point_index);
        const auto lat = d.latent(x_star, rng, diag);
        const auto out = d.output(lat.draw, diag);
        if (mean.size() == 0) mean = Eigen::VectorXd::Zero(out.mean.size());
        mean += out.mean;
    }
    return mean / static_cast<double>(draws.size());
}

} // namespace sgplvm
