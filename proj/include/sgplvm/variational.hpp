#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/kernels.hpp"
#include "sgplvm/linalg.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/random.hpp"

#include <Eigen/Dense>
#include <ceres/ceres.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

namespace sgplvm {

/// Relative diagonal loading on K_u (scaled by θ_S).
inline constexpr double kInducingJitter = 1e-8;

/// q(Z) = ∏_j N(z_:,j | μ_j, S_j) with S_j = L_j L_jᵀ, plus inducing inputs Z_u.
struct VariationalState {
    Eigen::MatrixXd mu;                     // N×k_z
    std::vector<Eigen::MatrixXd> chol;      // k_z lower-triangular N×N factors
    Eigen::MatrixXd inducing;               // M×k_z

    [[nodiscard]] Eigen::Index size() const noexcept { return mu.rows(); }
    [[nodiscard]] Eigen::Index latent_dim() const noexcept { return mu.cols(); }
    [[nodiscard]] Eigen::Index num_inducing() const noexcept { return inducing.rows(); }

    [[nodiscard]] Eigen::MatrixXd covariance(Eigen::Index j) const {
        return chol[j] * chol[j].transpose();
    }

    /// (S_j)_nn for every point n and latent dimension j.
    [[nodiscard]] Eigen::MatrixXd marginal_variances() const {
        Eigen::MatrixXd s(size(), latent_dim());
        for (Eigen::Index j = 0; j < latent_dim(); ++j)
            s.col(j) = chol[j].rowwise().squaredNorm();
        return s;
    }

    void validate() const {
        const auto n = size();
        const auto kz = latent_dim();
        if (n == 0 || kz == 0) throw InputError("variational state is empty");
        if (static_cast<Eigen::Index>(chol.size()) != kz)
            throw InputError("variational state needs one covariance factor per latent dimension");
        for (const auto& l : chol) {
            if (l.rows() != n || l.cols() != n) throw InputError("covariance factor has wrong shape");
            if (!l.allFinite()) throw InputError("covariance factor is not finite");
            if ((l.diagonal().array() <= 0.0).any())
                throw InputError("covariance factor needs a positive diagonal");
        }
        if (inducing.cols() != kz) throw InputError("inducing inputs have wrong dimension");
        if (inducing.rows() < 1 || inducing.rows() > n)
            throw InputError("inducing count must be in [1, N]");
        if (!mu.allFinite() || !inducing.allFinite()) throw InputError("variational state not finite");
    }
};

/// ψ₀ = ⟨Tr K_f⟩, ψ₁ = ⟨K_fu⟩, ψ₂ = ⟨K_uf K_fu⟩ under q(Z).
struct PsiStats {
    double psi0 = 0.0;
    Eigen::MatrixXd psi1;
    Eigen::MatrixXd psi2;
};

/// Gradient of the ELBO. Covariance factors are differentiated in their
/// unconstrained form: strictly-lower entries directly, diagonal entries with
/// respect to log L_ii. Hyperparameter entries are with respect to logs.
struct ElboGradient {
    Eigen::MatrixXd mu;
    std::vector<Eigen::MatrixXd> chol;
    Eigen::MatrixXd inducing;
    Eigen::VectorXd log_hyper;  // flat hyperparameter order
};

namespace detail {

inline Eigen::MatrixXd inducing_covariance(const Eigen::MatrixXd& zu, const ThetaKernelParams& theta) {
    Eigen::MatrixXd k = kf_matrix(zu, zu, theta);
    k.diagonal().array() += kInducingJitter * theta.signal_variance;
    return k;
}

inline Eigen::MatrixXd psi1_matrix(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& s,
                                   const Eigen::MatrixXd& zu, const ThetaKernelParams& theta) {
    const auto n = mu.rows(), m = zu.rows(), kz = mu.cols();
    const auto& w = theta.precisions;
    Eigen::MatrixXd psi1(n, m);
    for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index i = 0; i < n; ++i) {
            double lv = 0.0;
            for (Eigen::Index j = 0; j < kz; ++j) {
                const double den = w[j] * s(i, j) + 1.0;
                const double d = mu(i, j) - zu(a, j);
                lv += -0.5 * std::log(den) - 0.5 * w[j] * d * d / den;
            }
            psi1(i, a) = theta.signal_variance * std::exp(lv);
        }
    return psi1;
}

/// Contribution of point i to ψ₂ at (a, b).
inline double psi2_entry(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& s, const Eigen::MatrixXd& zu,
                         const ThetaKernelParams& theta, Eigen::Index i, Eigen::Index a, Eigen::Index b) {
    const auto& w = theta.precisions;
    double lv = 0.0;
    for (Eigen::Index j = 0; j < mu.cols(); ++j) {
        const double den = 2.0 * w[j] * s(i, j) + 1.0;
        const double delta = zu(a, j) - zu(b, j);
        const double e = mu(i, j) - 0.5 * (zu(a, j) + zu(b, j));
        lv += -0.5 * std::log(den) - 0.25 * w[j] * delta * delta - w[j] * e * e / den;
    }
    return theta.signal_variance * theta.signal_variance * std::exp(lv);
}

inline Eigen::MatrixXd psi2_matrix(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& s,
                                   const Eigen::MatrixXd& zu, const ThetaKernelParams& theta) {
    const auto m = zu.rows();
    Eigen::MatrixXd psi2 = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < mu.rows(); ++i)
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b <= a; ++b) {
                const double v = psi2_entry(mu, s, zu, theta, i, a, b);
                psi2(a, b) += v;
                if (a != b) psi2(b, a) += v;
            }
    return psi2;
}

struct BoundResult {
    double fit = 0.0;
    double kl = 0.0;
};

/// Collapsed bound Σ_i F̃_i and KL(q || p(Z|X,σ)), optionally with gradients.
inline BoundResult evaluate_bound(const Eigen::MatrixXd& y, const Eigen::MatrixXd& x,
                                  const VariationalState& q, const HyperParams& xi, bool with_kl,
                                  ElboGradient* grad) {
    const auto n = q.size(), m = q.num_inducing(), kz = q.latent_dim(), kx = xi.input_dim();
    const double d = static_cast<double>(y.cols());
    const double nd = static_cast<double>(n);
    const double beta = xi.beta;
    const double ts = xi.theta.signal_variance;
    const auto& w = xi.theta.precisions;
    const Eigen::MatrixXd& mu = q.mu;
    const Eigen::MatrixXd& zu = q.inducing;
    const Eigen::MatrixXd s = q.marginal_variances();

    const Eigen::MatrixXd psi1 = psi1_matrix(mu, s, zu, xi.theta);
    const Eigen::MatrixXd psi2 = psi2_matrix(mu, s, zu, xi.theta);
    const double psi0 = nd * ts;

    const CholFactor chol_ku = stable_cholesky(inducing_covariance(zu, xi.theta));
    Eigen::MatrixXd a_mat = chol_ku.reconstruct() + beta * psi2;
    a_mat = 0.5 * (a_mat + a_mat.transpose());
    const CholFactor chol_a = stable_cholesky(a_mat);

    const Eigen::MatrixXd c = psi1.transpose() * y;       // M×D
    const Eigen::MatrixXd p = chol_a.solve(c);            // A⁻¹C
    const double quad = c.cwiseProduct(p).sum();
    const Eigen::MatrixXd ku_inv = chol_ku.inverse();
    const double tr_kinv_psi2 = ku_inv.cwiseProduct(psi2).sum();
    const double yy = y.squaredNorm();

    BoundResult out;
    out.fit = 0.5 * d * nd * (std::log(beta) - kLog2Pi) + 0.5 * d * chol_ku.log_det() -
              0.5 * d * chol_a.log_det() - 0.5 * beta * yy + 0.5 * beta * beta * quad -
              0.5 * d * beta * psi0 + 0.5 * d * beta * tr_kinv_psi2;

    std::optional<CholFactor> chol_kz;
    Eigen::MatrixXd kz_inv;
    if (with_kl) {
        chol_kz = latent_prior_factor(x, xi.sigma);
        double kl = 0.0;
        for (Eigen::Index j = 0; j < kz; ++j) {
            const Eigen::MatrixXd wl = chol_kz->solve_lower(q.chol[j]);
            const Eigen::VectorXd wm = chol_kz->solve_lower(mu.col(j));
            const double log_det_s = 2.0 * q.chol[j].diagonal().array().log().sum();
            kl += 0.5 * (wl.squaredNorm() + wm.squaredNorm() - nd + chol_kz->log_det() - log_det_s);
        }
        out.kl = kl;
    }
    if (grad == nullptr) return out;

    // Partials of the fit term with respect to ψ₁, ψ₂, K_u and β.
    const Eigen::MatrixXd a_inv = chol_a.inverse();
    const Eigen::MatrixXd g1 = beta * beta * y * p.transpose();
    const Eigen::MatrixXd ga = -0.5 * d * a_inv - 0.5 * beta * beta * p * p.transpose();
    const Eigen::MatrixXd g2 = beta * ga + 0.5 * d * beta * ku_inv;
    const Eigen::MatrixXd gk = 0.5 * d * ku_inv + ga - 0.5 * d * beta * ku_inv * psi2 * ku_inv;
    const double dbeta = 0.5 * d * nd / beta - 0.5 * yy + beta * quad + ga.cwiseProduct(psi2).sum() -
                         0.5 * d * psi0 + 0.5 * d * tr_kinv_psi2;

    Eigen::MatrixXd dmu = Eigen::MatrixXd::Zero(n, kz);
    Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(n, kz);
    Eigen::MatrixXd dzu = Eigen::MatrixXd::Zero(m, kz);
    Eigen::VectorXd dtheta = Eigen::VectorXd::Zero(kz);
    double dts = -0.5 * d * beta * nd;  // through ψ₀

    for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index i = 0; i < n; ++i) {
            const double wt = g1(i, a) * psi1(i, a);
            dts += wt / ts;
            for (Eigen::Index j = 0; j < kz; ++j) {
                const double den = w[j] * s(i, j) + 1.0;
                const double dd = mu(i, j) - zu(a, j);
                dmu(i, j) += wt * (-w[j] * dd / den);
                dzu(a, j) += wt * (w[j] * dd / den);
                ds(i, j) += wt * (-0.5 * w[j] / den + 0.5 * w[j] * w[j] * dd * dd / (den * den));
                dtheta[j] += wt * (-0.5 * s(i, j) / den - 0.5 * dd * dd / (den * den));
            }
        }

    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b <= a; ++b) {
                const double mult = (a == b) ? 1.0 : 2.0;
                const double wt = mult * g2(a, b) * psi2_entry(mu, s, zu, xi.theta, i, a, b);
                dts += 2.0 * wt / ts;
                for (Eigen::Index j = 0; j < kz; ++j) {
                    const double den = 2.0 * w[j] * s(i, j) + 1.0;
                    const double delta = zu(a, j) - zu(b, j);
                    const double e = mu(i, j) - 0.5 * (zu(a, j) + zu(b, j));
                    dmu(i, j) += wt * (-2.0 * w[j] * e / den);
                    ds(i, j) += wt * (-w[j] / den + 2.0 * w[j] * w[j] * e * e / (den * den));
                    dzu(a, j) += wt * (-0.5 * w[j] * delta + w[j] * e / den);
                    dzu(b, j) += wt * (0.5 * w[j] * delta + w[j] * e / den);
                    dtheta[j] += wt * (-s(i, j) / den - 0.25 * delta * delta - e * e / (den * den));
                }
            }

    // K_u = θ_S (k̃(Z_u) + δI)
    const Eigen::MatrixXd ku_plain = kf_matrix(zu, zu, xi.theta);
    for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index b = 0; b < m; ++b) {
            const double g = gk(a, b);
            const double kab = ku_plain(a, b);
            dts += g * (kab + (a == b ? kInducingJitter * ts : 0.0)) / ts;
            for (Eigen::Index j = 0; j < kz; ++j) {
                const double delta = zu(a, j) - zu(b, j);
                dzu(a, j) += g * (-w[j] * delta * kab);
                dzu(b, j) += g * (w[j] * delta * kab);
                dtheta[j] += g * (-0.5 * delta * delta * kab);
            }
        }

    grad->mu = dmu;
    grad->inducing = dzu;
    grad->chol.assign(kz, Eigen::MatrixXd());
    grad->log_hyper = Eigen::VectorXd::Zero(kx + kz + 2);
    grad->log_hyper.segment(kx, kz) = dtheta.cwiseProduct(w);
    grad->log_hyper[kx + kz] = dts * ts;
    grad->log_hyper[kx + kz + 1] = dbeta * beta;

    if (with_kl) kz_inv = chol_kz->inverse();
    Eigen::MatrixXd gkz = Eigen::MatrixXd::Zero(n, n);  // ∂KL/∂K_z
    for (Eigen::Index j = 0; j < kz; ++j) {
        const Eigen::MatrixXd& l = q.chol[j];
        Eigen::MatrixXd gl = 2.0 * ds.col(j).asDiagonal() * l;
        if (with_kl) {
            const Eigen::MatrixXd l_inv_t =
                l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n, n)).transpose();
            gl += -kz_inv * l + l_inv_t;
            grad->mu.col(j) -= kz_inv * mu.col(j);
            const Eigen::MatrixXd kinv_m = kz_inv * (q.covariance(j) + mu.col(j) * mu.col(j).transpose());
            gkz += 0.5 * (kz_inv - kinv_m * kz_inv);
        }
        Eigen::MatrixXd tri = gl.triangularView<Eigen::Lower>();
        tri.diagonal().array() *= l.diagonal().array();
        grad->chol[j] = std::move(tri);
    }
    if (with_kl) {
        const Eigen::MatrixXd kz_plain = kz_matrix(x, x, xi.sigma, false);
        for (Eigen::Index l = 0; l < kx; ++l) {
            double acc = 0.0;
            for (Eigen::Index b = 0; b < n; ++b)
                for (Eigen::Index a = 0; a < n; ++a) {
                    const double dx = x(a, l) - x(b, l);
                    acc += gkz(a, b) * (-0.5 * dx * dx * kz_plain(a, b));
                }
            grad->log_hyper[l] = -acc * xi.sigma.precisions[l];
        }
    }
    return out;
}

} // namespace detail

inline PsiStats psi_statistics(const VariationalState& q, const ThetaKernelParams& theta) {
    q.validate();
    theta.validate();
    if (theta.dim() != q.latent_dim()) throw InputError("psi_statistics: latent dimension mismatch");
    const Eigen::MatrixXd s = q.marginal_variances();
    PsiStats out;
    out.psi0 = static_cast<double>(q.size()) * theta.signal_variance;
    out.psi1 = detail::psi1_matrix(q.mu, s, q.inducing, theta);
    out.psi2 = detail::psi2_matrix(q.mu, s, q.inducing, theta);
    return out;
}

/// Σ_i F̃_i: the collapsed inducing-point bound with the optimal φ(u) integrated out.
inline double collapsed_bound(const Eigen::MatrixXd& y, const VariationalState& q,
                              const ThetaKernelParams& theta, double beta) {
    q.validate();
    if (y.rows() != q.size()) throw InputError("collapsed_bound: Y rows differ from q");
    HyperParams xi;
    xi.theta = theta;
    xi.beta = beta;
    xi.sigma.precisions = Eigen::VectorXd::Ones(1);
    return detail::evaluate_bound(y, Eigen::MatrixXd(), q, xi, false, nullptr).fit;
}

/// KL(q(Z) || p(Z | X, σ)) summed over latent dimensions.
inline double kl_qz_prior(const VariationalState& q, const Eigen::MatrixXd& x,
                          const SigmaKernelParams& sigma) {
    q.validate();
    if (x.rows() != q.size()) throw InputError("kl_qz_prior: X rows differ from q");
    const CholFactor kz = latent_prior_factor(x, sigma);
    const double n = static_cast<double>(q.size());
    double kl = 0.0;
    for (Eigen::Index j = 0; j < q.latent_dim(); ++j) {
        const Eigen::MatrixXd wl = kz.solve_lower(q.chol[j]);
        const Eigen::VectorXd wm = kz.solve_lower(q.mu.col(j));
        kl += 0.5 * (wl.squaredNorm() + wm.squaredNorm() - n + kz.log_det() -
                     2.0 * q.chol[j].diagonal().array().log().sum());
    }
    return kl;
}

inline double elbo(const Dataset& data, const VariationalState& q, const HyperParams& xi) {
    q.validate();
    xi.validate();
    const auto r = detail::evaluate_bound(data.Y, data.X, q, xi, true, nullptr);
    return r.fit - r.kl;
}

inline ElboGradient elbo_gradient(const Dataset& data, const VariationalState& q, const HyperParams& xi,
                                  double* value = nullptr) {
    q.validate();
    xi.validate();
    ElboGradient g;
    const auto r = detail::evaluate_bound(data.Y, data.X, q, xi, true, &g);
    if (value != nullptr) *value = r.fit - r.kl;
    return g;
}

/// Flat unconstrained coordinates for a variational state:
/// [μ (column-major), per-factor lower triangles (diag as log), Z_u (column-major)].
class VariationalPacking {
public:
    VariationalPacking(Eigen::Index n, Eigen::Index kz, Eigen::Index m) : n_(n), kz_(kz), m_(m) {}

    [[nodiscard]] Eigen::Index size() const noexcept {
        return n_ * kz_ + kz_ * n_ * (n_ + 1) / 2 + m_ * kz_;
    }

    [[nodiscard]] Eigen::VectorXd pack(const VariationalState& q) const {
        Eigen::VectorXd v(size());
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index i = 0; i < n_; ++i) v[k++] = q.mu(i, j);
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index c = 0; c < n_; ++c)
                for (Eigen::Index r = c; r < n_; ++r)
                    v[k++] = (r == c) ? std::log(q.chol[j](r, c)) : q.chol[j](r, c);
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index a = 0; a < m_; ++a) v[k++] = q.inducing(a, j);
        return v;
    }

    [[nodiscard]] VariationalState unpack(const double* v) const {
        VariationalState q;
        q.mu.resize(n_, kz_);
        q.inducing.resize(m_, kz_);
        q.chol.assign(kz_, Eigen::MatrixXd::Zero(n_, n_));
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index i = 0; i < n_; ++i) q.mu(i, j) = v[k++];
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index c = 0; c < n_; ++c)
                for (Eigen::Index r = c; r < n_; ++r) {
                    const double raw = v[k++];
                    q.chol[j](r, c) = (r == c) ? std::exp(raw) : raw;
                }
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index a = 0; a < m_; ++a) q.inducing(a, j) = v[k++];
        return q;
    }

    [[nodiscard]] Eigen::VectorXd pack_gradient(const ElboGradient& g) const {
        Eigen::VectorXd v(size());
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index i = 0; i < n_; ++i) v[k++] = g.mu(i, j);
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index c = 0; c < n_; ++c)
                for (Eigen::Index r = c; r < n_; ++r) v[k++] = g.chol[j](r, c);
        for (Eigen::Index j = 0; j < kz_; ++j)
            for (Eigen::Index a = 0; a < m_; ++a) v[k++] = g.inducing(a, j);
        return v;
    }

private:
    Eigen::Index n_, kz_, m_;
};

/// Leading k_z principal-component scores of Y, scaled to unit sample variance.
inline Eigen::MatrixXd pca_scores(const Eigen::MatrixXd& y, Eigen::Index kz) {
    if (kz > y.cols()) throw InputError("PCA initialisation needs k_z <= k_y");
    const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(yc, Eigen::ComputeThinU);
    Eigen::MatrixXd scores = svd.matrixU().leftCols(kz) * std::sqrt(static_cast<double>(y.rows()));
    // Fix the SVD sign ambiguity so the largest-magnitude entry is positive.
    for (Eigen::Index j = 0; j < kz; ++j) {
        Eigen::Index idx = 0;
        scores.col(j).cwiseAbs().maxCoeff(&idx);
        if (scores(idx, j) < 0.0) scores.col(j) *= -1.0;
    }
    return scores;
}

/// Lloyd iterations seeded with evenly spaced rows; returns M centres.
inline Eigen::MatrixXd kmeans_centres(const Eigen::MatrixXd& pts, Eigen::Index m, int iterations = 20) {
    const auto n = pts.rows();
    if (m < 1 || m > n) throw InputError("kmeans_centres: need 1 <= M <= N");
    if (m == n) return pts;
    Eigen::MatrixXd centres(m, pts.cols());
    for (Eigen::Index a = 0; a < m; ++a) {
        const auto idx = (m == 1) ? 0 : static_cast<Eigen::Index>(std::llround(
                                            static_cast<double>(a) * static_cast<double>(n - 1) /
                                            static_cast<double>(m - 1)));
        centres.row(a) = pts.row(idx);
    }
    std::vector<Eigen::Index> assign(n, 0);
    for (int it = 0; it < iterations; ++it) {
        for (Eigen::Index i = 0; i < n; ++i) {
            (centres.rowwise() - pts.row(i)).rowwise().squaredNorm().minCoeff(&assign[i]);
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(m, pts.cols());
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(m);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[i]) += pts.row(i);
            counts[assign[i]] += 1.0;
        }
        for (Eigen::Index a = 0; a < m; ++a)
            if (counts[a] > 0.0) centres.row(a) = sums.row(a) / counts[a];
    }
    return centres;
}

/// PCA means, S_j = 0.5·I, inducing inputs from k-means over the means.
inline VariationalState initial_variational_state(const Eigen::MatrixXd& y, Eigen::Index kz,
                                                  Eigen::Index m) {
    VariationalState q;
    q.mu = pca_scores(y, kz);
    q.chol.assign(kz, std::sqrt(0.5) * Eigen::MatrixXd::Identity(y.rows(), y.rows()));
    q.inducing = kmeans_centres(q.mu, m);
    return q;
}

inline Eigen::Index default_inducing_count(Eigen::Index n) { return std::min<Eigen::Index>(n, 20); }

struct FitOptions {
    int max_iterations = 500;
    double relative_tolerance = 1e-6;
};

struct VariationalFit {
    VariationalState state;
    double elbo = 0.0;
    std::vector<double> trace;  // ELBO after each accepted step, starting at the initial value
    int iterations = 0;
};

struct MlFit {
    HyperParams hyper;
    VariationalState state;
    double elbo = 0.0;
    std::vector<double> restart_elbos;
    std::vector<double> restart_initial_elbos;
    int best_restart = 0;
};

namespace detail {

class ElboObjective final : public ceres::FirstOrderFunction {
public:
    ElboObjective(const Dataset& data, const HyperParams& xi, Eigen::Index m, bool optimize_hyper)
        : data_(data), xi_(xi), packing_(data.size(), xi.latent_dim(), m),
          optimize_hyper_(optimize_hyper) {}

    bool Evaluate(const double* params, double* cost, double* gradient) const override {
        try {
            const VariationalState q = packing_.unpack(params);
            const HyperParams xi = hyper_at(params);
            double value = 0.0;
            if (gradient == nullptr) {
                const auto r = evaluate_bound(data_.Y, data_.X, q, xi, true, nullptr);
                value = r.fit - r.kl;
            } else {
                ElboGradient g;
                const auto r = evaluate_bound(data_.Y, data_.X, q, xi, true, &g);
                value = r.fit - r.kl;
                const Eigen::VectorXd pg = packing_.pack_gradient(g);
                if (!pg.allFinite() || !g.log_hyper.allFinite()) return false;
                for (Eigen::Index k = 0; k < pg.size(); ++k) gradient[k] = -pg[k];
                if (optimize_hyper_)
                    for (Eigen::Index k = 0; k < g.log_hyper.size(); ++k)
                        gradient[pg.size() + k] = -g.log_hyper[k];
            }
            if (!std::isfinite(value)) return false;
            *cost = -value;
            return true;
        } catch (const Error&) {
            return false;
        }
    }

    int NumParameters() const override {
        return static_cast<int>(packing_.size() + (optimize_hyper_ ? xi_.flat_size() : 0));
    }

    [[nodiscard]] HyperParams hyper_at(const double* params) const {
        if (!optimize_hyper_) return xi_;
        Eigen::VectorXd lv = Eigen::Map<const Eigen::VectorXd>(params + packing_.size(), xi_.flat_size());
        return HyperParams::from_vector(lv.array().exp().matrix(), xi_.input_dim(), xi_.latent_dim(),
                                        xi_.sigma.jitter);
    }

    [[nodiscard]] const VariationalPacking& packing() const noexcept { return packing_; }

private:
    const Dataset& data_;
    HyperParams xi_;
    VariationalPacking packing_;
    bool optimize_hyper_;
};

struct AscentResult {
    std::vector<double> params;
    std::vector<double> trace;
    int iterations = 0;
};

inline AscentResult run_ascent(ElboObjective* objective, std::vector<double> params, const FitOptions& opt) {
    // GradientProblem takes ownership of the function.
    ceres::GradientProblem problem(objective);
    ceres::GradientProblemSolver::Options options;
    options.line_search_direction_type = ceres::LBFGS;
    options.max_num_iterations = opt.max_iterations;
    options.function_tolerance = opt.relative_tolerance;
    options.gradient_tolerance = 1e-12;
    options.parameter_tolerance = 1e-14;
    options.logging_type = ceres::SILENT;
    options.minimizer_progress_to_stdout = false;
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(options, problem, params.data(), &summary);

    AscentResult out;
    for (const auto& it : summary.iterations) out.trace.push_back(-it.cost);
    out.iterations = static_cast<int>(summary.iterations.empty() ? 0 : summary.iterations.size() - 1);
    if (out.trace.empty() || !std::isfinite(out.trace.front())) {
        std::ostringstream msg;
        msg << "variational ascent: objective not finite at the initial point (" << summary.message << ")";
        throw OptimizationError(msg.str());
    }
    if (!std::isfinite(summary.final_cost)) {
        std::ostringstream msg;
        msg << "variational ascent: non-finite ELBO after " << out.iterations << " iterations";
        throw OptimizationError(msg.str());
    }
    out.params = std::move(params);
    return out;
}

} // namespace detail

/// Local maximiser of the ELBO over (μ_j, S_j, Z_u) with ξ held fixed.
/// Starts from `init` when given, otherwise from the PCA initialisation.
inline VariationalFit fit_variational(const Dataset& data, const HyperParams& xi,
                                      const std::optional<VariationalState>& init = std::nullopt,
                                      const FitOptions& opt = {}, Eigen::Index inducing = 0) {
    data.validate();
    xi.validate();
    VariationalState start = init ? *init
                                  : initial_variational_state(data.Y, xi.latent_dim(),
                                                              inducing > 0 ? inducing
                                                                           : default_inducing_count(data.size()));
    start.validate();
    auto* objective = new detail::ElboObjective(data, xi, start.num_inducing(), false);
    const VariationalPacking packing = objective->packing();
    const Eigen::VectorXd x0 = packing.pack(start);
    auto res = detail::run_ascent(objective, std::vector<double>(x0.data(), x0.data() + x0.size()), opt);

    VariationalFit fit;
    fit.state = packing.unpack(res.params.data());
    fit.elbo = elbo(data, fit.state, xi);
    fit.trace = std::move(res.trace);
    fit.iterations = res.iterations;
    return fit;
}

struct MlOptions {
    Eigen::Index latent_dim = 2;
    Eigen::Index inducing = 0;  // 0 → min(N, 20)
    int restarts = 3;
    std::uint64_t seed = 1;
    double jitter = kDefaultJitter;
    int warmup_iterations = 200;
    FitOptions optimizer{1000, 1e-7};
};

/// Heuristic starting hyperparameters from the data scale.
inline HyperParams default_initial_hyper(const Dataset& data, Eigen::Index kz, double jitter) {
    HyperParams h;
    h.sigma.jitter = jitter;
    h.sigma.precisions.resize(data.input_dim());
    for (Eigen::Index l = 0; l < data.input_dim(); ++l) {
        const double range = data.X.col(l).maxCoeff() - data.X.col(l).minCoeff();
        // Lengthscale of a fifth of the input range.
        const double ls = range > 0.0 ? range / 5.0 : 1.0;
        h.sigma.precisions[l] = 1.0 / (ls * ls);
    }
    h.theta.precisions = Eigen::VectorXd::Ones(kz);
    const double var = std::max(1e-6, data.Y.array().square().mean());
    h.theta.signal_variance = var;
    h.beta = 100.0 / var;
    return h;
}

/// Type-II maximum likelihood: joint ascent of the ELBO over the variational
/// state and log hyperparameters, best of several restarts.
inline MlFit fit_ml(const Dataset& data, const MlOptions& opt = {}) {
    data.validate();
    if (opt.restarts < 1) throw InputError("fit_ml: need at least one restart");
    const Eigen::Index m = opt.inducing > 0 ? opt.inducing : default_inducing_count(data.size());
    const HyperParams base = default_initial_hyper(data, opt.latent_dim, opt.jitter);

    MlFit best;
    best.elbo = -std::numeric_limits<double>::infinity();
    std::string last_error;
    for (int r = 0; r < opt.restarts; ++r) {
        Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(r), 7));
        HyperParams h0 = base;
        VariationalState q0 = initial_variational_state(data.Y, opt.latent_dim, m);
        if (r > 0) {
            Eigen::VectorXd lv = h0.to_vector().array().log();
            for (Eigen::Index k = 0; k < lv.size(); ++k) lv[k] += 0.7 * standard_normal(rng);
            h0 = HyperParams::from_vector(lv.array().exp(), data.input_dim(), opt.latent_dim, opt.jitter);
            q0.mu += 0.3 * standard_normal_matrix(q0.mu.rows(), q0.mu.cols(), rng);
            q0.inducing = kmeans_centres(q0.mu, m);
        }
        try {
            // Settle q under the initial hyperparameters before the joint ascent;
            // starting the joint ascent from S_j = 0.5·I tends to collapse onto a
            // noise-only optimum.
            if (opt.warmup_iterations > 0)
                q0 = fit_variational(data, h0, q0, FitOptions{opt.warmup_iterations, 1e-8}).state;
            auto* objective = new detail::ElboObjective(data, h0, m, true);
            const VariationalPacking packing = objective->packing();
            Eigen::VectorXd x0(packing.size() + h0.flat_size());
            x0 << packing.pack(q0), h0.to_vector().array().log().matrix();
            auto res = detail::run_ascent(objective, std::vector<double>(x0.data(), x0.data() + x0.size()),
                                          opt.optimizer);
            Eigen::VectorXd lv = Eigen::Map<const Eigen::VectorXd>(res.params.data() + packing.size(),
                                                                   h0.flat_size());
            HyperParams h = HyperParams::from_vector(lv.array().exp(), data.input_dim(), opt.latent_dim,
                                                     opt.jitter);
            VariationalState q = packing.unpack(res.params.data());
            const double value = elbo(data, q, h);
            best.restart_initial_elbos.push_back(res.trace.front());
            best.restart_elbos.push_back(value);
            if (value > best.elbo) {
                best.elbo = value;
                best.hyper = h;
                best.state = q;
                best.best_restart = r;
            }
        } catch (const Error& e) {
            last_error = e.what();
            best.restart_initial_elbos.push_back(-std::numeric_limits<double>::infinity());
            best.restart_elbos.push_back(-std::numeric_limits<double>::infinity());
        }
    }
    if (!std::isfinite(best.elbo)) throw OptimizationError("fit_ml: every restart failed: " + last_error);
    return best;
}

} // namespace sgplvm
