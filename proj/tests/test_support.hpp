#pragma once

// Reference computations shared by the unit and acceptance tests. Likelihood
// oracles use dense matrices and plain loops, not the library's factor code.

#include "sgplvm/model.hpp"
#include "sgplvm/random.hpp"
#include "sgplvm/variational.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

namespace testsupport {

using sgplvm::Rng;

inline double dense_se(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b, const Eigen::VectorXd& prec) {
    double s = 0.0;
    for (Eigen::Index l = 0; l < a.size(); ++l) s += prec[l] * (a[l] - b[l]) * (a[l] - b[l]);
    return std::exp(-0.5 * s);
}

/// Dense multivariate normal log density via full-pivot LU.
inline double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(cov);
    const Eigen::VectorXd d = x - mean;
    const double quad = d.dot(lu.solve(d));
    const double logdet = std::log(std::abs(lu.determinant()));
    return -0.5 * quad - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

/// log p(Y | Z, θ, β) from explicit loops.
inline double oracle_log_py_given_z(const Eigen::MatrixXd& y, const Eigen::MatrixXd& z,
                                    const sgplvm::ThetaKernelParams& th, double beta) {
    const auto n = z.rows();
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
            k(a, b) = th.signal_variance * dense_se(z.row(a), z.row(b), th.precisions) + (a == b ? 1.0 / beta : 0.0);
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.cols(); ++i) s += mvn_logpdf(y.col(i), Eigen::VectorXd::Zero(n), k);
    return s;
}

inline Eigen::MatrixXd oracle_kz(const Eigen::MatrixXd& x, const sgplvm::SigmaKernelParams& sg) {
    const auto n = x.rows();
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b) k(a, b) = dense_se(x.row(a), x.row(b), sg.precisions) + (a == b ? sg.jitter : 0.0);
    return k;
}

/// log ∫ p(Y|Z) p(Z|X) dZ for k_z = 1 and N ≤ 3 by a tensor trapezoid rule in
/// whitened coordinates Z = L w, w on [-R, R]^N, where K_z = L Lᵀ.
inline double quadrature_log_marginal(const sgplvm::Dataset& d, const sgplvm::HyperParams& xi, int points = 401,
                                      double radius = 8.0) {
    const auto n = d.X.rows();
    const Eigen::MatrixXd kz = oracle_kz(d.X, xi.sigma);
    const Eigen::MatrixXd l = kz.llt().matrixL();
    const double h = 2.0 * radius / (points - 1);
    std::vector<int> idx(static_cast<std::size_t>(n), 0);
    std::vector<double> logs;
    Eigen::VectorXd w(n);
    while (true) {
        double lw = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
            const int i = idx[static_cast<std::size_t>(k)];
            w[k] = -radius + i * h;
            lw += std::log(((i == 0 || i == points - 1) ? 0.5 : 1.0) * h) - 0.5 * w[k] * w[k] -
                  0.5 * std::log(2.0 * std::numbers::pi);
        }
        const Eigen::MatrixXd z = l * w;
        logs.push_back(oracle_log_py_given_z(d.Y, z, xi.theta, xi.beta) + lw);
        Eigen::Index k = 0;
        while (k < n && ++idx[static_cast<std::size_t>(k)] == points) idx[static_cast<std::size_t>(k++)] = 0;
        if (k == n) break;
    }
    double m = -INFINITY;
    for (double v : logs) m = std::max(m, v);
    double s = 0.0;
    for (double v : logs) s += std::exp(v - m);
    return m + std::log(s);
}

inline sgplvm::Dataset tiny_dataset(Rng& rng, Eigen::Index ky = 1, Eigen::Index n = 2) {
    sgplvm::Dataset d;
    d.X.resize(n, 1);
    for (Eigen::Index k = 0; k < n; ++k) d.X(k, 0) = k * sgplvm::uniform(rng, 0.3, 1.5);
    d.Y = 0.6 * sgplvm::standard_normal_matrix(n, ky, rng);
    return d;
}

inline sgplvm::HyperParams tiny_hyper(Rng& rng, Eigen::Index kx = 1, Eigen::Index kz = 1) {
    sgplvm::HyperParams h;
    h.sigma.precisions = Eigen::VectorXd(kx);
    for (Eigen::Index l = 0; l < kx; ++l) h.sigma.precisions[l] = sgplvm::uniform(rng, 0.3, 2.0);
    h.theta.precisions = Eigen::VectorXd(kz);
    for (Eigen::Index j = 0; j < kz; ++j) h.theta.precisions[j] = sgplvm::uniform(rng, 0.3, 2.0);
    h.theta.signal_variance = sgplvm::uniform(rng, 0.5, 1.5);
    h.beta = sgplvm::uniform(rng, 2.0, 10.0);
    return h;
}

inline sgplvm::VariationalState random_state(Rng& rng, Eigen::Index n, Eigen::Index kz, Eigen::Index m,
                                             double spread = 0.3) {
    sgplvm::VariationalState q;
    q.mu = sgplvm::standard_normal_matrix(n, kz, rng);
    for (Eigen::Index j = 0; j < kz; ++j) {
        Eigen::MatrixXd l = spread * sgplvm::standard_normal_matrix(n, n, rng);
        l = l.triangularView<Eigen::Lower>();
        for (Eigen::Index i = 0; i < n; ++i) l(i, i) = sgplvm::uniform(rng, 0.2, 0.7);
        q.chol.push_back(l);
    }
    q.inducing = sgplvm::standard_normal_matrix(m, kz, rng);
    return q;
}

/// Standard error of the mean of a correlated series by non-overlapping batch means.
inline double batch_means_se(const std::vector<double>& v, int batches = 50) {
    const std::size_t len = v.size() / static_cast<std::size_t>(batches);
    std::vector<double> means;
    for (int b = 0; b < batches; ++b) {
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) s += v[b * len + k];
        means.push_back(s / static_cast<double>(len));
    }
    double m = 0.0;
    for (double x : means) m += x;
    m /= batches;
    double ss = 0.0;
    for (double x : means) ss += (x - m) * (x - m);
    return std::sqrt(ss / (batches - 1) / batches);
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Central differences of the ELBO in the same unconstrained coordinates as
/// ElboGradient; returns the worst |g - fd| / max(1, |fd|).
inline double worst_gradient_error(const sgplvm::Dataset& d, const sgplvm::VariationalState& q,
                                   const sgplvm::HyperParams& xi, double step = 1e-5) {
    const sgplvm::VariationalPacking pack(q.size(), q.latent_dim(), q.num_inducing());
    const sgplvm::ElboGradient g = sgplvm::elbo_gradient(d, q, xi);
    const Eigen::VectorXd analytic_q = pack.pack_gradient(g);
    const Eigen::VectorXd base = pack.pack(q);
    double worst = 0.0;
    for (Eigen::Index k = 0; k < base.size(); ++k) {
        Eigen::VectorXd p = base, m = base;
        p[k] += step;
        m[k] -= step;
        const double fd = (sgplvm::elbo(d, pack.unpack(p.data()), xi) - sgplvm::elbo(d, pack.unpack(m.data()), xi)) / (2 * step);
        worst = std::max(worst, std::abs(analytic_q[k] - fd) / std::max(1.0, std::abs(fd)));
    }
    const Eigen::VectorXd hv = xi.to_vector();
    for (Eigen::Index k = 0; k < hv.size(); ++k) {
        Eigen::VectorXd lp = hv.array().log().matrix();
        Eigen::VectorXd lm = lp;
        lp[k] += step;
        lm[k] -= step;
        const auto hp = sgplvm::HyperParams::from_vector(Eigen::VectorXd(lp.array().exp().matrix()), xi.input_dim(), xi.latent_dim(), xi.sigma.jitter);
        const auto hm = sgplvm::HyperParams::from_vector(Eigen::VectorXd(lm.array().exp().matrix()), xi.input_dim(), xi.latent_dim(), xi.sigma.jitter);
        const double fd = (sgplvm::elbo(d, q, hp) - sgplvm::elbo(d, q, hm)) / (2 * step);
        worst = std::max(worst, std::abs(g.log_hyper[k] - fd) / std::max(1.0, std::abs(fd)));
    }
    return worst;
}

} // namespace testsupport
