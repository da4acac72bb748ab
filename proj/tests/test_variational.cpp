#include "sgplvm/simdata.hpp"
#include "sgplvm/variational.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace sgplvm;
using testsupport::random_state;

namespace {

ThetaKernelParams random_theta(Rng& rng, Eigen::Index kz) {
    ThetaKernelParams t;
    t.signal_variance = uniform(rng, 0.5, 2.0);
    t.precisions = Eigen::VectorXd(kz);
    for (Eigen::Index j = 0; j < kz; ++j) t.precisions[j] = uniform(rng, 0.3, 2.0);
    return t;
}

// Monte Carlo ψ₁, ψ₂ from joint draws of Z under q, with per-entry standard errors.
struct McPsi {
    Eigen::MatrixXd psi1, psi1_se, psi2, psi2_se;
};

McPsi monte_carlo_psi(const VariationalState& q, const ThetaKernelParams& th, int draws, Rng& rng) {
    const auto n = q.size(), m = q.num_inducing(), kz = q.latent_dim();
    Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(n, m), ss1 = s1, s2 = Eigen::MatrixXd::Zero(m, m), ss2 = s2;
    Eigen::MatrixXd z(n, kz);
    for (int t = 0; t < draws; ++t) {
        for (Eigen::Index j = 0; j < kz; ++j) {
            Eigen::VectorXd e(n);
            for (Eigen::Index k = 0; k < n; ++k) e[k] = standard_normal(rng);
            z.col(j) = q.mu.col(j) + q.chol[j] * e;
        }
        Eigen::MatrixXd kfu(n, m);
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < m; ++b)
                kfu(a, b) = th.signal_variance * testsupport::dense_se(z.row(a), q.inducing.row(b), th.precisions);
        const Eigen::MatrixXd p2 = kfu.transpose() * kfu;
        s1 += kfu;
        ss1 += kfu.cwiseProduct(kfu);
        s2 += p2;
        ss2 += p2.cwiseProduct(p2);
    }
    McPsi out;
    const double d = draws;
    out.psi1 = s1 / d;
    out.psi2 = s2 / d;
    out.psi1_se = ((ss1 / d - out.psi1.cwiseProduct(out.psi1)) / d).cwiseMax(0.0).cwiseSqrt();
    out.psi2_se = ((ss2 / d - out.psi2.cwiseProduct(out.psi2)) / d).cwiseMax(0.0).cwiseSqrt();
    return out;
}

VariationalState point_state(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& zu, double sd) {
    VariationalState q;
    q.mu = mu;
    for (Eigen::Index j = 0; j < mu.cols(); ++j) q.chol.push_back(sd * Eigen::MatrixXd::Identity(mu.rows(), mu.rows()));
    q.inducing = zu;
    return q;
}

double max_principal_angle_deg(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::MatrixXd qa = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
    const Eigen::MatrixXd qb = Eigen::HouseholderQR<Eigen::MatrixXd>(b).householderQ() * Eigen::MatrixXd::Identity(b.rows(), b.cols());
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(qa.transpose() * qb).singularValues();
    return std::acos(std::min(1.0, sv.minCoeff())) * 180.0 / std::numbers::pi;
}

} // namespace

TEST(Psi, Psi0IsNTimesSignalVariance) {
    Rng rng(1);
    const auto q = random_state(rng, 5, 2, 3);
    const auto th = random_theta(rng, 2);
    EXPECT_DOUBLE_EQ(psi_statistics(q, th).psi0, 5 * th.signal_variance);
}

TEST(Psi, NarrowQCollapsesToPointEvaluation) {
    Rng rng(2);
    auto q = random_state(rng, 4, 2, 2);
    for (auto& l : q.chol) l = 1e-7 * Eigen::MatrixXd::Identity(4, 4);
    const auto th = random_theta(rng, 2);
    EXPECT_LT((psi_statistics(q, th).psi1 - kf_matrix(q.mu, q.inducing, th)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Psi, MonteCarloSmallInstance) {
    Rng rng(3);
    const auto q = random_state(rng, 4, 2, 2);
    const auto th = random_theta(rng, 2);
    const auto ps = psi_statistics(q, th);
    const auto mc = monte_carlo_psi(q, th, 1000000, rng);
    EXPECT_TRUE(((ps.psi1 - mc.psi1).cwiseAbs().array() <= 3 * mc.psi1_se.array() + 1e-12).all())
        << ps.psi1 << "\n---\n" << mc.psi1;
    EXPECT_TRUE(((ps.psi2 - mc.psi2).cwiseAbs().array() <= 3 * mc.psi2_se.array() + 1e-12).all())
        << ps.psi2 << "\n---\n" << mc.psi2;
}

TEST(Psi, MonteCarloRandomInstances) {
    // 3 s.e. per entry over many entries: allow a small fraction of excursions
    Rng rng(4);
    int entries = 0, outside = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto q = random_state(rng, 4, 2, 2);
        const auto th = random_theta(rng, 2);
        const auto ps = psi_statistics(q, th);
        const auto mc = monte_carlo_psi(q, th, 100000, rng);
        const Eigen::ArrayXXd r1 = (ps.psi1 - mc.psi1).cwiseAbs().array() / (mc.psi1_se.array() + 1e-15);
        const Eigen::ArrayXXd r2 = (ps.psi2 - mc.psi2).cwiseAbs().array() / (mc.psi2_se.array() + 1e-15);
        entries += static_cast<int>(r1.size() + r2.size());
        outside += static_cast<int>((r1 > 3).count() + (r2 > 3).count());
        EXPECT_LT(std::max(r1.maxCoeff(), r2.maxCoeff()), 5.0);
        EXPECT_TRUE((ps.psi2 - ps.psi2.transpose()).cwiseAbs().maxCoeff() < 1e-12);
        EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(ps.psi2).eigenvalues().minCoeff(), -1e-12);
    }
    EXPECT_LE(outside, entries / 50 + 1);
}

TEST(Bound, BelowQuadratureLogMarginal) {
    Rng rng(5);
    for (int trial = 0; trial < 12; ++trial) {
        const Eigen::Index n = trial % 2 ? 3 : 2;
        const Dataset d = testsupport::tiny_dataset(rng, 1 + trial % 2, n);
        const HyperParams xi = testsupport::tiny_hyper(rng);
        const auto q = random_state(rng, n, 1, 1 + trial % n);
        const double quad = testsupport::quadrature_log_marginal(d, xi, n == 2 ? 401 : 61, 8.0);
        EXPECT_LT(elbo(d, q, xi), quad + 1e-9);
        // a fitted q comes closer but still stays below
        const auto fit = fit_variational(d, xi, q, FitOptions{300, 1e-10});
        EXPECT_LT(fit.elbo, quad + 1e-9);
        EXPECT_GE(fit.elbo, elbo(d, q, xi));
    }
}

TEST(Bound, DegenerateQWithAllInducingPoints) {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        const Eigen::MatrixXd mu = standard_normal_matrix(5, 2, rng), y = standard_normal_matrix(5, 3, rng);
        const auto th = random_theta(rng, 2);
        const double beta = uniform(rng, 1.0, 20.0);
        const auto q = point_state(mu, mu, 1e-7);
        EXPECT_NEAR(collapsed_bound(y, q, th, beta), log_py_given_z(y, mu, th, beta), 1e-4);
    }
}

TEST(Bound, DuplicatedColumnDoubles) {
    Rng rng(7);
    const auto q = random_state(rng, 6, 2, 3);
    const auto th = random_theta(rng, 2);
    const Eigen::MatrixXd col = standard_normal_matrix(6, 1, rng);
    Eigen::MatrixXd two(6, 2);
    two << col, col;
    EXPECT_NEAR(collapsed_bound(two, q, th, 4.0), 2 * collapsed_bound(col, q, th, 4.0), 1e-10);
}

TEST(Bound, ScalarClosedFormWithZeroData) {
    // N = M = 1, k_z = 1, Y = 0, Z_u = μ: every ψ term is a scalar Gaussian expectation
    for (double s : {1e-4, 0.1, 0.7})
        for (double beta : {0.5, 4.0, 100.0}) {
            const double ts = 1.3, w = 0.8;
            ThetaKernelParams th;
            th.signal_variance = ts;
            th.precisions = Eigen::VectorXd::Constant(1, w);
            const Eigen::MatrixXd mu = Eigen::MatrixXd::Constant(1, 1, 0.4);
            const auto q = point_state(mu, mu, std::sqrt(s));
            const double psi2 = ts * ts / std::sqrt(1 + 2 * w * s);
            const double ku = ts * (1 + kInducingJitter);
            const double oracle = 0.5 * std::log(beta) + 0.5 * std::log(ku) - 0.5 * std::log(2 * std::numbers::pi) -
                                  0.5 * std::log(beta * psi2 + ku) - 0.5 * beta * ts + 0.5 * beta * psi2 / ku;
            EXPECT_NEAR(collapsed_bound(Eigen::MatrixXd::Zero(1, 1), q, th, beta), oracle, 1e-10);
            // the trace correction is a penalty that vanishes as the noise variance grows
            EXPECT_LE(-0.5 * beta * ts + 0.5 * beta * psi2 / ku, 1e-12);
        }
}

TEST(Bound, NoisePenaltyShrinksWithNoiseVariance) {
    Rng rng(8);
    const auto q = random_state(rng, 4, 1, 2);
    const auto th = random_theta(rng, 1);
    const Eigen::MatrixXd y = Eigen::MatrixXd::Zero(4, 1);
    // for Y = 0 the bound minus the penalty-free point-mass value rises toward 0 as β → 0
    double prev = -INFINITY;
    for (double beta : {100.0, 10.0, 1.0, 0.1, 0.01}) {
        const auto ps = psi_statistics(q, th);
        const Eigen::MatrixXd ku = detail::inducing_covariance(q.inducing, th);
        const double penalty = -0.5 * beta * (ps.psi0 - ku.ldlt().solve(ps.psi2).trace());
        EXPECT_LE(penalty, 0.0);
        EXPECT_GE(penalty, prev);
        prev = penalty;
        (void)collapsed_bound(y, q, th, beta);
    }
}

TEST(Kl, ZeroAtPriorAndNonNegative) {
    Rng rng(9);
    Eigen::MatrixXd x = standard_normal_matrix(5, 2, rng);
    SigmaKernelParams sg;
    sg.precisions = Eigen::Vector2d(0.6, 1.4);
    sg.jitter = 1e-2;
    VariationalState prior;
    prior.mu = Eigen::MatrixXd::Zero(5, 2);
    const Eigen::MatrixXd l = Eigen::MatrixXd(kz_matrix(x, sg).llt().matrixL());
    prior.chol = {l, l};
    prior.inducing = Eigen::MatrixXd::Zero(2, 2);
    EXPECT_NEAR(kl_qz_prior(prior, x, sg), 0.0, 1e-9);
    for (int trial = 0; trial < 20; ++trial) EXPECT_GE(kl_qz_prior(random_state(rng, 5, 2, 2), x, sg), 0.0);
}

TEST(Kl, DenseTwoGaussianFormula) {
    Rng rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::MatrixXd x = standard_normal_matrix(2, 1, rng);
        SigmaKernelParams sg;
        sg.precisions = Eigen::VectorXd::Constant(1, uniform(rng, 0.2, 3.0));
        const auto q = random_state(rng, 2, 2, 1);
        const Eigen::MatrixXd kz = testsupport::oracle_kz(x, sg);
        const Eigen::MatrixXd kinv = kz.inverse();
        double kl = 0.0;
        for (Eigen::Index j = 0; j < 2; ++j) {
            const Eigen::MatrixXd s = q.covariance(j);
            const Eigen::VectorXd m = q.mu.col(j);
            kl += 0.5 * ((kinv * s).trace() + m.dot(kinv * m) - 2 + std::log(kz.determinant() / s.determinant()));
        }
        EXPECT_NEAR(kl_qz_prior(q, x, sg), kl, 1e-9 * std::max(1.0, std::abs(kl)));
    }
}

TEST(Elbo, EqualsBoundMinusKl) {
    Rng rng(11);
    Dataset d;
    d.X = standard_normal_matrix(6, 1, rng);
    d.Y = standard_normal_matrix(6, 2, rng);
    const HyperParams xi = testsupport::tiny_hyper(rng, 1, 2);
    const auto q = random_state(rng, 6, 2, 3);
    EXPECT_NEAR(elbo(d, q, xi), collapsed_bound(d.Y, q, xi.theta, xi.beta) - kl_qz_prior(q, d.X, xi.sigma), 1e-10);
}

TEST(Gradient, MatchesFiniteDifferences) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Dataset d;
        d.X = standard_normal_matrix(4, 1 + trial % 2, rng);
        d.Y = standard_normal_matrix(4, 2, rng);
        const HyperParams xi = testsupport::tiny_hyper(rng, d.X.cols(), 2);
        const auto q = random_state(rng, 4, 2, 2);
        EXPECT_LE(testsupport::worst_gradient_error(d, q, xi), 1e-4) << "trial " << trial;
    }
}

TEST(Gradient, KlTermVanishesForMeanAtPrior) {
    Rng rng(13);
    Dataset d;
    d.X = standard_normal_matrix(4, 1, rng);
    const Eigen::MatrixXd col = standard_normal_matrix(4, 1, rng);
    d.Y = col;
    HyperParams xi = testsupport::tiny_hyper(rng, 1, 1);
    xi.sigma.jitter = 1e-2;
    VariationalState q;
    q.mu = Eigen::MatrixXd::Zero(4, 1);
    q.chol = {Eigen::MatrixXd(kz_matrix(d.X, xi.sigma).llt().matrixL())};
    q.inducing = standard_normal_matrix(2, 1, rng);
    const auto g1 = elbo_gradient(d, q, xi);
    // fit-term gradient by finite differences of the bound alone
    for (Eigen::Index k = 0; k < 4; ++k) {
        auto qp = q, qm = q;
        qp.mu(k, 0) += 1e-5;
        qm.mu(k, 0) -= 1e-5;
        const double fd =
            (collapsed_bound(d.Y, qp, xi.theta, xi.beta) - collapsed_bound(d.Y, qm, xi.theta, xi.beta)) / 2e-5;
        EXPECT_NEAR(g1.mu(k, 0), fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
    Dataset d2 = d;
    d2.Y = Eigen::MatrixXd(4, 2);
    d2.Y << col, col;
    const auto g2 = elbo_gradient(d2, q, xi);
    EXPECT_LT((g2.mu - 2 * g1.mu).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, g1.mu.cwiseAbs().maxCoeff()));
}

TEST(Packing, RoundTrip) {
    Rng rng(14);
    const auto q = random_state(rng, 5, 2, 3);
    const VariationalPacking pack(5, 2, 3);
    const Eigen::VectorXd v = pack.pack(q);
    EXPECT_EQ(v.size(), pack.size());
    const auto back = pack.unpack(v.data());
    EXPECT_LT((back.mu - q.mu).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((back.inducing - q.inducing).cwiseAbs().maxCoeff(), 1e-15);
    for (int j = 0; j < 2; ++j) EXPECT_LT((back.chol[j] - q.chol[j]).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(State, ValidateErrors) {
    Rng rng(15);
    auto q = random_state(rng, 4, 2, 2);
    auto bad = q;
    bad.chol[0](1, 1) = -0.1;
    EXPECT_THROW(bad.validate(), InputError);
    bad = q;
    bad.inducing = Eigen::MatrixXd::Zero(5, 2);
    EXPECT_THROW(bad.validate(), InputError);
    bad = q;
    bad.chol.pop_back();
    EXPECT_THROW(bad.validate(), InputError);
}

TEST(FitVariational, AscentFixedPointAndMonotoneTrace) {
    auto [data, truth] = generate(SinusoidalSpec{30, SinusoidalCase::WellSpecified, 0.05, 3});
    const HyperParams xi = default_initial_hyper(data, 2, kDefaultJitter);
    const auto init = initial_variational_state(data.Y, 2, 10);
    const double e0 = elbo(data, init, xi);
    const FitOptions opt{20000, 1e-9};
    const auto fit = fit_variational(data, xi, init, opt);
    ASSERT_LT(fit.iterations, opt.max_iterations);
    EXPECT_GE(fit.elbo, e0);
    for (std::size_t k = 1; k < fit.trace.size(); ++k) EXPECT_GE(fit.trace[k], fit.trace[k - 1] - 1e-10);
    const auto again = fit_variational(data, xi, fit.state, opt);
    // a restarted L-BFGS may take a few more sub-tolerance steps
    EXPECT_LT(std::abs(again.elbo - fit.elbo), FitOptions{}.relative_tolerance * std::max(1.0, std::abs(fit.elbo)));
}

TEST(FitVariational, PcaInitialisationSpansPrincipalSubspace) {
    Rng rng(16);
    const Eigen::Index n = 25, kz = 2, ky = 5;
    Dataset d;
    d.X = Eigen::VectorXd::LinSpaced(n, 0, 1);
    d.Y = standard_normal_matrix(n, kz, rng) * standard_normal_matrix(kz, ky, rng);
    const auto init = initial_variational_state(d.Y, kz, 10);
    const Eigen::MatrixXd yc = d.Y.rowwise() - d.Y.colwise().mean();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(yc, Eigen::ComputeThinU);
    EXPECT_LT(max_principal_angle_deg(init.mu, svd.matrixU().leftCols(kz)), 1e-4);
    HyperParams xi = default_initial_hyper(d, kz, kDefaultJitter);
    const auto fit = fit_variational(d, xi, init, FitOptions{300, 1e-8});
    EXPECT_GE(fit.elbo, elbo(d, init, xi));
    EXPECT_THROW(initial_variational_state(d.Y, ky + 1, 10), InputError);
}

TEST(FitMl, BestRestartAndNoiseRecovery) {
    auto [data, truth] = generate(SinusoidalSpec{30, SinusoidalCase::WellSpecified, 0.05, 11});
    MlOptions opt;
    const auto ml = fit_ml(data, opt);
    ASSERT_EQ(ml.restart_elbos.size(), static_cast<std::size_t>(opt.restarts));
    for (double e : ml.restart_elbos) EXPECT_GE(ml.elbo, e);
    for (double e : ml.restart_initial_elbos) EXPECT_GE(ml.elbo, e);
    const double noise_var = 1.0 / ml.hyper.beta;
    EXPECT_GE(noise_var, 0.5 * 0.0025);
    EXPECT_LE(noise_var, 2.0 * 0.0025);
}

TEST(FitMl, RejectsZeroRestarts) {
    auto [data, truth] = generate(SinusoidalSpec{10, SinusoidalCase::WellSpecified, 0.05, 1});
    MlOptions opt;
    opt.restarts = 0;
    EXPECT_THROW(fit_ml(data, opt), InputError);
}
