#include "sgplvm/kernels.hpp"
#include "sgplvm/linalg.hpp"
#include "sgplvm/random.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

using namespace sgplvm;

namespace {

SigmaKernelParams sigma_of(std::initializer_list<double> p, double jitter = kDefaultJitter) {
    SigmaKernelParams s;
    s.precisions = Eigen::VectorXd(static_cast<Eigen::Index>(p.size()));
    Eigen::Index k = 0;
    for (double v : p) s.precisions[k++] = v;
    s.jitter = jitter;
    return s;
}

ThetaKernelParams theta_of(double sv, std::initializer_list<double> p) {
    ThetaKernelParams t;
    t.signal_variance = sv;
    t.precisions = Eigen::VectorXd(static_cast<Eigen::Index>(p.size()));
    Eigen::Index k = 0;
    for (double v : p) t.precisions[k++] = v;
    return t;
}

} // namespace

TEST(Kernels, SinglePointWithJitterIsOnePlusEps) {
    Eigen::MatrixXd x(1, 2);
    x << 0.3, -1.2;
    const auto k = kz_matrix(x, x, sigma_of({0.7, 3.0}, 1e-3), true);
    EXPECT_DOUBLE_EQ(k(0, 0), 1.0 + 1e-3);
}

TEST(Kernels, ZeroPrecisionGivesAllOnes) {
    Eigen::MatrixXd a(3, 1), b(2, 1);
    a << 0, 1, 5;
    b << -2, 7;
    const auto k = kz_matrix(a, b, sigma_of({0.0}), false);
    EXPECT_TRUE(k.isApprox(Eigen::MatrixXd::Ones(3, 2)));
}

TEST(Kernels, KzScalarValue) {
    Eigen::MatrixXd a(1, 1), b(1, 1);
    a << 0.0;
    b << 1.0;
    EXPECT_NEAR(kz_matrix(a, b, sigma_of({2.0}), false)(0, 0), 0.367879, 1e-6);
    EXPECT_NEAR(kz_matrix(a, b, sigma_of({2.0}), false)(0, 0), std::exp(-1.0), 1e-15);
}

TEST(Kernels, KfZeroDistanceIsSignalVariance) {
    Eigen::MatrixXd z(1, 2);
    z << 0.4, 0.9;
    EXPECT_DOUBLE_EQ(kf_matrix(z, z, theta_of(2.5, {1.0, 4.0}))(0, 0), 2.5);
}

TEST(Kernels, KfScalarValue) {
    Eigen::MatrixXd a(1, 1), b(1, 1);
    a << 0.0;
    b << 1.0;
    EXPECT_NEAR(kf_matrix(a, b, theta_of(1.5, {2.0}))(0, 0), 0.551819, 1e-6);
}

TEST(Kernels, SwapGivesTranspose) {
    Rng rng(3);
    const Eigen::MatrixXd a = standard_normal_matrix(4, 2, rng), b = standard_normal_matrix(3, 2, rng);
    const auto th = theta_of(1.3, {0.5, 2.0});
    EXPECT_TRUE(kf_matrix(a, b, th).isApprox(kf_matrix(b, a, th).transpose(), 1e-15));
    const auto sg = sigma_of({0.5, 2.0});
    EXPECT_TRUE(kz_matrix(a, b, sg, false).isApprox(kz_matrix(b, a, sg, false).transpose(), 1e-15));
}

TEST(Kernels, MatchesDenseLoop) {
    Rng rng(4);
    const Eigen::MatrixXd x = standard_normal_matrix(6, 3, rng);
    const auto sg = sigma_of({0.3, 1.1, 2.0}, 1e-6);
    EXPECT_LT((kz_matrix(x, sg) - testsupport::oracle_kz(x, sg)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Kernels, RejectsBadInput) {
    Eigen::MatrixXd a(2, 1);
    a << 0.0, std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(kz_matrix(a, a, sigma_of({1.0}), false), InputError);
    Eigen::MatrixXd ok(2, 1);
    ok << 0.0, 1.0;
    EXPECT_THROW(kz_matrix(ok, ok, sigma_of({-1.0}), false), InputError);
    EXPECT_THROW(kf_matrix(ok, ok, theta_of(1.0, {-0.5})), InputError);
    EXPECT_THROW(kf_matrix(a, ok, theta_of(1.0, {1.0})), InputError);
    Eigen::MatrixXd wrong(2, 2);
    wrong.setZero();
    EXPECT_THROW(kf_matrix(wrong, wrong, theta_of(1.0, {1.0})), InputError);
    Eigen::MatrixXd three(3, 1);
    three.setZero();
    EXPECT_THROW(kz_matrix(ok, three, sigma_of({1.0}), true), InputError);
}

TEST(KernelProperties, SymmetricAndFactorizableWithSmallJitter) {
    Rng rng(11);
    const std::vector<double> small{0.0, 1e-10, 1e-8, 1e-6};
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::Index n = 2 + trial % 9;
        const Eigen::MatrixXd x = standard_normal_matrix(n, 2, rng);
        const auto sg = sigma_of({uniform(rng, 0.01, 5.0), uniform(rng, 0.01, 5.0)}, 1e-6);
        const Eigen::MatrixXd kz = kz_matrix(x, sg);
        EXPECT_EQ((kz - kz.transpose()).cwiseAbs().maxCoeff(), 0.0);
        EXPECT_NO_THROW(stable_cholesky(kz, small));

        const auto th = theta_of(uniform(rng, 0.1, 3.0), {uniform(rng, 0.01, 5.0), uniform(rng, 0.01, 5.0)});
        Eigen::MatrixXd kf = kf_matrix(x, x, th);
        EXPECT_EQ((kf - kf.transpose()).cwiseAbs().maxCoeff(), 0.0);
        kf.diagonal().array() += 1e-6;
        EXPECT_NO_THROW(stable_cholesky(kf, small));
    }
}

TEST(KernelProperties, KfLinearInSignalVariance) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::MatrixXd a = standard_normal_matrix(5, 2, rng), b = standard_normal_matrix(4, 2, rng);
        const double c = uniform(rng, 0.1, 10.0);
        const auto th = theta_of(uniform(rng, 0.1, 3.0), {uniform(rng, 0.1, 3.0), uniform(rng, 0.1, 3.0)});
        auto scaled = th;
        scaled.signal_variance *= c;
        EXPECT_LT((kf_matrix(a, b, scaled) - c * kf_matrix(a, b, th)).cwiseAbs().maxCoeff(), 1e-14 * c);
    }
}

TEST(Cholesky, IdentityFactor) {
    const auto f = stable_cholesky(Eigen::MatrixXd::Identity(4, 4));
    EXPECT_TRUE(f.matrix_l().isApprox(Eigen::MatrixXd::Identity(4, 4)));
    EXPECT_DOUBLE_EQ(f.log_det(), 0.0);
    EXPECT_DOUBLE_EQ(f.jitter_used(), 0.0);
}

TEST(Cholesky, DiagonalHandFactor) {
    Eigen::MatrixXd m(2, 2);
    m << 4, 0, 0, 9;
    const auto f = stable_cholesky(m);
    Eigen::MatrixXd expected(2, 2);
    expected << 2, 0, 0, 3;
    EXPECT_TRUE(f.matrix_l().isApprox(expected, 1e-15));
    EXPECT_NEAR(f.log_det(), std::log(36.0), 1e-14);
}

TEST(Cholesky, RankDeficientEscalates) {
    Eigen::MatrixXd m(2, 2);
    m << 1, 1, 1, 1;
    const auto f = stable_cholesky(m);
    EXPECT_GT(f.jitter_used(), 0.0);
    Eigen::MatrixXd loaded = m;
    loaded.diagonal().array() += f.jitter_used();
    EXPECT_LT((f.reconstruct() - loaded).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cholesky, AllLevelsFailCarriesLastJitter) {
    Eigen::MatrixXd m(2, 2);
    m << -1, 0, 0, 1;
    try {
        (void)stable_cholesky(m);
        FAIL() << "expected a factorization error";
    } catch (const FactorizationError& e) {
        EXPECT_DOUBLE_EQ(e.last_jitter(), kDefaultJitterSchedule.back());
    }
}

TEST(Cholesky, RejectsMalformedInput) {
    Eigen::MatrixXd ns(2, 2);
    ns << 1, 0.5, 0.2, 1;
    EXPECT_THROW(stable_cholesky(ns), InputError);
    EXPECT_THROW(stable_cholesky(Eigen::MatrixXd::Ones(2, 3)), InputError);
    Eigen::MatrixXd nan = Eigen::MatrixXd::Identity(2, 2);
    nan(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(stable_cholesky(nan), InputError);
}

TEST(Cholesky, RoundTripOnWellConditioned) {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const Eigen::Index n = 2 + trial % 12;
        const Eigen::MatrixXd a = standard_normal_matrix(n, n, rng);
        Eigen::MatrixXd m = a * a.transpose();
        m.diagonal().array() += static_cast<double>(n);
        const auto f = stable_cholesky(m);
        Eigen::MatrixXd loaded = m;
        loaded.diagonal().array() += f.jitter_used();
        EXPECT_LE((f.reconstruct() - loaded).cwiseAbs().maxCoeff(), 1e-10 * m.cwiseAbs().maxCoeff());
        EXPECT_TRUE((f.matrix_l().diagonal().array() > 0).all());
        EXPECT_NEAR(f.log_det(), std::log(m.determinant()), 1e-9 * std::max(1.0, std::abs(f.log_det())));
        const Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(n, -1, 1);
        EXPECT_LT((m * f.solve(b) - b).norm(), 1e-9);
    }
}

TEST(LogSumExp, StableAndEdgeCases) {
    const std::vector<double> v{1000.0, 1000.0};
    EXPECT_NEAR(log_sum_exp(v), 1000.0 + std::log(2.0), 1e-12);
    const std::vector<double> neg{-std::numeric_limits<double>::infinity()};
    EXPECT_EQ(log_sum_exp(neg), -std::numeric_limits<double>::infinity());
}
