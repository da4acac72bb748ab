#include "sgplvm/ess.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace sgplvm;
using testsupport::batch_means_se;
using testsupport::mean_of;

namespace {

EssState prior_only_state(const Eigen::MatrixXd& kz, const Eigen::MatrixXd& z0) {
    EssState s;
    s.prior_factor = stable_cholesky(kz);
    s.z = z0;
    s.log_likelihood = 0.0;
    return s;
}

} // namespace

TEST(Ess, ConstantLikelihoodAcceptsFirstAndKeepsPrior) {
    Eigen::MatrixXd kz(3, 3);
    kz << 1.0, 0.6, 0.2, 0.6, 1.0, 0.5, 0.2, 0.5, 1.0;
    EssState s = prior_only_state(kz, Eigen::MatrixXd::Zero(3, 1));
    auto flat = [](const Eigen::MatrixXd&) { return 0.0; };
    Rng rng(1);
    EssTrace trace;
    std::vector<std::vector<double>> first(3), second(3);
    for (int t = 0; t < 100000; ++t) {
        s = ess_step(s, flat, rng, &trace);
        ASSERT_EQ(trace.angles.size(), 1u);
        for (int a = 0; a < 3; ++a) {
            first[a].push_back(s.z(a, 0));
            second[a].push_back(s.z(a, 0) * s.z((a + 1) % 3, 0));
        }
    }
    for (int a = 0; a < 3; ++a) {
        EXPECT_NEAR(mean_of(first[a]), 0.0, 3 * batch_means_se(first[a]));
        EXPECT_NEAR(mean_of(second[a]), kz(a, (a + 1) % 3), 3 * batch_means_se(second[a]));
    }
}

TEST(Ess, TinyAnglesRecoverCurrentState) {
    Rng rng(2);
    const Eigen::MatrixXd z0 = standard_normal_matrix(4, 2, rng);
    EssState s = prior_only_state(Eigen::MatrixXd::Identity(4, 4), z0);
    // only proposals very close to α = 0 pass the slice
    auto peaked = [&](const Eigen::MatrixXd& z) { return -1e10 * (z - z0).squaredNorm(); };
    s.log_likelihood = 0.0;
    EssTrace trace;
    const auto next = ess_step(s, peaked, rng, &trace);
    EXPECT_LT((next.z - z0).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_GT(next.log_likelihood, trace.threshold);
    // the identity rotation itself
    const double alpha = 0.0;
    const Eigen::MatrixXd nu = standard_normal_matrix(4, 2, rng);
    EXPECT_EQ(Eigen::MatrixXd(nu * std::sin(alpha) + z0 * std::cos(alpha)), z0);
}

TEST(Ess, BracketShrinksAfterRejections) {
    Rng rng(3);
    Dataset d;
    d.X = standard_normal_matrix(6, 1, rng);
    d.Y = standard_normal_matrix(6, 3, rng);
    HyperParams xi = testsupport::tiny_hyper(rng, 1, 2);
    xi.beta = 200.0;
    EssState s = make_ess_state(d, xi, standard_normal_matrix(6, 2, rng));
    EssTrace trace;
    int multi = 0;
    for (int t = 0; t < 2000; ++t) {
        s = ess_step(s, d, xi, rng, &trace);
        EXPECT_GT(s.log_likelihood, trace.threshold);
        EXPECT_NEAR(s.log_likelihood, log_py_given_z(d.Y, s.z, xi.theta, xi.beta), 1e-9 * std::abs(s.log_likelihood) + 1e-9);
        // the first proposal sits on the bracket edge, so the first rejection cannot narrow it
        for (std::size_t k = 1; k < trace.bracket_widths.size(); ++k) {
            EXPECT_LE(trace.bracket_widths[k], trace.bracket_widths[k - 1]);
            if (k >= 2) EXPECT_LT(trace.bracket_widths[k], trace.bracket_widths[k - 1]);
        }
        multi += trace.angles.size() > 1 ? 1 : 0;
    }
    EXPECT_GT(multi, 100);
}

TEST(Ess, ConjugateGaussianPosterior) {
    const double y = 1.3, tau2 = 0.5;
    EssState s = prior_only_state(Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Zero(1, 1));
    auto ll = [&](const Eigen::MatrixXd& z) { return -0.5 * (y - z(0, 0)) * (y - z(0, 0)) / tau2; };
    s.log_likelihood = ll(s.z);
    Rng rng(4);
    std::vector<double> zs, dev;
    const double mean = y / (1 + tau2), var = tau2 / (1 + tau2);
    for (int t = 0; t < 100000; ++t) {
        s = ess_step(s, ll, rng);
        zs.push_back(s.z(0, 0));
        dev.push_back((s.z(0, 0) - mean) * (s.z(0, 0) - mean));
    }
    EXPECT_NEAR(mean_of(zs), mean, 3 * batch_means_se(zs));
    EXPECT_NEAR(mean_of(dev), var, 3 * batch_means_se(dev));
}

TEST(Ess, SampleLatentsMatchesGridPosterior) {
    Rng rng(5);
    const Dataset d = testsupport::tiny_dataset(rng, 2);
    const HyperParams xi = testsupport::tiny_hyper(rng);
    // posterior moments of Z on a whitened grid
    const Eigen::MatrixXd kz = testsupport::oracle_kz(d.X, xi.sigma);
    const Eigen::Matrix2d l = Eigen::Matrix2d(kz).llt().matrixL();
    const int pts = 241;
    const double radius = 7.0, h = 2 * radius / (pts - 1);
    double mass = 0, m1 = 0, m2 = 0, s11 = 0, s12 = 0;
    std::vector<double> logs;
    std::vector<Eigen::Vector2d> zs;
    for (int a = 0; a < pts; ++a)
        for (int b = 0; b < pts; ++b) {
            const Eigen::Vector2d w(-radius + a * h, -radius + b * h);
            const Eigen::Vector2d z = l * w;
            logs.push_back(testsupport::oracle_log_py_given_z(d.Y, z, xi.theta, xi.beta) - 0.5 * w.squaredNorm());
            zs.push_back(z);
        }
    const double top = *std::max_element(logs.begin(), logs.end());
    for (std::size_t k = 0; k < logs.size(); ++k) {
        const double p = std::exp(logs[k] - top);
        mass += p;
        m1 += p * zs[k][0];
        m2 += p * zs[k][1];
        s11 += p * zs[k][0] * zs[k][0];
        s12 += p * zs[k][0] * zs[k][1];
    }
    m1 /= mass;
    m2 /= mass;
    s11 /= mass;
    s12 /= mass;

    const std::vector<HyperParams> draws(60000, xi);
    Rng chain_rng(6);
    const auto out = sample_latents(d, draws, 1, Eigen::MatrixXd::Zero(2, 1), chain_rng);
    ASSERT_EQ(out.size(), draws.size());
    std::vector<double> a1, a2, b11, b12;
    for (std::size_t k = 1000; k < out.size(); ++k) {
        a1.push_back(out[k](0, 0));
        a2.push_back(out[k](1, 0));
        b11.push_back(out[k](0, 0) * out[k](0, 0));
        b12.push_back(out[k](0, 0) * out[k](1, 0));
    }
    EXPECT_NEAR(mean_of(a1), m1, 3 * batch_means_se(a1));
    EXPECT_NEAR(mean_of(a2), m2, 3 * batch_means_se(a2));
    EXPECT_NEAR(mean_of(b11), s11, 3 * batch_means_se(b11));
    EXPECT_NEAR(mean_of(b12), s12, 3 * batch_means_se(b12));
}

TEST(Ess, OneStepPreservesExactTargetDraws) {
    // exact posterior draws by rejection from the prior, with p(Y|Z) ≤ (2π/β)^(-N k_y / 2)
    Rng rng(7);
    const Dataset d = testsupport::tiny_dataset(rng, 1);
    HyperParams xi = testsupport::tiny_hyper(rng);
    xi.beta = 1.5;
    const Eigen::MatrixXd lz = Eigen::MatrixXd(testsupport::oracle_kz(d.X, xi.sigma).llt().matrixL());
    const double bound = -0.5 * static_cast<double>(d.Y.size()) * std::log(kTwoPi / xi.beta);
    std::vector<Eigen::MatrixXd> exact;
    while (exact.size() < 40000) {
        const Eigen::MatrixXd z = lz * standard_normal_matrix(2, 1, rng);
        if (std::log(uniform01(rng)) < log_py_given_z(d.Y, z, xi.theta, xi.beta) - bound) exact.push_back(z);
    }
    std::vector<double> before0, after0, before_sq, after_sq;
    for (const auto& z : exact) {
        EssState s = make_ess_state(d, xi, z);
        const auto next = ess_step(s, d, xi, rng);
        before0.push_back(z(0, 0));
        after0.push_back(next.z(0, 0));
        before_sq.push_back(z.squaredNorm());
        after_sq.push_back(next.z.squaredNorm());
    }
    // paired differences of iid pairs
    auto diff_se = [](const std::vector<double>& a, const std::vector<double>& b) {
        std::vector<double> d(a.size());
        for (std::size_t k = 0; k < a.size(); ++k) d[k] = a[k] - b[k];
        const double m = mean_of(d);
        double ss = 0;
        for (double v : d) ss += (v - m) * (v - m);
        return std::make_pair(m, std::sqrt(ss / (d.size() - 1) / d.size()));
    };
    const auto [dm, dse] = diff_se(after0, before0);
    EXPECT_NEAR(dm, 0.0, 3 * dse);
    const auto [qm, qse] = diff_se(after_sq, before_sq);
    EXPECT_NEAR(qm, 0.0, 3 * qse);
}

TEST(Ess, SampleLatentsErrors) {
    Rng rng(8);
    const Dataset d = testsupport::tiny_dataset(rng);
    const std::vector<HyperParams> draws(3, testsupport::tiny_hyper(rng));
    EXPECT_THROW(sample_latents(d, draws, 0, Eigen::MatrixXd::Zero(2, 1), rng), InputError);
    EXPECT_THROW(sample_latents(d, draws, 1, Eigen::MatrixXd::Zero(3, 1), rng), InputError);
    EXPECT_EQ(sample_latents(d, draws, 2, Eigen::MatrixXd::Zero(2, 1), rng).size(), 3u);
}
