#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/linalg.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/random.hpp"
#include "sgplvm/variational.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sgplvm {

// ---------------------------------------------------------------------------
// Importance-sampling estimate of p(Y | X, ξ)
// ---------------------------------------------------------------------------

/// Draws from q(Z) and evaluates log q at the draws, with the factors cached.
class VariationalSampler {
public:
    explicit VariationalSampler(VariationalState q) : q_(std::move(q)) {
        q_.validate();
        log_det_.resize(q_.latent_dim());
        for (Eigen::Index j = 0; j < q_.latent_dim(); ++j)
            log_det_[j] = 2.0 * q_.chol[j].diagonal().array().log().sum();
    }

    /// Returns Z ~ q and writes log q(Z).
    Eigen::MatrixXd draw(Rng& rng, double& log_q) const {
        const auto n = q_.size();
        const Eigen::MatrixXd eps = standard_normal_matrix(n, q_.latent_dim(), rng);
        Eigen::MatrixXd z(n, q_.latent_dim());
        log_q = 0.0;
        for (Eigen::Index j = 0; j < q_.latent_dim(); ++j) {
            z.col(j) = q_.mu.col(j) + q_.chol[j].triangularView<Eigen::Lower>() * eps.col(j);
            log_q += -0.5 * eps.col(j).squaredNorm() - 0.5 * log_det_[j] -
                     0.5 * static_cast<double>(n) * kLog2Pi;
        }
        return z;
    }

    [[nodiscard]] const VariationalState& state() const noexcept { return q_; }

private:
    VariationalState q_;
    std::vector<double> log_det_;
};

/// log of (1/Q) Σ_q p(Y|Z_q,θ,β) p(Z_q|X,σ) / q(Z_q), Z_q iid from q.
/// All Q proposals are drawn first, then weights are reduced in draw order.
inline double log_pseudo_marginal(const Dataset& data, const HyperParams& xi,
                                  const VariationalSampler& sampler, int num_samples, Rng& rng,
                                  std::vector<double>* log_weights = nullptr) {
    if (num_samples < 1) throw InputError("log_pseudo_marginal: need at least one sample");
    if (sampler.state().size() != data.size())
        throw InputError("log_pseudo_marginal: q does not match the dataset size");
    const CholFactor kz = latent_prior_factor(data.X, xi.sigma);
    std::vector<double> lw(static_cast<std::size_t>(num_samples));
    for (int s = 0; s < num_samples; ++s) {
        double log_q = 0.0;
        const Eigen::MatrixXd z = sampler.draw(rng, log_q);
        double ll = -std::numeric_limits<double>::infinity();
        try {
            ll = log_py_given_z(data.Y, z, xi.theta, xi.beta);
        } catch (const FactorizationError&) {
        }
        lw[s] = ll + gaussian_columns_logpdf(kz, z) - log_q;
        if (std::isnan(lw[s])) lw[s] = -std::numeric_limits<double>::infinity();
    }
    const double lse = log_sum_exp(lw);
    if (!std::isfinite(lse))
        throw EstimatorError("log_pseudo_marginal: every importance weight is zero");
    if (log_weights != nullptr) *log_weights = lw;
    return lse - std::log(static_cast<double>(num_samples));
}

inline double log_pseudo_marginal(const Dataset& data, const HyperParams& xi, const VariationalState& q,
                                  int num_samples, Rng& rng) {
    return log_pseudo_marginal(data, xi, VariationalSampler(q), num_samples, rng);
}

// ---------------------------------------------------------------------------
// Log transform of positive blocks
// ---------------------------------------------------------------------------

inline Eigen::VectorXd log_transform(const Eigen::VectorXd& xi) {
    if (!((xi.array() > 0.0).all()) || !xi.allFinite())
        throw InputError("log_transform: components must be strictly positive");
    return xi.array().log();
}

inline Eigen::VectorXd inverse_log_transform(const Eigen::VectorXd& eta) { return eta.array().exp(); }

/// log |∂η/∂ξ| = -Σ log ξ.
inline double log_jacobian(const Eigen::VectorXd& xi) { return -log_transform(xi).sum(); }

// ---------------------------------------------------------------------------
// Blocks and adaptive proposals
// ---------------------------------------------------------------------------

/// Ordered partition of the flat hyperparameter indices into Gibbs blocks.
struct BlockSpec {
    std::vector<std::vector<int>> blocks;

    void validate(Eigen::Index dim) const {
        if (blocks.empty()) throw InputError("block spec: no blocks");
        std::vector<int> seen(static_cast<std::size_t>(dim), 0);
        for (const auto& b : blocks) {
            if (b.empty()) throw InputError("block spec: empty block");
            for (int c : b) {
                if (c < 0 || c >= dim) throw InputError("block spec: component index out of range");
                ++seen[static_cast<std::size_t>(c)];
            }
        }
        for (int s : seen)
            if (s != 1) throw InputError("block spec: every component must appear in exactly one block");
    }

    /// (σ_1..σ_kx, θ_1..θ_kz) and (θ_S, β).
    static BlockSpec two_block_default(Eigen::Index kx, Eigen::Index kz) {
        BlockSpec spec;
        std::vector<int> first;
        for (Eigen::Index c = 0; c < kx + kz; ++c) first.push_back(static_cast<int>(c));
        spec.blocks.push_back(first);
        spec.blocks.push_back({static_cast<int>(kx + kz), static_cast<int>(kx + kz + 1)});
        return spec;
    }
};

inline Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<int>& idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[idx[k]];
    return out;
}

inline void scatter(Eigen::VectorXd& v, const std::vector<int>& idx, const Eigen::VectorXd& part) {
    for (std::size_t k = 0; k < idx.size(); ++k) v[idx[k]] = part[static_cast<Eigen::Index>(k)];
}

/// Haario-style covariance for a block from its full η history (rows are
/// η^(1)..η^(g)): s_d/(g-1) [Σ ηηᵀ - g η̄η̄ᵀ] + s_d ε I. Returns `initial`
/// when g <= g₀.
inline Eigen::MatrixXd adapt_covariance(const Eigen::MatrixXd& history, long g, long g0, double s_d,
                                        double eps, const Eigen::MatrixXd& initial) {
    if (g <= g0 || g < 2) return initial;
    if (history.rows() < g) throw InputError("adapt_covariance: history shorter than g");
    const Eigen::MatrixXd h = history.topRows(g);
    const Eigen::VectorXd mean = h.colwise().mean();
    const Eigen::MatrixXd outer = h.transpose() * h;
    const double gd = static_cast<double>(g);
    Eigen::MatrixXd cov = (s_d / (gd - 1.0)) * (outer - gd * mean * mean.transpose());
    cov.diagonal().array() += s_d * eps;
    return cov;
}

/// Random-walk proposal for one block, adapted from streaming moments of the
/// transformed chain.
class AdaptiveProposal {
public:
    AdaptiveProposal() = default;
    AdaptiveProposal(Eigen::Index dim, long g0, double eps = 1e-6, double initial_variance = 0.01)
        : g0_(g0), eps_(eps), s_d_(2.38 * 2.38 / static_cast<double>(dim)),
          cov_(initial_variance * Eigen::MatrixXd::Identity(dim, dim)),
          sum_(Eigen::VectorXd::Zero(dim)), outer_(Eigen::MatrixXd::Zero(dim, dim)) {
        factor_ = stable_cholesky(cov_);
    }

    [[nodiscard]] Eigen::Index dim() const noexcept { return sum_.size(); }
    [[nodiscard]] double scale() const noexcept { return s_d_; }
    [[nodiscard]] long count() const noexcept { return count_; }
    [[nodiscard]] const Eigen::MatrixXd& covariance() const noexcept { return cov_; }
    [[nodiscard]] const CholFactor& factor() const noexcept { return factor_; }

    /// Adds η^(g) to the running moments; re-estimates Σ once g > g₀.
    void record(const Eigen::VectorXd& eta) {
        ++count_;
        sum_ += eta;
        outer_ += eta * eta.transpose();
        if (count_ > g0_ && count_ >= 2) {
            const double g = static_cast<double>(count_);
            const Eigen::VectorXd mean = sum_ / g;
            Eigen::MatrixXd cov = (s_d_ / (g - 1.0)) * (outer_ - g * mean * mean.transpose());
            cov = 0.5 * (cov + cov.transpose());
            cov.diagonal().array() += s_d_ * eps_;
            cov_ = std::move(cov);
            factor_ = stable_cholesky(cov_);
        }
    }

    Eigen::VectorXd propose(const Eigen::VectorXd& eta, Rng& rng) const {
        const Eigen::VectorXd e = standard_normal_matrix(dim(), 1, rng);
        return eta + factor_.matrix_l() * e;
    }

private:
    long g0_ = 0;
    double eps_ = 1e-6;
    double s_d_ = 1.0;
    long count_ = 0;
    Eigen::MatrixXd cov_;
    Eigen::VectorXd sum_;
    Eigen::MatrixXd outer_;
    CholFactor factor_;
};

// ---------------------------------------------------------------------------
// Metropolis-Hastings within Gibbs
// ---------------------------------------------------------------------------

/// Current point of a chain and the retained estimate that belongs to it.
struct ChainState {
    Eigen::VectorXd xi;
    double log_estimate = 0.0;
};

struct ChainRecord {
    long g = 0;
    Eigen::VectorXd xi;
    double log_estimate = 0.0;
    std::vector<char> accepted;
};

/// Estimator: double(const Eigen::VectorXd& xi, Rng&), returns log p̃(Y | ξ).
/// Prior: double(const Eigen::VectorXd& xi), returns log p(ξ).
template <typename Estimator, typename LogPrior>
bool mh_block_step(ChainState& state, const std::vector<int>& block, const AdaptiveProposal& proposal,
                   Estimator&& estimator, LogPrior&& log_prior, Rng& rng) {
    const Eigen::VectorXd xi_r = gather(state.xi, block);
    const Eigen::VectorXd eta_prop = proposal.propose(log_transform(xi_r), rng);
    const Eigen::VectorXd xi_r_prop = inverse_log_transform(eta_prop);
    if (!xi_r_prop.allFinite() || (xi_r_prop.array() <= 0.0).any()) return false;

    Eigen::VectorXd xi_prop = state.xi;
    scatter(xi_prop, block, xi_r_prop);
    const double lp_prop = log_prior(xi_prop);
    if (!std::isfinite(lp_prop)) return false;

    const double est_prop = estimator(static_cast<const Eigen::VectorXd&>(xi_prop), rng);
    const double delta = (est_prop + lp_prop + log_jacobian(xi_r)) -
                         (state.log_estimate + log_prior(state.xi) + log_jacobian(xi_r_prop));
    const double log_u = std::log(uniform01(rng));
    if (std::isfinite(est_prop) && log_u < delta) {
        state.xi = std::move(xi_prop);
        state.log_estimate = est_prop;
        return true;
    }
    return false;
}

enum class RefreshPolicy { EverySweep, EveryBlock, FreezeAfterBurnIn, Never };

inline std::string to_string(RefreshPolicy p) {
    switch (p) {
    case RefreshPolicy::EverySweep: return "every_sweep";
    case RefreshPolicy::EveryBlock: return "every_block";
    case RefreshPolicy::FreezeAfterBurnIn: return "freeze_after_burn_in";
    case RefreshPolicy::Never: return "never";
    }
    return "unknown";
}

inline RefreshPolicy refresh_policy_from_string(const std::string& s) {
    if (s == "every_sweep") return RefreshPolicy::EverySweep;
    if (s == "every_block") return RefreshPolicy::EveryBlock;
    if (s == "freeze_after_burn_in") return RefreshPolicy::FreezeAfterBurnIn;
    if (s == "never") return RefreshPolicy::Never;
    throw InputError("unknown refresh policy '" + s + "'");
}

struct ChainControls {
    long iterations = 1000;
    long adapt_start = 200;       // g₀
    long burn_in = 250;
    double adapt_eps = 1e-6;
    double initial_variance = 0.01;
    bool adapt = true;
    std::uint64_t seed = 1;
};

struct ChainResult {
    std::vector<ChainRecord> records;
    long burn_in = 0;
    std::optional<std::string> error;
    std::vector<AdaptiveProposal> proposals;

    [[nodiscard]] std::vector<double> acceptance_rates() const {
        if (records.empty()) return {};
        std::vector<double> rates(records.front().accepted.size(), 0.0);
        for (const auto& r : records)
            for (std::size_t b = 0; b < rates.size(); ++b) rates[b] += r.accepted[b] ? 1.0 : 0.0;
        for (auto& v : rates) v /= static_cast<double>(records.size());
        return rates;
    }

    /// Records after burn-in.
    [[nodiscard]] std::span<const ChainRecord> retained() const {
        const auto skip = std::min<std::size_t>(records.size(), static_cast<std::size_t>(std::max(0L, burn_in)));
        return std::span<const ChainRecord>(records).subspan(skip);
    }
};

/// Adaptive MH-within-Gibbs over the given blocks. `after_step(g, r, state)` is
/// called after the update of block r in sweep g (e.g. to refresh the
/// importance proposal); it must not touch the retained estimate.
template <typename Estimator, typename LogPrior, typename AfterStep>
ChainResult run_chain_generic(const Eigen::VectorXd& xi0, const BlockSpec& blocks, const ChainControls& ctl,
                              Estimator&& estimator, LogPrior&& log_prior, AfterStep&& after_step) {
    blocks.validate(xi0.size());
    if (ctl.iterations < 1) throw InputError("run_chain: need at least one iteration");
    if (ctl.burn_in < 0 || ctl.burn_in >= ctl.iterations) throw InputError("run_chain: burn-in must be in [0, G)");
    if (ctl.adapt_start < 1) throw InputError("run_chain: adaptation start must be >= 1");

    Rng rng(ctl.seed);
    ChainResult result;
    result.burn_in = ctl.burn_in;
    for (const auto& b : blocks.blocks)
        result.proposals.emplace_back(static_cast<Eigen::Index>(b.size()),
                                      ctl.adapt ? ctl.adapt_start : std::numeric_limits<long>::max(),
                                      ctl.adapt_eps, ctl.initial_variance);

    ChainState state;
    state.xi = xi0;
    try {
        state.log_estimate = estimator(static_cast<const Eigen::VectorXd&>(state.xi), rng);
        if (!std::isfinite(state.log_estimate)) throw EstimatorError("run_chain: initial estimate is not finite");
        for (long g = 1; g <= ctl.iterations; ++g) {
            ChainRecord rec;
            rec.g = g;
            rec.accepted.assign(blocks.blocks.size(), 0);
            for (std::size_t r = 0; r < blocks.blocks.size(); ++r) {
                rec.accepted[r] = mh_block_step(state, blocks.blocks[r], result.proposals[r], estimator,
                                                log_prior, rng)
                                      ? 1
                                      : 0;
                result.proposals[r].record(log_transform(gather(state.xi, blocks.blocks[r])));
                if (r + 1 == blocks.blocks.size()) {
                    rec.xi = state.xi;
                    rec.log_estimate = state.log_estimate;
                    result.records.push_back(rec);
                }
                after_step(g, r, static_cast<const ChainState&>(state));
            }
        }
    } catch (const Error& e) {
        result.error = e.what();
    }
    return result;
}

struct PseudoMarginalConfig {
    BlockSpec blocks;
    std::vector<GammaPrior> priors;
    int importance_samples = 64;
    ChainControls chain;
    RefreshPolicy refresh = RefreshPolicy::EverySweep;
    int refresh_iterations = 50;
};

/// Pseudo-marginal chain for the SGPLVM hyperparameters. The importance
/// proposal starts at `q0` and is re-fitted at the current ξ after each sweep
/// or each block update according to the refresh policy.
inline ChainResult run_chain(const Dataset& data, const PseudoMarginalConfig& cfg, const HyperParams& xi0,
                             const VariationalState& q0) {
    data.validate();
    xi0.validate();
    const Eigen::Index kx = xi0.input_dim();
    const Eigen::Index kz = xi0.latent_dim();
    const double jitter = xi0.sigma.jitter;
    const PriorTable priors(cfg.priors, kx, kz);

    auto sampler = std::make_shared<VariationalSampler>(q0);
    auto estimator = [&](const Eigen::VectorXd& xi, Rng& rng) {
        return log_pseudo_marginal(data, HyperParams::from_vector(xi, kx, kz, jitter), *sampler,
                                   cfg.importance_samples, rng);
    };
    auto log_prior = [&](const Eigen::VectorXd& xi) { return priors.log_density(xi); };
    const std::size_t last = cfg.blocks.blocks.size() - 1;
    auto after_step = [&](long g, std::size_t r, const ChainState& state) {
        const bool refresh = cfg.refresh == RefreshPolicy::EveryBlock ||
                             (r == last && (cfg.refresh == RefreshPolicy::EverySweep ||
                                            (cfg.refresh == RefreshPolicy::FreezeAfterBurnIn && g <= cfg.chain.burn_in)));
        if (!refresh || (g == cfg.chain.iterations && r == last)) return;
        const HyperParams h = HyperParams::from_vector(state.xi, kx, kz, jitter);
        try {
            auto fit = fit_variational(data, h, sampler->state(), FitOptions{cfg.refresh_iterations, 1e-6});
            sampler = std::make_shared<VariationalSampler>(std::move(fit.state));
        } catch (const Error&) {
            // Keep the previous proposal; any q with full support stays valid.
        }
    };
    return run_chain_generic(xi0.to_vector(), cfg.blocks, cfg.chain, estimator, log_prior, after_step);
}

} // namespace sgplvm
