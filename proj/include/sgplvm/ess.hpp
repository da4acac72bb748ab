#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/linalg.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

namespace sgplvm {

/// Current latent matrix with the K_z factor and log-likelihood that belong to it.
struct EssState {
    Eigen::MatrixXd z;
    CholFactor prior_factor;
    double log_likelihood = 0.0;
};

/// Optional record of one elliptical slice update.
struct EssTrace {
    std::vector<double> angles;
    std::vector<double> bracket_widths;
    double threshold = 0.0;
};

inline constexpr int kEssMaxShrinks = 1000;

/// One elliptical slice update of Z under prior columns N(0, K_z).
/// `log_likelihood(Z)` evaluates log p(Y | Z).
template <typename LogLikelihood>
EssState ess_step(const EssState& state, LogLikelihood&& log_likelihood, Rng& rng,
                  EssTrace* trace = nullptr) {
    const auto n = state.z.rows();
    const auto k = state.z.cols();
    const Eigen::MatrixXd nu =
        state.prior_factor.matrix_l().triangularView<Eigen::Lower>() * standard_normal_matrix(n, k, rng);
    const double log_h = state.log_likelihood + std::log(uniform01(rng));

    double alpha = uniform(rng, 0.0, kTwoPi);
    double lo = alpha - kTwoPi;
    double hi = alpha;
    if (trace != nullptr) {
        trace->threshold = log_h;
        trace->angles.clear();
        trace->bracket_widths.clear();
    }
    for (int it = 0; it < kEssMaxShrinks; ++it) {
        if (trace != nullptr) {
            trace->angles.push_back(alpha);
            trace->bracket_widths.push_back(hi - lo);
        }
        Eigen::MatrixXd proposal = nu * std::sin(alpha) + state.z * std::cos(alpha);
        const double ll = log_likelihood(static_cast<const Eigen::MatrixXd&>(proposal));
        if (ll > log_h) return EssState{std::move(proposal), state.prior_factor, ll};
        if (alpha < 0.0) lo = alpha;
        else hi = alpha;
        alpha = uniform(rng, lo, hi);
    }
    throw Error("ess_step: bracket did not close after 1000 shrinkage steps");
}

/// ESS for Z given fixed ξ on the SGPLVM likelihood log p(Y | Z, θ, β).
inline EssState make_ess_state(const Dataset& data, const HyperParams& xi, Eigen::MatrixXd z) {
    EssState s;
    s.prior_factor = latent_prior_factor(data.X, xi.sigma);
    s.log_likelihood = log_py_given_z(data.Y, z, xi.theta, xi.beta);
    s.z = std::move(z);
    return s;
}

inline EssState ess_step(const EssState& state, const Dataset& data, const HyperParams& xi, Rng& rng,
                         EssTrace* trace = nullptr) {
    auto ll = [&](const Eigen::MatrixXd& z) {
        try {
            return log_py_given_z(data.Y, z, xi.theta, xi.beta);
        } catch (const FactorizationError&) {
            return -std::numeric_limits<double>::infinity();
        }
    };
    return ess_step(state, ll, rng, trace);
}

/// One latent draw per hyperparameter draw: the ESS chain is advanced
/// `steps_per_draw` times from the previous latent state under each ξ^(g).
/// The K_z factor and likelihood are recomputed only when ξ changes.
inline std::vector<Eigen::MatrixXd> sample_latents(const Dataset& data, const std::vector<HyperParams>& draws,
                                                   int steps_per_draw, const Eigen::MatrixXd& z0, Rng& rng) {
    if (steps_per_draw < 1) throw InputError("sample_latents: need at least one step per draw");
    if (z0.rows() != data.size()) throw InputError("sample_latents: initial Z has wrong row count");
    std::vector<Eigen::MatrixXd> out;
    out.reserve(draws.size());
    EssState state;
    state.z = z0;
    Eigen::VectorXd current;
    for (const auto& xi : draws) {
        const Eigen::VectorXd v = xi.to_vector();
        if (current.size() != v.size() || current != v) {
            state = make_ess_state(data, xi, std::move(state.z));
            current = v;
        }
        for (int s = 0; s < steps_per_draw; ++s) state = ess_step(state, data, xi, rng);
        out.push_back(state.z);
    }
    return out;
}

} // namespace sgplvm
