#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/pm_mcmc.hpp"
#include "sgplvm/simdata.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace sgplvm::harness {

using Json = nlohmann::json;

struct DatasetSource {
    std::string source = "generated";  // "generated" | "csv"
    // generated
    SinusoidalCase which = SinusoidalCase::WellSpecified;
    long n = 30;
    double noise_sd = 0.05;
    std::uint64_t seed = 1;
    // csv
    std::string path;
    long input_dim = 1;
    long output_dim = 1;
    bool normalise = false;

    [[nodiscard]] bool generated() const { return source == "generated"; }
};

struct McmcSettings {
    long iterations = 1000;
    long adapt_start = 200;
    long burn_in = 250;
    int importance_samples = 64;
    int chains = 4;
    std::uint64_t seed = 2024;
    double initial_variance = 0.01;
    double adapt_eps = 1e-6;
    double init_noise_sd = 0.1;
    int ess_steps = 5;
};

struct VariationalSettings {
    long inducing = 0;
    RefreshPolicy refresh = RefreshPolicy::EverySweep;
    int refresh_iterations = 50;
    int max_iterations = 1000;
    double tolerance = 1e-7;
    int restarts = 3;
    int warmup_iterations = 200;
    std::uint64_t seed = 1;
    double jitter = kDefaultJitter;
};

struct PredictionSettings {
    long x_points = 100;
    std::optional<double> x_min;  // unset → 0 for generated data, data minimum otherwise
    std::optional<double> x_max;  // unset → 4π for generated data, data maximum otherwise
    long y_bins = 200;
    double y_pad_sd = 3.0;
    int latent_draws_per_sample = 1;
    long ml_draws = 1000;
    long heldout_points = 50;
    std::vector<long> heatmap_features{0};
    std::uint64_t seed = 7;
};

struct RunConfig {
    DatasetSource dataset;
    long latent_dim = 2;
    std::vector<GammaPrior> priors;  // empty → default_priors
    std::vector<std::vector<std::string>> blocks;  // empty → two-block default
    McmcSettings mcmc;
    VariationalSettings variational;
    PredictionSettings prediction;
    std::string mode = "full";  // "full" | "ml_only"

    void validate() const {
        if (dataset.source != "generated" && dataset.source != "csv")
            throw ConfigError("dataset.source must be 'generated' or 'csv'");
        if (dataset.generated() && dataset.n < 2) throw ConfigError("dataset.n must be >= 2");
        if (!dataset.generated() && dataset.path.empty()) throw ConfigError("dataset.path is required for csv input");
        if (dataset.input_dim < 1 || dataset.output_dim < 1) throw ConfigError("dataset dims must be positive");
        if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
        if (mcmc.iterations < 1) throw ConfigError("mcmc.iterations must be positive");
        if (mcmc.burn_in < 0 || mcmc.burn_in >= mcmc.iterations)
            throw ConfigError("mcmc.burn_in must lie in [0, iterations)");
        if (mcmc.adapt_start < 1) throw ConfigError("mcmc.adapt_start must be positive");
        if (mcmc.importance_samples < 1) throw ConfigError("mcmc.importance_samples must be positive");
        if (mcmc.chains < 1) throw ConfigError("mcmc.chains must be >= 1");
        if (mcmc.ess_steps < 1) throw ConfigError("mcmc.ess_steps must be positive");
        if (!(mcmc.initial_variance > 0.0)) throw ConfigError("mcmc.initial_variance must be positive");
        if (!(mcmc.init_noise_sd >= 0.0)) throw ConfigError("mcmc.init_noise_sd must be >= 0");
        if (variational.inducing < 0) throw ConfigError("variational.inducing must be >= 0");
        if (variational.refresh_iterations < 1 || variational.max_iterations < 1)
            throw ConfigError("variational iteration budgets must be positive");
        if (variational.restarts < 1) throw ConfigError("variational.restarts must be positive");
        if (prediction.x_points < 1 || prediction.y_bins < 2) throw ConfigError("prediction grid sizes too small");
        if (prediction.latent_draws_per_sample < 1 || prediction.ml_draws < 1)
            throw ConfigError("prediction draw counts must be positive");
        if (!(prediction.y_pad_sd >= 0.0)) throw ConfigError("prediction.y_pad_sd must be >= 0");
        if (mode != "full" && mode != "ml_only") throw ConfigError("mode must be 'full' or 'ml_only'");
    }

    [[nodiscard]] long input_dim() const { return dataset.generated() ? 1 : dataset.input_dim; }
    [[nodiscard]] long output_dim() const {
        return dataset.generated() ? SinusoidalSpec::kOutputs : dataset.output_dim;
    }
};

/// Ga(2, 1) on every precision, Ga(2, 0.5) on θ_S and Ga(2, 500) on β.
inline std::vector<GammaPrior> default_priors(Eigen::Index kx, Eigen::Index kz) {
    std::vector<GammaPrior> out;
    for (Eigen::Index l = 0; l < kx; ++l) out.push_back({2.0, 1.0, "sigma_" + std::to_string(l + 1), false});
    for (Eigen::Index j = 0; j < kz; ++j) out.push_back({2.0, 1.0, "theta_" + std::to_string(j + 1), false});
    out.push_back({2.0, 0.5, "theta_S", false});
    out.push_back({2.0, 500.0, "beta", false});
    return out;
}

inline std::vector<GammaPrior> resolved_priors(const RunConfig& cfg) {
    return cfg.priors.empty() ? default_priors(cfg.input_dim(), cfg.latent_dim) : cfg.priors;
}

inline BlockSpec resolved_blocks(const RunConfig& cfg) {
    const auto kx = cfg.input_dim();
    if (cfg.blocks.empty()) return BlockSpec::two_block_default(kx, cfg.latent_dim);
    const auto names = hyper_names(kx, cfg.latent_dim);
    BlockSpec spec;
    for (const auto& b : cfg.blocks) {
        std::vector<int> idx;
        for (const auto& name : b) {
            const auto it = std::find(names.begin(), names.end(), name);
            if (it == names.end()) throw ConfigError("block names unknown component '" + name + "'");
            idx.push_back(static_cast<int>(it - names.begin()));
        }
        spec.blocks.push_back(std::move(idx));
    }
    spec.validate(static_cast<Eigen::Index>(names.size()));
    return spec;
}

namespace detail {

template <typename T>
void read_opt(const Json& j, const char* key, T& out) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

inline void reject_unknown(const Json& j, const std::vector<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

} // namespace detail

inline RunConfig config_from_json(const Json& root) {
    const Json& j = root.contains("config") ? root.at("config") : root;
    detail::reject_unknown(j, {"dataset", "latent_dim", "priors", "blocks", "mcmc", "variational", "prediction", "mode"},
                           "config");
    RunConfig c;
    if (j.contains("dataset")) {
        const Json& d = j.at("dataset");
        detail::reject_unknown(d, {"source", "case", "n", "noise_sd", "seed", "path", "input_dim", "output_dim", "normalise"},
                               "dataset");
        detail::read_opt(d, "source", c.dataset.source);
        if (d.contains("case")) {
            try {
                c.dataset.which = sinusoidal_case_from_string(d.at("case").get<std::string>());
            } catch (const InputError& e) {
                throw ConfigError(e.what());
            }
        }
        detail::read_opt(d, "n", c.dataset.n);
        detail::read_opt(d, "noise_sd", c.dataset.noise_sd);
        detail::read_opt(d, "seed", c.dataset.seed);
        detail::read_opt(d, "path", c.dataset.path);
        detail::read_opt(d, "input_dim", c.dataset.input_dim);
        detail::read_opt(d, "output_dim", c.dataset.output_dim);
        detail::read_opt(d, "normalise", c.dataset.normalise);
    }
    detail::read_opt(j, "latent_dim", c.latent_dim);
    if (j.contains("priors")) {
        for (const auto& p : j.at("priors")) {
            detail::reject_unknown(p, {"target", "shape", "scale", "on_reciprocal"}, "prior");
            GammaPrior g;
            detail::read_opt(p, "target", g.target);
            detail::read_opt(p, "shape", g.shape);
            detail::read_opt(p, "scale", g.scale);
            detail::read_opt(p, "on_reciprocal", g.on_reciprocal);
            if (!(g.shape > 0.0) || !(g.scale > 0.0))
                throw ConfigError("prior on '" + g.target + "' needs shape, scale > 0");
            c.priors.push_back(g);
        }
    }
    detail::read_opt(j, "blocks", c.blocks);
    if (j.contains("mcmc")) {
        const Json& m = j.at("mcmc");
        detail::reject_unknown(m, {"iterations", "adapt_start", "burn_in", "importance_samples", "chains", "seed",
                                   "initial_variance", "adapt_eps", "init_noise_sd", "ess_steps"},
                               "mcmc");
        detail::read_opt(m, "iterations", c.mcmc.iterations);
        detail::read_opt(m, "adapt_start", c.mcmc.adapt_start);
        c.mcmc.burn_in = c.mcmc.iterations / 4;
        detail::read_opt(m, "burn_in", c.mcmc.burn_in);
        detail::read_opt(m, "importance_samples", c.mcmc.importance_samples);
        detail::read_opt(m, "chains", c.mcmc.chains);
        detail::read_opt(m, "seed", c.mcmc.seed);
        detail::read_opt(m, "initial_variance", c.mcmc.initial_variance);
        detail::read_opt(m, "adapt_eps", c.mcmc.adapt_eps);
        detail::read_opt(m, "init_noise_sd", c.mcmc.init_noise_sd);
        detail::read_opt(m, "ess_steps", c.mcmc.ess_steps);
    }
    if (j.contains("variational")) {
        const Json& v = j.at("variational");
        detail::reject_unknown(v, {"inducing", "refresh", "refresh_iterations", "max_iterations", "tolerance", "restarts",
                                   "warmup_iterations", "seed", "jitter"},
                               "variational");
        detail::read_opt(v, "inducing", c.variational.inducing);
        if (v.contains("refresh")) {
            try {
                c.variational.refresh = refresh_policy_from_string(v.at("refresh").get<std::string>());
            } catch (const InputError& e) {
                throw ConfigError(e.what());
            }
        }
        detail::read_opt(v, "refresh_iterations", c.variational.refresh_iterations);
        detail::read_opt(v, "max_iterations", c.variational.max_iterations);
        detail::read_opt(v, "tolerance", c.variational.tolerance);
        detail::read_opt(v, "restarts", c.variational.restarts);
        detail::read_opt(v, "warmup_iterations", c.variational.warmup_iterations);
        detail::read_opt(v, "seed", c.variational.seed);
        detail::read_opt(v, "jitter", c.variational.jitter);
    }
    if (j.contains("prediction")) {
        const Json& p = j.at("prediction");
        detail::reject_unknown(p, {"x_points", "x_min", "x_max", "y_bins", "y_pad_sd", "latent_draws_per_sample",
                                   "ml_draws", "heldout_points", "heatmap_features", "seed"},
                               "prediction");
        detail::read_opt(p, "x_points", c.prediction.x_points);
        for (const char* key : {"x_min", "x_max"}) {
            if (!p.contains(key) || p.at(key).is_null()) continue;
            double v = 0.0;
            detail::read_opt(p, key, v);
            (std::string(key) == "x_min" ? c.prediction.x_min : c.prediction.x_max) = v;
        }
        detail::read_opt(p, "y_bins", c.prediction.y_bins);
        detail::read_opt(p, "y_pad_sd", c.prediction.y_pad_sd);
        detail::read_opt(p, "latent_draws_per_sample", c.prediction.latent_draws_per_sample);
        detail::read_opt(p, "ml_draws", c.prediction.ml_draws);
        detail::read_opt(p, "heldout_points", c.prediction.heldout_points);
        detail::read_opt(p, "heatmap_features", c.prediction.heatmap_features);
        detail::read_opt(p, "seed", c.prediction.seed);
    }
    detail::read_opt(j, "mode", c.mode);
    c.validate();
    return c;
}

inline Json config_to_json(const RunConfig& c) {
    Json d = {{"source", c.dataset.source}};
    if (c.dataset.generated()) {
        d["case"] = to_string(c.dataset.which);
        d["n"] = c.dataset.n;
        d["noise_sd"] = c.dataset.noise_sd;
        d["seed"] = c.dataset.seed;
    } else {
        d["path"] = c.dataset.path;
        d["input_dim"] = c.dataset.input_dim;
        d["output_dim"] = c.dataset.output_dim;
        d["normalise"] = c.dataset.normalise;
    }
    Json priors = Json::array();
    for (const auto& p : resolved_priors(c))
        priors.push_back({{"target", p.target}, {"shape", p.shape}, {"scale", p.scale}, {"on_reciprocal", p.on_reciprocal}});
    Json blocks = Json::array();
    const auto names = hyper_names(c.input_dim(), c.latent_dim);
    for (const auto& b : resolved_blocks(c).blocks) {
        Json blk = Json::array();
        for (int i : b) blk.push_back(names[static_cast<std::size_t>(i)]);
        blocks.push_back(blk);
    }
    Json pred = {{"x_points", c.prediction.x_points},
                 {"y_bins", c.prediction.y_bins},
                 {"y_pad_sd", c.prediction.y_pad_sd},
                 {"latent_draws_per_sample", c.prediction.latent_draws_per_sample},
                 {"ml_draws", c.prediction.ml_draws},
                 {"heldout_points", c.prediction.heldout_points},
                 {"heatmap_features", c.prediction.heatmap_features},
                 {"seed", c.prediction.seed}};
    pred["x_min"] = c.prediction.x_min ? Json(*c.prediction.x_min) : Json(nullptr);
    pred["x_max"] = c.prediction.x_max ? Json(*c.prediction.x_max) : Json(nullptr);
    return {{"dataset", d},
            {"latent_dim", c.latent_dim},
            {"priors", priors},
            {"blocks", blocks},
            {"mcmc",
             {{"iterations", c.mcmc.iterations},
              {"adapt_start", c.mcmc.adapt_start},
              {"burn_in", c.mcmc.burn_in},
              {"importance_samples", c.mcmc.importance_samples},
              {"chains", c.mcmc.chains},
              {"seed", c.mcmc.seed},
              {"initial_variance", c.mcmc.initial_variance},
              {"adapt_eps", c.mcmc.adapt_eps},
              {"init_noise_sd", c.mcmc.init_noise_sd},
              {"ess_steps", c.mcmc.ess_steps}}},
            {"variational",
             {{"inducing", c.variational.inducing},
              {"refresh", to_string(c.variational.refresh)},
              {"refresh_iterations", c.variational.refresh_iterations},
              {"max_iterations", c.variational.max_iterations},
              {"tolerance", c.variational.tolerance},
              {"restarts", c.variational.restarts},
              {"warmup_iterations", c.variational.warmup_iterations},
              {"seed", c.variational.seed},
              {"jitter", c.variational.jitter}}},
            {"prediction", pred},
            {"mode", c.mode}};
}

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
    }
}

/// Accepts a plain config file or a run manifest (which embeds the config under "config").
inline RunConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

} // namespace sgplvm::harness
