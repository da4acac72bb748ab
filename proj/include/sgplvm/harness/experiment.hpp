#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/ess.hpp"
#include "sgplvm/harness/analysis.hpp"
#include "sgplvm/harness/config.hpp"
#include "sgplvm/harness/figures.hpp"
#include "sgplvm/harness/io.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/pm_mcmc.hpp"
#include "sgplvm/predict.hpp"
#include "sgplvm/simdata.hpp"
#include "sgplvm/variational.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace sgplvm::harness {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kPosteriorMeanFormula = "K_f*^T (K_f + beta^-1 I)^-1 Y averaged over draws";
inline constexpr const char* kMlPredictiveFormula = "xi_ML fixed; Z drawn from q_ML; same predictive as marginal";
inline constexpr double kModeBandwidth = 0.25;

// Stream tags for derive_seed.
enum SeedStream : std::uint64_t { kChainSeed = 1, kInitSeed = 2, kEssSeed = 4, kMlDrawSeed = 5 };

/// A stage failed; artifacts written so far are kept and `stage` names where it stopped.
class StageError : public Error {
public:
    StageError(std::string stage, std::string type, const std::string& what)
        : Error(what), stage_(std::move(stage)), type_(std::move(type)) {}
    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }
    [[nodiscard]] const std::string& type() const noexcept { return type_; }

private:
    std::string stage_;
    std::string type_;
};

inline std::string error_type(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
    if (dynamic_cast<const InputError*>(&e)) return "InputError";
    if (dynamic_cast<const FactorizationError*>(&e)) return "FactorizationError";
    if (dynamic_cast<const OptimizationError*>(&e)) return "OptimizationError";
    if (dynamic_cast<const EstimatorError*>(&e)) return "EstimatorError";
    if (dynamic_cast<const Error*>(&e)) return "Error";
    return "InternalError";
}

inline Json error_json(const std::string& stage, const std::exception& e) {
    if (const auto* s = dynamic_cast<const StageError*>(&e))
        return {{"error", {{"stage", s->stage()}, {"type", s->type()}, {"message", s->what()}}}};
    return {{"error", {{"stage", stage}, {"type", error_type(e)}, {"message", e.what()}}}};
}

// ---------------------------------------------------------------- JSON <-> Eigen

inline Json matrix_json(const Eigen::MatrixXd& m) {
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline Eigen::MatrixXd json_matrix(const Json& j) {
    if (!j.is_array()) throw ConfigError("expected a matrix (array of rows)");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j.at(r).size()) != cols) throw ConfigError("ragged matrix in JSON");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
    }
    return m;
}

// ---------------------------------------------------------------- artifacts

struct RunLayout {
    fs::path root;

    [[nodiscard]] fs::path data() const { return root / "data.csv"; }
    [[nodiscard]] fs::path truth() const { return root / "truth.json"; }
    [[nodiscard]] fs::path ml() const { return root / "ml.json"; }
    [[nodiscard]] fs::path ml_csv() const { return root / "ml_hyper.csv"; }
    [[nodiscard]] fs::path chain(int c) const { return root / "chains" / ("chain_" + std::to_string(c) + ".csv"); }
    [[nodiscard]] fs::path chain_status() const { return root / "chains" / "status.json"; }
    [[nodiscard]] fs::path draws() const { return root / "draws.csv"; }
    [[nodiscard]] fs::path latents() const { return root / "latents.csv"; }
    [[nodiscard]] fs::path density(const std::string& variant) const {
        return root / "predictions" / ("density_" + variant + ".csv");
    }
    [[nodiscard]] fs::path posterior_mean() const { return root / "predictions" / "posterior_mean.csv"; }
    [[nodiscard]] fs::path predict_info() const { return root / "predictions" / "predict.json"; }
    [[nodiscard]] fs::path nmse() const { return root / "scores" / "nmse.csv"; }
    [[nodiscard]] fs::path summaries() const { return root / "scores" / "summaries.csv"; }
    [[nodiscard]] fs::path acf() const { return root / "scores" / "acf.csv"; }
    [[nodiscard]] fs::path scores() const { return root / "scores" / "scores.json"; }
    [[nodiscard]] fs::path figures() const { return root / "figures"; }
    [[nodiscard]] fs::path manifest() const { return root / "manifest.json"; }
    [[nodiscard]] fs::path error() const { return root / "error.json"; }

    void ensure() const {
        for (const char* sub : {"", "chains", "predictions", "scores", "figures"}) fs::create_directories(root / sub);
    }
};

inline void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

inline void write_string_csv(const fs::path& path, const std::vector<std::string>& header,
                             const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    for (std::size_t c = 0; c < header.size(); ++c) out += (c ? "," : "") + header[c];
    out += '\n';
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.size(); ++c) out += (c ? "," : "") + r[c];
        out += '\n';
    }
    write_text(path, out);
}

// ---------------------------------------------------------------- generate

inline Json truth_json(const SinusoidalTruth& t, const DatasetSource& src) {
    return {{"case", to_string(src.which)},
            {"zeta", std::vector<double>(t.zeta.data(), t.zeta.data() + t.zeta.size())},
            {"frequency", std::vector<double>(t.frequency.data(), t.frequency.data() + t.frequency.size())},
            {"noise_sd", t.noise_sd}};
}

inline std::optional<SinusoidalTruth> load_truth(const RunLayout& L) {
    if (!fs::exists(L.truth())) return std::nullopt;
    const Json j = read_json_file(L.truth().string());
    SinusoidalTruth t;
    const auto z = j.at("zeta").get<std::vector<double>>();
    const auto f = j.at("frequency").get<std::vector<double>>();
    t.zeta = Eigen::Map<const Eigen::VectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
    t.frequency = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    t.noise_sd = j.at("noise_sd").get<double>();
    return t;
}

inline void stage_generate(const RunConfig& cfg, const RunLayout& L) {
    L.ensure();
    if (cfg.dataset.generated()) {
        SinusoidalSpec spec;
        spec.n = cfg.dataset.n;
        spec.which = cfg.dataset.which;
        spec.noise_sd = cfg.dataset.noise_sd;
        spec.seed = cfg.dataset.seed;
        auto [data, truth] = generate(spec);
        save_csv(data, L.data().string());
        write_json(L.truth(), truth_json(truth, cfg.dataset));
    } else {
        const Dataset data = load_csv(cfg.dataset.path, {cfg.dataset.input_dim, cfg.dataset.output_dim, cfg.dataset.normalise});
        save_csv(data, L.data().string());
        if (fs::exists(L.truth())) fs::remove(L.truth());
    }
}

inline Dataset load_run_data(const RunConfig& cfg, const RunLayout& L) {
    if (!fs::exists(L.data())) throw ConfigError("missing artifact '" + L.data().string() + "' (run generate first)");
    return load_csv(L.data().string(), {cfg.input_dim(), cfg.output_dim(), false});
}

// ---------------------------------------------------------------- fit-ml

inline Json hyper_json(const HyperParams& h) {
    const auto names = hyper_names(h.input_dim(), h.latent_dim());
    const Eigen::VectorXd v = h.to_vector();
    Json j = Json::object();
    for (std::size_t k = 0; k < names.size(); ++k) j[names[k]] = v[static_cast<Eigen::Index>(k)];
    return j;
}

inline void stage_fit_ml(const RunConfig& cfg, const RunLayout& L) {
    L.ensure();
    const Dataset data = load_run_data(cfg, L);
    MlOptions opt;
    opt.latent_dim = cfg.latent_dim;
    opt.inducing = cfg.variational.inducing;
    opt.restarts = cfg.variational.restarts;
    opt.seed = cfg.variational.seed;
    opt.jitter = cfg.variational.jitter;
    opt.warmup_iterations = cfg.variational.warmup_iterations;
    opt.optimizer = FitOptions{cfg.variational.max_iterations, cfg.variational.tolerance};
    const MlFit fit = fit_ml(data, opt);

    Json chol = Json::array();
    for (const auto& l : fit.state.chol) chol.push_back(matrix_json(l));
    const Eigen::VectorXd hv = fit.hyper.to_vector();
    const Json j = {{"hyper", hyper_json(fit.hyper)},
                    {"hyper_vector", std::vector<double>(hv.data(), hv.data() + hv.size())},
                    {"elbo", fit.elbo},
                    {"restart_elbos", fit.restart_elbos},
                    {"restart_initial_elbos", fit.restart_initial_elbos},
                    {"best_restart", fit.best_restart},
                    {"state", {{"mu", matrix_json(fit.state.mu)}, {"chol", chol}, {"inducing", matrix_json(fit.state.inducing)}}}};
    write_json(L.ml(), j);
    Table t;
    t.header = hyper_names(fit.hyper.input_dim(), fit.hyper.latent_dim());
    t.header.push_back("elbo");
    t.rows.resize(1, static_cast<Eigen::Index>(t.header.size()));
    t.rows.row(0).head(fit.hyper.flat_size()) = fit.hyper.to_vector().transpose();
    t.rows(0, fit.hyper.flat_size()) = fit.elbo;
    write_table(L.ml_csv(), t);
}

inline MlFit load_ml(const RunConfig& cfg, const RunLayout& L) {
    if (!fs::exists(L.ml())) throw ConfigError("missing artifact '" + L.ml().string() + "' (run fit-ml first)");
    const Json j = read_json_file(L.ml().string());
    MlFit fit;
    const auto v = j.at("hyper_vector").get<std::vector<double>>();
    fit.hyper = HyperParams::from_vector(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())),
                                         cfg.input_dim(), cfg.latent_dim, cfg.variational.jitter);
    fit.elbo = j.at("elbo").get<double>();
    fit.restart_elbos = j.at("restart_elbos").get<std::vector<double>>();
    fit.best_restart = j.at("best_restart").get<int>();
    fit.state.mu = json_matrix(j.at("state").at("mu"));
    for (const auto& c : j.at("state").at("chol")) fit.state.chol.push_back(json_matrix(c));
    fit.state.inducing = json_matrix(j.at("state").at("inducing"));
    fit.state.validate();
    return fit;
}

// ---------------------------------------------------------------- sample

inline PseudoMarginalConfig pm_config(const RunConfig& cfg) {
    PseudoMarginalConfig pm;
    pm.blocks = resolved_blocks(cfg);
    pm.priors = resolved_priors(cfg);
    pm.importance_samples = cfg.mcmc.importance_samples;
    pm.chain.iterations = cfg.mcmc.iterations;
    pm.chain.adapt_start = cfg.mcmc.adapt_start;
    pm.chain.burn_in = cfg.mcmc.burn_in;
    pm.chain.adapt_eps = cfg.mcmc.adapt_eps;
    pm.chain.initial_variance = cfg.mcmc.initial_variance;
    pm.refresh = cfg.variational.refresh;
    pm.refresh_iterations = cfg.variational.refresh_iterations;
    return pm;
}

/// ML hyperparameters with multiplicative log-normal noise.
inline HyperParams perturbed_start(const HyperParams& ml, double sd, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXd v = ml.to_vector();
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] *= std::exp(sd * standard_normal(rng));
    return HyperParams::from_vector(v, ml.input_dim(), ml.latent_dim(), ml.sigma.jitter);
}

struct ChainOutput {
    HyperParams start;
    ChainResult result;
    std::vector<Eigen::MatrixXd> latents;
    std::optional<std::string> failure;
};

inline Json seeds_json(const RunConfig& cfg) {
    Json chains = Json::array();
    for (int c = 0; c < cfg.mcmc.chains; ++c)
        chains.push_back({{"chain", c},
                          {"mh", derive_seed(cfg.mcmc.seed, static_cast<std::uint64_t>(c), kChainSeed)},
                          {"init", derive_seed(cfg.mcmc.seed, static_cast<std::uint64_t>(c), kInitSeed)},
                          {"ess", derive_seed(cfg.mcmc.seed, static_cast<std::uint64_t>(c), kEssSeed)}});
    return {{"dataset", cfg.dataset.seed},
            {"ml_restarts", cfg.variational.seed},
            {"mcmc_base", cfg.mcmc.seed},
            {"chains", chains},
            {"prediction", cfg.prediction.seed},
            {"ml_latent_draws", derive_seed(cfg.prediction.seed, 0, kMlDrawSeed)}};
}

inline void stage_sample(const RunConfig& cfg, const RunLayout& L) {
    L.ensure();
    const Dataset data = load_run_data(cfg, L);
    const MlFit ml = load_ml(cfg, L);
    const PseudoMarginalConfig base = pm_config(cfg);
    const auto names = hyper_names(cfg.input_dim(), cfg.latent_dim);

    std::vector<ChainOutput> out(static_cast<std::size_t>(cfg.mcmc.chains));
    std::vector<std::thread> workers;
    for (int c = 0; c < cfg.mcmc.chains; ++c) {
        workers.emplace_back([&, c] {
            auto& slot = out[static_cast<std::size_t>(c)];
            const auto uc = static_cast<std::uint64_t>(c);
            try {
                PseudoMarginalConfig pm = base;
                pm.chain.seed = derive_seed(cfg.mcmc.seed, uc, kChainSeed);
                slot.start = perturbed_start(ml.hyper, cfg.mcmc.init_noise_sd, derive_seed(cfg.mcmc.seed, uc, kInitSeed));
                slot.result = run_chain(data, pm, slot.start, ml.state);
                if (slot.result.error) {
                    slot.failure = *slot.result.error;
                    return;
                }
                std::vector<HyperParams> draws;
                for (const auto& r : slot.result.retained())
                    draws.push_back(HyperParams::from_vector(r.xi, cfg.input_dim(), cfg.latent_dim, cfg.variational.jitter));
                Rng ess_rng(derive_seed(cfg.mcmc.seed, uc, kEssSeed));
                slot.latents = sample_latents(data, draws, cfg.mcmc.ess_steps, ml.state.mu, ess_rng);
            } catch (const std::exception& e) {
                slot.failure = error_type(e) + ": " + e.what();
            }
        });
    }
    for (auto& w : workers) w.join();

    const auto nblocks = base.blocks.blocks.size();
    Json status = Json::array();
    std::vector<std::vector<double>> draw_rows;
    std::vector<std::vector<double>> latent_rows;
    for (int c = 0; c < cfg.mcmc.chains; ++c) {
        const auto& o = out[static_cast<std::size_t>(c)];
        Table t;
        t.header = {"chain", "g"};
        t.header.insert(t.header.end(), names.begin(), names.end());
        t.header.push_back("log_estimate");
        for (std::size_t b = 0; b < nblocks; ++b) t.header.push_back("accept_" + std::to_string(b + 1));
        t.rows.resize(static_cast<Eigen::Index>(o.result.records.size()), static_cast<Eigen::Index>(t.header.size()));
        for (std::size_t r = 0; r < o.result.records.size(); ++r) {
            const auto& rec = o.result.records[r];
            const auto row = static_cast<Eigen::Index>(r);
            t.rows(row, 0) = c;
            t.rows(row, 1) = static_cast<double>(rec.g);
            t.rows.row(row).segment(2, rec.xi.size()) = rec.xi.transpose();
            t.rows(row, 2 + rec.xi.size()) = rec.log_estimate;
            for (std::size_t b = 0; b < nblocks; ++b)
                t.rows(row, 3 + rec.xi.size() + static_cast<Eigen::Index>(b)) = rec.accepted[b] ? 1.0 : 0.0;
        }
        write_table(L.chain(c), t);

        Json s = {{"chain", c}, {"records", o.result.records.size()}, {"start", hyper_json(o.start)}};
        s["acceptance"] = o.result.acceptance_rates();
        s["error"] = o.failure ? Json(*o.failure) : Json(nullptr);
        status.push_back(s);

        if (o.failure) continue;
        const auto kept = o.result.retained();
        for (std::size_t k = 0; k < kept.size(); ++k) {
            std::vector<double> row{static_cast<double>(c), static_cast<double>(kept[k].g)};
            for (Eigen::Index i = 0; i < kept[k].xi.size(); ++i) row.push_back(kept[k].xi[i]);
            const auto draw_index = static_cast<double>(draw_rows.size());
            draw_rows.push_back(std::move(row));
            const auto& z = o.latents[k];
            for (Eigen::Index n = 0; n < z.rows(); ++n) {
                std::vector<double> lr{draw_index, static_cast<double>(n)};
                for (Eigen::Index j = 0; j < z.cols(); ++j) lr.push_back(z(n, j));
                latent_rows.push_back(std::move(lr));
            }
        }
    }
    write_json(L.chain_status(), status);

    auto to_table = [](std::vector<std::string> header, const std::vector<std::vector<double>>& rows) {
        Table t;
        t.header = std::move(header);
        t.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t c = 0; c < rows[r].size(); ++c) t.rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        return t;
    };
    std::vector<std::string> dh{"chain", "g"};
    dh.insert(dh.end(), names.begin(), names.end());
    write_table(L.draws(), to_table(dh, draw_rows));
    std::vector<std::string> lh{"draw", "row"};
    for (long j = 0; j < cfg.latent_dim; ++j) lh.push_back("z_" + std::to_string(j + 1));
    write_table(L.latents(), to_table(lh, latent_rows));

    for (int c = 0; c < cfg.mcmc.chains; ++c)
        if (const auto& f = out[static_cast<std::size_t>(c)].failure)
            throw StageError("sample", "EstimatorError", "chain " + std::to_string(c) + " failed: " + *f);
}

struct PosteriorDraws {
    std::vector<int> chain;
    std::vector<HyperParams> hyper;
    std::vector<Eigen::MatrixXd> latents;
};

inline PosteriorDraws load_draws(const RunConfig& cfg, const RunLayout& L, Eigen::Index n) {
    const Table d = read_table(L.draws());
    const Table z = read_table(L.latents());
    PosteriorDraws out;
    const auto dim = static_cast<Eigen::Index>(hyper_names(cfg.input_dim(), cfg.latent_dim).size());
    if (d.rows.cols() != 2 + dim) throw ConfigError("draws.csv has the wrong number of columns");
    if (z.rows.cols() != 2 + cfg.latent_dim) throw ConfigError("latents.csv has the wrong number of columns");
    if (z.rows.rows() != d.rows.rows() * n) throw ConfigError("latents.csv does not match draws.csv");
    for (Eigen::Index r = 0; r < d.rows.rows(); ++r) {
        out.chain.push_back(static_cast<int>(d.rows(r, 0)));
        out.hyper.push_back(HyperParams::from_vector(d.rows.row(r).segment(2, dim).transpose(), cfg.input_dim(),
                                                     cfg.latent_dim, cfg.variational.jitter));
        out.latents.push_back(z.rows.block(r * n, 2, n, cfg.latent_dim));
    }
    return out;
}

// ---------------------------------------------------------------- predict

struct PredictionGrid {
    Eigen::MatrixXd x;  // P×k_x test inputs
    Eigen::MatrixXd y;  // bins×k_y grid (bin centres)
};

inline PredictionGrid prediction_grid(const RunConfig& cfg, const Dataset& data, const HyperParams& ml) {
    PredictionGrid g;
    if (data.input_dim() == 1) {
        const double lo = cfg.prediction.x_min.value_or(cfg.dataset.generated() ? 0.0 : data.X.minCoeff());
        const double hi = cfg.prediction.x_max.value_or(cfg.dataset.generated() ? SinusoidalSpec::kUpper : data.X.maxCoeff());
        g.x = Eigen::VectorXd::LinSpaced(cfg.prediction.x_points, lo, hi);
    } else {
        g.x = data.X;
    }
    const auto bins = cfg.prediction.y_bins;
    const double pad = cfg.prediction.y_pad_sd * std::sqrt(1.0 / ml.beta);
    g.y.resize(bins, data.output_dim());
    for (Eigen::Index i = 0; i < data.output_dim(); ++i) {
        const double lo = data.Y.col(i).minCoeff() - pad;
        const double hi = data.Y.col(i).maxCoeff() + pad;
        const double w = (hi - lo) / static_cast<double>(bins);
        for (Eigen::Index b = 0; b < bins; ++b) g.y(b, i) = lo + (static_cast<double>(b) + 0.5) * w;
    }
    return g;
}

/// Test inputs for the posterior-mean check: midpoints of an even partition
/// of [0, 4π], none of which coincide with a training input.
inline Eigen::VectorXd heldout_inputs(long count) {
    Eigen::VectorXd x(count);
    for (long k = 0; k < count; ++k) x[k] = (static_cast<double>(k) + 0.5) * SinusoidalSpec::kUpper / static_cast<double>(count);
    return x;
}

inline std::vector<DrawPredictor> ml_predictors(const RunConfig& cfg, const Dataset& data, const MlFit& ml) {
    Rng rng(derive_seed(cfg.prediction.seed, 0, kMlDrawSeed));
    VariationalSampler q(ml.state);
    std::vector<DrawPredictor> out;
    out.reserve(static_cast<std::size_t>(cfg.prediction.ml_draws));
    double log_q = 0.0;
    for (long g = 0; g < cfg.prediction.ml_draws; ++g) out.emplace_back(data, ml.hyper, q.draw(rng, log_q));
    return out;
}

inline void write_density(const fs::path& path, const PredictionGrid& g, const std::vector<Eigen::MatrixXd>& dens) {
    const auto kx = g.x.cols();
    const auto ky = g.y.cols();
    const auto bins = g.y.rows();
    Table t;
    t.header = {"x_index"};
    for (Eigen::Index l = 0; l < kx; ++l) t.header.push_back("x_" + std::to_string(l + 1));
    for (const char* h : {"feature", "bin", "y", "density"}) t.header.emplace_back(h);
    t.rows.resize(g.x.rows() * ky * bins, static_cast<Eigen::Index>(t.header.size()));
    Eigen::Index r = 0;
    for (Eigen::Index p = 0; p < g.x.rows(); ++p)
        for (Eigen::Index i = 0; i < ky; ++i)
            for (Eigen::Index b = 0; b < bins; ++b, ++r) {
                t.rows(r, 0) = static_cast<double>(p);
                t.rows.row(r).segment(1, kx) = g.x.row(p);
                t.rows(r, 1 + kx) = static_cast<double>(i);
                t.rows(r, 2 + kx) = static_cast<double>(b);
                t.rows(r, 3 + kx) = g.y(b, i);
                t.rows(r, 4 + kx) = dens[static_cast<std::size_t>(p)](b, i);
            }
    write_table(path, t);
}

/// Density grids read back as one (bins × P) matrix per feature.
struct DensityGrid {
    Eigen::VectorXd x;                   // first input coordinate per test point
    Eigen::MatrixXd y;                   // bins×k_y
    std::vector<Eigen::MatrixXd> values; // per feature, bins×P
};

inline DensityGrid read_density(const fs::path& path) {
    const Table t = read_table(path);
    const auto fcol = t.column("feature"), bcol = t.column("bin"), ycol = t.column("y"), dcol = t.column("density");
    Eigen::Index points = 0, ky = 0, bins = 0;
    for (Eigen::Index r = 0; r < t.rows.rows(); ++r) {
        points = std::max(points, static_cast<Eigen::Index>(t.rows(r, 0)) + 1);
        ky = std::max(ky, static_cast<Eigen::Index>(t.rows(r, fcol)) + 1);
        bins = std::max(bins, static_cast<Eigen::Index>(t.rows(r, bcol)) + 1);
    }
    if (points * ky * bins != t.rows.rows()) throw ConfigError(path.string() + ": incomplete density grid");
    DensityGrid g;
    g.x.resize(points);
    g.y.resize(bins, ky);
    g.values.assign(static_cast<std::size_t>(ky), Eigen::MatrixXd(bins, points));
    for (Eigen::Index r = 0; r < t.rows.rows(); ++r) {
        const auto p = static_cast<Eigen::Index>(t.rows(r, 0));
        const auto i = static_cast<Eigen::Index>(t.rows(r, fcol));
        const auto b = static_cast<Eigen::Index>(t.rows(r, bcol));
        g.x[p] = t.rows(r, 1);
        g.y(b, i) = t.rows(r, ycol);
        g.values[static_cast<std::size_t>(i)](b, p) = t.rows(r, dcol);
    }
    return g;
}

inline void stage_predict(const RunConfig& cfg, const RunLayout& L) {
    L.ensure();
    const Dataset data = load_run_data(cfg, L);
    const MlFit ml = load_ml(cfg, L);
    const auto truth = load_truth(L);
    const bool full = cfg.mode == "full";
    const PredictionGrid grid = prediction_grid(cfg, data, ml.hyper);
    const auto ky = data.output_dim();

    std::vector<DrawPredictor> marginal;
    if (full) {
        const PosteriorDraws draws = load_draws(cfg, L, data.size());
        if (draws.hyper.empty()) throw ConfigError("draws.csv holds no retained draws");
        marginal.reserve(draws.hyper.size());
        for (std::size_t g = 0; g < draws.hyper.size(); ++g) marginal.emplace_back(data, draws.hyper[g], draws.latents[g]);
    }
    const std::vector<DrawPredictor> mlp = ml_predictors(cfg, data, ml);

    PredictOptions po;
    po.latent_draws_per_sample = cfg.prediction.latent_draws_per_sample;
    PredictDiagnostics diag_marg, diag_ml;
    std::vector<Eigen::MatrixXd> dm, dl, dt;
    for (Eigen::Index p = 0; p < grid.x.rows(); ++p) {
        const Eigen::RowVectorXd xs = grid.x.row(p);
        const auto up = static_cast<std::uint64_t>(p);
        if (full) dm.push_back(predictive_density(xs, grid.y, marginal, cfg.prediction.seed, up, po, &diag_marg));
        dl.push_back(predictive_density(xs, grid.y, mlp, cfg.prediction.seed, up, po, &diag_ml));
        if (truth && grid.x.cols() == 1) {
            Eigen::MatrixXd t(grid.y.rows(), ky);
            for (Eigen::Index i = 0; i < ky; ++i) t.col(i) = true_density(*truth, xs[0], grid.y.col(i), i);
            dt.push_back(std::move(t));
        }
    }
    if (full) write_density(L.density("marginal"), grid, dm);
    write_density(L.density("ml"), grid, dl);
    if (!dt.empty()) write_density(L.density("true"), grid, dt);

    // Posterior mean at held-out inputs (generated data) or at the training inputs.
    const Eigen::MatrixXd xh = (truth && data.input_dim() == 1) ? Eigen::MatrixXd(heldout_inputs(cfg.prediction.heldout_points)) : data.X;
    Table pm;
    pm.header = {"point"};
    for (Eigen::Index l = 0; l < xh.cols(); ++l) pm.header.push_back("x_" + std::to_string(l + 1));
    for (const char* v : {"marginal", "ml", "true"}) {
        if (std::string(v) == "marginal" && !full) continue;
        if (std::string(v) == "true" && !(truth && xh.cols() == 1)) continue;
        for (Eigen::Index i = 0; i < ky; ++i) pm.header.push_back(std::string(v) + "_" + std::to_string(i + 1));
    }
    pm.rows.resize(xh.rows(), static_cast<Eigen::Index>(pm.header.size()));
    for (Eigen::Index p = 0; p < xh.rows(); ++p) {
        const Eigen::RowVectorXd xs = xh.row(p);
        // distinct point indices from the density grid keep the z* draws independent
        const auto up = static_cast<std::uint64_t>(1000000 + p);
        Eigen::Index c = 0;
        pm.rows(p, c++) = static_cast<double>(p);
        pm.rows.row(p).segment(c, xh.cols()) = xs;
        c += xh.cols();
        if (full) {
            pm.rows.row(p).segment(c, ky) = posterior_mean(xs, marginal, cfg.prediction.seed, up, &diag_marg).transpose();
            c += ky;
        }
        pm.rows.row(p).segment(c, ky) = posterior_mean(xs, mlp, cfg.prediction.seed, up, &diag_ml).transpose();
        c += ky;
        if (truth && xh.cols() == 1) {
            for (Eigen::Index i = 0; i < ky; ++i) pm.rows(p, c + i) = truth->mean(xs[0], i);
        }
    }
    write_table(L.posterior_mean(), pm);
    write_json(L.predict_info(), {{"marginal_draws", marginal.size()},
                                  {"ml_draws", mlp.size()},
                                  {"latent_draws_per_sample", po.latent_draws_per_sample},
                                  {"clamps",
                                   {{"marginal", {{"latent", diag_marg.latent_clamps}, {"output", diag_marg.output_clamps}}},
                                    {"ml", {{"latent", diag_ml.latent_clamps}, {"output", diag_ml.output_clamps}}}}},
                                  {"posterior_mean_formula", kPosteriorMeanFormula},
                                  {"ml_predictive", kMlPredictiveFormula}});
}

// ---------------------------------------------------------------- score

struct ChainTraces {
    std::vector<std::string> names;
    std::vector<std::vector<std::vector<double>>> retained;  // [chain][param][g]
    std::vector<std::vector<double>> acceptance;             // [chain][block]
};

inline ChainTraces load_traces(const RunConfig& cfg, const RunLayout& L) {
    ChainTraces tr;
    tr.names = hyper_names(cfg.input_dim(), cfg.latent_dim);
    const auto dim = static_cast<Eigen::Index>(tr.names.size());
    for (int c = 0; c < cfg.mcmc.chains; ++c) {
        const Table t = read_table(L.chain(c));
        std::vector<std::vector<double>> series(static_cast<std::size_t>(dim));
        std::vector<double> acc;
        const Eigen::Index nb = t.rows.cols() - 3 - dim;
        for (Eigen::Index b = 0; b < nb; ++b) acc.push_back(t.rows.col(3 + dim + b).mean());
        for (Eigen::Index r = 0; r < t.rows.rows(); ++r) {
            if (t.rows(r, 1) <= static_cast<double>(cfg.mcmc.burn_in)) continue;
            for (Eigen::Index k = 0; k < dim; ++k) series[static_cast<std::size_t>(k)].push_back(t.rows(r, 2 + k));
        }
        tr.retained.push_back(std::move(series));
        tr.acceptance.push_back(std::move(acc));
    }
    return tr;
}

inline Json stage_score(const RunConfig& cfg, const RunLayout& L) {
    L.ensure();
    const MlFit ml = load_ml(cfg, L);
    const bool full = cfg.mode == "full";
    Json scores = {{"nmse_formula", kNmseFormula}, {"mode", cfg.mode}};

    // NMSE pairs
    if (fs::exists(L.density("true"))) {
        const DensityGrid truth = read_density(L.density("true"));
        const DensityGrid mlg = read_density(L.density("ml"));
        std::optional<DensityGrid> marg;
        if (full) marg = read_density(L.density("marginal"));
        std::vector<std::vector<std::string>> rows;
        Json pairs = Json::array();
        for (std::size_t i = 0; i < truth.values.size(); ++i) {
            const double e_ml = nmse_binned(mlg.values[i], truth.values[i]);
            Json p = {{"feature", i + 1}, {"ml", e_ml}};
            std::vector<std::string> row{std::to_string(i + 1)};
            if (marg) {
                const double e_m = nmse_binned(marg->values[i], truth.values[i]);
                p["marginal"] = e_m;
                row.push_back(format_double(e_m));
            } else {
                row.push_back("");
            }
            row.push_back(format_double(e_ml));
            pairs.push_back(p);
            rows.push_back(std::move(row));
        }
        write_string_csv(L.nmse(), {"feature", "nmse_marginal", "nmse_ml"}, rows);
        scores["nmse"] = pairs;
    }

    // Posterior-mean RMSE against the generator
    {
        const Table pm = read_table(L.posterior_mean());
        const bool has_truth = std::find(pm.header.begin(), pm.header.end(), "true_1") != pm.header.end();
        if (has_truth) {
            Json rmse = Json::object();
            for (const char* v : {"marginal", "ml"}) {
                if (std::string(v) == "marginal" && !full) continue;
                std::vector<double> per;
                for (Eigen::Index i = 0; i < cfg.output_dim(); ++i) {
                    const auto s = std::to_string(i + 1);
                    const Eigen::VectorXd d = pm.rows.col(pm.column(std::string(v) + "_" + s)) - pm.rows.col(pm.column("true_" + s));
                    per.push_back(std::sqrt(d.squaredNorm() / static_cast<double>(d.size())));
                }
                rmse[v] = per;
            }
            scores["posterior_mean_rmse"] = rmse;
        }
    }

    if (full) {
        const ChainTraces tr = load_traces(cfg, L);
        const Eigen::VectorXd mlv = ml.hyper.to_vector();
        std::vector<std::vector<std::string>> srows, arows;
        Json summaries = Json::array();
        Json rhat = Json::object();
        for (std::size_t k = 0; k < tr.names.size(); ++k) {
            std::vector<double> pooled;
            std::vector<std::vector<double>> per_chain;
            for (const auto& chain : tr.retained) {
                pooled.insert(pooled.end(), chain[k].begin(), chain[k].end());
                per_chain.push_back(chain[k]);
            }
            const Summary s = summarise(pooled);
            summaries.push_back({{"parameter", tr.names[k]}, {"mean", s.mean}, {"sd", s.sd}, {"q025", s.q025},
                                 {"q975", s.q975}, {"ml", mlv[static_cast<Eigen::Index>(k)]}});
            srows.push_back({tr.names[k], format_double(s.mean), format_double(s.sd), format_double(s.q025),
                             format_double(s.q975), format_double(mlv[static_cast<Eigen::Index>(k)])});
            try {
                rhat[tr.names[k]] = split_rhat(per_chain);
            } catch (const InputError&) {
                rhat[tr.names[k]] = nullptr;
            }
            for (std::size_t c = 0; c < per_chain.size(); ++c) {
                if (per_chain[c].empty()) continue;
                const auto acf = autocorrelation(per_chain[c], 50);
                for (std::size_t lag = 0; lag < acf.size(); ++lag)
                    arows.push_back({std::to_string(c), tr.names[k], std::to_string(lag), format_double(acf[lag])});
            }
        }
        write_string_csv(L.summaries(), {"parameter", "mean", "sd", "q025", "q975", "ml"}, srows);
        write_string_csv(L.acf(), {"chain", "parameter", "lag", "acf"}, arows);
        scores["summaries"] = summaries;
        scores["split_rhat"] = rhat;
        scores["acceptance"] = tr.acceptance;

        if (cfg.latent_dim >= 2) {
            std::vector<double> a, b;
            for (const auto& chain : tr.retained) {
                for (double v : chain[static_cast<std::size_t>(cfg.input_dim())]) a.push_back(std::log(v));
                for (double v : chain[static_cast<std::size_t>(cfg.input_dim() + 1)]) b.push_back(std::log(v));
            }
            if (!a.empty())
                scores["theta_modes"] = {{"pair", {"theta_1", "theta_2"}},
                                         {"scale", "log"},
                                         {"bandwidth", kModeBandwidth},
                                         {"modes", kde_mode_count_2d(a, b, kModeBandwidth)}};
        }
    }
    write_json(L.scores(), scores);
    return scores;
}

// ---------------------------------------------------------------- figures

inline void stage_figures(const RunConfig& cfg, const RunLayout& L) {
    L.ensure();
    const MlFit ml = load_ml(cfg, L);
    std::vector<std::string> missing;
    const bool full = cfg.mode == "full";
    if (full && !fs::exists(L.draws())) missing.push_back(L.draws().string());
    if (!fs::exists(L.density("ml"))) missing.push_back(L.density("ml").string());
    if (full && !fs::exists(L.density("marginal"))) missing.push_back(L.density("marginal").string());
    if (!missing.empty()) {
        std::string msg = "figures: missing artifacts:";
        for (const auto& m : missing) msg += " " + m;
        throw ConfigError(msg);
    }
    const fs::path dir = L.figures();
    Json meta = {{"pair_plots", Json::array()}, {"heatmaps", Json::array()}};
    const auto kx = cfg.input_dim();

    if (full) {
        const Table d = read_table(L.draws());
        auto column = [&](const std::string& name, bool reciprocal) {
            Eigen::VectorXd v = d.rows.col(d.column(name));
            return reciprocal ? Eigen::VectorXd(v.cwiseInverse()) : v;
        };
        const auto names = hyper_names(kx, cfg.latent_dim);
        auto ml_value = [&](const std::string& name, bool reciprocal) {
            const auto k = std::find(names.begin(), names.end(), name) - names.begin();
            const double v = ml.hyper.to_vector()[k];
            return reciprocal ? 1.0 / v : v;
        };
        struct Pair {
            std::string a, b;
            bool a_inv, b_inv;
            std::string file;
        };
        std::vector<Pair> pairs{{"sigma_1", "beta", false, true, "pair_sigma_1_beta_inv"},
                                {"theta_S", "beta", false, true, "pair_theta_S_beta_inv"}};
        if (cfg.latent_dim >= 2) pairs.insert(pairs.begin() + 1, {"theta_1", "theta_2", false, false, "pair_theta_1_theta_2"});
        for (const auto& p : pairs) {
            const std::string a_label = p.a_inv ? p.a + "^-1" : p.a;
            const std::string b_label = p.b_inv ? p.b + "^-1" : p.b;
            Table t;
            t.header = {a_label, b_label};
            t.rows.resize(d.rows.rows(), 2);
            t.rows.col(0) = column(p.a, p.a_inv);
            t.rows.col(1) = column(p.b, p.b_inv);
            write_table(dir / (p.file + ".csv"), t);
            const Table back = read_table(dir / (p.file + ".csv"));
            const std::pair<double, double> cross{ml_value(p.a, p.a_inv), ml_value(p.b, p.b_inv)};
            write_text(dir / (p.file + ".svg"), pair_plot_svg(back.rows.col(0), back.rows.col(1), a_label, b_label, cross));
            meta["pair_plots"].push_back({{"svg", p.file + ".svg"}, {"csv", p.file + ".csv"}, {"x", a_label},
                                          {"y", b_label}, {"ml", {cross.first, cross.second}}});
        }
    }

    if (kx == 1) {
        std::map<std::string, DensityGrid> grids;
        for (const char* v : {"true", "marginal", "ml"})
            if (fs::exists(L.density(v)) && (full || std::string(v) != "marginal")) grids.emplace(v, read_density(L.density(v)));
        for (long f : cfg.prediction.heatmap_features) {
            if (f < 0 || f >= cfg.output_dim()) throw ConfigError("heatmap feature index out of range");
            double vmax = 0.0;
            for (const auto& [_, g] : grids) vmax = std::max(vmax, g.values[static_cast<std::size_t>(f)].maxCoeff());
            for (const auto& [variant, g] : grids) {
                const auto& m = g.values[static_cast<std::size_t>(f)];
                const std::string file = "heatmap_" + variant + "_feature_" + std::to_string(f + 1);
                Table t;
                t.header = {"x", "y", "density"};
                t.rows.resize(m.size(), 3);
                Eigen::Index r = 0;
                for (Eigen::Index p = 0; p < m.cols(); ++p)
                    for (Eigen::Index b = 0; b < m.rows(); ++b, ++r) {
                        t.rows(r, 0) = g.x[p];
                        t.rows(r, 1) = g.y(b, f);
                        t.rows(r, 2) = m(b, p);
                    }
                write_table(dir / (file + ".csv"), t);
                const Table back = read_table(dir / (file + ".csv"));
                const Eigen::MatrixXd img = Eigen::Map<const Eigen::MatrixXd>(back.rows.col(2).data(), m.rows(), m.cols());
                write_text(dir / (file + ".svg"),
                           heatmap_svg(img, g.x, g.y.col(f), 0.0, vmax, variant + " predictive density, feature " + std::to_string(f + 1)));
                meta["heatmaps"].push_back({{"svg", file + ".svg"}, {"csv", file + ".csv"}, {"variant", variant},
                                            {"feature", f + 1}, {"colour_min", 0.0}, {"colour_max", vmax}});
            }
        }
    }
    write_json(dir / "figures.json", meta);
}

// ---------------------------------------------------------------- manifest / run

inline std::vector<fs::path> csv_artifacts(const RunLayout& L) {
    std::vector<fs::path> out;
    if (!fs::exists(L.root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(L.root))
        if (e.is_regular_file() && e.path().extension() == ".csv") out.push_back(fs::relative(e.path(), L.root));
    std::sort(out.begin(), out.end());
    return out;
}

inline Json write_manifest(const RunConfig& cfg, const RunLayout& L, const std::string& status,
                           const std::optional<Json>& error = std::nullopt) {
    Json artifacts = Json::array();
    for (const auto& p : csv_artifacts(L)) artifacts.push_back({{"path", p.generic_string()}, {"fnv1a64", file_digest(L.root / p)}});
    Json m = {{"tool", "sgplvm"},
              {"version", kVersion},
              {"status", status},
              {"config", config_to_json(cfg)},
              {"seeds", seeds_json(cfg)},
              {"formulas",
               {{"nmse", kNmseFormula},
                {"posterior_mean", kPosteriorMeanFormula},
                {"ml_predictive", kMlPredictiveFormula},
                {"chain_start", "ML hyperparameters times exp(init_noise_sd * N(0,1)) per component"},
                {"y_grid", "bin centres over [min y_i - pad, max y_i + pad], pad = y_pad_sd / sqrt(beta_ML)"}}},
              {"versions",
               {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"ceres", CERES_VERSION_STRING}}},
              {"artifacts", artifacts}};
    if (error) m["error"] = *error;
    write_json(L.manifest(), m);
    return m;
}

/// Runs every stage in order. On failure the partial artifacts, an
/// error.json and a manifest with status "failed" are left in place and
/// the error is rethrown as a StageError.
inline Json run_experiment(const RunConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    const RunLayout L{out_dir};
    L.ensure();
    if (fs::exists(L.error())) fs::remove(L.error());
    std::string stage = "generate";
    try {
        stage_generate(cfg, L);
        stage = "fit-ml";
        stage_fit_ml(cfg, L);
        if (cfg.mode == "full") {
            stage = "sample";
            stage_sample(cfg, L);
        }
        stage = "predict";
        stage_predict(cfg, L);
        stage = "score";
        const Json scores = stage_score(cfg, L);
        stage = "figures";
        stage_figures(cfg, L);
        write_manifest(cfg, L, "complete");
        return scores;
    } catch (const std::exception& e) {
        const Json err = error_json(stage, e);
        write_json(L.error(), err);
        write_manifest(cfg, L, "failed", err);
        if (const auto* s = dynamic_cast<const StageError*>(&e)) throw *s;
        throw StageError(stage, error_type(e), e.what());
    }
}

} // namespace sgplvm::harness
