#include "sgplvm/harness/experiment.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <optional>
#include <string>

namespace h = sgplvm::harness;

namespace {

struct Overrides {
    std::optional<std::string> dataset_case;
    std::optional<std::uint64_t> dataset_seed;
    std::optional<std::uint64_t> seed;
    std::optional<long> iterations;
    std::optional<int> chains;
    std::optional<int> importance_samples;
    std::optional<std::string> mode;

    void apply(h::RunConfig& c) const {
        if (dataset_case) {
            c.dataset.source = "generated";
            c.dataset.which = sgplvm::sinusoidal_case_from_string(*dataset_case);
        }
        if (dataset_seed) c.dataset.seed = *dataset_seed;
        if (seed) c.mcmc.seed = *seed;
        if (iterations) {
            c.mcmc.burn_in = c.mcmc.burn_in * *iterations / std::max(1L, c.mcmc.iterations);
            c.mcmc.iterations = *iterations;
        }
        if (chains) c.mcmc.chains = *chains;
        if (importance_samples) c.mcmc.importance_samples = *importance_samples;
        if (mode) c.mode = *mode;
        c.validate();
    }
};

struct Command {
    std::string config;
    std::string out_dir;
    Overrides over;
};

void add_common(CLI::App* sub, Command& cmd) {
    sub->add_option("--config", cmd.config, "JSON config file or a run manifest")->required();
    sub->add_option("--out-dir", cmd.out_dir, "Run directory")->required();
    sub->add_option("--case", cmd.over.dataset_case, "Override generated case (well_specified, mix_0.8_1.2, mix_0.7_1.3)");
    sub->add_option("--dataset-seed", cmd.over.dataset_seed, "Override dataset seed");
    sub->add_option("--seed", cmd.over.seed, "Override MCMC base seed");
    sub->add_option("--iterations", cmd.over.iterations, "Override MCMC iterations (burn-in scales with it)");
    sub->add_option("--chains", cmd.over.chains, "Override number of chains");
    sub->add_option("--importance-samples", cmd.over.importance_samples, "Override Q");
    sub->add_option("--mode", cmd.over.mode, "full or ml_only");
}

void print_error(const std::string& stage, const std::string& type, const std::string& message) {
    const h::Json j = {{"error", {{"stage", stage}, {"type", type}, {"message", message}}}};
    std::cout << j.dump() << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Supervised GPLVM with pseudo-marginal hyperparameter sampling"};
    app.require_subcommand(1);
    Command cmd;

    using Stage = std::function<h::Json(const h::RunConfig&, const h::RunLayout&)>;
    std::vector<std::pair<std::string, Stage>> stages{
        {"generate", [](const auto& c, const auto& l) { h::stage_generate(c, l); return h::Json::object(); }},
        {"fit-ml", [](const auto& c, const auto& l) { h::stage_fit_ml(c, l); return h::Json::object(); }},
        {"sample", [](const auto& c, const auto& l) { h::stage_sample(c, l); return h::Json::object(); }},
        {"predict", [](const auto& c, const auto& l) { h::stage_predict(c, l); return h::Json::object(); }},
        {"score", [](const auto& c, const auto& l) { return h::stage_score(c, l); }},
        {"figures", [](const auto& c, const auto& l) { h::stage_figures(c, l); return h::Json::object(); }},
        {"run", [](const auto& c, const auto& l) { return h::run_experiment(c, l.root); }},
    };
    const std::map<std::string, std::string> help{
        {"generate", "Write the dataset (generated or normalised CSV) into the run directory"},
        {"fit-ml", "Type-II ML fit of hyperparameters and q(Z)"},
        {"sample", "Pseudo-marginal chains and latent draws"},
        {"predict", "Marginalised and ML predictive densities and posterior means"},
        {"score", "NMSE pairs, posterior summaries and chain diagnostics"},
        {"figures", "Pair plots and heat maps (SVG with sibling CSV)"},
        {"run", "All stages end to end, then the manifest"},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, _] : stages) {
        auto* sub = app.add_subcommand(name, help.at(name));
        add_common(sub, cmd);
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("cli", "UsageError", e.what());
        return 2;
    }

    std::string stage = "config";
    try {
        h::RunConfig cfg = h::load_config(cmd.config);
        cmd.over.apply(cfg);
        const h::RunLayout layout{cmd.out_dir};
        for (std::size_t k = 0; k < stages.size(); ++k) {
            if (!subs[k]->parsed()) continue;
            stage = stages[k].first;
            const h::Json result = stages[k].second(cfg, layout);
            if (stage != "run") h::write_manifest(cfg, layout, "stage:" + stage);
            h::Json ok = {{"status", "ok"}, {"stage", stage}, {"out_dir", cmd.out_dir}};
            if (!result.empty()) ok["result"] = result;
            std::cout << ok.dump() << std::endl;
        }
        return 0;
    } catch (const h::StageError& e) {
        print_error(e.stage(), e.type(), e.what());
        return 1;
    } catch (const std::exception& e) {
        if (stage != "config" && stage != "run") {
            try {
                h::RunLayout{cmd.out_dir}.ensure();
                h::write_json(h::RunLayout{cmd.out_dir}.error(), h::error_json(stage, e));
            } catch (...) {
            }
        }
        print_error(stage, h::error_type(e), e.what());
        return dynamic_cast<const sgplvm::ConfigError*>(&e) ? 2 : 1;
    }
}
