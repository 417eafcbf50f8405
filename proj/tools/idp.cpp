#include "idp/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

int main(int argc, char** argv)
{
    CLI::App app{"ID-centric pre-training pipeline for sequential recommendation"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<long> seed;
    app.add_option("--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "Override a key: section.key=value (repeatable)");
    app.add_option("--seed", seed, "Override run.seed");

    std::string mode;
    std::map<std::string, CLI::App*> commands;
    const std::vector<std::pair<std::string, std::string>> verbs{
        {"synth", "Generate the synthetic two-domain corpus"},
        {"pretrain", "Pre-train the sequential recommender on the source domains"},
        {"mine_positives", "Mine behavior positives from the pre-trained item embeddings"},
        {"tune_cdim", "Tune the cross-domain ID matcher adapter"},
        {"build_index", "Build the approximate nearest-neighbor index over source items"},
        {"gen_embeddings", "Generate ID embeddings for the target-domain items"},
        {"deploy", "Deploy the generated embeddings downstream"},
        {"eval", "Evaluate the deployed model and write a report"},
        {"run", "Run every stage in order"},
        {"show-config", "Print the effective configuration"},
    };
    for (const auto& [name, help] : verbs)
        commands[name] = app.add_subcommand(name, help);
    commands["deploy"]
        ->add_option("--mode", mode, "zero-shot, finetune-all or retrain-encoder")
        ->check(CLI::IsMember({"zero-shot", "finetune-all", "retrain-encoder"}));

    CLI11_PARSE(app, argc, argv);

    try {
        idp::RunConfig config = config_path.empty() ? idp::RunConfig() : idp::RunConfig::load(config_path);
        for (const auto& o : overrides)
            config.apply_override(o);
        if (seed)
            config.set("run.seed", std::to_string(*seed));

        idp::Pipeline pipeline(config);
        const std::string verb = app.get_subcommands().front()->get_name();
        if (verb == "show-config")
            std::cout << config.dump();
        else if (verb == "run")
            pipeline.run_all();
        else if (verb == "deploy")
            pipeline.deploy(mode.empty() ? std::nullopt : std::optional(idp::parse_deployment_mode(mode)));
        else
            pipeline.run(verb);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
