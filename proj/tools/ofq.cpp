#include <algorithm>
#include <exception>
#include <iostream>

#include "CLI11.hpp"
#include "ofq/config.hpp"
#include "ofq/errors.hpp"
#include "ofq/experiments.hpp"

int main(int argc, char** argv) {
    CLI::App app{"ofq: oscillation-free quantization lab"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    ofq::ExperimentKind kind = ofq::ExperimentKind::Train;

    for (auto k : {ofq::ExperimentKind::Toy, ofq::ExperimentKind::Train, ofq::ExperimentKind::Anneal,
                   ofq::ExperimentKind::Diagnose}) {
        auto* sub = app.add_subcommand(std::string(ofq::to_string(k)));
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--out", out_dir, "override the output directory");
        sub->callback([&kind, k] { kind = k; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        ofq::ExperimentConfig cfg = ofq::load_config(config_path);
        cfg.kind = kind;
        for (auto* sub : app.get_subcommands()) {
            if (sub->count("--seed")) cfg.seed = seed;
            if (sub->count("--out")) cfg.output_dir = out_dir;
        }
        std::cout << ofq::run_experiment(cfg) << "\n";
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "ofq: " << msg << "\n";
        return 1;
    }
    return 0;
}
