#include "forge/commands.hpp"
#include "forge/error.hpp"

#include <CLI11.hpp>

#include <cstdio>

int main(int argc, char ** argv) {
    CLI::App app{"forge: surrogate-based vision encoder training on toy decoders"};
    app.require_subcommand(1);
    std::string config;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    bool quiet = false;
    const char * commands[][2] = {
        {"gen-data", "generate the text and vision-language corpora"},
        {"train-target", "train the target decoder on the text corpus"},
        {"trajectory", "layer-wise prediction trajectory and transition detection"},
        {"surgery", "build a surrogate or control variant from a target"},
        {"stage", "run one training stage"},
        {"report", "grafting comparison, convergence and degradation report"},
        {"pipeline", "run the full reference pipeline"},
    };
    for (const auto & [name, help] : commands) {
        auto * sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "JSON config")->required();
        sub->add_option("--out", out, "output directory");
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_flag("--quiet", quiet, "no progress output");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const std::filesystem::path cfg_path(config);
        forge::CommandContext ctx;
        ctx.out_dir = out;
        ctx.base_dir = cfg_path.has_parent_path() ? cfg_path.parent_path() : std::filesystem::path(".");
        ctx.seed = seed;
        ctx.verbose = !quiet;
        return forge::run_command(command, forge::load_config(cfg_path), ctx);
    } catch (const forge::Error & e) {
        std::fprintf(stderr, "forge %s: %s\n", command.c_str(), e.what());
        return forge::exit_code_for(e.kind());
    } catch (const std::exception & e) {
        std::fprintf(stderr, "forge %s: %s\n", command.c_str(), e.what());
        return 3;
    }
}
