#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace forge {

struct CommandContext {
    std::filesystem::path out_dir = ".";
    std::filesystem::path base_dir = ".";  // relative config paths resolve here
    std::optional<std::uint64_t> seed;     // --seed override
    bool verbose = true;
};

nlohmann::json load_config(const std::filesystem::path & path);

// Rejects unknown keys and reports missing required ones as config errors.
void check_keys(const nlohmann::json & j, const std::string & where, const std::vector<std::string> & required,
                const std::vector<std::string> & optional);

// Each command reads one JSON document, writes only under ctx.out_dir, and
// returns a summary (also written as <command>_summary.json).
nlohmann::json cmd_gen_data(const nlohmann::json & cfg, const CommandContext & ctx);
nlohmann::json cmd_train_target(const nlohmann::json & cfg, const CommandContext & ctx);
nlohmann::json cmd_trajectory(const nlohmann::json & cfg, const CommandContext & ctx);
nlohmann::json cmd_surgery(const nlohmann::json & cfg, const CommandContext & ctx);
nlohmann::json cmd_stage(const nlohmann::json & cfg, const CommandContext & ctx);
nlohmann::json cmd_report(const nlohmann::json & cfg, const CommandContext & ctx);
// The whole reference pipeline, driving the commands above.
nlohmann::json cmd_pipeline(const nlohmann::json & cfg, const CommandContext & ctx);

// Structural check of a report.json document; protocol error on failure.
void validate_report_json(const nlohmann::json & j);

int run_command(const std::string & command, const nlohmann::json & cfg, const CommandContext & ctx);

} // namespace forge
