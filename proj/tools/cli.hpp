#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace ieegclip::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Default experiment config; every key a verb reads is present.
nlohmann::json default_config();

// Sets a dotted key ("train.max_epochs") from "value" parsed as JSON, or as a
// plain string when it does not parse.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

// Stable hex digest of a config document.
std::string config_hash(const nlohmann::json& cfg);

// Entry point; returns the process exit code.
int run(const std::vector<std::string>& args);

}  // namespace ieegclip::cli
