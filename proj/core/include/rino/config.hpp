#pragma once

#include "rino/eval.hpp"
#include "rino/training.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace rino {

/// Everything a run can be configured with. Defaults follow the reference
/// setup: k = 200, k_Q = 30, c = 42, D = 256, lambda = (1, 0.1, 1, 1, 0.1, 1).
struct RunConfig {
  PipelineConfig pipeline;
  TrainConfig train;  ///< network, objective, optimizer, schedule
  std::string cache_dir;
};

/// Recognized keys, in the order format_config writes them.
const std::vector<std::string>& config_keys();

/// Assigns one key. Throws UsageError for an unknown key or a malformed value.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// `key = value` lines; `#` starts a comment; blank lines are ignored.
/// Starts from `base` and applies the lines in order.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
std::string format_config(const RunConfig& config);

}  // namespace rino
