// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lorap/train.hpp"

namespace lorap {

using Override = std::pair<std::string, std::string>;

/// Sets one config key from its text form. Throws ConfigError naming the key
/// on an unknown key or a malformed value.
void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value);

/// Parses `key = value` lines (`#` starts a comment), then applies the
/// overrides in order. Keys under `run.` are manifest metadata and skipped.
TrainConfig parse_config(std::istream& file, const std::vector<Override>& overrides = {});
TrainConfig parse_config_text(std::string_view text, const std::vector<Override>& overrides = {});

/// Every config key with its value, in a fixed order. Reals use the shortest
/// text that parses back to the same double.
std::vector<Override> config_entries(const TrainConfig& cfg);

struct RunManifest {
  TrainConfig config;
  std::string command;
  std::string dataset;
  std::string tool_version;
  std::string start_time;
  std::string end_time;
  std::map<std::string, std::string> artifacts;
};

void write_manifest(std::ostream& os, const RunManifest& m);
RunManifest read_manifest(std::istream& is);

std::string_view tool_version();
/// Current UTC time as YYYY-MM-DDTHH:MM:SSZ.
std::string utc_timestamp();

}  // namespace lorap
