// SPDX-License-Identifier: Apache-2.0
#include "lorap/config.hpp"

#include <charconv>
#include <chrono>
#include <ctime>
#include <istream>
#include <ostream>
#include <sstream>

namespace lorap {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view expected,
                            std::string_view value) {
  throw ConfigError("config key '" + std::string(key) + "': expected " + std::string(expected) +
                    ", got '" + std::string(value) + "'");
}

std::uint64_t as_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    bad_value(key, "a non-negative integer", v);
  return out;
}

double as_real(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, "a number", v);
  return out;
}

int as_bits(std::string_view key, std::string_view v) {
  const auto b = as_uint(key, v);
  if (b < 2 || b > 32) bad_value(key, "a bit-width in [2, 32]", v);
  return static_cast<int>(b);
}

template <typename Parse>
auto as_enum(std::string_view key, std::string_view v, Parse parse, std::string_view choices) {
  try {
    return parse(v);
  } catch (const InputError&) {
    bad_value(key, choices, v);
  }
}

std::string real_text(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace

void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value) {
  const std::string_view v = trim(value);
  if (key == "arch") {
    cfg.arch = as_enum(key, v, parse_arch, "gcn|gin");
  } else if (key == "framework") {
    cfg.framework = as_enum(key, v, parse_framework, "fp32|qat|dq");
  } else if (key == "bits_w") {
    cfg.bits_w = as_bits(key, v);
  } else if (key == "bits_a") {
    cfg.bits_a = as_bits(key, v);
  } else if (key == "prompt") {
    cfg.prompt = as_enum(key, v, parse_prompt_mode, "none|gpf|gpf_plus|lorap|gpf_lorap");
  } else if (key == "k") {
    cfg.k = as_uint(key, v);
  } else if (key == "r") {
    cfg.r = as_uint(key, v);
  } else if (key == "lr") {
    cfg.lr = as_real(key, v);
  } else if (key == "weight_decay") {
    cfg.weight_decay = as_real(key, v);
  } else if (key == "epochs") {
    cfg.epochs = as_uint(key, v);
  } else if (key == "patience") {
    cfg.patience = as_uint(key, v);
  } else if (key == "hidden") {
    cfg.hidden = as_uint(key, v);
  } else if (key == "layers") {
    cfg.layers = as_uint(key, v);
  } else if (key == "agg") {
    cfg.agg = as_enum(key, v, parse_agg_mode, "sum|mean|max");
  } else if (key == "momentum") {
    cfg.momentum = as_real(key, v);
  } else if (key == "dq_p_min") {
    cfg.dq_p_min = as_real(key, v);
  } else if (key == "dq_p_max") {
    cfg.dq_p_max = as_real(key, v);
  } else if (key == "clip_percentile") {
    if (v == "none") cfg.clip_percentile.reset();
    else cfg.clip_percentile = as_real(key, v);
  } else if (key == "seed") {
    cfg.seed = as_uint(key, v);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

TrainConfig parse_config(std::istream& file, const std::vector<Override>& overrides) {
  TrainConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(file, line)) {
    ++lineno;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string_view key = trim(s.substr(0, eq));
    if (key.starts_with("run.")) continue;
    apply_setting(cfg, key, s.substr(eq + 1));
  }
  for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
  return cfg;
}

TrainConfig parse_config_text(std::string_view text, const std::vector<Override>& overrides) {
  std::istringstream is{std::string(text)};
  return parse_config(is, overrides);
}

std::vector<Override> config_entries(const TrainConfig& c) {
  return {
      {"arch", std::string(to_string(c.arch))},
      {"framework", std::string(to_string(c.framework))},
      {"bits_w", std::to_string(c.bits_w)},
      {"bits_a", std::to_string(c.bits_a)},
      {"prompt", std::string(to_string(c.prompt))},
      {"k", std::to_string(c.k)},
      {"r", std::to_string(c.r)},
      {"lr", real_text(c.lr)},
      {"weight_decay", real_text(c.weight_decay)},
      {"epochs", std::to_string(c.epochs)},
      {"patience", std::to_string(c.patience)},
      {"hidden", std::to_string(c.hidden)},
      {"layers", std::to_string(c.layers)},
      {"agg", std::string(to_string(c.agg))},
      {"momentum", real_text(c.momentum)},
      {"dq_p_min", real_text(c.dq_p_min)},
      {"dq_p_max", real_text(c.dq_p_max)},
      {"clip_percentile", c.clip_percentile ? real_text(*c.clip_percentile) : "none"},
      {"seed", std::to_string(c.seed)},
  };
}

void write_manifest(std::ostream& os, const RunManifest& m) {
  os << "run.command = " << m.command << '\n';
  os << "run.dataset = " << m.dataset << '\n';
  os << "run.tool_version = " << m.tool_version << '\n';
  os << "run.start = " << m.start_time << '\n';
  os << "run.end = " << m.end_time << '\n';
  for (const auto& [name, path] : m.artifacts) os << "run.artifact." << name << " = " << path << '\n';
  for (const auto& [k, v] : config_entries(m.config)) os << k << " = " << v << '\n';
}

RunManifest read_manifest(std::istream& is) {
  RunManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("manifest line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key(trim(s.substr(0, eq)));
    const std::string value(trim(s.substr(eq + 1)));
    if (key == "run.command") m.command = value;
    else if (key == "run.dataset") m.dataset = value;
    else if (key == "run.tool_version") m.tool_version = value;
    else if (key == "run.start") m.start_time = value;
    else if (key == "run.end") m.end_time = value;
    else if (key.starts_with("run.artifact.")) m.artifacts[key.substr(13)] = value;
    else if (key.starts_with("run.")) throw ConfigError("unknown manifest key '" + key + "'");
    else apply_setting(m.config, key, value);
  }
  return m;
}

std::string_view tool_version() { return "0.1.0"; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace lorap
