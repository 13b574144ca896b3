#pragma once

// Flat key=value configuration shared by the config file, --set overrides and
// the checkpoint header. Keys are the NetworkConfig / TrainConfig field names.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "msbdn/network.hpp"
#include "msbdn/tensor_io.hpp"

namespace msbdn {

struct TrainConfig {
  double lr0 = 1e-4;
  double decay = 0.75;
  int decay_every = 10;
  int epochs = 10;
  int batch = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int patch = 64;
  double scale_min = 0.5, scale_max = 1.0;
  int scales_per_image = 3;
  bool flips = true;  // random horizontal / vertical flips
  std::uint64_t seed = 0;
  double grad_clip = 0;     // global-norm clip, 0 = off
  int steps_per_epoch = 0;  // 0 = ceil(pairs * scales_per_image / batch)
  double branch_init_scale = 0.1;  // see init_model

  void validate(const NetworkConfig& net) const {
    auto positive = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string(what) + " must be positive");
    };
    positive(lr0 > 0, "lr0");
    positive(decay > 0, "decay");
    positive(decay_every > 0, "decay_every");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    positive(batch > 0, "batch");
    positive(patch > 0, "patch");
    positive(scales_per_image > 0, "scales_per_image");
    positive(adam_eps > 0, "adam_eps");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw std::invalid_argument("beta1 and beta2 must lie in [0, 1)");
    if (!(scale_min > 0 && scale_min <= scale_max))
      throw std::invalid_argument("scale_range must satisfy 0 < min <= max");
    if (grad_clip < 0) throw std::invalid_argument("grad_clip must be >= 0");
    if (!(branch_init_scale >= 0)) throw std::invalid_argument("branch_init_scale must be >= 0");
    if (steps_per_epoch < 0) throw std::invalid_argument("steps_per_epoch must be >= 0");
    if (static_cast<std::size_t>(patch) % net.size_multiple() != 0)
      throw std::invalid_argument("patch " + std::to_string(patch) + " must be divisible by " +
                                  std::to_string(net.size_multiple()) + " for levels=" + std::to_string(net.levels));
  }

  AdamConfig adam(double lr) const { return AdamConfig{lr, beta1, beta2, adam_eps}; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct Settings {
  NetworkConfig net;
  TrainConfig train;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  if constexpr (std::is_floating_point_v<N>)
    if (!std::isfinite(v)) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (expected true/false)");
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyHandler {
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
  bool network = false;
};

template <class N, class Field>
KeyHandler number_key(const std::string& key, Field field, bool network) {
  return {[key, field](Settings& s, const std::string& v) { field(s) = parse_number<N>(key, v); },
          [field](const Settings& s) {
            if constexpr (std::is_floating_point_v<N>)
              return format_double(field(const_cast<Settings&>(s)));
            else
              return std::to_string(field(const_cast<Settings&>(s)));
          },
          network};
}

inline const std::map<std::string, KeyHandler>& key_table() {
  static const std::map<std::string, KeyHandler> table = [] {
    std::map<std::string, KeyHandler> t;
    // network
    t["levels"] = number_key<int>("levels", [](Settings& s) -> int& { return s.net.levels; }, true);
    t["resblocks_B"] = number_key<int>("resblocks_B", [](Settings& s) -> int& { return s.net.resblocks_B; }, true);
    t["base_channels"] =
        number_key<int>("base_channels", [](Settings& s) -> int& { return s.net.base_channels; }, true);
    t["max_channels"] = number_key<int>("max_channels", [](Settings& s) -> int& { return s.net.max_channels; }, true);
    t["refinement_blocks"] =
        number_key<int>("refinement_blocks", [](Settings& s) -> int& { return s.net.refinement_blocks; }, true);
    t["decoder_variant"] = {
        [](Settings& s, const std::string& v) {
          try {
            s.net.decoder_variant = parse_decoder_variant(v);
          } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
          }
        },
        [](const Settings& s) { return std::string(to_string(s.net.decoder_variant)); }, true};
    t["dff_enabled"] = {[](Settings& s, const std::string& v) { s.net.dff_enabled = parse_bool("dff_enabled", v); },
                        [](const Settings& s) { return std::string(s.net.dff_enabled ? "true" : "false"); }, true};
    // training
    t["flips"] = {[](Settings& s, const std::string& v) { s.train.flips = parse_bool("flips", v); },
                  [](const Settings& s) { return std::string(s.train.flips ? "true" : "false"); }, false};
    t["lr0"] = number_key<double>("lr0", [](Settings& s) -> double& { return s.train.lr0; }, false);
    t["decay"] = number_key<double>("decay", [](Settings& s) -> double& { return s.train.decay; }, false);
    t["decay_every"] = number_key<int>("decay_every", [](Settings& s) -> int& { return s.train.decay_every; }, false);
    t["epochs"] = number_key<int>("epochs", [](Settings& s) -> int& { return s.train.epochs; }, false);
    t["batch"] = number_key<int>("batch", [](Settings& s) -> int& { return s.train.batch; }, false);
    t["beta1"] = number_key<double>("beta1", [](Settings& s) -> double& { return s.train.beta1; }, false);
    t["beta2"] = number_key<double>("beta2", [](Settings& s) -> double& { return s.train.beta2; }, false);
    t["adam_eps"] = number_key<double>("adam_eps", [](Settings& s) -> double& { return s.train.adam_eps; }, false);
    t["patch"] = number_key<int>("patch", [](Settings& s) -> int& { return s.train.patch; }, false);
    t["scale_range"] = {[](Settings& s, const std::string& v) {
                          const auto comma = v.find(',');
                          if (comma == std::string::npos)
                            throw ConfigError("bad value for scale_range: '" + v + "' (expected min,max)");
                          s.train.scale_min = parse_number<double>("scale_range", trim(v.substr(0, comma)));
                          s.train.scale_max = parse_number<double>("scale_range", trim(v.substr(comma + 1)));
                        },
                        [](const Settings& s) {
                          return format_double(s.train.scale_min) + "," + format_double(s.train.scale_max);
                        },
                        false};
    t["scales_per_image"] =
        number_key<int>("scales_per_image", [](Settings& s) -> int& { return s.train.scales_per_image; }, false);
    t["seed"] = number_key<std::uint64_t>("seed", [](Settings& s) -> std::uint64_t& { return s.train.seed; }, false);
    t["grad_clip"] = number_key<double>("grad_clip", [](Settings& s) -> double& { return s.train.grad_clip; }, false);
    t["steps_per_epoch"] =
        number_key<int>("steps_per_epoch", [](Settings& s) -> int& { return s.train.steps_per_epoch; }, false);
    t["branch_init_scale"] = number_key<double>(
        "branch_init_scale", [](Settings& s) -> double& { return s.train.branch_init_scale; }, false);
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, h] : detail::key_table()) keys.push_back(k);
  return keys;
}

/// Apply one key=value. Unknown keys are rejected with the list of valid ones.
inline void apply_setting(Settings& s, const std::string& key, const std::string& value) {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) {
    std::string valid;
    for (const auto& [k, h] : table) valid += (valid.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid);
  }
  it->second.set(s, value);
}

/// Parse "key=value" (as given to --set).
inline void apply_assignment(Settings& s, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  apply_setting(s, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Apply every line of a flat config text. Blank lines and '#' comments are skipped.
inline void apply_config_text(Settings& s, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_assignment(s, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void load_config_file(Settings& s, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  apply_config_text(s, buf.str(), path);
}

/// Serialised key=value lines, one per key, in key order.
inline std::string format_settings(const Settings& s, bool network_only = false) {
  std::string out;
  for (const auto& [k, h] : detail::key_table())
    if (h.network || !network_only) out += k + "=" + h.get(s) + "\n";
  return out;
}

inline std::string format_network_config(const NetworkConfig& cfg) { return format_settings(Settings{cfg, {}}, true); }

/// Inverse of format_network_config. Training keys are rejected.
inline NetworkConfig parse_network_config(const std::string& text) {
  Settings s;
  apply_config_text(s, text, "network config");
  if (!(s.train == TrainConfig{})) throw ConfigError("network config block contains training keys");
  return s.net;
}

}  // namespace msbdn
