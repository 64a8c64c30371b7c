#pragma once

// Flat key=value configuration with [section] headers.
//
//   [train]
//   epochs = 40
//   variant = cru
//
// Keys are addressed as section.key. Values are applied in this order, later
// ones winning: built-in defaults, the config file, --set overrides, then
// dedicated command-line flags. Unknown keys are errors.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cruseg/network.hpp"
#include "cruseg/synth.hpp"
#include "cruseg/train.hpp"

namespace cruseg {

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  SynthConfig synth;
  std::string manifest;
  std::string weights;
  std::string log;
  std::string report_dir;

  void validate() const {
    network.validate();
    train.validate();
    synth.validate();
  }

  /// Network settings after the training variant has been applied.
  NetworkConfig effective_network() const { return apply_variant(network, train); }
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double to_double(const std::string& key, const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (...) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument(key + ": '" + v + "' is not a number");
  return d;
}

template <class I>
I to_integer(const std::string& key, const std::string& v) {
  I out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) {
    throw std::invalid_argument(key + ": '" + v + "' is not a valid integer");
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": '" + v + "' is not a boolean");
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace detail

/// Applies one section.key=value assignment.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  auto& n = c.network;
  auto& k = c.network.crf;
  auto& t = c.train;
  auto& s = c.synth;
  if (key == "network.base_channels") {
    const auto parts = split_commas(v);
    if (parts.size() != 4) throw std::invalid_argument(key + ": expected four comma-separated counts");
    for (std::size_t i = 0; i < 4; ++i) n.base_channels[i] = to_integer<std::size_t>(key, parts[i]);
  } else if (key == "network.kernel_size") {
    n.kernel_size = to_integer<std::size_t>(key, v);
  } else if (key == "network.dropout") {
    n.dropout_rate = to_double(key, v);
  } else if (key == "network.residual_enabled") {
    n.residual_enabled = to_bool(key, v);
  } else if (key == "network.use_crf") {
    n.use_crf = to_bool(key, v);
  } else if (key == "network.input_size") {
    n.input_size = to_integer<std::size_t>(key, v);
  } else if (key == "network.lambda") {
    n.lambda = to_double(key, v);
  } else if (key == "crf.theta_alpha") {
    k.theta_alpha = to_double(key, v);
  } else if (key == "crf.theta_beta") {
    k.theta_beta = to_double(key, v);
  } else if (key == "crf.theta_gamma") {
    k.theta_gamma = to_double(key, v);
  } else if (key == "crf.omega1") {
    k.omega1 = to_double(key, v);
  } else if (key == "crf.omega2") {
    k.omega2 = to_double(key, v);
  } else if (key == "crf.iterations") {
    k.iterations = to_integer<int>(key, v);
  } else if (key == "crf.mu") {
    const auto parts = split_commas(v);
    if (parts.size() != 4) throw std::invalid_argument(key + ": expected four comma-separated values");
    for (std::size_t i = 0; i < 4; ++i) k.mu[i] = to_double(key, parts[i]);
  } else if (key == "train.learning_rate") {
    t.learning_rate = to_double(key, v);
  } else if (key == "train.adam_beta1") {
    t.adam_beta1 = to_double(key, v);
  } else if (key == "train.adam_beta2") {
    t.adam_beta2 = to_double(key, v);
  } else if (key == "train.adam_eps") {
    t.adam_eps = to_double(key, v);
  } else if (key == "train.epochs") {
    t.epochs = to_integer<long>(key, v);
  } else if (key == "train.batch_size") {
    t.batch_size = to_integer<std::size_t>(key, v);
  } else if (key == "train.seed") {
    t.seed = to_integer<std::uint64_t>(key, v);
  } else if (key == "train.lambda") {
    t.lambda = to_double(key, v);
  } else if (key == "train.variant") {
    t.variant = parse_variant(v);
  } else if (key == "synth.min_area") {
    s.min_area = to_double(key, v);
  } else if (key == "synth.max_area") {
    s.max_area = to_double(key, v);
  } else if (key == "synth.fg_level") {
    s.fg_level = to_double(key, v);
  } else if (key == "synth.contrast_min") {
    s.contrast_min = to_double(key, v);
  } else if (key == "synth.contrast_max") {
    s.contrast_max = to_double(key, v);
  } else if (key == "synth.background_max") {
    s.background_max = to_double(key, v);
  } else if (key == "synth.noise_sigma") {
    s.noise_sigma = to_double(key, v);
  } else if (key == "synth.background_gradient") {
    s.background_gradient = to_bool(key, v);
  } else if (key == "synth.spike_probability") {
    s.spike_probability = to_double(key, v);
  } else if (key == "paths.manifest") {
    c.manifest = v;
  } else if (key == "paths.weights") {
    c.weights = v;
  } else if (key == "paths.log") {
    c.log = v;
  } else if (key == "paths.report_dir") {
    c.report_dir = v;
  } else {
    throw std::invalid_argument("unknown configuration key '" + key + "'");
  }
}

/// Parses `section.key=value` (as given to --set).
inline std::pair<std::string, std::string> parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + s + "'");
  return {detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1))};
}

/// Reads a config file into ordered section.key/value pairs.
inline KeyValues parse_config_text(std::istream& in, const std::string& origin) {
  KeyValues out;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument(where + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    if (section.empty()) throw std::invalid_argument(where + ": key outside any [section]");
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + ": expected key = value");
    out.emplace_back(section + "." + detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  for (const auto& [k, v] : parse_config_text(in, path)) {
    try {
      set_config_value(c, k, v);
    } catch (const std::exception& e) {
      throw std::invalid_argument(path + ": " + e.what());
    }
  }
}

/// Every network, CRF and training setting in section.key form, for echoing
/// into weights files.
inline KeyValues config_echo(const NetworkConfig& n, const TrainConfig& t) {
  using detail::format_double;
  KeyValues kv;
  const auto& ch = n.base_channels;
  kv.emplace_back("network.base_channels", std::to_string(ch[0]) + "," + std::to_string(ch[1]) + "," +
                                               std::to_string(ch[2]) + "," + std::to_string(ch[3]));
  kv.emplace_back("network.kernel_size", std::to_string(n.kernel_size));
  kv.emplace_back("network.dropout", format_double(n.dropout_rate));
  kv.emplace_back("network.residual_enabled", n.residual_enabled ? "true" : "false");
  kv.emplace_back("network.use_crf", n.use_crf ? "true" : "false");
  kv.emplace_back("network.input_size", std::to_string(n.input_size));
  kv.emplace_back("network.lambda", format_double(n.lambda));
  const auto& k = n.crf;
  kv.emplace_back("crf.theta_alpha", format_double(k.theta_alpha));
  kv.emplace_back("crf.theta_beta", format_double(k.theta_beta));
  kv.emplace_back("crf.theta_gamma", format_double(k.theta_gamma));
  kv.emplace_back("crf.omega1", format_double(k.omega1));
  kv.emplace_back("crf.omega2", format_double(k.omega2));
  kv.emplace_back("crf.iterations", std::to_string(k.iterations));
  kv.emplace_back("crf.mu", format_double(k.mu[0]) + "," + format_double(k.mu[1]) + "," +
                                format_double(k.mu[2]) + "," + format_double(k.mu[3]));
  kv.emplace_back("train.learning_rate", format_double(t.learning_rate));
  kv.emplace_back("train.adam_beta1", format_double(t.adam_beta1));
  kv.emplace_back("train.adam_beta2", format_double(t.adam_beta2));
  kv.emplace_back("train.adam_eps", format_double(t.adam_eps));
  kv.emplace_back("train.epochs", std::to_string(t.epochs));
  kv.emplace_back("train.batch_size", std::to_string(t.batch_size));
  kv.emplace_back("train.seed", std::to_string(t.seed));
  kv.emplace_back("train.lambda", format_double(t.lambda));
  kv.emplace_back("train.variant", to_string(t.variant));
  return kv;
}

}  // namespace cruseg
