#pragma once

// Weights file layout:
//
//   cruseg-weights 1
//   [config]
//   section.key=value        (one line per setting, see config_echo)
//   [params]
//   <name> <n> <c> <h> <w>   (one line per tensor, in parameters() order)
//   [data]
//   <float32 little-endian values, concatenated in the same order>

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/config.hpp"
#include "cruseg/io.hpp"
#include "cruseg/network.hpp"

namespace cruseg {

inline constexpr const char* kWeightsMagic = "cruseg-weights 1";

template <std::floating_point T>
void save_weights(const fs::path& path, const CruNet<T>& net, const TrainConfig& train) {
  const auto params = net.parameters();
  std::ostringstream head;
  head << kWeightsMagic << "\n[config]\n";
  for (const auto& [k, v] : config_echo(net.config, train)) head << k << '=' << v << '\n';
  head << "[params]\n";
  for (const auto& p : params) {
    const Shape s = p.tensor.shape();
    head << p.name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << '\n';
  }
  head << "[data]\n";
  atomic_write(path, [&](std::ostream& o) {
    o << head.str();
    std::string raw;
    for (const auto& p : params) {
      for (T v : p.tensor.data()) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int b = 0; b < 4; ++b) raw.push_back(static_cast<char>(bits >> (8 * b)));
      }
    }
    o.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  });
}

struct LoadedWeights {
  CruNet<float> net;
  RunConfig config;  // as echoed in the file
  KeyValues echo;
};

/// Rebuilds the network described by the file's config echo and fills it
/// with the stored values. Name, shape or length mismatches are errors.
inline LoadedWeights load_weights(const fs::path& path) {
  const std::string buf = detail::read_all(path);
  std::istringstream in(buf);
  std::string line;
  auto fail = [&](const std::string& m) -> void {
    throw std::runtime_error(path.string() + ": " + m);
  };
  if (!std::getline(in, line) || line != kWeightsMagic) fail("not a cruseg weights file");
  if (!std::getline(in, line) || line != "[config]") fail("missing [config] section");
  LoadedWeights lw;
  while (std::getline(in, line) && line != "[params]") {
    const auto [k, v] = parse_assignment(line);
    try {
      set_config_value(lw.config, k, v);
    } catch (const std::exception& e) {
      fail(e.what());
    }
    lw.echo.emplace_back(k, v);
  }
  if (line != "[params]") fail("missing [params] section");
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line) && line != "[data]") {
    std::istringstream ls(line);
    Entry e;
    if (!(ls >> e.name >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w)) fail("bad param line '" + line + "'");
    entries.push_back(e);
  }
  if (line != "[data]") fail("missing [data] section");
  const std::size_t offset = static_cast<std::size_t>(in.tellg());

  lw.config.network.validate();
  lw.net = build_network<float>(lw.config.network, 0);
  const auto params = lw.net.parameters();
  if (params.size() != entries.size()) {
    fail("expected " + std::to_string(params.size()) + " tensors for this configuration, found " +
         std::to_string(entries.size()));
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != entries[i].name || !(params[i].tensor.shape() == entries[i].shape)) {
      fail("tensor " + std::to_string(i) + " is " + entries[i].name + " " + entries[i].shape.str() +
           ", expected " + params[i].name + " " + params[i].tensor.shape().str());
    }
    total += params[i].tensor.numel();
  }
  if (buf.size() - offset != total * 4) {
    fail("data section holds " + std::to_string(buf.size() - offset) + " bytes, expected " +
         std::to_string(total * 4));
  }
  const auto* d = reinterpret_cast<const unsigned char*>(buf.data() + offset);
  for (auto p : params) {
    for (float& v : p.tensor.data()) {
      const std::uint32_t bits = d[0] | (d[1] << 8) | (d[2] << 16) | (static_cast<std::uint32_t>(d[3]) << 24);
      v = std::bit_cast<float>(bits);
      d += 4;
    }
  }
  return lw;
}

}  // namespace cruseg
