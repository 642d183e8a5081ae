#pragma once

// Run manifests: record the command, content hashes of every input, the
// produced outputs, the seed and the tool version, so a run can be audited
// and reproduced byte for byte.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eit/common.hpp"

namespace eit {

inline std::string fnv1a64_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot hash input file " + path);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[65536];
  while (true) {
    f.read(buf, sizeof(buf));
    const std::streamsize got = f.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (got < static_cast<std::streamsize>(sizeof(buf))) break;
  }
  char out[32];
  std::snprintf(out, sizeof(out), "fnv1a64:%016llx",
                static_cast<unsigned long long>(h));
  return out;
}

struct RunManifest {
  std::string command;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, hash
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string version = kVersion;

  void add_input(const std::string& path) { inputs.emplace_back(path, fnv1a64_file(path)); }
};

inline void write_manifest(const RunManifest& m, const std::string& path,
                           const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = extra;
  j["command"] = m.command;
  j["inputs"] = nlohmann::json::object();
  for (const auto& [p, h] : m.inputs) j["inputs"][p] = h;
  j["outputs"] = m.outputs;
  j["seed"] = m.seed;
  j["version"] = m.version;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_manifest: cannot open " + path);
  f << j.dump(2) << "\n";
}

}  // namespace eit
