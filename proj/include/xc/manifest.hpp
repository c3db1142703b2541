#pragma once

// Run manifests: every command records what it ran, the fully resolved
// configuration, and a digest of each file it read or wrote, so that
// deterministic commands can be checked for byte-identical reruns.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "xc/digest.hpp"
#include "xc/error.hpp"

namespace xc {

// FNV-1a over the raw bytes of a file, streamed in chunks.
inline uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path + " for digesting");
  uint64_t h = kFnvOffset;
  std::vector<char> buf(1 << 20);
  while (in.read(buf.data(), (std::streamsize)buf.size()) || in.gcount() > 0) {
    std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= (unsigned char)buf[i];
      h *= kFnvPrime;
    }
    if (n < (std::streamsize)buf.size()) break;
  }
  return h;
}

inline std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ArtifactRecord {
  std::string path;
  std::string role;  // e.g. "dataset", "checkpoint", "report"
  uint64_t digest = 0;
};

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;  // resolved snapshot
  uint64_t seed = 0;
  std::vector<ArtifactRecord> inputs;
  std::vector<ArtifactRecord> outputs;
  std::string started_at;
  std::string finished_at;

  void add_input(const std::string& path, const std::string& role) {
    inputs.push_back({path, role, file_digest(path)});
  }
  void add_output(const std::string& path, const std::string& role) {
    outputs.push_back({path, role, file_digest(path)});
  }

  nlohmann::json to_json() const {
    auto arts = [](const std::vector<ArtifactRecord>& v) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& r : v)
        a.push_back({{"path", r.path}, {"role", r.role}, {"digest", hex64(r.digest)}});
      return a;
    };
    return {{"command", command},      {"config", config},
            {"seed", seed},            {"inputs", arts(inputs)},
            {"outputs", arts(outputs)}, {"started_at", started_at},
            {"finished_at", finished_at}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
      m.command = j.at("command").get<std::string>();
      m.config = j.at("config").get<std::map<std::string, std::string>>();
      m.seed = j.at("seed").get<uint64_t>();
      auto arts = [](const nlohmann::json& a) {
        std::vector<ArtifactRecord> v;
        for (const auto& r : a)
          v.push_back({r.at("path").get<std::string>(),
                       r.at("role").get<std::string>(),
                       std::stoull(r.at("digest").get<std::string>(), nullptr, 16)});
        return v;
      };
      m.inputs = arts(j.at("inputs"));
      m.outputs = arts(j.at("outputs"));
      m.started_at = j.at("started_at").get<std::string>();
      m.finished_at = j.at("finished_at").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed manifest: ") + e.what());
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot write manifest " + path);
    out << to_json().dump(2) << "\n";
  }

  static RunManifest load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open manifest " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("malformed manifest " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

// Output digests keyed by path, for rerun-determinism comparisons.
inline std::map<std::string, uint64_t> output_digests(const RunManifest& m) {
  std::map<std::string, uint64_t> out;
  for (const auto& r : m.outputs) out[r.path] = r.digest;
  return out;
}

}  // namespace xc
