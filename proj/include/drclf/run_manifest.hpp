// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "drclf/binary_io.hpp"
#include "drclf/error.hpp"

namespace drclf {

inline std::string sha256_hex(std::span<const unsigned char> data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::Io, "SHA-256 computation failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(detail::read_file(path)); }

struct FileDigest {
  std::string path;
  std::string sha256;

  bool operator==(const FileDigest&) const = default;
};

/// Reproducibility record written next to every command's outputs.
struct RunManifest {
  std::string command;
  nlohmann::ordered_json config;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
  std::uint64_t seed = 0;
  double duration_seconds = 0;

  void add_input(const std::filesystem::path& p) { inputs.push_back({p.string(), sha256_file(p)}); }
  void add_output(const std::filesystem::path& p) { outputs.push_back({p.string(), sha256_file(p)}); }
};

inline nlohmann::ordered_json to_ordered_json(const RunManifest& m) {
  auto files = [](const std::vector<FileDigest>& v) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& f : v) arr.push_back(nlohmann::ordered_json{{"path", f.path}, {"sha256", f.sha256}});
    return arr;
  };
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["inputs"] = files(m.inputs);
  j["outputs"] = files(m.outputs);
  j["duration_seconds"] = m.duration_seconds;
  return j;
}

inline void write_run_manifest(const RunManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << to_ordered_json(m).dump(2) << '\n';
}

inline RunManifest read_run_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  RunManifest m;
  try {
    const auto j = nlohmann::ordered_json::parse(in);
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.duration_seconds = j.at("duration_seconds").get<double>();
    for (const auto& f : j.at("inputs")) m.inputs.push_back({f.at("path"), f.at("sha256")});
    for (const auto& f : j.at("outputs")) m.outputs.push_back({f.at("path"), f.at("sha256")});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArgument, path.string() + ": " + e.what());
  }
  return m;
}

/// Recomputes every recorded digest; returns one message per mismatch or
/// missing file.
inline std::vector<std::string> verify_run_manifest(const RunManifest& m) {
  std::vector<std::string> problems;
  auto check = [&](const FileDigest& f) {
    if (!std::filesystem::exists(f.path)) {
      problems.push_back(f.path + ": missing");
    } else if (sha256_file(f.path) != f.sha256) {
      problems.push_back(f.path + ": digest mismatch");
    }
  };
  for (const auto& f : m.inputs) check(f);
  for (const auto& f : m.outputs) check(f);
  return problems;
}

}  // namespace drclf
