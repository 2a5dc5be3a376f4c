#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace twinquant {

inline constexpr const char* kToolName = "twinquant";
inline constexpr const char* kToolVersion = "0.1.0";

// Reproducibility record embedded in every output artifact. Two runs with
// identical manifests must produce identical bytes, so the manifest contains
// no clocks, hostnames or paths-with-entropy — only the command, its
// configuration, seeds, and content hashes of the inputs.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;       // flag snapshot, stringified
  std::map<std::string, std::uint64_t> seeds;      // name -> seed
  std::map<std::string, std::string> input_hashes; // name -> fnv1a hex of file bytes

  void set_config(const std::string& key, const std::string& value);
  void set_config(const std::string& key, std::uint64_t value);
  void set_config(const std::string& key, double value);
  void hash_input(const std::string& name, const std::string& path);

  // Canonical JSON with sorted keys; byte-stable across runs.
  std::string to_json() const;
  static RunManifest from_json(const std::string& text);  // FormatError on junk
};

// Canonical float formatting used anywhere a real number lands in text
// output: shortest round-trip form, locale-independent.
std::string format_f64(double v);

}  // namespace twinquant
