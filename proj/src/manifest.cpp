#include "twinquant/manifest.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "json.hpp"
#include "twinquant/errors.hpp"
#include "twinquant/io.hpp"

namespace twinquant {

std::string format_f64(double v) {
  // Shortest decimal form that round-trips through strtod.
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

void RunManifest::set_config(const std::string& key, const std::string& value) {
  config[key] = value;
}

void RunManifest::set_config(const std::string& key, std::uint64_t value) {
  config[key] = std::to_string(value);
}

void RunManifest::set_config(const std::string& key, double value) {
  config[key] = format_f64(value);
}

void RunManifest::hash_input(const std::string& name, const std::string& path) {
  input_hashes[name] = io::hex64(io::fnv1a_file(path));
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["tool"] = kToolName;
  j["version"] = kToolVersion;
  j["command"] = command;
  j["config"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config) j["config"][k] = v;
  j["seeds"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : seeds) j["seeds"][k] = v;
  j["inputs"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : input_hashes) j["inputs"][k] = v;
  return j.dump();
}

RunManifest RunManifest::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw FormatError("RunManifest::from_json: malformed manifest");
  }
  RunManifest m;
  m.command = j.value("command", "");
  if (j.contains("config")) {
    for (const auto& [k, v] : j.at("config").items()) m.config[k] = v.get<std::string>();
  }
  if (j.contains("seeds")) {
    for (const auto& [k, v] : j.at("seeds").items()) m.seeds[k] = v.get<std::uint64_t>();
  }
  if (j.contains("inputs")) {
    for (const auto& [k, v] : j.at("inputs").items()) m.input_hashes[k] = v.get<std::string>();
  }
  return m;
}

}  // namespace twinquant
