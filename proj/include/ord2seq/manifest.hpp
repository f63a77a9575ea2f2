#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace ord2seq {

inline constexpr const char* kToolVersion = "1.0.0";

// Record of one CLI run: the fully resolved configuration plus artifact
// paths. Re-running a command from its manifest reproduces the metric
// artifacts byte for byte.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::vector<std::string> artifacts;  // relative to the manifest directory
    std::uint64_t duration_ms = 0;
    nlohmann::json notes;  // e.g. recorded alpha substitutions

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& doc);
};

// Write-to-temporary then rename, so a manifest is never observed half-written.
void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& doc, int indent = 2);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ord2seq
