#include "ord2seq/manifest.hpp"

#include <fstream>
#include <stdexcept>

namespace ord2seq {

nlohmann::json RunManifest::to_json() const {
    return nlohmann::json{{"tool", "ord2seq"},
                          {"version", kToolVersion},
                          {"command", command},
                          {"config", config},
                          {"artifacts", artifacts},
                          {"duration_ms", duration_ms},
                          {"notes", notes}};
}

RunManifest RunManifest::from_json(const nlohmann::json& doc) {
    if (doc.at("tool").get<std::string>() != "ord2seq")
        throw std::runtime_error("manifest: not an ord2seq manifest");
    RunManifest m;
    m.command = doc.at("command").get<std::string>();
    m.config = doc.at("config");
    m.artifacts = doc.at("artifacts").get<std::vector<std::string>>();
    m.duration_ms = doc.at("duration_ms").get<std::uint64_t>();
    m.notes = doc.value("notes", nlohmann::json::object());
    return m;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
    }
    std::filesystem::rename(tmp, path);
}

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& doc, int indent) {
    write_text_atomic(path, doc.dump(indent) + "\n");
}

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
    write_json_atomic(path, manifest.to_json());
}

RunManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot read " + path.string());
    return RunManifest::from_json(nlohmann::json::parse(in));
}

}  // namespace ord2seq
