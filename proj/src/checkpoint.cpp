#include "hydra/checkpoint.hpp"

#include <filesystem>
#include <map>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace hydra {

namespace {

std::string file_for(const std::string& name) {
    std::string f = name;
    for (char& c : f)
        if (c == '/') c = '.';
    return f + ".bin";
}

void write_tensor(const fs::path& path, const Tensor<float>& t) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(t.ptr()),
              std::streamsize(t.numel() * sizeof(float)));
    if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

void read_tensor(const fs::path& path, Tensor<float>& t) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: missing tensor file " + path.string());
    in.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(t.numel() * sizeof(float)));
    if (in.gcount() != std::streamsize(t.numel() * sizeof(float)))
        throw CheckpointError("checkpoint: truncated tensor file " + path.string());
}

json entry_for(const std::string& name, const Tensor<float>& t) {
    return {{"name", name}, {"shape", t.shape}, {"dtype", "float32"},
            {"file", file_for(name)}};
}

}  // namespace

void checkpoint_save(const std::string& dir, const ParamRefs<float>& params, int64_t step,
                     uint64_t config_hash, bool with_moments) {
    fs::create_directories(dir);
    json manifest;
    manifest["version"] = 1;
    manifest["step"] = step;
    manifest["config_hash"] = config_hash;
    json tensors = json::array();
    for (const Param<float>* p : params) {
        tensors.push_back(entry_for(p->name, p->w));
        write_tensor(fs::path(dir) / file_for(p->name), p->w);
        if (with_moments && p->m.numel() == p->w.numel()) {
            tensors.push_back(entry_for("adam.m/" + p->name, p->m));
            write_tensor(fs::path(dir) / file_for("adam.m/" + p->name), p->m);
            tensors.push_back(entry_for("adam.v/" + p->name, p->v));
            write_tensor(fs::path(dir) / file_for("adam.v/" + p->name), p->v);
        }
    }
    manifest["tensors"] = std::move(tensors);
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << manifest.dump(1) << "\n";
    if (!out) throw CheckpointError("checkpoint: manifest write failed in " + dir);
}

CheckpointInfo checkpoint_peek(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw CheckpointError("checkpoint: manifest missing in " + dir);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::parse_error& e) {
        throw CheckpointError(std::string("checkpoint: manifest corrupt: ") + e.what());
    }
    CheckpointInfo info;
    info.step = manifest.at("step").get<int64_t>();
    info.config_hash = manifest.at("config_hash").get<uint64_t>();
    return info;
}

CheckpointInfo checkpoint_load(const std::string& dir, const ParamRefs<float>& params,
                               uint64_t expected_config_hash, bool verify_hash) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw CheckpointError("checkpoint: manifest missing in " + dir);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::parse_error& e) {
        throw CheckpointError(std::string("checkpoint: manifest corrupt: ") + e.what());
    }
    CheckpointInfo info;
    info.step = manifest.at("step").get<int64_t>();
    info.config_hash = manifest.at("config_hash").get<uint64_t>();
    if (verify_hash && info.config_hash != expected_config_hash)
        throw CheckpointError("checkpoint: config hash mismatch (checkpoint " +
                              std::to_string(info.config_hash) + " vs expected " +
                              std::to_string(expected_config_hash) +
                              "); refusing to load");

    std::map<std::string, json> entries;
    for (const auto& e : manifest.at("tensors")) entries[e.at("name")] = e;

    auto load_into = [&](const std::string& name, Tensor<float>& t,
                         const std::vector<int64_t>& want_shape) {
        const auto it = entries.find(name);
        if (it == entries.end())
            throw CheckpointError("checkpoint: tensor '" + name + "' missing from " + dir);
        const auto shape = it->second.at("shape").get<std::vector<int64_t>>();
        if (shape != want_shape)
            throw CheckpointError("checkpoint: tensor '" + name + "' has shape " +
                                  shape_str(shape) + ", expected " + shape_str(want_shape));
        t.resize(want_shape);
        read_tensor(fs::path(dir) / it->second.at("file").get<std::string>(), t);
    };

    for (Param<float>* p : params) {
        load_into(p->name, p->w, p->w.shape);
        if (entries.count("adam.m/" + p->name)) {
            load_into("adam.m/" + p->name, p->m, p->w.shape);
            load_into("adam.v/" + p->name, p->v, p->w.shape);
        }
    }
    return info;
}

void tensor_dump(const std::string& dir, const std::string& name, const Tensor<float>& t) {
    fs::create_directories(dir);
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    json manifest;
    if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        in >> manifest;
    } else {
        manifest["version"] = 1;
        manifest["step"] = 0;
        manifest["config_hash"] = 0;
        manifest["tensors"] = json::array();
    }
    auto& tensors = manifest["tensors"];
    for (auto it = tensors.begin(); it != tensors.end();)
        if ((*it).at("name") == name)
            it = tensors.erase(it);
        else
            ++it;
    tensors.push_back(entry_for(name, t));
    write_tensor(fs::path(dir) / file_for(name), t);
    std::ofstream out(manifest_path);
    out << manifest.dump(1) << "\n";
}

Tensor<float> tensor_load(const std::string& dir, const std::string& name) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw CheckpointError("tensor dump: manifest missing in " + dir);
    json manifest;
    in >> manifest;
    for (const auto& e : manifest.at("tensors"))
        if (e.at("name") == name) {
            Tensor<float> t(e.at("shape").get<std::vector<int64_t>>());
            read_tensor(fs::path(dir) / e.at("file").get<std::string>(), t);
            return t;
        }
    throw CheckpointError("tensor dump: '" + name + "' not found in " + dir);
}

}  // namespace hydra
