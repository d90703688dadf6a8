#pragma once

// Dataset files: one JSON record per line with the scene, its caption token
// ids, and the codec latents as base64 little-endian f32, row-major.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlm/codec.hpp"
#include "flowlm/common.hpp"
#include "flowlm/scene.hpp"
#include "flowlm/vocab.hpp"

namespace flowlm {

struct DataRecord {
    ToyScene scene;
    std::vector<int> caption_tokens;
    Mat<float> latents;  // N x D
};

inline nlohmann::ordered_json record_to_json(const DataRecord& r) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json scene;
    scene["seed"] = r.scene.seed;
    auto objs = nlohmann::ordered_json::array();
    for (const auto& o : r.scene.objects)
        objs.push_back({int(o.shape), int(o.color), o.cell});
    scene["objects"] = objs;
    j["scene"] = scene;
    j["caption_tokens"] = r.caption_tokens;
    j["latents"] = base64_encode(r.latents.data(), r.latents.size() * sizeof(float));
    return j;
}

inline DataRecord record_from_json(const nlohmann::ordered_json& j) {
    DataRecord r;
    const auto& scene = j.at("scene");
    r.scene.seed = scene.at("seed").get<uint64_t>();
    for (const auto& o : scene.at("objects"))
        r.scene.objects.push_back(
            {Shape(o.at(0).get<int>()), Color(o.at(1).get<int>()), o.at(2).get<int>()});
    r.caption_tokens = j.at("caption_tokens").get<std::vector<int>>();
    auto bytes = base64_decode(j.at("latents").get<std::string>());
    require(bytes.size() == size_t(kLatentTokens) * kLatentDim * sizeof(float),
            ErrorKind::io, "latent payload has wrong size");
    r.latents.resize(kLatentTokens, kLatentDim);
    std::memcpy(r.latents.data(), bytes.data(), bytes.size());
    return r;
}

inline void write_dataset(const std::filesystem::path& path,
                          const std::vector<DataRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    for (const auto& r : records) os << record_to_json(r).dump() << "\n";
    require(bool(os), ErrorKind::io, "write failed: " + path.string());
}

inline std::vector<DataRecord> read_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), ErrorKind::missing_prerequisite, "no dataset at " + path.string());
    std::vector<DataRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::ordered_json::parse(line)));
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            fail(ErrorKind::io, std::string("bad dataset line: ") + e.what());
        }
    }
    return out;
}

// render + caption + encode K sampled scenes
inline std::vector<DataRecord> build_corpus(const PatchCodec<float>& codec, int count,
                                            uint64_t seed) {
    std::vector<DataRecord> out;
    out.reserve(static_cast<size_t>(count));
    Rng rng(seed);
    const auto& v = vocab();
    for (int i = 0; i < count; ++i) {
        DataRecord r;
        r.scene = sample_scene(rng);
        r.scene.seed = seed;
        r.caption_tokens = v.encode(caption_words(r.scene));
        r.latents = codec.encode(render_scene(r.scene)).latents;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace flowlm
