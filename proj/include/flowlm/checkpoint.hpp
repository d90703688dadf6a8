#pragma once

// Checkpoint directory format:
//   manifest.json       ordered manifest: config echo, parameter inventory
//                       (name/group/shape/byte offset), group checksums,
//                       reserved token ids, recorded metrics
//   weights.bin         raw little-endian IEEE-754 f32, row-major, inventory order
//   entry_weights.bin   optional snapshot of the parameters at stage entry
//
// A checkpoint reloaded and re-saved without training is byte-identical.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlm/codec.hpp"
#include "flowlm/common.hpp"
#include "flowlm/model.hpp"

namespace flowlm {

using ordered_json = nlohmann::ordered_json;

template <class Real>
struct Checkpoint {
    ModelParams<Real> model;
    PatchCodec<Real> codec;
    int stage = -1;
    ordered_json train_echo;              // resolved training config of the producing run
    std::vector<std::string> frozen_groups;
    std::map<std::string, double> metrics;
    bool has_entry = false;
    ModelParams<Real> entry;              // valid when has_entry
};

namespace detail {

template <class Real>
inline std::vector<TensorEntry<Real>> collect_codec(PatchCodec<Real>& c,
                                                    std::vector<TensorEntry<Real>> base) {
    base.push_back({"codec.basis", "codec", &c.basis});
    base.push_back({"codec.patch_mean", "codec", &c.patch_mean});
    base.push_back({"codec.ch_mean", "codec", &c.ch_mean});
    base.push_back({"codec.ch_std", "codec", &c.ch_std});
    return base;
}

template <class Real>
inline void write_blob(const std::filesystem::path& path,
                       const std::vector<TensorEntry<Real>>& entries) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    std::vector<float> buf;
    for (const auto& e : entries) {
        buf.resize(e.mat->size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(e.mat->v[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 std::streamsize(buf.size() * sizeof(float)));
    }
    require(bool(os), ErrorKind::io, "write failed: " + path.string());
}

template <class Real>
inline void read_blob(const std::filesystem::path& path,
                      const std::vector<TensorEntry<Real>>& entries) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), ErrorKind::io, "cannot read " + path.string());
    std::vector<float> buf;
    for (const auto& e : entries) {
        buf.resize(e.mat->size());
        is.read(reinterpret_cast<char*>(buf.data()),
                std::streamsize(buf.size() * sizeof(float)));
        require(bool(is), ErrorKind::checkpoint, "weights blob truncated");
        for (size_t i = 0; i < buf.size(); ++i) e.mat->v[i] = Real(buf[i]);
    }
}

inline ordered_json model_config_json(const ModelConfig& c) {
    ordered_json j;
    auto bb = [](const BackboneConfig& b) {
        ordered_json o;
        o["layers"] = b.layers;
        o["width"] = b.width;
        o["heads"] = b.heads;
        o["ff_mult"] = b.ff_mult;
        o["max_seq"] = b.max_seq;
        return o;
    };
    j["vlm"] = bb(c.vlm);
    j["deep"] = bb(c.deep);
    j["shallow"] = bb(c.shallow);
    j["shallow_blocks"] = c.shallow_blocks;
    j["n_latents"] = c.n_latents;
    j["d_latent"] = c.d_latent;
    j["vocab"] = c.vocab_size;
    j["adapter_hidden"] = c.adapter_hidden;
    return j;
}

inline ModelConfig model_config_from_json(const ordered_json& j) {
    ModelConfig c;
    auto bb = [](const ordered_json& o, BackboneConfig& b) {
        b.layers = o.at("layers").get<int>();
        b.width = o.at("width").get<int>();
        b.heads = o.at("heads").get<int>();
        b.ff_mult = o.at("ff_mult").get<int>();
        b.max_seq = o.at("max_seq").get<int>();
    };
    bb(j.at("vlm"), c.vlm);
    bb(j.at("deep"), c.deep);
    bb(j.at("shallow"), c.shallow);
    c.shallow_blocks = j.at("shallow_blocks").get<int>();
    c.n_latents = j.at("n_latents").get<int>();
    c.d_latent = j.at("d_latent").get<int>();
    c.vocab_size = j.at("vocab").get<int>();
    c.adapter_hidden = j.at("adapter_hidden").get<int>();
    return c;
}

}  // namespace detail

// standalone codec checkpoint (written by gen-data, embedded in model
// checkpoints thereafter)
template <class Real>
inline void save_codec(const std::filesystem::path& dir, PatchCodec<Real>& codec) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto entries = detail::collect_codec(codec, {});
    ordered_json m;
    m["format"] = "flowlm-codec";
    m["version"] = 1;
    ordered_json inv = ordered_json::array();
    size_t offset = 0;
    for (const auto& e : entries) {
        ordered_json item;
        item["name"] = e.name;
        item["group"] = e.group;
        item["rows"] = e.mat->rows;
        item["cols"] = e.mat->cols;
        item["offset"] = offset;
        inv.push_back(item);
        offset += e.mat->size() * sizeof(float);
    }
    m["inventory"] = inv;
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries) h = fnv1a64(e.mat->data(), e.mat->size() * sizeof(Real), h);
    m["checksum"] = hex_u64(h);
    detail::write_blob(dir / "weights.bin", entries);
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write codec manifest");
    os << m.dump(2) << "\n";
}

template <class Real>
inline PatchCodec<Real> load_codec(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json", std::ios::binary);
    require(bool(is), ErrorKind::missing_prerequisite,
            "no codec checkpoint at " + dir.string());
    ordered_json m;
    try {
        is >> m;
    } catch (const std::exception& e) {
        fail(ErrorKind::checkpoint, std::string("bad codec manifest: ") + e.what());
    }
    require(m.value("format", "") == "flowlm-codec", ErrorKind::checkpoint,
            "not a codec checkpoint");
    PatchCodec<Real> codec;
    auto entries = detail::collect_codec(codec, {});
    const auto& inv = m.at("inventory");
    require(inv.size() == entries.size(), ErrorKind::checkpoint, "codec inventory mismatch");
    for (size_t i = 0; i < entries.size(); ++i)
        entries[i].mat->resize(inv[i].at("rows").get<int>(), inv[i].at("cols").get<int>());
    detail::read_blob(dir / "weights.bin", entries);
    return codec;
}

template <class Real>
inline void save_checkpoint(const std::filesystem::path& dir, Checkpoint<Real>& ckpt) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto entries = detail::collect_codec(ckpt.codec, collect_tensors(ckpt.model));

    ordered_json m;
    m["format"] = "flowlm-checkpoint";
    m["version"] = 1;
    m["stage"] = ckpt.stage;
    m["model"] = detail::model_config_json(ckpt.model.cfg);
    if (!ckpt.train_echo.is_null()) m["train"] = ckpt.train_echo;
    m["reserved_tokens"] = {{"pad", Vocab::pad},
                            {"bos", Vocab::bos},
                            {"eos", Vocab::eos},
                            {"img", Vocab::img_begin},
                            {"img_end", Vocab::img_end}};
    ordered_json inv = ordered_json::array();
    size_t offset = 0;
    for (const auto& e : entries) {
        ordered_json item;
        item["name"] = e.name;
        item["group"] = e.group;
        item["rows"] = e.mat->rows;
        item["cols"] = e.mat->cols;
        item["offset"] = offset;
        inv.push_back(item);
        offset += e.mat->size() * sizeof(float);
    }
    m["inventory"] = inv;
    ordered_json sums;
    for (const auto& g : param_groups())
        sums[g] = hex_u64(group_checksum(ckpt.model, g));
    {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& e : entries)
            if (e.group == std::string("codec"))
                h = fnv1a64(e.mat->data(), e.mat->size() * sizeof(Real), h);
        sums["codec"] = hex_u64(h);
    }
    m["checksums"] = sums;
    m["frozen_groups"] = ckpt.frozen_groups;
    ordered_json metrics;
    for (const auto& [k, v] : ckpt.metrics) metrics[k] = v;
    m["metrics"] = metrics;
    m["has_entry_snapshot"] = ckpt.has_entry;

    detail::write_blob(dir / "weights.bin", entries);
    if (ckpt.has_entry) {
        auto entry_list = detail::collect_codec(ckpt.codec, collect_tensors(ckpt.entry));
        detail::write_blob(dir / "entry_weights.bin", entry_list);
    }
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write manifest");
    os << m.dump(2) << "\n";
}

template <class Real>
inline Checkpoint<Real> load_checkpoint(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    require(fs::exists(dir / "manifest.json"), ErrorKind::missing_prerequisite,
            "no checkpoint manifest at " + dir.string());
    std::ifstream is(dir / "manifest.json", std::ios::binary);
    ordered_json m;
    try {
        is >> m;
    } catch (const std::exception& e) {
        fail(ErrorKind::checkpoint, std::string("bad manifest: ") + e.what());
    }
    require(m.value("format", "") == "flowlm-checkpoint", ErrorKind::checkpoint,
            "not a flowlm checkpoint");
    Checkpoint<Real> ckpt;
    ckpt.stage = m.at("stage").get<int>();
    ModelConfig cfg = detail::model_config_from_json(m.at("model"));
    ckpt.model.init(cfg, 0);
    if (m.contains("train")) ckpt.train_echo = m.at("train");
    if (m.contains("frozen_groups"))
        ckpt.frozen_groups = m.at("frozen_groups").get<std::vector<std::string>>();
    if (m.contains("metrics"))
        for (auto it = m.at("metrics").begin(); it != m.at("metrics").end(); ++it)
            ckpt.metrics[it.key()] = it.value().get<double>();

    auto entries = detail::collect_codec(ckpt.codec, collect_tensors(ckpt.model));
    // shape the codec tensors from the inventory before reading
    const auto& inv = m.at("inventory");
    require(inv.size() == entries.size(), ErrorKind::checkpoint,
            "inventory size mismatch");
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& item = inv[i];
        require(item.at("name").get<std::string>() == entries[i].name,
                ErrorKind::checkpoint, "inventory order mismatch at " + entries[i].name);
        int rows = item.at("rows").get<int>(), cols = item.at("cols").get<int>();
        if (entries[i].mat->rows != rows || entries[i].mat->cols != cols)
            entries[i].mat->resize(rows, cols);
    }
    detail::read_blob(dir / "weights.bin", entries);

    ckpt.has_entry = m.value("has_entry_snapshot", false);
    if (ckpt.has_entry && fs::exists(dir / "entry_weights.bin")) {
        ckpt.entry.init(cfg, 0);
        auto entry_list = detail::collect_codec(ckpt.codec, collect_tensors(ckpt.entry));
        // codec tensors shared; model entries shaped identically to current
        detail::read_blob(dir / "entry_weights.bin", entry_list);
    }
    return ckpt;
}

}  // namespace flowlm
