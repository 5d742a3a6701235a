#pragma once

// Single-file tensor container used for model checkpoints, captured
// activations and probe banks. Layout:
//
//   [u64 little-endian header length][header JSON][raw payload]
//
// The header holds a free-form "config" object plus a "tensors" map of
// name -> {dtype, shape, byte_offset, byte_len}; offsets are relative to the
// start of the payload. All tensors are float32, row-major, little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mechlab/errors.hpp"
#include "mechlab/model.hpp"
#include "nlohmann/json.hpp"

namespace mechlab {

struct TensorEntry {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t size() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }
};

struct TensorContainer {
    nlohmann::json config = nlohmann::json::object();
    std::map<std::string, TensorEntry> tensors;

    const TensorEntry& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw FormatError("tensor container is missing tensor '" + name + "'");
        return it->second;
    }

    void add(const std::string& name, std::vector<std::size_t> shape,
             const float* data, std::size_t n) {
        TensorEntry e;
        e.shape = std::move(shape);
        if (e.size() != n)
            throw ConfigError("tensor '" + name + "' shape does not match element count");
        e.data.assign(data, data + n);
        tensors[name] = std::move(e);
    }

    void add(const std::string& name, std::vector<std::size_t> shape,
             const std::vector<float>& data) {
        add(name, std::move(shape), data.data(), data.size());
    }
};

inline void save_container(const TensorContainer& c, const std::string& path) {
    nlohmann::json header;
    header["config"] = c.config;
    nlohmann::json tens = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, entry] : c.tensors) {
        const std::uint64_t bytes = entry.data.size() * sizeof(float);
        tens[name] = {{"dtype", "f32"},
                      {"shape", entry.shape},
                      {"byte_offset", offset},
                      {"byte_len", bytes}};
        offset += bytes;
    }
    header["tensors"] = tens;
    const std::string head = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    const std::uint64_t head_len = head.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((head_len >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& [name, entry] : c.tensors) {
        (void)name;
        out.write(reinterpret_cast<const char*>(entry.data.data()),
                  static_cast<std::streamsize>(entry.data.size() * sizeof(float)));
    }
    if (!out) throw FormatError("short write to '" + path + "'");
}

inline TensorContainer load_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrereqError("cannot open '" + path + "'");
    char lenbuf[8];
    in.read(lenbuf, 8);
    if (!in) throw FormatError("'" + path + "' is too short for a tensor container");
    std::uint64_t head_len = 0;
    for (int i = 0; i < 8; ++i)
        head_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (head_len == 0 || head_len > (1ull << 30))
        throw FormatError("'" + path + "' has an implausible header length");
    std::string head(head_len, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!in) throw FormatError("'" + path + "' header is truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(head);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' header is not valid JSON: " + e.what());
    }

    TensorContainer c;
    if (header.contains("config")) c.config = header["config"];
    if (!header.contains("tensors") || !header["tensors"].is_object())
        throw FormatError("'" + path + "' header lacks a tensors map");

    const std::streamoff payload_start = static_cast<std::streamoff>(8 + head_len);
    for (const auto& [name, meta] : header["tensors"].items()) {
        if (meta.value("dtype", "") != "f32")
            throw FormatError("tensor '" + name + "' has unsupported dtype");
        TensorEntry e;
        e.shape = meta.at("shape").get<std::vector<std::size_t>>();
        const std::uint64_t off = meta.at("byte_offset").get<std::uint64_t>();
        const std::uint64_t len = meta.at("byte_len").get<std::uint64_t>();
        if (len != e.size() * sizeof(float))
            throw FormatError("tensor '" + name + "' byte length does not match its shape");
        e.data.resize(e.size());
        in.seekg(payload_start + static_cast<std::streamoff>(off));
        in.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(len));
        if (!in) throw FormatError("tensor '" + name + "' payload is truncated");
        c.tensors[name] = std::move(e);
    }
    return c;
}

// --- model checkpoints -----------------------------------------------------

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return {{"n_layers", cfg.n_layers}, {"n_heads", cfg.n_heads},
            {"d_model", cfg.d_model},   {"d_mlp", cfg.d_mlp},
            {"vocab", cfg.vocab},       {"max_seq", cfg.max_seq},
            {"ln_eps", cfg.ln_eps},     {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.d_mlp = j.at("d_mlp").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.ln_eps = j.value("ln_eps", 1e-5);
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.validate();
    return cfg;
}

inline void save_checkpoint(const Params<float>& p, const std::string& path,
                            nlohmann::json extra = nlohmann::json::object()) {
    TensorContainer c;
    c.config = std::move(extra);
    c.config["model"] = model_config_json(p.config);
    visit_tensors(p, [&](const std::string& name, const auto& t, bool) {
        c.add(name, {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())},
              t.data(), static_cast<std::size_t>(t.size()));
    });
    save_container(c, path);
}

inline Params<float> params_from_container(const TensorContainer& c) {
    if (!c.config.contains("model"))
        throw FormatError("tensor container has no model config");
    Params<float> p = alloc_params<float>(model_config_from_json(c.config.at("model")));
    visit_tensors(p, [&](const std::string& name, auto& t, bool) {
        const TensorEntry& e = c.at(name);
        if (e.shape.size() != 2 ||
            e.shape[0] != static_cast<std::size_t>(t.rows()) ||
            e.shape[1] != static_cast<std::size_t>(t.cols()))
            throw FormatError("tensor '" + name + "' has an unexpected shape");
        std::memcpy(t.data(), e.data.data(), e.data.size() * sizeof(float));
    });
    return p;
}

inline Params<float> load_checkpoint(const std::string& path) {
    return params_from_container(load_container(path));
}

}  // namespace mechlab
