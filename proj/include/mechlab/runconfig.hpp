#pragma once

// Run configuration, run-directory layout, and the output manifest.
//
// A run directory holds everything one configured pipeline produces:
//
//   <run>/datasets/       trace datasets + puzzle splits
//   <run>/checkpoints/    model weights
//   <run>/activations/    captured residual streams
//   <run>/probes/         fitted probe banks
//   <run>/reports/        every table and figure as CSV/SVG/JSON
//   <run>/manifest.json   config hash + content hash of every output file
//
// The manifest carries no timestamps, so re-running a subcommand with
// identical inputs reproduces it byte for byte. Subcommands refuse to write
// into a run directory whose manifest records a different config hash.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mechlab/errors.hpp"
#include "mechlab/model.hpp"
#include "mechlab/train.hpp"

namespace mechlab {

inline constexpr const char* kToolVersion = "mechlab 0.1.0";

// ---------------------------------------------------------------------------
// RunConfig

// One struct drives the whole pipeline. `mode` picks the model scale and the
// training hyperparameters the analyses were published with ("paper") or a
// CPU-sized replica of the same shape family ("desk"); every field can then
// be overridden by config file or flag.
struct RunConfig {
    std::string mode = "desk";  // "desk" | "paper"
    std::uint64_t seed = 1;

    // data
    std::string puzzles;  // input puzzle CSV: id,puzzle,solution,clues,difficulty
    int n_train = 256;    // puzzles traced for training
    int n_eval = 64;      // held-out puzzles for eval/capture/analysis

    ModelConfig model;
    TrainConfig train;

    // capture
    int capture_states = 0;       // cap on clue-prefix states captured (0 = all eval)
    int positions_per_trace = 4;  // mid-trace states sampled per eval trace

    // probes
    double probe_l2 = 1e-3;
    int probe_max_iter = 100;
    double probe_eval_fraction = 0.25;  // tail fraction of states held out for metrics

    // causal analyses
    int patch_cases = 48;       // direction-patching cases per layer
    int ablate_ref_states = 0;  // head-ablation reference set (0 = half of eval)
    int scan_states = 0;        // cap on mined single-candidate states (0 = all)
    double scan_threshold = 3.0;
    int margin_bins = 40;

    void validate() const {
        if (mode != "desk" && mode != "paper")
            throw ConfigError("mode must be 'desk' or 'paper', got '" + mode + "'");
        if (n_train < 1 || n_eval < 1) throw ConfigError("n_train and n_eval must be >= 1");
        if (probe_eval_fraction <= 0.0 || probe_eval_fraction >= 1.0)
            throw ConfigError("probe_eval_fraction must lie in (0, 1)");
        if (patch_cases < 1) throw ConfigError("patch_cases must be >= 1");
        if (margin_bins < 1) throw ConfigError("margin_bins must be >= 1");
        model.validate();
        train.validate();
    }
};

// Published training setup: 8x8x576 model, AdamW lr 1e-3, weight decay 0.1,
// batch 512. Desk mode keeps the shape family at laptop scale.
inline RunConfig default_run_config(const std::string& mode) {
    RunConfig cfg;
    cfg.mode = mode;
    if (mode == "paper") {
        cfg.model = ModelConfig::paper();
        cfg.train.batch_size = 512;
        cfg.train.lr = 1e-3;
        cfg.train.weight_decay = 0.1;
        cfg.train.max_steps = 20000;
        cfg.n_train = 100000;
        cfg.n_eval = 1280;
        cfg.patch_cases = 1280;
        cfg.scan_states = 20000;
    } else if (mode == "desk") {
        cfg.model = ModelConfig::desk();
        cfg.train.batch_size = 16;
        cfg.train.max_steps = 600;
        cfg.train.target_loss = 0.0;
    } else {
        throw ConfigError("mode must be 'desk' or 'paper', got '" + mode + "'");
    }
    return cfg;
}

inline nlohmann::json run_config_json(const RunConfig& c) {
    nlohmann::json j;
    j["mode"] = c.mode;
    j["seed"] = c.seed;
    j["puzzles"] = c.puzzles;
    j["n_train"] = c.n_train;
    j["n_eval"] = c.n_eval;
    j["model"] = {{"n_layers", c.model.n_layers}, {"n_heads", c.model.n_heads},
                  {"d_model", c.model.d_model},   {"d_mlp", c.model.d_mlp},
                  {"vocab", c.model.vocab},       {"max_seq", c.model.max_seq},
                  {"seed", c.model.seed},         {"ln_eps", c.model.ln_eps}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"max_steps", c.train.max_steps},
                  {"lr", c.train.lr},
                  {"weight_decay", c.train.weight_decay},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"adam_eps", c.train.adam_eps},
                  {"warmup_tokens", c.train.warmup_tokens},
                  {"total_tokens", c.train.total_tokens},
                  {"seed", c.train.seed},
                  {"log_every", c.train.log_every},
                  {"target_loss", c.train.target_loss}};
    j["capture_states"] = c.capture_states;
    j["positions_per_trace"] = c.positions_per_trace;
    j["probe_l2"] = c.probe_l2;
    j["probe_max_iter"] = c.probe_max_iter;
    j["probe_eval_fraction"] = c.probe_eval_fraction;
    j["patch_cases"] = c.patch_cases;
    j["ablate_ref_states"] = c.ablate_ref_states;
    j["scan_states"] = c.scan_states;
    j["scan_threshold"] = c.scan_threshold;
    j["margin_bins"] = c.margin_bins;
    return j;
}

namespace detail {

template <class T>
void maybe_get(const nlohmann::json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

}  // namespace detail

// Missing keys keep their current values, so a partial config file layers
// over the mode defaults the same way flags layer over the file.
inline void apply_config_json(const nlohmann::json& j, RunConfig& c) {
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    detail::maybe_get(j, "mode", c.mode);
    detail::maybe_get(j, "seed", c.seed);
    detail::maybe_get(j, "puzzles", c.puzzles);
    detail::maybe_get(j, "n_train", c.n_train);
    detail::maybe_get(j, "n_eval", c.n_eval);
    if (auto it = j.find("model"); it != j.end()) {
        detail::maybe_get(*it, "n_layers", c.model.n_layers);
        detail::maybe_get(*it, "n_heads", c.model.n_heads);
        detail::maybe_get(*it, "d_model", c.model.d_model);
        detail::maybe_get(*it, "d_mlp", c.model.d_mlp);
        detail::maybe_get(*it, "vocab", c.model.vocab);
        detail::maybe_get(*it, "max_seq", c.model.max_seq);
        detail::maybe_get(*it, "seed", c.model.seed);
        detail::maybe_get(*it, "ln_eps", c.model.ln_eps);
    }
    if (auto it = j.find("train"); it != j.end()) {
        detail::maybe_get(*it, "batch_size", c.train.batch_size);
        detail::maybe_get(*it, "max_steps", c.train.max_steps);
        detail::maybe_get(*it, "lr", c.train.lr);
        detail::maybe_get(*it, "weight_decay", c.train.weight_decay);
        detail::maybe_get(*it, "beta1", c.train.beta1);
        detail::maybe_get(*it, "beta2", c.train.beta2);
        detail::maybe_get(*it, "adam_eps", c.train.adam_eps);
        detail::maybe_get(*it, "warmup_tokens", c.train.warmup_tokens);
        detail::maybe_get(*it, "total_tokens", c.train.total_tokens);
        detail::maybe_get(*it, "seed", c.train.seed);
        detail::maybe_get(*it, "log_every", c.train.log_every);
        detail::maybe_get(*it, "target_loss", c.train.target_loss);
    }
    detail::maybe_get(j, "capture_states", c.capture_states);
    detail::maybe_get(j, "positions_per_trace", c.positions_per_trace);
    detail::maybe_get(j, "probe_l2", c.probe_l2);
    detail::maybe_get(j, "probe_max_iter", c.probe_max_iter);
    detail::maybe_get(j, "probe_eval_fraction", c.probe_eval_fraction);
    detail::maybe_get(j, "patch_cases", c.patch_cases);
    detail::maybe_get(j, "ablate_ref_states", c.ablate_ref_states);
    detail::maybe_get(j, "scan_states", c.scan_states);
    detail::maybe_get(j, "scan_threshold", c.scan_threshold);
    detail::maybe_get(j, "margin_bins", c.margin_bins);
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    std::string mode = "desk";
    detail::maybe_get(j, "mode", mode);
    RunConfig cfg = default_run_config(mode);
    apply_config_json(j, cfg);
    return cfg;
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64)

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

// Canonical hash of a config: nlohmann serializes object keys sorted, so the
// compact dump is a stable byte string.
inline std::string config_hash(const RunConfig& cfg) {
    const std::string dump = run_config_json(cfg).dump();
    return hex64(fnv1a64(dump.data(), dump.size()));
}

inline std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrereqError("cannot open '" + path + "' for hashing");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    return hex64(h);
}

// ---------------------------------------------------------------------------
// Run directory + manifest

struct RunDir {
    std::filesystem::path root;

    std::filesystem::path datasets() const { return root / "datasets"; }
    std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    std::filesystem::path activations() const { return root / "activations"; }
    std::filesystem::path probes() const { return root / "probes"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path manifest_path() const { return root / "manifest.json"; }

    std::string rel(const std::filesystem::path& p) const {
        return std::filesystem::relative(p, root).generic_string();
    }
};

struct Manifest {
    std::string config_hash;
    std::string tool_version = kToolVersion;
    nlohmann::json config = nlohmann::json::object();
    std::map<std::string, std::string> entries;  // run-relative path -> content hash

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config_hash"] = config_hash;
        j["tool_version"] = tool_version;
        j["config"] = config;
        j["entries"] = nlohmann::json::object();
        for (const auto& [path, hash] : entries) j["entries"][path] = hash;
        return j;
    }
};

inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PrereqError("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
    }
    Manifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config = j.at("config");
    for (const auto& [key, val] : j.at("entries").items())
        m.entries[key] = val.get<std::string>();
    return m;
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write manifest '" + path.string() + "'");
    out << m.to_json().dump(2) << "\n";
}

// Opens (or initializes) the manifest for a run directory, insisting that the
// directory was not produced under a different configuration.
inline Manifest open_manifest(const RunDir& run, const RunConfig& cfg) {
    const std::string hash = config_hash(cfg);
    if (std::filesystem::exists(run.manifest_path())) {
        Manifest m = load_manifest(run.manifest_path());
        if (m.config_hash != hash)
            throw ConfigError("run directory '" + run.root.string() +
                              "' was produced with config hash " + m.config_hash +
                              ", current config hashes to " + hash +
                              "; use a fresh --run-dir or the original config");
        return m;
    }
    Manifest m;
    m.config_hash = hash;
    m.config = run_config_json(cfg);
    return m;
}

// Records (or refreshes) the content hash of an output file.
inline void record_output(Manifest& m, const RunDir& run, const std::filesystem::path& file) {
    m.entries[run.rel(file)] = hash_file(file.string());
}

// A subcommand's declared input: present in the manifest and unchanged on
// disk. `producer` names the subcommand that writes it.
inline void require_input(const Manifest& m, const RunDir& run, const std::filesystem::path& file,
                          const std::string& producer) {
    const std::string rel = run.rel(file);
    auto it = m.entries.find(rel);
    if (it == m.entries.end() || !std::filesystem::exists(file))
        throw PrereqError("missing input '" + rel + "'; run `mechlab " + producer + "` first");
    const std::string actual = hash_file(file.string());
    if (actual != it->second)
        throw ConfigError("input '" + rel + "' does not match its manifest hash (" + actual +
                          " vs " + it->second + "); regenerate it with `mechlab " + producer +
                          "`");
}

}  // namespace mechlab
