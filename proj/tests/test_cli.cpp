// End-to-end checks of the mechlab binary: pipeline wiring, manifest
// integrity, rerun determinism, report schemas, and exit codes.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "mechlab/runconfig.hpp"

namespace fs = std::filesystem;

namespace {

struct ToolResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

const fs::path& work_root() {
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "mechlab_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

ToolResult run_tool(const std::string& args) {
    static int call_id = 0;
    const fs::path log = work_root() / ("out_" + std::to_string(call_id++) + ".log");
    const std::string cmd =
        std::string(MECHLAB_BIN_PATH) + " " + args + " > \"" + log.string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    ToolResult res;
    res.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    res.output = ss.str();
    return res;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> row;
        std::string field;
        std::stringstream ss(line);
        while (std::getline(ss, field, ',')) row.push_back(field);
        rows.push_back(std::move(row));
    }
    return rows;
}

// One tiny pipeline, run once and shared by the schema checks below.
struct Pipeline {
    fs::path dir;
    std::string args;
    std::map<std::string, int> exit_codes;

    Pipeline() {
        dir = work_root() / "run";
        args = "--run-dir \"" + dir.string() + "\" --puzzles \"" +
               std::string(MECHLAB_SOURCE_DIR) + "/data/sample_puzzles.csv\"" +
               " --n-train 16 --n-eval 8 --layers 2 --heads 2 --d-model 32 --d-mlp 64"
               " --max-steps 12 --batch-size 8 --log-every 5 --patch-cases 6 --scan-states 200 ";
        const char* steps[] = {"gen-data", "train",    "eval",
                               "capture",  "probe",    "transfer",
                               "patch",    "ablate-head --spec 1:0:c:4-6 --spec 2:1:r:7-9",
                               "ablate-neuron", "attrib", "report"};
        for (const char* s : steps) exit_codes[s] = run_tool(args + s).exit_code;
    }
};

const Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

}  // namespace

using namespace mechlab;

TEST_CASE("every pipeline subcommand exits 0") {
    for (const auto& [step, code] : pipeline().exit_codes) {
        INFO(step);
        CHECK(code == 0);
    }
}

TEST_CASE("re-running a stage reproduces its outputs byte for byte") {
    const Pipeline& p = pipeline();
    const fs::path train_sdtr = p.dir / "datasets" / "train.sdtr";
    const fs::path patch_csv = p.dir / "reports" / "patch_layers.csv";
    const fs::path manifest = p.dir / "manifest.json";
    const fs::path summary = p.dir / "reports" / "summary.json";

    const std::string t0 = slurp(train_sdtr), c0 = slurp(patch_csv), s0 = slurp(summary);
    REQUIRE(run_tool(p.args + "gen-data").exit_code == 0);
    REQUIRE(run_tool(p.args + "patch").exit_code == 0);
    REQUIRE(run_tool(p.args + "report").exit_code == 0);
    CHECK(slurp(train_sdtr) == t0);
    CHECK(slurp(patch_csv) == c0);
    CHECK(slurp(summary) == s0);
    // the manifest settles too: same entries, same hashes, no timestamps
    const std::string m0 = slurp(manifest);
    REQUIRE(run_tool(p.args + "report").exit_code == 0);
    CHECK(slurp(manifest) == m0);
}

TEST_CASE("manifest lists each output with its actual content hash") {
    const Pipeline& p = pipeline();
    const Manifest m = load_manifest(p.dir / "manifest.json");
    CHECK(m.tool_version == kToolVersion);
    CHECK(m.entries.size() >= 20);
    for (const char* expect :
         {"datasets/train.sdtr", "checkpoints/model.bin", "activations/cluesend.bin",
          "reports/patch_layers.csv", "reports/eval_accuracy.csv", "reports/summary.json"}) {
        INFO(expect);
        CHECK(m.entries.count(expect) == 1);
    }
    for (const auto& [rel, hash] : m.entries) {
        INFO(rel);
        REQUIRE(fs::exists(p.dir / rel));
        CHECK(hash_file((p.dir / rel).string()) == hash);
    }
}

TEST_CASE("substructure probe report carries one row per probe") {
    const auto rows = read_csv(pipeline().dir / "reports" / "probe_targets_substructure_presence.csv");
    REQUIRE(rows.size() > 1);
    CHECK(rows[0] == std::vector<std::string>{"family", "layer", "target", "name", "accuracy",
                                              "auc", "mse"});
    std::map<std::string, int> per_layer;
    for (std::size_t i = 1; i < rows.size(); ++i) per_layer[rows[i][1]]++;
    REQUIRE(per_layer.size() == 3);  // layers 0..2 of the 2-block test model
    for (const auto& [layer, count] : per_layer) {
        INFO("layer " << layer);
        CHECK(count == 243);
    }
}

TEST_CASE("layer-patching table schema starts with the pinned columns") {
    const auto rows = read_csv(pipeline().dir / "reports" / "patch_layers.csv");
    REQUIRE(rows.size() == 3);  // header + one row per patched layer
    REQUIRE(rows[0].size() >= 5);
    CHECK(rows[0][0] == "layer");
    CHECK(rows[0][1] == "logit_drop");
    CHECK(rows[0][2] == "patched_logit");
    CHECK(rows[0][3] == "valid_top1");
    CHECK(rows[0][4] == "changed_top1");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i][0] == std::to_string(i - 1));
        const double valid = std::stod(rows[i][3]), changed = std::stod(rows[i][4]);
        CHECK((valid >= 0.0 && valid <= 1.0));
        CHECK((changed >= 0.0 && changed <= 1.0));
    }
}

TEST_CASE("eval and ablation tables parse with sane ranges") {
    const Pipeline& p = pipeline();
    const auto eval_rows = read_csv(p.dir / "reports" / "eval_accuracy.csv");
    REQUIRE(eval_rows.size() == 2);
    const double cell_acc = std::stod(eval_rows[1][2]);
    CHECK((cell_acc >= 0.0 && cell_acc <= 1.0));

    const auto head_rows = read_csv(p.dir / "reports" / "head_ablation.csv");
    REQUIRE(head_rows.size() == 1 + 2);  // the two --spec regions the pipeline passed
    CHECK(head_rows[0] == std::vector<std::string>{"layer", "head", "region", "target_delta",
                                                   "target_stderr", "target_n", "control_delta",
                                                   "control_stderr", "control_n"});
    CHECK(head_rows[1][2] == "c4-6");
    CHECK(head_rows[2][2] == "r7-9");

    const auto ns_rows = read_csv(p.dir / "reports" / "ns_ablation.csv");
    REQUIRE(ns_rows.size() == 4);
    CHECK(ns_rows[1][0] == "target_logit_drop");
    CHECK(ns_rows[2][0] == "target_prob_drop");
    CHECK(ns_rows[3][0] == "other_logit_drop");
}

TEST_CASE("unembedding cosine table covers every realizable sharing class") {
    const auto rows = read_csv(pipeline().dir / "reports" / "unembed_cosine.csv");
    // 13 keys: same row+col implies same cell, which forces same box and a
    // different digit, so only (1,1,1,0) survives from the row&col corner
    REQUIRE(rows.size() == 14);
    long total = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) total += std::stol(rows[i][6]);
    CHECK(total == 729L * 728L / 2);
}

TEST_CASE("report --table prints the stored csv verbatim") {
    const Pipeline& p = pipeline();
    const ToolResult res = run_tool(p.args + "report --table app-b4");
    REQUIRE(res.exit_code == 0);
    CHECK(res.output == slurp(p.dir / "reports" / "patch_layers.csv"));

    const ToolResult bad = run_tool(p.args + "report --table no-such-table");
    CHECK(bad.exit_code == 2);
}

TEST_CASE("missing prerequisites exit 3 and name the producing subcommand") {
    const fs::path dir = work_root() / "fresh";
    const std::string args = "--run-dir \"" + dir.string() + "\" ";
    const ToolResult patch = run_tool(args + "patch");
    CHECK(patch.exit_code == 3);
    CHECK(patch.output.find("mechlab train") != std::string::npos);

    REQUIRE(run_tool(args + "--puzzles \"" + std::string(MECHLAB_SOURCE_DIR) +
                     "/data/sample_puzzles.csv\" --n-train 2 --n-eval 2 gen-data")
                .exit_code == 0);
    const ToolResult capture = run_tool(args + "--puzzles \"" + std::string(MECHLAB_SOURCE_DIR) +
                                        "/data/sample_puzzles.csv\" --n-train 2 --n-eval 2 capture");
    CHECK(capture.exit_code == 3);
    CHECK(capture.output.find("mechlab train") != std::string::npos);
}

TEST_CASE("config mistakes exit 2") {
    CHECK(run_tool("--mode bogus gen-data --run-dir \"" + (work_root() / "x1").string() + "\"")
              .exit_code == 2);
    CHECK(run_tool("gen-data --run-dir \"" + (work_root() / "x2").string() + "\"").exit_code ==
          2);  // no --puzzles
    CHECK(run_tool("").exit_code == 2);  // no subcommand
    CHECK(run_tool("--help").exit_code == 0);
    // malformed head spec on an otherwise complete pipeline
    CHECK(run_tool(pipeline().args + "ablate-head --spec 1:0:z:4").exit_code == 2);
    CHECK(run_tool(pipeline().args + "ablate-head --spec 9:0:c:4").exit_code == 2);
}

TEST_CASE("a run directory refuses a different config hash") {
    const Pipeline& p = pipeline();
    const ToolResult res = run_tool(p.args + "--seed 999 report");
    CHECK(res.exit_code == 2);
    CHECK(res.output.find("config hash") != std::string::npos);
}

TEST_CASE("flags override config-file values which override mode presets") {
    const fs::path cfg_file = work_root() / "cfg.json";
    {
        std::ofstream out(cfg_file);
        out << R"({"mode":"desk","seed":5,"n_train":3,"n_eval":2,"puzzles":")"
            << std::string(MECHLAB_SOURCE_DIR) << R"(/data/sample_puzzles.csv"})";
    }
    const fs::path d1 = work_root() / "cfg_run1";
    REQUIRE(run_tool("--config \"" + cfg_file.string() + "\" --run-dir \"" + d1.string() +
                     "\" gen-data")
                .exit_code == 0);
    const Manifest m1 = load_manifest(d1 / "manifest.json");
    CHECK(m1.config.at("seed").get<std::uint64_t>() == 5);
    CHECK(m1.config.at("n_train").get<int>() == 3);
    // desk preset filled the rest
    CHECK(m1.config.at("model").at("d_model").get<int>() == 128);

    const fs::path d2 = work_root() / "cfg_run2";
    REQUIRE(run_tool("--config \"" + cfg_file.string() + "\" --run-dir \"" + d2.string() +
                     "\" --seed 7 gen-data")
                .exit_code == 0);
    const Manifest m2 = load_manifest(d2 / "manifest.json");
    CHECK(m2.config.at("seed").get<std::uint64_t>() == 7);
}

TEST_CASE("run config json round-trips through serialization") {
    RunConfig cfg = default_run_config("paper");
    cfg.seed = 42;
    cfg.puzzles = "x.csv";
    cfg.n_train = 7;
    cfg.probe_l2 = 0.25;
    cfg.train.target_loss = 1.5;
    cfg.scan_threshold = 2.25;

    RunConfig back = default_run_config("desk");
    apply_config_json(run_config_json(cfg), back);
    CHECK(run_config_json(back).dump() == run_config_json(cfg).dump());
    CHECK(config_hash(back) == config_hash(cfg));

    // paper preset carries the published training setup
    const RunConfig paper = default_run_config("paper");
    CHECK(paper.model.n_layers == 8);
    CHECK(paper.model.n_heads == 8);
    CHECK(paper.model.d_model == 576);
    CHECK(paper.model.d_mlp == 3456);
    CHECK(paper.train.lr == 1e-3);
    CHECK(paper.train.weight_decay == 0.1);
    CHECK(paper.train.batch_size == 512);

    // hash is sensitive to every serialized field
    RunConfig tweaked = cfg;
    tweaked.margin_bins++;
    CHECK(config_hash(tweaked) != config_hash(cfg));
}

TEST_CASE("fnv-1a hashing matches its reference vectors") {
    // published FNV-1a 64 test vectors
    CHECK(hex64(fnv1a64("", 0)) == "cbf29ce484222325");
    CHECK(hex64(fnv1a64("a", 1)) == "af63dc4c8601ec8c");
    CHECK(hex64(fnv1a64("foobar", 6)) == "85944171f73967e8");

    const fs::path f = work_root() / "hash_probe.bin";
    std::ofstream(f, std::ios::binary) << "foobar";
    CHECK(hash_file(f.string()) == "85944171f73967e8");
}
