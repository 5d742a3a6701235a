// mechlab: pipeline driver around the sudoku-solver interpretability library.
//
// Subcommands form a dependency chain inside one run directory:
//
//   gen-data ──> train ──> eval
//                  │
//                  ├──> capture ──> probe ──> transfer
//                  │                  └────────────> patch
//                  ├──> ablate-head
//                  ├──> ablate-neuron
//                  └──> attrib
//   report  (verifies + indexes everything above)
//
// Every output lands under --run-dir with its content hash recorded in
// manifest.json; a run directory is bound to one config hash and reruns with
// identical inputs are byte-identical. Exit codes: 0 ok, 2 config error,
// 3 missing prerequisite, 4 numeric failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nlohmann/json.hpp"

#include "mechlab/attrib.hpp"
#include "mechlab/checkpoint.hpp"
#include "mechlab/dataset.hpp"
#include "mechlab/decode.hpp"
#include "mechlab/errors.hpp"
#include "mechlab/grid.hpp"
#include "mechlab/model.hpp"
#include "mechlab/probelab.hpp"
#include "mechlab/puzzle_io.hpp"
#include "mechlab/rng.hpp"
#include "mechlab/runconfig.hpp"
#include "mechlab/surgery.hpp"
#include "mechlab/trace.hpp"
#include "mechlab/tracegen.hpp"
#include "mechlab/train.hpp"

namespace fs = std::filesystem;
using namespace mechlab;

namespace {

// Independent seed streams per pipeline stage, all derived from cfg.seed.
namespace salt {
constexpr std::uint64_t kTrainTrace = 0x01, kEvalTrace = 0x02, kModelInit = 0x03,
                        kTrainLoop = 0x04, kEvalDecode = 0x05, kCapture = 0x06, kPositions = 0x07,
                        kPatch = 0x08, kAblate = 0x09, kAttn = 0x0a;
}

std::uint64_t stream_seed(const RunConfig& cfg, std::uint64_t salt_v, std::uint64_t i) {
    return derive_seed(derive_seed(cfg.seed, salt_v), i);
}

// ---------------------------------------------------------------------------
// CSV helpers (deterministic %.9g formatting, LF line endings)

std::string fmt_g(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::string fmt_i(long v) { return std::to_string(v); }

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write report '" + path.string() + "'");
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
        out << "\n";
    }
    if (!out) throw ConfigError("short write to report '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Shared pipeline context

struct Ctx {
    RunConfig cfg;
    RunDir run;
    Manifest manifest;

    fs::path train_sdtr() const { return run.datasets() / "train.sdtr"; }
    fs::path eval_sdtr() const { return run.datasets() / "eval.sdtr"; }
    fs::path train_puzzles() const { return run.datasets() / "train_puzzles.csv"; }
    fs::path eval_puzzles() const { return run.datasets() / "eval_puzzles.csv"; }
    fs::path checkpoint() const { return run.checkpoints() / "model.bin"; }
    fs::path cluesend_acts() const { return run.activations() / "cluesend.bin"; }
    fs::path position_acts() const { return run.activations() / "positions.bin"; }
    fs::path probe_bank(ProbeFamily f, int layer) const {
        return run.probes() / (std::string(family_name(f)) + "_L" + std::to_string(layer) + ".bin");
    }
};

Ctx open_ctx(const RunConfig& cfg, const std::string& run_dir) {
    cfg.validate();
    Ctx ctx{cfg, RunDir{fs::path(run_dir)}, Manifest{}};
    fs::create_directories(ctx.run.root);
    ctx.manifest = open_manifest(ctx.run, cfg);
    return ctx;
}

void finish(Ctx& ctx, const std::vector<fs::path>& outputs) {
    for (const auto& p : outputs) record_output(ctx.manifest, ctx.run, p);
    save_manifest(ctx.manifest, ctx.run.manifest_path());
}

Params<float> load_model(Ctx& ctx) {
    require_input(ctx.manifest, ctx.run, ctx.checkpoint(), "train");
    return load_checkpoint(ctx.checkpoint().string());
}

std::vector<PuzzleRecord> load_eval_puzzles(Ctx& ctx) {
    require_input(ctx.manifest, ctx.run, ctx.eval_puzzles(), "gen-data");
    return load_puzzle_csv(ctx.eval_puzzles().string());
}

std::vector<Board> puzzle_boards(const std::vector<PuzzleRecord>& recs) {
    std::vector<Board> out;
    out.reserve(recs.size());
    for (const auto& r : recs) out.push_back(parse_grid(r.puzzle));
    return out;
}

std::vector<std::vector<TokenId>> clue_prefixes(const Ctx& ctx, const std::vector<Board>& boards,
                                                std::uint64_t salt_v) {
    std::vector<std::vector<TokenId>> out;
    out.reserve(boards.size());
    for (std::size_t i = 0; i < boards.size(); ++i) {
        Rng rng(stream_seed(ctx.cfg, salt_v, i));
        out.push_back(clue_prefix(boards[i], rng));
    }
    return out;
}

// Mined single-candidate prediction states from the eval traces, restricted
// to prefixes the model can actually consume.
std::vector<NsState> mined_eval_states(Ctx& ctx) {
    require_input(ctx.manifest, ctx.run, ctx.eval_sdtr(), "gen-data");
    const std::vector<TraceRecord> records = read_sdtr(ctx.eval_sdtr().string());
    std::vector<NsState> mined = mine_ns_states(records);
    const std::size_t max_seq = static_cast<std::size_t>(ctx.cfg.model.max_seq);
    std::erase_if(mined, [&](const NsState& st) { return st.tokens.size() > max_seq; });
    if (ctx.cfg.scan_states > 0 && mined.size() > static_cast<std::size_t>(ctx.cfg.scan_states))
        mined.resize(static_cast<std::size_t>(ctx.cfg.scan_states));
    return mined;
}

// ---------------------------------------------------------------------------
// Head ablation / head DLA region specs ("layer:head:kind:lines")

struct HeadSpec {
    int layer = 1;
    int head = 0;
    char kind = 'c';  // r | c | b
    int lo = 1, hi = 1;

    std::string region() const {
        std::string s(1, kind);
        s += std::to_string(lo);
        if (hi != lo) s += "-" + std::to_string(hi);
        return s;
    }
    std::vector<int> target_subs() const {
        const int base = kind == 'r' ? 0 : kind == 'c' ? 9 : 18;
        std::vector<int> out;
        for (int i = lo; i <= hi; ++i) out.push_back(base + i - 1);
        return out;
    }
    std::vector<int> control_subs() const {
        const int base = kind == 'r' ? 0 : kind == 'c' ? 9 : 18;
        std::vector<int> out;
        for (int i = 1; i <= 9; ++i)
            if (i < lo || i > hi) out.push_back(base + i - 1);
        return out;
    }
    LineKind line_kind() const {
        return kind == 'r' ? LineKind::Row : kind == 'c' ? LineKind::Col : LineKind::Box;
    }
};

HeadSpec parse_head_spec(const std::string& s, const ModelConfig& mc) {
    HeadSpec spec;
    int lo = 0, hi = 0;
    char kind = 0;
    const int got =
        std::sscanf(s.c_str(), "%d:%d:%c:%d-%d", &spec.layer, &spec.head, &kind, &lo, &hi);
    if (got < 4) throw ConfigError("bad head spec '" + s + "', expected layer:head:kind:lines");
    if (got == 4) hi = lo;
    if (kind != 'r' && kind != 'c' && kind != 'b')
        throw ConfigError("head spec kind must be r, c, or b in '" + s + "'");
    if (lo < 1 || hi > 9 || lo > hi)
        throw ConfigError("head spec lines must lie in 1..9 in '" + s + "'");
    if (spec.layer < 1 || spec.layer > mc.n_layers)
        throw ConfigError("head spec layer out of range in '" + s + "'");
    if (spec.head < 0 || spec.head >= mc.n_heads)
        throw ConfigError("head spec head out of range in '" + s + "'");
    spec.kind = kind;
    spec.lo = lo;
    spec.hi = hi;
    return spec;
}

// The published regions (paper mode) and a same-shaped desk placement.
std::vector<std::string> default_head_specs(const RunConfig& cfg) {
    if (cfg.mode == "paper") return {"4:6:c:4-6", "5:8:r:7-9", "6:3:b:5"};
    return {"2:0:c:4-6", "3:1:r:7-9", "4:0:b:5"};
}

// ---------------------------------------------------------------------------
// Probe families

ProbeFamily parse_family(const std::string& s) {
    if (s == "cell_state") return ProbeFamily::CellState;
    if (s == "cell_candidate") return ProbeFamily::CellCandidate;
    if (s == "substructure" || s == "substructure_presence") return ProbeFamily::SubstructurePresence;
    throw ConfigError("unknown probe family '" + s +
                      "' (use cell_state, cell_candidate, substructure, or all)");
}

Grouping default_grouping(ProbeFamily f) {
    switch (f) {
        case ProbeFamily::CellState: return Grouping::PerTarget;
        case ProbeFamily::CellCandidate: return Grouping::PerCell;
        case ProbeFamily::SubstructurePresence: return Grouping::PerSubstructure;
    }
    return Grouping::PerTarget;
}

const char* grouping_name(Grouping g) {
    switch (g) {
        case Grouping::PerTarget: return "per_target";
        case Grouping::PerCell: return "per_cell";
        case Grouping::PerSubstructure: return "per_substructure";
        case Grouping::PerDigitAcrossSubstructures: return "per_digit";
    }
    return "?";
}

std::string target_name(ProbeFamily f, int t) {
    switch (f) {
        case ProbeFamily::CellState: return "r" + std::to_string(t / 9 + 1) + "c" + std::to_string(t % 9 + 1);
        case ProbeFamily::CellCandidate: {
            const int cell = t / 9;
            return "r" + std::to_string(cell / 9 + 1) + "c" + std::to_string(cell % 9 + 1) + "d" +
                   std::to_string(t % 9 + 1);
        }
        case ProbeFamily::SubstructurePresence: {
            const int s = t / 9, d = t % 9 + 1;
            const std::string line = s < 9    ? "r" + std::to_string(s + 1)
                                     : s < 18 ? "c" + std::to_string(s - 8)
                                              : "b" + std::to_string(s - 17);
            return line + "d" + std::to_string(d);
        }
    }
    return "?";
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(Ctx& ctx) {
    const RunConfig& cfg = ctx.cfg;
    if (cfg.puzzles.empty())
        throw ConfigError("gen-data needs --puzzles CSV (columns id,puzzle,solution,clues,difficulty)");
    const std::size_t need = static_cast<std::size_t>(cfg.n_train) + static_cast<std::size_t>(cfg.n_eval);
    const std::vector<PuzzleRecord> all = load_puzzle_csv(cfg.puzzles, need);
    if (all.size() < need)
        throw ConfigError("puzzle file '" + cfg.puzzles + "' holds " + std::to_string(all.size()) +
                          " puzzles, need n_train + n_eval = " + std::to_string(need));

    const std::vector<PuzzleRecord> train_recs(all.begin(), all.begin() + cfg.n_train);
    const std::vector<PuzzleRecord> eval_recs(all.begin() + cfg.n_train, all.begin() + static_cast<long>(need));

    fs::create_directories(ctx.run.datasets());
    write_puzzle_csv(ctx.train_puzzles().string(), train_recs);
    write_puzzle_csv(ctx.eval_puzzles().string(), eval_recs);

    auto write_traces = [&](const std::vector<PuzzleRecord>& recs, const fs::path& path,
                            std::uint64_t salt_v) {
        SdtrWriter writer(path.string());
        for (std::size_t i = 0; i < recs.size(); ++i) {
            Rng rng(stream_seed(cfg, salt_v, i));
            TraceRecord tr;
            tr.puzzle_id = recs[i].id;
            tr.tokens = generate_trace(parse_grid(recs[i].puzzle), rng);
            writer.add(tr);
        }
        writer.finish();
        std::cout << "wrote " << path.string() << " (" << writer.count() << " traces, max len "
                  << writer.max_len() << ")\n";
    };
    write_traces(train_recs, ctx.train_sdtr(), salt::kTrainTrace);
    write_traces(eval_recs, ctx.eval_sdtr(), salt::kEvalTrace);

    finish(ctx, {ctx.train_puzzles(), ctx.eval_puzzles(), ctx.train_sdtr(), ctx.eval_sdtr()});
    return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(Ctx& ctx) {
    require_input(ctx.manifest, ctx.run, ctx.train_sdtr(), "gen-data");
    const std::vector<TraceRecord> records = read_sdtr(ctx.train_sdtr().string());

    ModelConfig mc = ctx.cfg.model;
    if (mc.seed == 0) mc.seed = stream_seed(ctx.cfg, salt::kModelInit, 0);
    TrainConfig tc = ctx.cfg.train;
    if (tc.seed == 0) tc.seed = stream_seed(ctx.cfg, salt::kTrainLoop, 0);

    Params<float> params = init_params<float>(mc);
    const TrainResult res = train(params, records, tc, &std::cout);

    fs::create_directories(ctx.run.checkpoints());
    save_checkpoint(params, ctx.checkpoint().string(),
                    {{"trained_steps", res.steps}, {"final_loss", res.final_loss}});

    fs::create_directories(ctx.run.reports());
    std::vector<std::vector<std::string>> rows;
    for (const auto& m : res.metrics)
        rows.push_back({fmt_i(m.step), fmt_i(static_cast<long>(m.tokens_seen)), fmt_g(m.lr),
                        fmt_g(m.loss)});
    const fs::path metrics = ctx.run.reports() / "train_metrics.csv";
    write_csv(metrics, {"step", "tokens", "lr", "loss"}, rows);

    std::cout << "trained " << res.steps << " steps, final loss " << fmt_g(res.final_loss)
              << (res.stopped_early ? " (hit target)" : "") << "\n";
    finish(ctx, {ctx.checkpoint(), metrics});
    return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(Ctx& ctx) {
    const Params<float> params = load_model(ctx);
    const std::vector<PuzzleRecord> puzzles = load_eval_puzzles(ctx);

    GreedyModelPolicy policy(params);
    EvalOptions opt;
    opt.seed = stream_seed(ctx.cfg, salt::kEvalDecode, 0);
    opt.max_new_tokens = ctx.cfg.model.max_seq;
    const EvalResult res = evaluate_solver(policy, puzzles, opt);

    fs::create_directories(ctx.run.reports());
    const fs::path acc = ctx.run.reports() / "eval_accuracy.csv";
    write_csv(acc,
              {"cells_total", "cells_correct", "cell_accuracy", "grids_total", "grids_solved",
               "grid_accuracy"},
              {{fmt_i(res.cells_total), fmt_i(res.cells_correct), fmt_g(res.cell_accuracy()),
                fmt_i(res.grids_total), fmt_i(res.grids_solved), fmt_g(res.grid_accuracy())}});

    std::vector<std::vector<std::string>> rows;
    for (const auto& p : res.per_puzzle)
        rows.push_back({p.id, fmt_i(p.non_clue_cells), fmt_i(p.correct_cells),
                        p.solved ? "1" : "0", fmt_i(p.generated_tokens)});
    const fs::path per = ctx.run.reports() / "eval_per_puzzle.csv";
    write_csv(per, {"id", "non_clue_cells", "correct_cells", "solved", "generated_tokens"}, rows);

    std::cout << "cell accuracy " << fmt_g(res.cell_accuracy()) << ", grid accuracy "
              << fmt_g(res.grid_accuracy()) << " over " << res.grids_total << " puzzles\n";
    finish(ctx, {acc, per});
    return 0;
}

// ---------------------------------------------------------------------------
// capture

int cmd_capture(Ctx& ctx) {
    const Params<float> params = load_model(ctx);
    const std::vector<PuzzleRecord> puzzles = load_eval_puzzles(ctx);
    const ModelConfig& mc = params.config;

    std::vector<Board> boards = puzzle_boards(puzzles);
    if (ctx.cfg.capture_states > 0 &&
        boards.size() > static_cast<std::size_t>(ctx.cfg.capture_states))
        boards.resize(static_cast<std::size_t>(ctx.cfg.capture_states));

    CaptureSpec cap;
    cap.resid_post = true;

    fs::create_directories(ctx.run.activations());

    // Clue-prefix states: one row per board, every residual site.
    {
        const auto n = static_cast<Eigen::Index>(boards.size());
        std::vector<MatF> acts(static_cast<std::size_t>(mc.n_layers) + 1);
        for (auto& m : acts) m.resize(n, mc.d_model);
        std::vector<std::string> board_text(boards.size());
        parallel_for(boards.size(), [&](std::size_t i) {
            Rng rng(stream_seed(ctx.cfg, salt::kCapture, i));
            const std::vector<TokenId> prefix = clue_prefix(boards[i], rng);
            const auto fwd = forward(params, prefix, cap);
            const auto last = static_cast<Eigen::Index>(prefix.size()) - 1;
            for (int l = 0; l <= mc.n_layers; ++l)
                acts[static_cast<std::size_t>(l)].row(static_cast<Eigen::Index>(i)) =
                    fwd.acts.resid_post(l).row(last);
            board_text[i] = to_text(boards[i]);
        });

        TensorContainer c;
        c.config = {{"kind", "activations"},
                    {"site", "cluesend"},
                    {"n_states", boards.size()},
                    {"n_layers", mc.n_layers},
                    {"d_model", mc.d_model},
                    {"boards", board_text}};
        for (int l = 0; l <= mc.n_layers; ++l) {
            const MatF& m = acts[static_cast<std::size_t>(l)];
            c.add("resid_post/L" + std::to_string(l),
                  {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  m.data(), static_cast<std::size_t>(m.size()));
        }
        save_container(c, ctx.cluesend_acts().string());
        std::cout << "captured " << boards.size() << " clue-prefix states\n";
    }

    // Mid-trace states: sampled placement positions from the eval traces.
    {
        require_input(ctx.manifest, ctx.run, ctx.eval_sdtr(), "gen-data");
        const std::vector<TraceRecord> records = read_sdtr(ctx.eval_sdtr().string());
        const std::size_t max_seq = static_cast<std::size_t>(mc.max_seq);

        std::vector<std::vector<TokenId>> seqs;
        std::vector<std::vector<int>> picks;  // positions per sequence
        std::vector<std::string> state_text;
        for (std::size_t ti = 0; ti < records.size(); ++ti) {
            const auto& tokens = records[ti].tokens;
            const std::size_t len = std::min(tokens.size(), max_seq);
            Board board;
            std::vector<Board> stack;
            bool past_clues = false;
            std::vector<std::pair<int, Board>> candidates;
            for (std::size_t i = 0; i < len; ++i) {
                const TokenId tok = tokens[i];
                if (tok < kNumPlacementTokens) {
                    const Placement pl = decode_placement(tok);
                    board.set(pl.r, pl.c, pl.d);
                    if (past_clues) candidates.emplace_back(static_cast<int>(i), board);
                } else if (tok == kTokCluesEnd) {
                    past_clues = true;
                    candidates.emplace_back(static_cast<int>(i), board);
                } else if (tok == kTokPush) {
                    stack.push_back(board);
                } else if (tok == kTokPop) {
                    if (stack.empty()) break;
                    board = stack.back();
                    stack.pop_back();
                } else {
                    break;
                }
            }
            if (candidates.empty()) continue;

            Rng rng(stream_seed(ctx.cfg, salt::kPositions, ti));
            std::vector<std::size_t> order(candidates.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);
            const std::size_t take =
                std::min<std::size_t>(order.size(), static_cast<std::size_t>(ctx.cfg.positions_per_trace));
            std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<long>(take));
            std::sort(chosen.begin(), chosen.end());

            std::vector<int> pos;
            for (std::size_t k : chosen) {
                pos.push_back(candidates[k].first);
                state_text.push_back(to_text(candidates[k].second));
            }
            seqs.emplace_back(tokens.begin(), tokens.begin() + static_cast<long>(len));
            picks.push_back(std::move(pos));
        }

        std::size_t n_rows = state_text.size();
        std::vector<MatF> acts(static_cast<std::size_t>(mc.n_layers) + 1);
        for (auto& m : acts) m.resize(static_cast<Eigen::Index>(n_rows), mc.d_model);
        std::vector<std::size_t> row_base(seqs.size(), 0);
        for (std::size_t s = 1; s < seqs.size(); ++s)
            row_base[s] = row_base[s - 1] + picks[s - 1].size();
        parallel_for(seqs.size(), [&](std::size_t s) {
            const auto fwd = forward(params, seqs[s], cap);
            for (std::size_t k = 0; k < picks[s].size(); ++k)
                for (int l = 0; l <= mc.n_layers; ++l)
                    acts[static_cast<std::size_t>(l)].row(static_cast<Eigen::Index>(row_base[s] + k)) =
                        fwd.acts.resid_post(l).row(picks[s][k]);
        });

        TensorContainer c;
        c.config = {{"kind", "activations"},
                    {"site", "positions"},
                    {"n_states", n_rows},
                    {"n_layers", mc.n_layers},
                    {"d_model", mc.d_model},
                    {"boards", state_text}};
        for (int l = 0; l <= mc.n_layers; ++l) {
            const MatF& m = acts[static_cast<std::size_t>(l)];
            c.add("resid_post/L" + std::to_string(l),
                  {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  m.data(), static_cast<std::size_t>(m.size()));
        }
        save_container(c, ctx.position_acts().string());
        std::cout << "captured " << n_rows << " mid-trace states\n";
    }

    finish(ctx, {ctx.cluesend_acts(), ctx.position_acts()});
    return 0;
}

// ---------------------------------------------------------------------------
// probe

struct ActsFile {
    std::vector<MatF> by_layer;  // resid_post 0..L
    std::vector<Board> boards;
};

ActsFile load_acts(Ctx& ctx, const fs::path& path, const std::string& producer) {
    require_input(ctx.manifest, ctx.run, path, producer);
    const TensorContainer c = load_container(path.string());
    ActsFile out;
    const int n_layers = c.config.at("n_layers").get<int>();
    for (int l = 0; l <= n_layers; ++l) {
        const TensorEntry& e = c.at("resid_post/L" + std::to_string(l));
        if (e.shape.size() != 2) throw FormatError("activation tensor is not 2-d");
        MatF m(static_cast<Eigen::Index>(e.shape[0]), static_cast<Eigen::Index>(e.shape[1]));
        std::copy(e.data.begin(), e.data.end(), m.data());
        out.by_layer.push_back(std::move(m));
    }
    for (const auto& s : c.config.at("boards")) out.boards.push_back(parse_grid(s.get<std::string>()));
    if (out.boards.size() != static_cast<std::size_t>(out.by_layer[0].rows()))
        throw FormatError("activation file boards do not match row count");
    return out;
}

int cmd_probe(Ctx& ctx, const std::string& family_arg) {
    const ActsFile acts = load_acts(ctx, ctx.cluesend_acts(), "capture");
    const int n_layers = static_cast<int>(acts.by_layer.size()) - 1;
    const auto n = static_cast<Eigen::Index>(acts.boards.size());
    const auto n_eval = std::max<Eigen::Index>(
        1, static_cast<Eigen::Index>(std::floor(static_cast<double>(n) * ctx.cfg.probe_eval_fraction)));
    const Eigen::Index n_fit = n - n_eval;
    if (n_fit < 1) throw ConfigError("not enough captured states to fit probes");

    std::vector<ProbeFamily> families;
    if (family_arg == "all")
        families = {ProbeFamily::CellState, ProbeFamily::CellCandidate,
                    ProbeFamily::SubstructurePresence};
    else
        families = {parse_family(family_arg)};

    const std::vector<Board> fit_boards(acts.boards.begin(), acts.boards.begin() + n_fit);
    const std::vector<Board> eval_boards(acts.boards.begin() + n_fit, acts.boards.end());

    FitOptions fit_opt;
    fit_opt.l2 = ctx.cfg.probe_l2;
    fit_opt.max_iter = ctx.cfg.probe_max_iter;

    fs::create_directories(ctx.run.probes());
    fs::create_directories(ctx.run.reports());

    std::vector<fs::path> outputs;
    std::vector<std::vector<std::string>> report_rows;
    std::map<ProbeFamily, std::vector<std::vector<std::string>>> target_rows;
    std::vector<std::vector<std::string>> cosine_rows;

    for (ProbeFamily family : families) {
        const LabelTensor fit_labels = build_labels(family, fit_boards);
        const LabelTensor eval_labels = build_labels(family, eval_boards);
        const Grouping grouping = default_grouping(family);
        for (int l = 0; l <= n_layers; ++l) {
            const MatF& x = acts.by_layer[static_cast<std::size_t>(l)];
            const MatF x_fit = x.topRows(n_fit);
            const MatF x_eval = x.bottomRows(n_eval);

            const ProbeBank bank = fit_family(family, l, x_fit, fit_labels, fit_opt);
            const fs::path bank_path = ctx.probe_bank(family, l);
            save_probe_bank(bank, bank_path.string());
            outputs.push_back(bank_path);

            const ProbeEvalResult ev = evaluate_probes(bank, x_eval, eval_labels, grouping);
            report_rows.push_back({family_name(family), fmt_i(l), fmt_i(n_fit), fmt_i(n_eval),
                                   fmt_g(ev.macro_accuracy), fmt_g(ev.macro_auc), fmt_g(ev.macro_mse),
                                   fmt_g(ev.grouped_exact), grouping_name(grouping)});
            for (std::size_t t = 0; t < ev.accuracy.size(); ++t)
                target_rows[family].push_back({family_name(family), fmt_i(l),
                                               fmt_i(static_cast<long>(t)),
                                               target_name(family, static_cast<int>(t)),
                                               fmt_g(ev.accuracy[t]), fmt_g(ev.auc[t]),
                                               fmt_g(ev.mse[t])});

            if (family == ProbeFamily::CellCandidate) {
                for (const auto& [cat, st] : probe_cosine_structure(bank))
                    cosine_rows.push_back({fmt_i(l), pair_category_name(cat), fmt_g(st.mean),
                                           fmt_g(st.stddev), fmt_i(st.count)});
            }
            std::cout << family_name(family) << " L" << l << ": grouped exact "
                      << fmt_g(ev.grouped_exact) << ", macro auc " << fmt_g(ev.macro_auc) << "\n";
        }
    }

    const fs::path report = ctx.run.reports() / "probe_report.csv";
    write_csv(report,
              {"family", "layer", "states_fit", "states_eval", "macro_accuracy", "macro_auc",
               "macro_mse", "grouped_exact", "grouping"},
              report_rows);
    outputs.push_back(report);

    for (const auto& [family, rows] : target_rows) {
        const fs::path p =
            ctx.run.reports() / ("probe_targets_" + std::string(family_name(family)) + ".csv");
        write_csv(p, {"family", "layer", "target", "name", "accuracy", "auc", "mse"}, rows);
        outputs.push_back(p);
    }
    if (!cosine_rows.empty()) {
        const fs::path p = ctx.run.reports() / "probe_cosine.csv";
        write_csv(p, {"layer", "category", "mean", "stddev", "count"}, cosine_rows);
        outputs.push_back(p);
    }

    finish(ctx, outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// transfer

int cmd_transfer(Ctx& ctx, const std::string& family_arg, int layer_arg) {
    const ProbeFamily family = parse_family(family_arg == "all" ? "substructure" : family_arg);
    const ActsFile clue = load_acts(ctx, ctx.cluesend_acts(), "capture");
    const int n_layers = static_cast<int>(clue.by_layer.size()) - 1;
    const Grouping grouping = default_grouping(family);

    std::vector<ProbeBank> banks;
    for (int l = 0; l <= n_layers; ++l) {
        const fs::path p = ctx.probe_bank(family, l);
        require_input(ctx.manifest, ctx.run, p, "probe");
        banks.push_back(load_probe_bank(p.string()));
    }

    // Cross-layer: every bank scored on every layer's held-out activations.
    const auto n = static_cast<Eigen::Index>(clue.boards.size());
    const auto n_eval = std::max<Eigen::Index>(
        1, static_cast<Eigen::Index>(std::floor(static_cast<double>(n) * ctx.cfg.probe_eval_fraction)));
    const Eigen::Index n_fit = n - n_eval;
    const std::vector<Board> eval_boards(clue.boards.begin() + n_fit, clue.boards.end());
    const LabelTensor eval_labels = build_labels(family, eval_boards);
    std::vector<MatF> eval_acts;
    for (const MatF& m : clue.by_layer) eval_acts.push_back(m.bottomRows(n_eval));
    const MatD grid = cross_layer_transfer(banks, eval_acts, eval_labels, grouping);

    fs::create_directories(ctx.run.reports());
    std::vector<std::vector<std::string>> rows;
    for (Eigen::Index i = 0; i < grid.rows(); ++i)
        for (Eigen::Index j = 0; j < grid.cols(); ++j)
            rows.push_back({family_name(family), fmt_i(i), fmt_i(j), fmt_g(grid(i, j))});
    const fs::path layers_csv = ctx.run.reports() / "transfer_layers.csv";
    write_csv(layers_csv, {"family", "train_layer", "eval_layer", "grouped_exact"}, rows);

    // Cross-position: one frozen bank applied to mid-trace states.
    const int layer = layer_arg >= 0 ? layer_arg : n_layers / 2;
    if (layer > n_layers) throw ConfigError("transfer --layer exceeds the model depth");
    const ActsFile pos = load_acts(ctx, ctx.position_acts(), "capture");
    const std::vector<PositionTransferPoint> pts = cross_position_transfer(
        banks[static_cast<std::size_t>(layer)], pos.by_layer[static_cast<std::size_t>(layer)],
        pos.boards, grouping);

    std::vector<std::vector<std::string>> prow;
    for (const auto& pt : pts)
        prow.push_back({family_name(family), fmt_i(layer), fmt_i(pt.empty_cells),
                        fmt_g(pt.exact_match), fmt_g(pt.mse), fmt_g(pt.auc), fmt_i(pt.states)});
    const fs::path pos_csv = ctx.run.reports() / "transfer_positions.csv";
    write_csv(pos_csv, {"family", "layer", "empty_cells", "exact_match", "mse", "auc", "states"},
              prow);

    std::cout << "cross-layer transfer grid " << grid.rows() << "x" << grid.cols() << ", "
              << pts.size() << " position buckets at layer " << layer << "\n";
    finish(ctx, {layers_csv, pos_csv});
    return 0;
}

// ---------------------------------------------------------------------------
// patch

int cmd_patch(Ctx& ctx) {
    const Params<float> params = load_model(ctx);
    const std::vector<PuzzleRecord> puzzles = load_eval_puzzles(ctx);
    const ModelConfig& mc = params.config;

    std::vector<ProbeBank> banks;
    for (int l = 0; l < mc.n_layers; ++l) {
        const fs::path p = ctx.probe_bank(ProbeFamily::SubstructurePresence, l);
        require_input(ctx.manifest, ctx.run, p, "probe");
        banks.push_back(load_probe_bank(p.string()));
    }

    // A case is a puzzle where the clean model's own top-1 at the clue
    // boundary is a legal placement; that placement becomes the patch target.
    std::vector<PatchCase> cases;
    const std::vector<Board> boards = puzzle_boards(puzzles);
    for (std::size_t i = 0; i < boards.size(); ++i) {
        if (cases.size() >= static_cast<std::size_t>(ctx.cfg.patch_cases)) break;
        Rng rng(stream_seed(ctx.cfg, salt::kPatch, i));
        const std::vector<TokenId> prefix = clue_prefix(boards[i], rng);
        const auto fwd = forward(params, prefix);
        const auto logits = fwd.logits.row(static_cast<Eigen::Index>(prefix.size()) - 1);
        Eigen::Index top1 = 0;
        logits.maxCoeff(&top1);
        if (top1 >= kNumPlacementTokens) continue;
        const Placement pl = decode_placement(static_cast<TokenId>(top1));
        const int cell = (pl.r - 1) * 9 + (pl.c - 1);
        if (!boards[i].empty_at(cell) || !is_valid_placement(boards[i], pl.r, pl.c, pl.d)) continue;
        Rng rng_case(stream_seed(ctx.cfg, salt::kPatch, i));  // same stream: g1 == prefix
        cases.push_back(make_patch_case(boards[i], cell, pl.d, rng_case));
    }
    if (cases.empty())
        throw ConfigError("no patch cases: the model's top-1 is never a legal placement on the "
                          "eval boards (train longer or enlarge n_eval)");

    fs::create_directories(ctx.run.reports());
    std::vector<std::vector<std::string>> rows;
    for (int l = 0; l < mc.n_layers; ++l) {
        const std::vector<PatchResult> rs =
            run_patch_cases(params, cases, l, banks[static_cast<std::size_t>(l)]);
        const PatchAggregate agg = aggregate_patch_results(l, rs);
        rows.push_back({fmt_i(l), fmt_g(agg.drop.mean), fmt_g(agg.patched_logit_mean),
                        fmt_g(agg.valid_top1_rate), fmt_g(agg.changed_top1_rate),
                        fmt_g(agg.drop.stderr_), fmt_g(agg.clean_logit_mean), fmt_i(agg.n)});
        std::cout << "layer " << l << ": logit drop " << fmt_g(agg.drop.mean) << " +/- "
                  << fmt_g(agg.drop.stderr_) << " over " << agg.n << " cases\n";
    }

    const fs::path csv = ctx.run.reports() / "patch_layers.csv";
    write_csv(csv,
              {"layer", "logit_drop", "patched_logit", "valid_top1", "changed_top1",
               "logit_drop_stderr", "clean_logit", "n"},
              rows);
    finish(ctx, {csv});
    return 0;
}

// ---------------------------------------------------------------------------
// ablate-head

int cmd_ablate_head(Ctx& ctx, std::vector<std::string> spec_args) {
    const Params<float> params = load_model(ctx);
    const std::vector<PuzzleRecord> puzzles = load_eval_puzzles(ctx);
    const std::vector<Board> boards = puzzle_boards(puzzles);
    const std::vector<std::vector<TokenId>> seqs = clue_prefixes(ctx, boards, salt::kAblate);

    std::vector<HeadSpec> specs;
    if (spec_args.empty()) {
        // mode presets, silently dropping entries the model shape cannot host
        for (const auto& s : default_head_specs(ctx.cfg)) {
            try {
                specs.push_back(parse_head_spec(s, params.config));
            } catch (const ConfigError&) {
            }
        }
        if (specs.empty())
            throw ConfigError("no preset head region fits this model; pass --spec layer:head:kind:lines");
    } else {
        for (const auto& s : spec_args) specs.push_back(parse_head_spec(s, params.config));
    }

    std::size_t n_ref = ctx.cfg.ablate_ref_states > 0
                            ? static_cast<std::size_t>(ctx.cfg.ablate_ref_states)
                            : seqs.size() / 2;
    n_ref = std::min(n_ref, seqs.size() - 1);
    if (n_ref == 0) throw ConfigError("head ablation needs at least 2 eval boards");
    const std::vector<std::vector<TokenId>> ref_seqs(seqs.begin(), seqs.begin() + static_cast<long>(n_ref));
    const std::vector<std::vector<TokenId>> eval_seqs(seqs.begin() + static_cast<long>(n_ref), seqs.end());
    const std::vector<Board> eval_boards(boards.begin() + static_cast<long>(n_ref), boards.end());

    fs::create_directories(ctx.run.reports());
    std::vector<std::vector<std::string>> rows;
    for (const HeadSpec& spec : specs) {
        const VecF mean_out = mean_head_output(params, ref_seqs, spec.layer, spec.head);
        const HeadAblationStats st =
            mean_ablate_head(params, eval_seqs, eval_boards, spec.layer, spec.head, mean_out,
                             spec.target_subs(), spec.control_subs());
        rows.push_back({fmt_i(spec.layer), fmt_i(spec.head), spec.region(), fmt_g(st.target.mean),
                        fmt_g(st.target.stderr_), fmt_i(st.target.n), fmt_g(st.control.mean),
                        fmt_g(st.control.stderr_), fmt_i(st.control.n)});
        std::cout << "L" << spec.layer << "H" << spec.head << " " << spec.region()
                  << ": target " << fmt_g(st.target.mean) << " +/- " << fmt_g(st.target.stderr_)
                  << ", control " << fmt_g(st.control.mean) << " +/- " << fmt_g(st.control.stderr_)
                  << "\n";
    }

    const fs::path csv = ctx.run.reports() / "head_ablation.csv";
    write_csv(csv,
              {"layer", "head", "region", "target_delta", "target_stderr", "target_n",
               "control_delta", "control_stderr", "control_n"},
              rows);
    finish(ctx, {csv});
    return 0;
}

// ---------------------------------------------------------------------------
// ablate-neuron

int cmd_ablate_neuron(Ctx& ctx) {
    const Params<float> params = load_model(ctx);
    const ModelConfig& mc = params.config;
    const std::vector<NsState> mined = mined_eval_states(ctx);
    if (mined.empty()) throw ConfigError("no single-candidate states found in the eval traces");

    // One forward per state: feed the scan and the per-neuron reference mean.
    NeuronScanAccumulator acc(mc.d_mlp);
    VecD ref_sum = VecD::Zero(mc.d_mlp);
    CaptureSpec cap;
    cap.mlp_post_act = true;
    const std::size_t block = 64;
    std::vector<VecF> rows_buf(block);
    for (std::size_t base = 0; base < mined.size(); base += block) {
        const std::size_t hi = std::min(mined.size(), base + block);
        parallel_for(hi - base, [&](std::size_t k) {
            const NsState& st = mined[base + k];
            const auto fwd = forward(params, st.tokens, cap);
            rows_buf[k] = fwd.acts.mlp_post_act(mc.n_layers).row(st.pos);
        });
        for (std::size_t k = 0; k < hi - base; ++k) {
            acc.add(mined[base + k].board, rows_buf[k]);
            ref_sum += rows_buf[k].cast<double>();
        }
    }
    const VecD ref_mean = ref_sum / static_cast<double>(mined.size());
    const NeuronScanReport scan = neuron_scan(acc, ctx.cfg.scan_threshold);

    std::map<int, std::vector<std::pair<int, float>>> detectors_by_cell;
    for (const auto& d : scan.detectors)
        detectors_by_cell[d.cell].emplace_back(d.neuron, static_cast<float>(ref_mean(d.neuron)));

    // States whose predicted cell has detectors and whose board exposes a
    // second single-candidate cell (the unablated control placement).
    std::vector<NsCase> cases;
    for (const NsState& st : mined) {
        const auto it = detectors_by_cell.find(st.cell);
        if (it == detectors_by_cell.end()) continue;
        const auto singles = find_naked_singles(st.board);
        const Placement* other = nullptr;
        for (const auto& s : singles) {
            const int cell = (s.r - 1) * 9 + (s.c - 1);
            if (cell != st.cell) {
                other = &s;
                break;
            }
        }
        if (!other) continue;
        NsCase nc;
        nc.tokens = st.tokens;
        nc.pos = st.pos;
        nc.target = encode_placement(st.cell / 9 + 1, st.cell % 9 + 1, st.digit);
        nc.other = encode_placement(*other);
        nc.neurons = it->second;
        cases.push_back(std::move(nc));
    }

    fs::create_directories(ctx.run.reports());
    std::vector<std::vector<std::string>> rows;
    if (cases.empty()) {
        const std::string nan = "nan";
        rows = {{"target_logit_drop", nan, nan, "0"},
                {"target_prob_drop", nan, nan, "0"},
                {"other_logit_drop", nan, nan, "0"}};
        std::cout << "no ablation cases (" << scan.detectors.size()
                  << " detector neurons at threshold " << fmt_g(ctx.cfg.scan_threshold) << ")\n";
    } else {
        const NsAblationStats st = ablate_ns_neurons(params, cases);
        rows = {{"target_logit_drop", fmt_g(st.logit_drop.mean), fmt_g(st.logit_drop.stderr_),
                 fmt_i(st.logit_drop.n)},
                {"target_prob_drop", fmt_g(st.prob_drop.mean), fmt_g(st.prob_drop.stderr_),
                 fmt_i(st.prob_drop.n)},
                {"other_logit_drop", fmt_g(st.other_drop.mean), fmt_g(st.other_drop.stderr_),
                 fmt_i(st.other_drop.n)}};
        std::cout << "ablated " << cases.size() << " states: target logit drop "
                  << fmt_g(st.logit_drop.mean) << " +/- " << fmt_g(st.logit_drop.stderr_) << "\n";
    }

    const fs::path csv = ctx.run.reports() / "ns_ablation.csv";
    write_csv(csv, {"metric", "mean", "stderr", "n"}, rows);
    finish(ctx, {csv});
    return 0;
}

// ---------------------------------------------------------------------------
// attrib

double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double m = 0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double s = 0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

int cmd_attrib(Ctx& ctx) {
    const Params<float> params = load_model(ctx);
    const ModelConfig& mc = params.config;
    const std::vector<PuzzleRecord> puzzles = load_eval_puzzles(ctx);
    const std::vector<Board> boards = puzzle_boards(puzzles);
    const std::vector<std::vector<TokenId>> prefixes = clue_prefixes(ctx, boards, salt::kAttn);
    const std::vector<NsState> mined = mined_eval_states(ctx);

    fs::create_directories(ctx.run.reports());
    fs::create_directories(ctx.run.reports() / "attention");
    fs::create_directories(ctx.run.reports() / "head_dla");
    std::vector<fs::path> outputs;

    // Margin of the correct digit under the pre-final-MLP lens.
    {
        std::vector<std::vector<std::string>> hist_rows, summary_rows;
        if (!mined.empty()) {
            const NsMarginResult res = ns_margin_analysis(params, mined);
            std::vector<double> margins;
            for (const auto& p : res.points) margins.push_back(p.margin);
            const double lo = *std::min_element(margins.begin(), margins.end());
            const double hi = *std::max_element(margins.begin(), margins.end());
            const int bins = ctx.cfg.margin_bins;
            const double width = (hi > lo ? hi - lo : 1.0) / bins;
            std::vector<long> counts(static_cast<std::size_t>(bins), 0);
            for (double m : margins) {
                int b = static_cast<int>((m - lo) / width);
                if (b >= bins) b = bins - 1;
                if (b < 0) b = 0;
                counts[static_cast<std::size_t>(b)]++;
            }
            for (int b = 0; b < bins; ++b)
                hist_rows.push_back({fmt_g(lo + b * width), fmt_g(lo + (b + 1) * width),
                                     fmt_i(counts[static_cast<std::size_t>(b)])});
            summary_rows.push_back({fmt_i(static_cast<long>(margins.size())),
                                    fmt_g(res.frac_rank1),
                                    fmt_g(mean_stderr(margins).mean),
                                    fmt_g(percentile(margins, 50.0))});
            std::cout << "margin over " << margins.size() << " states: rank-1 fraction "
                      << fmt_g(res.frac_rank1) << "\n";
        }
        const fs::path hist = ctx.run.reports() / "margin_hist.csv";
        write_csv(hist, {"bin_lo", "bin_hi", "count"}, hist_rows);
        const fs::path summ = ctx.run.reports() / "margin_summary.csv";
        write_csv(summ, {"states", "frac_rank1", "mean_margin", "median_margin"}, summary_rows);
        outputs.push_back(hist);
        outputs.push_back(summ);
    }

    // Layer-by-layer lens on one representative single-candidate state.
    {
        std::vector<std::vector<std::string>> rows;
        if (!mined.empty()) {
            const NsState& st = mined.front();
            const MatD trace = logit_lens_trace(params, st.tokens, st.pos, st.cell);
            for (Eigen::Index r = 0; r < trace.rows(); ++r)
                for (int d = 1; d <= 9; ++d)
                    rows.push_back({lens_site_name(static_cast<int>(r)), fmt_i(d),
                                    fmt_g(trace(r, d - 1)), d == st.digit ? "1" : "0"});
        }
        const fs::path p = ctx.run.reports() / "lens_trace.csv";
        write_csv(p, {"site", "digit", "logit", "is_target"}, rows);
        outputs.push_back(p);
    }

    // Clue-boundary attention folded onto the grid, every head.
    {
        std::vector<std::vector<std::string>> rows;
        for (int l = 1; l <= mc.n_layers; ++l) {
            for (int h = 0; h < mc.n_heads; ++h) {
                const AttentionGrid g = attention_grid(params, prefixes, l, h);
                const std::string stem = "L" + std::to_string(l) + "H" + std::to_string(h);
                const fs::path csv = ctx.run.reports() / "attention" / (stem + ".csv");
                const fs::path svg = ctx.run.reports() / "attention" / (stem + ".svg");
                write_heatmap_csv(g.grid, csv.string());
                write_heatmap_svg(g.grid, svg.string());
                outputs.push_back(csv);
                outputs.push_back(svg);
                rows.push_back({fmt_i(l), fmt_i(h), fmt_g(g.non_placement_mass), fmt_i(g.n)});
            }
        }
        const fs::path p = ctx.run.reports() / "attention_summary.csv";
        write_csv(p, {"layer", "head", "non_placement_mass", "states"}, rows);
        outputs.push_back(p);
    }

    // Direct logit attribution of the region heads, split by digit presence.
    {
        std::vector<std::vector<std::string>> line_rows;
        for (const auto& s : default_head_specs(ctx.cfg)) {
            HeadSpec spec;
            try {
                spec = parse_head_spec(s, mc);
            } catch (const ConfigError&) {
                continue;  // desk defaults on a custom-shaped model: skip quietly
            }
            const HeadDlaResult hd =
                head_dla(params, prefixes, boards, spec.layer, spec.head, spec.line_kind(),
                         spec.target_subs());
            const std::string stem = "L" + std::to_string(spec.layer) + "H" + std::to_string(spec.head);
            const fs::path pres = ctx.run.reports() / "head_dla" / (stem + "_present.csv");
            const fs::path abs = ctx.run.reports() / "head_dla" / (stem + "_absent.csv");
            write_heatmap_csv(hd.present, pres.string());
            write_heatmap_csv(hd.absent, abs.string());
            outputs.push_back(pres);
            outputs.push_back(abs);
            for (const auto& ld : hd.lines)
                line_rows.push_back({fmt_i(spec.layer), fmt_i(spec.head), fmt_i(ld.substructure),
                                     fmt_i(ld.digit), fmt_g(ld.present_mean), fmt_i(ld.present_n),
                                     fmt_g(ld.absent_mean), fmt_i(ld.absent_n)});
        }
        const fs::path p = ctx.run.reports() / "head_dla_lines.csv";
        write_csv(p,
                  {"layer", "head", "substructure", "digit", "present_mean", "present_n",
                   "absent_mean", "absent_n"},
                  line_rows);
        outputs.push_back(p);
    }

    // Single-candidate neuron scan + weight-path attribution percentiles.
    {
        NeuronScanAccumulator acc = mined.empty() ? NeuronScanAccumulator(mc.d_mlp)
                                                  : scan_states(params, mined);
        const NeuronScanReport scan = neuron_scan(acc, ctx.cfg.scan_threshold);

        std::vector<std::vector<std::string>> det_rows;
        for (const auto& d : scan.detectors)
            det_rows.push_back({fmt_i(d.neuron), fmt_i(d.cell), fmt_g(d.gap)});
        const fs::path det = ctx.run.reports() / "ns_detectors.csv";
        write_csv(det, {"neuron", "cell", "gap"}, det_rows);
        outputs.push_back(det);

        const fs::path summ = ctx.run.reports() / "ns_scan_summary.csv";
        write_csv(summ,
                  {"states", "threshold", "detectors", "cells_zero", "cells_one", "cells_two_plus"},
                  {{fmt_i(static_cast<long>(mined.size())), fmt_g(scan.threshold),
                    fmt_i(static_cast<long>(scan.detectors.size())), fmt_i(scan.coverage[0]),
                    fmt_i(scan.coverage[1]), fmt_i(scan.coverage[2])}});
        outputs.push_back(summ);
        std::cout << scan.detectors.size() << " detector neurons; cell coverage "
                  << scan.coverage[0] << "/" << scan.coverage[1] << "/" << scan.coverage[2]
                  << " (none/one/two+)\n";

        // Activation profile of the strongest detector across candidate counts.
        std::vector<std::vector<std::string>> prof_rows;
        if (!scan.detectors.empty()) {
            const auto best = std::max_element(
                scan.detectors.begin(), scan.detectors.end(),
                [](const auto& a, const auto& b) { return a.gap < b.gap; });
            for (int count = 1; count <= 9; ++count)
                prof_rows.push_back({fmt_i(best->neuron), fmt_i(best->cell), fmt_i(count),
                                     fmt_g(acc.bucket_mean(best->cell, count, best->neuron)),
                                     fmt_i(acc.bucket_count(best->cell, count))});
        }
        const fs::path prof = ctx.run.reports() / "ns_activation_profile.csv";
        write_csv(prof, {"neuron", "cell", "candidate_count", "mean_activation", "states"},
                  prof_rows);
        outputs.push_back(prof);

        // Weight-path DLA of each detector onto its cell's nine tokens vs the
        // other 720 placement tokens, summarized over detectors.
        std::vector<double> tm, ts, om, os;
        for (const auto& d : scan.detectors) {
            const NeuronDlaSummary s = neuron_dla_summary(neuron_weight_dla(params, d.neuron), d.cell);
            tm.push_back(s.target_mean);
            ts.push_back(s.target_std);
            om.push_back(s.other_mean);
            os.push_back(s.other_std);
        }
        std::vector<std::vector<std::string>> dla_rows;
        auto stat_row = [&](const std::string& name, auto fn) {
            dla_rows.push_back({name, fmt_g(fn(tm)), fmt_g(fn(ts)), fmt_g(fn(om)), fmt_g(fn(os))});
        };
        const double nan = std::numeric_limits<double>::quiet_NaN();
        auto mean_of = [&](const std::vector<double>& v) {
            return v.empty() ? nan : mean_stderr(v).mean;
        };
        auto std_of = [&](const std::vector<double>& v) { return v.empty() ? nan : sample_std(v); };
        auto pct = [&](double p) {
            return [p, nan](const std::vector<double>& v) { return v.empty() ? nan : percentile(v, p); };
        };
        stat_row("mean", mean_of);
        stat_row("std", std_of);
        stat_row("min", pct(0.0));
        stat_row("p25", pct(25.0));
        stat_row("p50", pct(50.0));
        stat_row("p75", pct(75.0));
        stat_row("max", pct(100.0));
        const fs::path dla = ctx.run.reports() / "ns_neuron_dla.csv";
        write_csv(dla, {"statistic", "target_mean", "target_std", "other_mean", "other_std"},
                  dla_rows);
        outputs.push_back(dla);
    }

    // Unembedding geometry: cosine by shared row/col/box/digit.
    {
        std::vector<std::vector<std::string>> rows;
        for (const CosineGroup& g : unembedding_cosine_analysis(params))
            rows.push_back({g.row ? "1" : "0", g.col ? "1" : "0", g.box ? "1" : "0",
                            g.digit ? "1" : "0", fmt_g(g.mean), fmt_g(g.stddev), fmt_i(g.count)});
        const fs::path p = ctx.run.reports() / "unembed_cosine.csv";
        write_csv(p, {"row", "col", "box", "digit", "mean", "stddev", "count"}, rows);
        outputs.push_back(p);
    }

    finish(ctx, outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// report

struct TableSpec {
    const char* name;
    const char* rel;
    const char* producer;
};

constexpr TableSpec kTables[] = {
    {"train-metrics", "reports/train_metrics.csv", "train"},
    {"eval", "reports/eval_accuracy.csv", "eval"},
    {"eval-per-puzzle", "reports/eval_per_puzzle.csv", "eval"},
    {"probe-report", "reports/probe_report.csv", "probe"},
    {"probe-targets-cell-state", "reports/probe_targets_cell_state.csv", "probe"},
    {"probe-targets-cell-candidate", "reports/probe_targets_cell_candidate.csv", "probe"},
    {"probe-targets-substructure", "reports/probe_targets_substructure_presence.csv", "probe"},
    {"app-b2", "reports/probe_cosine.csv", "probe"},
    {"transfer-layers", "reports/transfer_layers.csv", "transfer"},
    {"transfer-positions", "reports/transfer_positions.csv", "transfer"},
    {"app-b4", "reports/patch_layers.csv", "patch"},
    {"table-1", "reports/head_ablation.csv", "ablate-head"},
    {"table-2", "reports/ns_ablation.csv", "ablate-neuron"},
    {"fig-4", "reports/margin_hist.csv", "attrib"},
    {"fig-4-summary", "reports/margin_summary.csv", "attrib"},
    {"fig-5", "reports/lens_trace.csv", "attrib"},
    {"attention", "reports/attention_summary.csv", "attrib"},
    {"head-dla", "reports/head_dla_lines.csv", "attrib"},
    {"ns-scan", "reports/ns_scan_summary.csv", "attrib"},
    {"ns-detectors", "reports/ns_detectors.csv", "attrib"},
    {"ns-activation", "reports/ns_activation_profile.csv", "attrib"},
    {"app-d", "reports/ns_neuron_dla.csv", "attrib"},
    {"app-b5", "reports/unembed_cosine.csv", "attrib"},
};

int cmd_report(Ctx& ctx, const std::string& table) {
    // Integrity sweep: every manifest entry must exist unchanged.
    std::vector<std::string> missing, stale;
    for (const auto& [rel, hash] : ctx.manifest.entries) {
        const fs::path p = ctx.run.root / rel;
        if (!fs::exists(p)) {
            missing.push_back(rel);
            continue;
        }
        if (hash_file(p.string()) != hash) stale.push_back(rel);
    }
    if (!missing.empty()) {
        std::string msg = "manifest entries missing on disk:";
        for (const auto& m : missing) msg += " " + m;
        throw PrereqError(msg + "; re-run the producing subcommands");
    }
    if (!stale.empty()) {
        std::string msg = "files changed since their manifest entry:";
        for (const auto& m : stale) msg += " " + m;
        throw ConfigError(msg + "; artifacts from different runs cannot be mixed");
    }

    if (!table.empty()) {
        for (const TableSpec& t : kTables) {
            if (table != t.name) continue;
            const fs::path p = ctx.run.root / t.rel;
            if (!ctx.manifest.entries.count(t.rel))
                throw PrereqError("table '" + table + "' not produced yet; run `mechlab " +
                                  std::string(t.producer) + "` first");
            std::ifstream in(p, std::ios::binary);
            std::cout << in.rdbuf();
            return 0;
        }
        std::string known;
        for (const TableSpec& t : kTables) known += std::string(" ") + t.name;
        throw ConfigError("unknown table '" + table + "'; known tables:" + known);
    }

    nlohmann::json summary;
    summary["config_hash"] = ctx.manifest.config_hash;
    summary["tool_version"] = ctx.manifest.tool_version;
    // the summary indexes everything else; counting itself would make the
    // first and second `report` runs disagree
    std::size_t n_entries = 0;
    for (const auto& [rel, hash] : ctx.manifest.entries)
        if (rel != "reports/summary.json") ++n_entries;
    summary["n_entries"] = n_entries;
    summary["tables"] = nlohmann::json::object();
    for (const TableSpec& t : kTables)
        if (ctx.manifest.entries.count(t.rel)) summary["tables"][t.name] = t.rel;

    fs::create_directories(ctx.run.reports());
    const fs::path p = ctx.run.reports() / "summary.json";
    {
        std::ofstream out(p, std::ios::binary);
        if (!out) throw ConfigError("cannot write '" + p.string() + "'");
        out << summary.dump(2) << "\n";
    }
    std::cout << "verified " << ctx.manifest.entries.size() << " artifacts, "
              << summary["tables"].size() << " tables present\n";
    finish(ctx, {p});
    return 0;
}

// ---------------------------------------------------------------------------
// argument plumbing

int run_cli(int argc, char** argv) {
    // --config and --mode resolve before flag binding so flags win over file
    // values and file values win over mode presets.
    std::string config_path, mode_flag;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        auto grab = [&](const char* name, std::string& out) {
            const std::string eq = std::string(name) + "=";
            if (a == name && i + 1 < argc) out = argv[i + 1];
            else if (a.rfind(eq, 0) == 0) out = a.substr(eq.size());
        };
        grab("--config", config_path);
        grab("--mode", mode_flag);
    }

    nlohmann::json file_json;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config file '" + config_path + "'");
        try {
            in >> file_json;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file '" + config_path + "' is not valid JSON: " +
                              std::string(e.what()));
        }
    }
    std::string mode = "desk";
    if (file_json.is_object() && file_json.contains("mode"))
        mode = file_json["mode"].get<std::string>();
    if (!mode_flag.empty()) mode = mode_flag;

    RunConfig cfg = default_run_config(mode);
    if (file_json.is_object()) apply_config_json(file_json, cfg);
    cfg.mode = mode;

    CLI::App app{"mechanistic-interpretability pipeline for sudoku solver transformers"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string run_dir = "run";
    int threads = -1;
    app.add_option("--config", config_path, "JSON config file; flags override file values");
    app.add_option("--run-dir", run_dir, "directory holding all pipeline artifacts")
        ->capture_default_str();
    app.add_option("--mode", cfg.mode, "preset: desk (laptop scale) or paper (published scale)")
        ->capture_default_str();
    app.add_option("--seed", cfg.seed, "master seed; every stage derives its own stream");
    app.add_option("--puzzles", cfg.puzzles, "input puzzle CSV (id,puzzle,solution,clues,difficulty)");
    app.add_option("--n-train", cfg.n_train, "training puzzles");
    app.add_option("--n-eval", cfg.n_eval, "held-out puzzles");
    app.add_option("--threads", threads, "worker cap (also env SUDOKU_MECHLAB_THREADS)");

    app.add_option("--layers", cfg.model.n_layers, "transformer blocks");
    app.add_option("--heads", cfg.model.n_heads, "attention heads per block");
    app.add_option("--d-model", cfg.model.d_model, "residual width");
    app.add_option("--d-mlp", cfg.model.d_mlp, "MLP hidden width");
    app.add_option("--max-seq", cfg.model.max_seq, "context length");

    app.add_option("--batch-size", cfg.train.batch_size, "sequences per step");
    app.add_option("--max-steps", cfg.train.max_steps, "optimizer steps");
    app.add_option("--lr", cfg.train.lr, "peak learning rate");
    app.add_option("--weight-decay", cfg.train.weight_decay, "decoupled weight decay");
    app.add_option("--target-loss", cfg.train.target_loss, "stop once step loss drops below");
    app.add_option("--log-every", cfg.train.log_every, "steps between metric rows");

    app.add_option("--capture-states", cfg.capture_states, "cap on captured clue-prefix states");
    app.add_option("--positions-per-trace", cfg.positions_per_trace,
                   "mid-trace states sampled per eval trace");
    app.add_option("--probe-l2", cfg.probe_l2, "probe ridge strength");
    app.add_option("--probe-eval-fraction", cfg.probe_eval_fraction,
                   "tail fraction of states held out for probe metrics");
    app.add_option("--patch-cases", cfg.patch_cases, "direction-patching cases per layer");
    app.add_option("--ablate-ref", cfg.ablate_ref_states,
                   "head-ablation reference states (0 = half of eval)");
    app.add_option("--scan-states", cfg.scan_states, "cap on mined single-candidate states");
    app.add_option("--scan-threshold", cfg.scan_threshold, "detector activation-gap threshold");

    auto* sc_gen = app.add_subcommand("gen-data", "trace the puzzle corpus into datasets");
    auto* sc_train = app.add_subcommand("train", "train the solver transformer");
    auto* sc_eval = app.add_subcommand("eval", "greedy-decode the held-out puzzles");
    auto* sc_capture = app.add_subcommand("capture", "store residual activations");
    auto* sc_probe = app.add_subcommand("probe", "fit linear probes on captured activations");
    std::string probe_family = "all";
    sc_probe->add_option("--family", probe_family,
                         "cell_state, cell_candidate, substructure, or all")
        ->capture_default_str();
    auto* sc_transfer = app.add_subcommand("transfer", "score frozen probes across layers/positions");
    std::string transfer_family = "substructure";
    int transfer_layer = -1;
    sc_transfer->add_option("--family", transfer_family, "probe family to transfer")
        ->capture_default_str();
    sc_transfer->add_option("--layer", transfer_layer,
                            "bank layer for position transfer (-1 = middle)");
    auto* sc_patch = app.add_subcommand("patch", "patch presence directions layer by layer");
    auto* sc_ab_head = app.add_subcommand("ablate-head", "mean-ablate heads over board regions");
    std::vector<std::string> head_specs;
    sc_ab_head->add_option("--spec", head_specs,
                           "layer:head:kind:lines (kind r/c/b), repeatable; default mode preset");
    auto* sc_ab_neuron = app.add_subcommand("ablate-neuron", "pin detector neurons to their means");
    auto* sc_attrib = app.add_subcommand("attrib", "lens, attention, and attribution reports");
    auto* sc_report = app.add_subcommand("report", "verify the manifest and index all tables");
    std::string table;
    sc_report->add_option("--table", table, "print one table CSV to stdout (e.g. app-b4)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (threads >= 0) setenv("SUDOKU_MECHLAB_THREADS", std::to_string(threads).c_str(), 1);

    Ctx ctx = open_ctx(cfg, run_dir);
    if (app.got_subcommand(sc_gen)) return cmd_gen_data(ctx);
    if (app.got_subcommand(sc_train)) return cmd_train(ctx);
    if (app.got_subcommand(sc_eval)) return cmd_eval(ctx);
    if (app.got_subcommand(sc_capture)) return cmd_capture(ctx);
    if (app.got_subcommand(sc_probe)) return cmd_probe(ctx, probe_family);
    if (app.got_subcommand(sc_transfer)) return cmd_transfer(ctx, transfer_family, transfer_layer);
    if (app.got_subcommand(sc_patch)) return cmd_patch(ctx);
    if (app.got_subcommand(sc_ab_head)) return cmd_ablate_head(ctx, head_specs);
    if (app.got_subcommand(sc_ab_neuron)) return cmd_ablate_neuron(ctx);
    if (app.got_subcommand(sc_attrib)) return cmd_attrib(ctx);
    if (app.got_subcommand(sc_report)) return cmd_report(ctx, table);
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const PrereqError& e) {
        std::cerr << "missing prerequisite: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
