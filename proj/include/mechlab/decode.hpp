#pragma once

// Greedy token decoding with a per-layer KV cache, plus the solver
// evaluation harness: feed each puzzle's (shuffled) clue prefix, let a policy
// emit the rest of the trace, replay it onto a board with Push/Pop stack
// semantics, and score the final board against the reference solution.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "mechlab/errors.hpp"
#include "mechlab/grid.hpp"
#include "mechlab/model.hpp"
#include "mechlab/puzzle_io.hpp"
#include "mechlab/rng.hpp"
#include "mechlab/trace.hpp"
#include "mechlab/tracegen.hpp"

namespace mechlab {

// Incremental forward pass: feed one token at a time, attending over all
// cached keys. Produces the same logits as the full forward (up to float
// accumulation order).
template <class S>
class KvDecoder {
public:
    explicit KvDecoder(const Params<S>& p) : p_(&p) {
        const ModelConfig& cfg = p.config;
        k_.resize(static_cast<std::size_t>(cfg.n_layers));
        v_.resize(static_cast<std::size_t>(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            k_[static_cast<std::size_t>(l)].resize(cfg.max_seq, cfg.d_model);
            v_[static_cast<std::size_t>(l)].resize(cfg.max_seq, cfg.d_model);
        }
    }

    void reset() { pos_ = 0; }
    int position() const { return pos_; }
    int capacity() const { return p_->config.max_seq; }

    // Feeds `tok` at the current position and returns its logits row.
    Vec<S> step(TokenId tok) {
        const ModelConfig& cfg = p_->config;
        if (pos_ >= cfg.max_seq) throw ConfigError("decoding past max_seq");
        if (tok >= cfg.vocab) throw ConfigError("token id out of range");
        const int d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
        const S scale = S(1) / std::sqrt(static_cast<S>(dh));
        using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

        Row x = p_->tok_emb.row(tok) + p_->pos_emb.row(pos_);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& lp = p_->layers[static_cast<std::size_t>(l)];
            auto& kc = k_[static_cast<std::size_t>(l)];
            auto& vc = v_[static_cast<std::size_t>(l)];

            const Row y1 = ln_row(x, lp.ln1_g, lp.ln1_b, static_cast<S>(cfg.ln_eps));
            const Row q = y1 * lp.w_q;
            kc.row(pos_) = y1 * lp.w_k;
            vc.row(pos_) = y1 * lp.w_v;

            Row z(d);
            const int n = pos_ + 1;
            for (int h = 0; h < heads; ++h) {
                Row scores =
                    (q.segment(h * dh, dh) * kc.block(0, h * dh, n, dh).transpose()) * scale;
                const S mx = scores.maxCoeff();
                scores = (scores.array() - mx).exp().matrix();
                scores /= scores.sum();
                z.segment(h * dh, dh) = scores * vc.block(0, h * dh, n, dh);
            }
            x += z * lp.w_o;

            const Row y2 = ln_row(x, lp.ln2_g, lp.ln2_b, static_cast<S>(cfg.ln_eps));
            Row act = y2 * lp.w_in;
            act = act.unaryExpr([](S u) { return gelu(u); });
            x += act * lp.w_out;
        }
        const Row yf = ln_row(x, p_->lnf_g, p_->lnf_b, static_cast<S>(cfg.ln_eps));
        ++pos_;
        return (yf * p_->unembed).transpose();
    }

private:
    static Eigen::Matrix<S, 1, Eigen::Dynamic> ln_row(const Eigen::Matrix<S, 1, Eigen::Dynamic>& x,
                                                      const Vec<S>& g, const Vec<S>& b, S eps) {
        const S mu = x.mean();
        const auto centered = (x.array() - mu).eval();
        const S inv_std = S(1) / std::sqrt(centered.square().mean() + eps);
        return (((centered * inv_std) * g.transpose().array()) + b.transpose().array()).matrix();
    }

    const Params<S>* p_;
    std::vector<Mat<S>> k_, v_;
    int pos_ = 0;
};

// A trace continuation strategy. start() receives the clue prefix (shuffled
// placements plus CluesEnd); next() yields generated tokens, Pad once the
// policy cannot continue.
class DecodePolicy {
public:
    virtual ~DecodePolicy() = default;
    virtual void start(const std::vector<TokenId>& prefix) = 0;
    virtual TokenId next() = 0;
};

class GreedyModelPolicy : public DecodePolicy {
public:
    explicit GreedyModelPolicy(const Params<float>& p) : dec_(p) {}

    void start(const std::vector<TokenId>& prefix) override {
        if (static_cast<int>(prefix.size()) >= dec_.capacity())
            throw ConfigError("clue prefix does not fit in max_seq");
        dec_.reset();
        for (TokenId t : prefix) logits_ = dec_.step(t);
        live_ = true;
    }

    TokenId next() override {
        if (!live_) return kTokPad;
        int best = 0;
        for (int v = 1; v < static_cast<int>(logits_.size()); ++v)
            if (logits_(v) > logits_(best)) best = v;
        const TokenId tok = static_cast<TokenId>(best);
        if (dec_.position() < dec_.capacity())
            logits_ = dec_.step(tok);
        else
            live_ = false;
        return tok;
    }

private:
    KvDecoder<float> dec_;
    VecF logits_;
    bool live_ = false;
};

// Reference policy: runs the backtracking solver on the clue board and
// replays its trace. Used to validate the evaluation harness end to end.
class OracleSolverPolicy : public DecodePolicy {
public:
    explicit OracleSolverPolicy(std::uint64_t seed) : seed_(seed) {}

    void start(const std::vector<TokenId>& prefix) override {
        Board board;
        for (TokenId t : prefix) {
            if (t >= kNumPlacementTokens) continue;
            const Placement pl = decode_placement(t);
            board.set(pl.r, pl.c, pl.d);
        }
        Rng rng(derive_seed(seed_, call_++));
        const auto trace = generate_trace(board, rng);
        body_.clear();
        bool after_clues = false;
        for (TokenId t : trace) {
            if (after_clues) body_.push_back(t);
            if (t == kTokCluesEnd) after_clues = true;
        }
        i_ = 0;
    }

    TokenId next() override { return i_ < body_.size() ? body_[i_++] : kTokPad; }

private:
    std::uint64_t seed_;
    std::uint64_t call_ = 0;
    std::vector<TokenId> body_;
    std::size_t i_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
    std::uint64_t seed = 0;    // clue-order shuffling, one stream per puzzle
    int max_new_tokens = 0;    // 0 = until the policy stops on its own
};

struct PuzzleEval {
    std::string id;
    int non_clue_cells = 0;
    int correct_cells = 0;
    bool solved = false;
    int generated_tokens = 0;
};

struct EvalResult {
    long cells_total = 0;
    long cells_correct = 0;
    int grids_total = 0;
    int grids_solved = 0;
    std::vector<PuzzleEval> per_puzzle;

    double cell_accuracy() const {
        return cells_total == 0 ? 0.0 : static_cast<double>(cells_correct) / cells_total;
    }
    double grid_accuracy() const {
        return grids_total == 0 ? 0.0 : static_cast<double>(grids_solved) / grids_total;
    }
};

// Builds each puzzle's shuffled clue prefix. Exposed so dataset generation
// and evaluation share the exact construction.
inline std::vector<TokenId> clue_prefix(const Board& board, Rng& rng) {
    std::vector<TokenId> out;
    for (int idx = 0; idx < kGridCells; ++idx) {
        const int d = board.at_index(idx);
        if (d == 0) continue;
        out.push_back(encode_placement(idx / 9 + 1, idx % 9 + 1, d));
    }
    rng.shuffle(out);
    out.push_back(kTokCluesEnd);
    return out;
}

// Scores one generated continuation: placements fill empty cells, Push/Pop
// manage a board stack (a Pop retracts everything since the matching Push),
// Success ends the trace. Cells still empty count as wrong.
inline EvalResult evaluate_solver(DecodePolicy& policy, const std::vector<PuzzleRecord>& puzzles,
                                  const EvalOptions& opt = {}) {
    EvalResult res;
    for (std::size_t pi = 0; pi < puzzles.size(); ++pi) {
        const PuzzleRecord& rec = puzzles[pi];
        const Board clues = parse_grid(rec.puzzle);
        Board solution{};
        if (rec.solution.size() == 81) {
            solution = parse_grid(rec.solution);
        } else {
            const SolveResult sr = brute_force_solve(clues, 2);
            if (sr.solution_count != 1)
                throw ConfigError("puzzle '" + rec.id + "' lacks a unique solution");
            solution = sr.solution;
        }

        Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(pi)));
        policy.start(clue_prefix(clues, rng));

        Board cur = clues;
        std::vector<Board> stack;
        PuzzleEval pe;
        pe.id = rec.id;
        const int cap = opt.max_new_tokens > 0 ? opt.max_new_tokens : 1 << 20;
        while (pe.generated_tokens < cap) {
            const TokenId tok = policy.next();
            if (tok == kTokPad) break;
            ++pe.generated_tokens;
            if (tok == kTokSuccess) break;
            if (tok == kTokPush) {
                stack.push_back(cur);
            } else if (tok == kTokPop) {
                if (stack.empty()) break;  // malformed; stop scoring here
                cur = stack.back();
                stack.pop_back();
            } else if (tok < kNumPlacementTokens) {
                const Placement pl = decode_placement(tok);
                if (cur.at(pl.r, pl.c) == 0) cur.set(pl.r, pl.c, pl.d);
            } else {
                break;  // CluesEnd or garbage mid-trace: stop scoring here
            }
        }

        pe.solved = true;
        for (int idx = 0; idx < kGridCells; ++idx) {
            if (cur.at_index(idx) != solution.at_index(idx)) pe.solved = false;
            if (clues.at_index(idx) != 0) continue;
            ++pe.non_clue_cells;
            if (cur.at_index(idx) == solution.at_index(idx)) ++pe.correct_cells;
        }
        res.cells_total += pe.non_clue_cells;
        res.cells_correct += pe.correct_cells;
        res.grids_total += 1;
        res.grids_solved += pe.solved ? 1 : 0;
        res.per_puzzle.push_back(std::move(pe));
    }
    return res;
}

}  // namespace mechlab
