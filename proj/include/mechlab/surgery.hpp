#pragma once

// Causal interventions on a trained model.
//
// Three experiment families, each reported by its own table:
//   * substructure-direction patching — move the (row,d), (col,d), (box,d)
//     presence-probe components of the CluesEnd residual from a successor
//     grid state G2 into the current state G1 and measure the collapse of
//     the target placement logit (per-layer table);
//   * attention-head mean ablation — replace one head's CluesEnd output
//     with its mean over a reference set and measure the logit change of
//     illegal placements inside vs. outside the head's substructures;
//   * final-MLP neuron ablation — pin selected post-GELU activations to
//     reference means and measure logit/probability drops for the naked
//     single the model is about to play, with the board's other naked
//     single as a within-puzzle control.
//
// All interventions are pure functions of (params, tokens); clean runs are
// never mutated. Sign convention per result struct, stated on its fields.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mechlab/decode.hpp"
#include "mechlab/errors.hpp"
#include "mechlab/grid.hpp"
#include "mechlab/model.hpp"
#include "mechlab/parallel.hpp"
#include "mechlab/probelab.hpp"
#include "mechlab/trace.hpp"

namespace mechlab {

// ---------------------------------------------------------------------------
// Shared aggregation helper

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
    long n = 0;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
    MeanStderr ms;
    ms.n = static_cast<long>(xs.size());
    if (ms.n == 0) return ms;
    double sum = 0.0;
    for (double x : xs) sum += x;
    ms.mean = sum / static_cast<double>(ms.n);
    if (ms.n < 2) return ms;
    double ss = 0.0;
    for (double x : xs) ss += (x - ms.mean) * (x - ms.mean);
    ms.stderr_ = std::sqrt(ss / static_cast<double>(ms.n - 1)) /
                 std::sqrt(static_cast<double>(ms.n));
    return ms;
}

namespace detail {

inline int argmax_row(const MatF& logits, int row) {
    Eigen::Index best;
    logits.row(row).maxCoeff(&best);
    return static_cast<int>(best);
}

inline VecD softmax_row(const MatF& logits, int row) {
    VecD z = logits.row(row).transpose().cast<double>();
    const double mx = z.maxCoeff();
    VecD e = (z.array() - mx).exp();
    return e / e.sum();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Substructure-direction patching

// Single sequential update: afterwards dir·x equals target_proj exactly, and
// re-applying the same update is a no-op.
inline void apply_direction_patch(VecD& x, const VecD& dir, double target_proj) {
    x += (target_proj - dir.dot(x)) * dir;
}

inline const LinearProbe& presence_probe(const ProbeBank& bank, int substructure, int digit) {
    if (bank.family != ProbeFamily::SubstructurePresence)
        throw ConfigError("direction patching needs a substructure-presence probe bank");
    const int t = substructure * kNumDigits + digit - 1;
    if (t < 0 || t >= static_cast<int>(bank.probes.size()))
        throw ConfigError("probe bank has no target " + std::to_string(t));
    return bank.probes[static_cast<std::size_t>(t)];
}

// A (state, successor) pair: g2 is g1 with one extra placement appended to
// the clue list. Both sequences end with CluesEnd.
struct PatchCase {
    std::vector<TokenId> g1;
    std::vector<TokenId> g2;
    Board g1_board;
    int cell = 0;   // 0..80, empty on g1_board
    int digit = 0;  // 1..9
};

inline PatchCase make_patch_case(const Board& board, int cell, int digit, Rng& rng) {
    const int r = cell / 9 + 1, c = cell % 9 + 1;
    if (!board.empty_at(cell) || !is_valid_placement(board, r, c, digit))
        throw ConfigError("patch case placement is not legal on the base board");
    PatchCase pc;
    pc.g1_board = board;
    pc.cell = cell;
    pc.digit = digit;
    pc.g1 = clue_prefix(board, rng);
    pc.g2 = pc.g1;
    pc.g2.back() = encode_placement(r, c, digit);  // splice before CluesEnd
    pc.g2.push_back(kTokCluesEnd);
    return pc;
}

struct PatchResult {
    TokenId target = 0;
    double clean_logit = 0.0;
    double patched_logit = 0.0;
    double delta_logit = 0.0;  // clean - patched: positive means the logit dropped
    int clean_top1 = 0;
    int patched_top1 = 0;
    bool changed_top1 = false;
    bool valid_top1 = false;  // patched top-1 is a legal placement on g1_board
    // per direction, in row/col/box order
    std::array<double, 3> proj_source{};   // w·x_G2
    std::array<double, 3> proj_patched{};  // w·x' after all three updates
};

// Overwrite the three presence directions of resid_post(layer) at g1's
// CluesEnd with their g2 values and resume the forward pass from layer+1
// (layer 0 patches the embedding output). LayerNorm statistics downstream
// are recomputed from the patched residual.
inline PatchResult patch_substructure_directions(const Params<float>& params,
                                                 const PatchCase& pc, int layer,
                                                 const ProbeBank& bank) {
    const ModelConfig& cfg = params.config;
    if (layer < 0 || layer >= cfg.n_layers)
        throw ConfigError("patch layer out of range [0, n_layers)");
    if (pc.g1.empty() || pc.g1.back() != kTokCluesEnd || pc.g2.empty() ||
        pc.g2.back() != kTokCluesEnd)
        throw ConfigError("patch case sequences must end with CluesEnd");

    CaptureSpec cap;
    cap.resid_post = true;
    const auto run1 = forward(params, pc.g1, cap);
    const auto run2 = forward(params, pc.g2, cap);
    const int pos1 = static_cast<int>(pc.g1.size()) - 1;
    const int pos2 = static_cast<int>(pc.g2.size()) - 1;

    const VecD x1 = run1.acts.resid_post(layer).row(pos1).transpose().cast<double>();
    const VecD x2 = run2.acts.resid_post(layer).row(pos2).transpose().cast<double>();

    const auto subs = substructures_of(Cell{pc.cell / 9 + 1, pc.cell % 9 + 1});
    const std::array<int, 3> order{subs.row, subs.col, subs.box};

    VecD patched = x1;
    PatchResult res;
    std::array<VecD, 3> dirs;
    for (int k = 0; k < 3; ++k) {
        const LinearProbe& probe = presence_probe(bank, order[static_cast<std::size_t>(k)], pc.digit);
        dirs[static_cast<std::size_t>(k)] = probe.unit_direction();
        res.proj_source[static_cast<std::size_t>(k)] = dirs[static_cast<std::size_t>(k)].dot(x2);
        apply_direction_patch(patched, dirs[static_cast<std::size_t>(k)],
                              res.proj_source[static_cast<std::size_t>(k)]);
    }
    for (int k = 0; k < 3; ++k)
        res.proj_patched[static_cast<std::size_t>(k)] = dirs[static_cast<std::size_t>(k)].dot(patched);

    Intervention<float> iv;
    iv.residual.push_back({layer, pos1, patched.cast<float>()});
    const auto run_patched = forward(params, pc.g1, CaptureSpec::none(), iv);

    res.target = encode_placement(pc.cell / 9 + 1, pc.cell % 9 + 1, pc.digit);
    res.clean_logit = run1.logits(pos1, res.target);
    res.patched_logit = run_patched.logits(pos1, res.target);
    res.delta_logit = res.clean_logit - res.patched_logit;
    res.clean_top1 = detail::argmax_row(run1.logits, pos1);
    res.patched_top1 = detail::argmax_row(run_patched.logits, pos1);
    res.changed_top1 = res.clean_top1 != res.patched_top1;
    if (res.patched_top1 < kNumPlacementTokens) {
        const Placement pl = decode_placement(static_cast<TokenId>(res.patched_top1));
        res.valid_top1 = pc.g1_board.empty_at((pl.r - 1) * 9 + (pl.c - 1)) &&
                         is_valid_placement(pc.g1_board, pl.r, pl.c, pl.d);
    }
    return res;
}

inline std::vector<PatchResult> run_patch_cases(const Params<float>& params,
                                                const std::vector<PatchCase>& cases, int layer,
                                                const ProbeBank& bank) {
    std::vector<PatchResult> out(cases.size());
    parallel_for(cases.size(), [&](std::size_t i) {
        out[i] = patch_substructure_directions(params, cases[i], layer, bank);
    });
    return out;
}

struct PatchAggregate {
    int layer = 0;
    MeanStderr drop;
    double patched_logit_mean = 0.0;
    double clean_logit_mean = 0.0;
    double changed_top1_rate = 0.0;
    double valid_top1_rate = 0.0;
    long n = 0;
};

inline PatchAggregate aggregate_patch_results(int layer, const std::vector<PatchResult>& rs) {
    PatchAggregate agg;
    agg.layer = layer;
    agg.n = static_cast<long>(rs.size());
    if (rs.empty()) return agg;
    std::vector<double> drops;
    drops.reserve(rs.size());
    double patched_sum = 0.0, clean_sum = 0.0, changed = 0.0, valid = 0.0;
    for (const auto& r : rs) {
        drops.push_back(r.delta_logit);
        patched_sum += r.patched_logit;
        clean_sum += r.clean_logit;
        changed += r.changed_top1 ? 1.0 : 0.0;
        valid += r.valid_top1 ? 1.0 : 0.0;
    }
    agg.drop = mean_stderr(drops);
    const double inv_n = 1.0 / static_cast<double>(agg.n);
    agg.patched_logit_mean = patched_sum * inv_n;
    agg.clean_logit_mean = clean_sum * inv_n;
    agg.changed_top1_rate = changed * inv_n;
    agg.valid_top1_rate = valid * inv_n;
    return agg;
}

// ---------------------------------------------------------------------------
// Attention-head mean ablation

// Mean of head_out(layer, head) at the CluesEnd position over a reference
// set of clue prefixes. Summation order is fixed, so the result does not
// depend on the thread count.
inline VecF mean_head_output(const Params<float>& params,
                             const std::vector<std::vector<TokenId>>& seqs, int layer,
                             int head) {
    if (seqs.empty()) throw ConfigError("mean_head_output needs a non-empty reference set");
    CaptureSpec cap;
    cap.head_out = true;
    std::vector<VecD> rows(seqs.size());
    parallel_for(seqs.size(), [&](std::size_t i) {
        const auto run = forward(params, seqs[i], cap);
        const int pos = static_cast<int>(seqs[i].size()) - 1;
        rows[i] = run.acts.head_out(layer, head).row(pos).transpose().cast<double>();
    });
    VecD mean = VecD::Zero(params.config.d_model);
    for (const auto& r : rows) mean += r;
    mean /= static_cast<double>(rows.size());
    return mean.cast<float>();
}

// All (cell, digit) pairs with the cell empty, the cell inside one of the
// given substructures, and the digit already present in that substructure.
inline std::vector<std::pair<int, int>> illegal_placements(const Board& b,
                                                           const std::vector<int>& subs) {
    std::vector<std::pair<int, int>> out;
    for (int s : subs) {
        if (s < 0 || s >= kNumSubstructures) throw ConfigError("substructure index out of range");
        std::array<bool, 10> present{};
        for (int idx : substructure_cells(s)) present[static_cast<std::size_t>(b.at_index(idx))] = true;
        for (int idx : substructure_cells(s)) {
            if (!b.empty_at(idx)) continue;
            for (int d = 1; d <= 9; ++d)
                if (present[static_cast<std::size_t>(d)]) out.emplace_back(idx, d);
        }
    }
    return out;
}

struct HeadAblationStats {
    int layer = 0;
    int head = 0;
    MeanStderr target;   // ablated - clean, pooled over illegal placements
    MeanStderr control;  // same metric on the control substructures
};

// Replace head_out(layer, head) at CluesEnd with `mean_out` and pool the
// illegal-placement logit changes over the evaluation boards.
inline HeadAblationStats mean_ablate_head(const Params<float>& params,
                                          const std::vector<std::vector<TokenId>>& seqs,
                                          const std::vector<Board>& boards, int layer, int head,
                                          const VecF& mean_out,
                                          const std::vector<int>& target_subs,
                                          const std::vector<int>& control_subs) {
    if (seqs.size() != boards.size())
        throw ConfigError("evaluation sequences and boards must pair up");
    std::vector<std::vector<double>> tgt(seqs.size()), ctl(seqs.size());
    parallel_for(seqs.size(), [&](std::size_t i) {
        const int pos = static_cast<int>(seqs[i].size()) - 1;
        const auto clean = forward(params, seqs[i]);
        Intervention<float> iv;
        iv.heads.push_back({layer, head, pos, mean_out});
        const auto ablated = forward(params, seqs[i], CaptureSpec::none(), iv);
        const auto collect = [&](const std::vector<int>& subs, std::vector<double>& sink) {
            for (const auto& [cell, d] : illegal_placements(boards[i], subs)) {
                const TokenId tok = encode_placement(cell / 9 + 1, cell % 9 + 1, d);
                sink.push_back(static_cast<double>(ablated.logits(pos, tok)) -
                               static_cast<double>(clean.logits(pos, tok)));
            }
        };
        collect(target_subs, tgt[i]);
        collect(control_subs, ctl[i]);
    });
    std::vector<double> tgt_all, ctl_all;
    for (const auto& v : tgt) tgt_all.insert(tgt_all.end(), v.begin(), v.end());
    for (const auto& v : ctl) ctl_all.insert(ctl_all.end(), v.begin(), v.end());
    HeadAblationStats stats;
    stats.layer = layer;
    stats.head = head;
    stats.target = mean_stderr(tgt_all);
    stats.control = mean_stderr(ctl_all);
    return stats;
}

// ---------------------------------------------------------------------------
// Final-MLP neuron ablation

// One evaluation state: a board with two simultaneous naked singles, decoded
// up to `pos` (the position whose next-token prediction is the target NS).
struct NsCase {
    std::vector<TokenId> tokens;
    int pos = 0;
    TokenId target = 0;                          // NS placement being ablated
    TokenId other = 0;                           // the board's other NS placement
    std::vector<std::pair<int, float>> neurons;  // (neuron id, reference mean)
};

struct NsAblationResult {
    double target_logit_drop = 0.0;  // clean - ablated
    double target_prob_drop = 0.0;   // clean - ablated softmax probability
    double other_logit_drop = 0.0;   // clean - ablated (negative = increase)
};

inline NsAblationResult ablate_ns_neurons_one(const Params<float>& params, const NsCase& nc) {
    const ModelConfig& cfg = params.config;
    for (const auto& [id, mean] : nc.neurons) {
        (void)mean;
        if (id < 0 || id >= cfg.d_mlp)
            throw ConfigError("neuron id " + std::to_string(id) + " outside d_mlp");
    }
    if (nc.pos < 0 || nc.pos >= static_cast<int>(nc.tokens.size()))
        throw ConfigError("ns case position outside the token sequence");
    const auto clean = forward(params, nc.tokens);
    Intervention<float> iv;
    iv.neurons.push_back({cfg.n_layers, nc.pos, nc.neurons});
    const auto ablated = forward(params, nc.tokens, CaptureSpec::none(), iv);

    NsAblationResult r;
    r.target_logit_drop = static_cast<double>(clean.logits(nc.pos, nc.target)) -
                          static_cast<double>(ablated.logits(nc.pos, nc.target));
    r.other_logit_drop = static_cast<double>(clean.logits(nc.pos, nc.other)) -
                         static_cast<double>(ablated.logits(nc.pos, nc.other));
    const VecD p_clean = detail::softmax_row(clean.logits, nc.pos);
    const VecD p_ablated = detail::softmax_row(ablated.logits, nc.pos);
    r.target_prob_drop = p_clean(nc.target) - p_ablated(nc.target);
    return r;
}

struct NsAblationStats {
    MeanStderr logit_drop;
    MeanStderr prob_drop;
    MeanStderr other_drop;
};

inline NsAblationStats ablate_ns_neurons(const Params<float>& params,
                                         const std::vector<NsCase>& cases) {
    std::vector<NsAblationResult> rs(cases.size());
    parallel_for(cases.size(), [&](std::size_t i) { rs[i] = ablate_ns_neurons_one(params, cases[i]); });
    std::vector<double> a, b, c;
    a.reserve(rs.size());
    b.reserve(rs.size());
    c.reserve(rs.size());
    for (const auto& r : rs) {
        a.push_back(r.target_logit_drop);
        b.push_back(r.target_prob_drop);
        c.push_back(r.other_logit_drop);
    }
    NsAblationStats stats;
    stats.logit_drop = mean_stderr(a);
    stats.prob_drop = mean_stderr(b);
    stats.other_drop = mean_stderr(c);
    return stats;
}

}  // namespace mechlab
