#pragma once

// Observational analyses over a trained model:
//   * logit lens — final LayerNorm + unembedding applied to any residual;
//   * direct logit attribution — additive per-component logit contributions
//     with the final-LN normalization statistics frozen to the clean run;
//   * attention grids — CluesEnd attention mass folded onto the 9x9 board;
//   * head DLA grids — per-cell logit contribution split by whether the
//     digit is already present in the cell's line;
//   * naked-single margin/rank analysis at the pre-final-MLP residual;
//   * activation-gap neuron scan over the final MLP;
//   * neuron weight DLA (output weights through LN scale and unembedding);
//   * unembedding cosine structure over the 729 placement tokens.
//
// Everything here is a pure read of (params, tokens); heavy loops are
// parallel across states with fixed-order reductions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mechlab/dataset.hpp"
#include "mechlab/errors.hpp"
#include "mechlab/grid.hpp"
#include "mechlab/model.hpp"
#include "mechlab/parallel.hpp"
#include "mechlab/trace.hpp"

namespace mechlab {

// ---------------------------------------------------------------------------
// Logit lens

// Final LayerNorm + unembedding in double precision. The zero vector maps to
// the pure bias path lnf_b * unembed.
inline VecD logit_lens(const Params<float>& params, const VecD& resid) {
    const ModelConfig& cfg = params.config;
    if (resid.size() != cfg.d_model) throw ConfigError("logit lens input has wrong width");
    const double mu = resid.mean();
    const double var = (resid.array() - mu).square().mean();
    const VecD x_hat = (resid.array() - mu) / std::sqrt(var + cfg.ln_eps);
    const VecD normed = x_hat.array() * params.lnf_g.cast<double>().array() +
                        params.lnf_b.cast<double>().array();
    return params.unembed.cast<double>().transpose() * normed;
}

// Residual-site labels for a lens trace: resid_post(0), then per layer
// resid_mid(l) and resid_post(l).
inline std::string lens_site_name(int row) {
    if (row == 0) return "resid_post0";
    const int layer = (row + 1) / 2;
    return (row % 2 == 1 ? "resid_mid" : "resid_post") + std::to_string(layer);
}

// Lens logits for the nine placement tokens of `cell` at every residual site
// of one position; rows follow lens_site_name.
inline MatD logit_lens_trace(const Params<float>& params, const std::vector<TokenId>& tokens,
                             int pos, int cell) {
    const ModelConfig& cfg = params.config;
    if (cell < 0 || cell >= kGridCells) throw ConfigError("lens trace cell out of range");
    CaptureSpec cap;
    cap.resid_post = true;
    cap.resid_mid = true;
    const auto run = forward(params, tokens, cap);
    MatD out(2 * cfg.n_layers + 1, kNumDigits);
    const int r = cell / 9 + 1, c = cell % 9 + 1;
    auto fill_row = [&](int row, const VecD& resid) {
        const VecD lens = logit_lens(params, resid);
        for (int d = 1; d <= 9; ++d) out(row, d - 1) = lens(encode_placement(r, c, d));
    };
    fill_row(0, run.acts.resid_post(0).row(pos).transpose().cast<double>());
    for (int l = 1; l <= cfg.n_layers; ++l) {
        fill_row(2 * l - 1, run.acts.resid_mid(l).row(pos).transpose().cast<double>());
        fill_row(2 * l, run.acts.resid_post(l).row(pos).transpose().cast<double>());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Direct logit attribution (frozen final-LN statistics)

// Additive decomposition of the logits at one position: the embedding row,
// every head's output, every MLP output, plus the constant LN-bias term.
// Normalization statistics (mean removal stays exact; 1/std is frozen from
// the clean final residual) make the pieces sum to the model output.
struct DlaComponents {
    VecD embedding;                        // vocab
    std::vector<std::vector<VecD>> heads;  // [layer-1][head] -> vocab
    std::vector<VecD> mlps;                // [layer-1] -> vocab
    VecD ln_bias;                          // vocab, constant path
    double inv_std = 0.0;                  // frozen statistic

    VecD total() const {
        VecD t = embedding + ln_bias;
        for (const auto& layer : heads)
            for (const auto& h : layer) t += h;
        for (const auto& m : mlps) t += m;
        return t;
    }
};

namespace detail {

// Frozen-LN projection of one residual component: subtract its own mean
// (the mean is linear, so per-component removal is exact), scale by the
// frozen 1/std, fold lnf_g, project through the unembedding.
inline VecD dla_project(const Params<float>& params, const VecD& component, double inv_std) {
    const double mu = component.mean();
    const VecD scaled =
        (component.array() - mu) * inv_std * params.lnf_g.cast<double>().array();
    return params.unembed.cast<double>().transpose() * scaled;
}

}  // namespace detail

inline DlaComponents dla_decompose(const Params<float>& params, const std::vector<TokenId>& tokens,
                                   int pos) {
    const ModelConfig& cfg = params.config;
    CaptureSpec cap;
    cap.resid_post = true;
    cap.head_out = true;
    cap.mlp_out = true;
    const auto run = forward(params, tokens, cap);
    if (pos < 0 || pos >= run.logits.rows()) throw ConfigError("dla position out of range");

    const VecD final_resid = run.acts.resid_post(cfg.n_layers).row(pos).transpose().cast<double>();
    const double mu = final_resid.mean();
    const double var = (final_resid.array() - mu).square().mean();

    DlaComponents dla;
    dla.inv_std = 1.0 / std::sqrt(var + cfg.ln_eps);
    dla.embedding = detail::dla_project(
        params, run.acts.resid_post(0).row(pos).transpose().cast<double>(), dla.inv_std);
    dla.heads.resize(static_cast<std::size_t>(cfg.n_layers));
    dla.mlps.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 1; l <= cfg.n_layers; ++l) {
        auto& row = dla.heads[static_cast<std::size_t>(l - 1)];
        row.resize(static_cast<std::size_t>(cfg.n_heads));
        for (int h = 0; h < cfg.n_heads; ++h)
            row[static_cast<std::size_t>(h)] = detail::dla_project(
                params, run.acts.head_out(l, h).row(pos).transpose().cast<double>(), dla.inv_std);
        dla.mlps[static_cast<std::size_t>(l - 1)] = detail::dla_project(
            params, run.acts.mlp_out(l).row(pos).transpose().cast<double>(), dla.inv_std);
    }
    dla.ln_bias = params.unembed.cast<double>().transpose() * params.lnf_b.cast<double>();
    return dla;
}

// ---------------------------------------------------------------------------
// Grid heatmaps (CSV + SVG)

struct GridHeatmap {
    int layer = 0;
    int head = -1;
    std::string statistic;
    std::array<double, 81> v{};

    double& at(int r, int c) { return v[static_cast<std::size_t>((r - 1) * 9 + (c - 1))]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>((r - 1) * 9 + (c - 1))]; }
};

inline void write_heatmap_csv(const GridHeatmap& g, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw PrereqError("cannot open " + path + " for writing");
    char buf[32];
    for (int r = 1; r <= 9; ++r) {
        for (int c = 1; c <= 9; ++c) {
            std::snprintf(buf, sizeof buf, "%.9g", g.at(r, c));
            out << buf << (c == 9 ? "\n" : ",");
        }
    }
}

// Diverging heatmap: blue for negative, red for positive, scaled by the
// largest magnitude. Byte-identical across runs for identical inputs.
inline void write_heatmap_svg(const GridHeatmap& g, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw PrereqError("cannot open " + path + " for writing");
    double mx = 0.0;
    for (double x : g.v) mx = std::max(mx, std::abs(x));
    if (mx == 0.0) mx = 1.0;
    const int cellpx = 40, pad = 2;
    const int side = 9 * cellpx + 2 * pad;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << side << "\" height=\"" << side
        << "\">\n";
    out << "<!-- " << g.statistic << " layer=" << g.layer << " head=" << g.head << " -->\n";
    char buf[160];
    for (int r = 1; r <= 9; ++r)
        for (int c = 1; c <= 9; ++c) {
            const double t = g.at(r, c) / mx;  // [-1, 1]
            const int rr = t >= 0 ? 255 : static_cast<int>(std::lround(255.0 * (1.0 + t)));
            const int bb = t <= 0 ? 255 : static_cast<int>(std::lround(255.0 * (1.0 - t)));
            const int gg = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(t))));
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" "
                          "fill=\"rgb(%d,%d,%d)\"><title>%.6g</title></rect>\n",
                          pad + (c - 1) * cellpx, pad + (r - 1) * cellpx, cellpx, cellpx, rr, gg,
                          bb, g.at(r, c));
            out << buf;
        }
    for (int k = 0; k <= 9; ++k) {
        const int w = (k % 3 == 0) ? 3 : 1;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\" "
                      "stroke-width=\"%d\"/>\n",
                      pad + k * cellpx, pad, pad + k * cellpx, pad + 9 * cellpx, w);
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\" "
                      "stroke-width=\"%d\"/>\n",
                      pad, pad + k * cellpx, pad + 9 * cellpx, pad + k * cellpx, w);
        out << buf;
    }
    out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Attention grids

struct AttentionGrid {
    GridHeatmap grid;                 // mean attention mass per cell
    double non_placement_mass = 0.0;  // mean mass on non-placement tokens
    long n = 0;
};

// Mean attention from the CluesEnd position onto the cells of the board:
// each earlier placement token deposits its weight on its cell; mass on
// special tokens is tracked separately so the total stays 1 per example.
inline AttentionGrid attention_grid(const Params<float>& params,
                                    const std::vector<std::vector<TokenId>>& seqs, int layer,
                                    int head) {
    if (seqs.empty()) throw ConfigError("attention_grid needs at least one sequence");
    CaptureSpec cap;
    cap.attn_probs = true;
    std::vector<std::array<double, 82>> rows(seqs.size());  // 81 cells + special mass
    parallel_for(seqs.size(), [&](std::size_t i) {
        const auto run = forward(params, seqs[i], cap);
        const int pos = static_cast<int>(seqs[i].size()) - 1;
        auto& acc = rows[i];
        acc.fill(0.0);
        const auto& probs = run.acts.attn_probs(layer, head);
        for (int j = 0; j <= pos; ++j) {
            const double w = probs(pos, j);
            if (seqs[i][static_cast<std::size_t>(j)] < kNumPlacementTokens) {
                const Placement pl = decode_placement(seqs[i][static_cast<std::size_t>(j)]);
                acc[static_cast<std::size_t>((pl.r - 1) * 9 + pl.c - 1)] += w;
            } else {
                acc[81] += w;
            }
        }
    });
    AttentionGrid ag;
    ag.grid.layer = layer;
    ag.grid.head = head;
    ag.grid.statistic = "mean_attention";
    ag.n = static_cast<long>(seqs.size());
    for (const auto& acc : rows) {
        for (int c = 0; c < 81; ++c) ag.grid.v[static_cast<std::size_t>(c)] += acc[static_cast<std::size_t>(c)];
        ag.non_placement_mass += acc[81];
    }
    const double inv_n = 1.0 / static_cast<double>(ag.n);
    for (auto& x : ag.grid.v) x *= inv_n;
    ag.non_placement_mass *= inv_n;
    return ag;
}

// ---------------------------------------------------------------------------
// Head DLA split by digit presence

enum class LineKind { Row, Col, Box };

inline int line_of(LineKind kind, int cell) {
    const auto subs = substructures_of(Cell{cell / 9 + 1, cell % 9 + 1});
    switch (kind) {
        case LineKind::Row: return subs.row;
        case LineKind::Col: return subs.col;
        default: return subs.box;
    }
}

struct HeadDlaResult {
    GridHeatmap present;  // mean contribution to (cell,d) when d already in the cell's line
    GridHeatmap absent;
    struct LineDigit {
        int substructure = 0;
        int digit = 0;
        double present_mean = 0.0;
        long present_n = 0;
        double absent_mean = 0.0;
        long absent_n = 0;
    };
    std::vector<LineDigit> lines;  // target substructures x 9 digits
};

// Per-example head contribution via frozen-LN DLA, split by whether the
// digit is already present in the cell's line of `kind`; pooled over digits
// for the two grids and per (target line, digit) for the table.
inline HeadDlaResult head_dla(const Params<float>& params,
                              const std::vector<std::vector<TokenId>>& seqs,
                              const std::vector<Board>& boards, int layer, int head, LineKind kind,
                              const std::vector<int>& target_subs) {
    if (seqs.size() != boards.size()) throw ConfigError("head_dla sequences and boards must pair up");
    const ModelConfig& cfg = params.config;
    CaptureSpec cap;
    cap.resid_post = true;
    cap.head_out = true;

    std::vector<VecD> contribs(seqs.size());
    parallel_for(seqs.size(), [&](std::size_t i) {
        const auto run = forward(params, seqs[i], cap);
        const int pos = static_cast<int>(seqs[i].size()) - 1;
        const VecD final_resid =
            run.acts.resid_post(cfg.n_layers).row(pos).transpose().cast<double>();
        const double mu = final_resid.mean();
        const double var = (final_resid.array() - mu).square().mean();
        contribs[i] = detail::dla_project(
            params, run.acts.head_out(layer, head).row(pos).transpose().cast<double>(),
            1.0 / std::sqrt(var + cfg.ln_eps));
    });

    std::array<double, 81> present_sum{}, absent_sum{};
    std::array<long, 81> present_n{}, absent_n{};
    std::map<std::pair<int, int>, std::array<double, 2>> line_sum;  // (sub,d) -> {present, absent}
    std::map<std::pair<int, int>, std::array<long, 2>> line_n;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const PresenceMap pm = presence_map(boards[i]);
        for (int cell = 0; cell < kGridCells; ++cell) {
            const int line = line_of(kind, cell);
            for (int d = 1; d <= 9; ++d) {
                const double x =
                    contribs[i](encode_placement(cell / 9 + 1, cell % 9 + 1, d));
                const bool present = pm.test(static_cast<std::size_t>(line * 9 + d - 1));
                if (present) {
                    present_sum[static_cast<std::size_t>(cell)] += x;
                    present_n[static_cast<std::size_t>(cell)]++;
                } else {
                    absent_sum[static_cast<std::size_t>(cell)] += x;
                    absent_n[static_cast<std::size_t>(cell)]++;
                }
                for (int s : target_subs)
                    if (s == line) {
                        line_sum[{s, d}][present ? 0 : 1] += x;
                        line_n[{s, d}][present ? 0 : 1]++;
                    }
            }
        }
    }

    HeadDlaResult res;
    res.present.layer = res.absent.layer = layer;
    res.present.head = res.absent.head = head;
    res.present.statistic = "head_dla_present";
    res.absent.statistic = "head_dla_absent";
    for (int c = 0; c < 81; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        res.present.v[ci] = present_n[ci] ? present_sum[ci] / static_cast<double>(present_n[ci]) : 0.0;
        res.absent.v[ci] = absent_n[ci] ? absent_sum[ci] / static_cast<double>(absent_n[ci]) : 0.0;
    }
    for (const auto& [key, sums] : line_sum) {
        HeadDlaResult::LineDigit ld;
        ld.substructure = key.first;
        ld.digit = key.second;
        const auto& ns = line_n.at(key);
        ld.present_n = ns[0];
        ld.absent_n = ns[1];
        ld.present_mean = ns[0] ? sums[0] / static_cast<double>(ns[0]) : 0.0;
        ld.absent_mean = ns[1] ? sums[1] / static_cast<double>(ns[1]) : 0.0;
        res.lines.push_back(ld);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Naked-single margin analysis

// One harvested solving state: the next placement (cell,digit) is a naked
// single of the replayed board.
struct NsState {
    std::vector<TokenId> tokens;  // prefix, prediction read at `pos`
    int pos = 0;
    Board board;
    int cell = 0;
    int digit = 0;  // correct digit, 1..9
};

struct NsMarginPoint {
    int cell = 0;
    int digit = 0;
    double margin = 0.0;  // correct-digit lens logit minus best other digit
    int rank = 1;         // 1..9 within the cell's nine placement tokens
};

struct NsMarginResult {
    std::vector<NsMarginPoint> points;
    double frac_rank1 = 0.0;
};

// Lens at the pre-final-MLP residual (after the last attention block),
// restricted to the nine placement tokens of the target cell.
inline NsMarginResult ns_margin_analysis(const Params<float>& params,
                                         const std::vector<NsState>& states) {
    const ModelConfig& cfg = params.config;
    std::vector<NsMarginPoint> pts(states.size());
    parallel_for(states.size(), [&](std::size_t i) {
        const NsState& st = states[i];
        CaptureSpec cap;
        cap.resid_mid = true;
        const auto run = forward(params, st.tokens, cap);
        const VecD resid = run.acts.resid_mid(cfg.n_layers).row(st.pos).transpose().cast<double>();
        const VecD lens = logit_lens(params, resid);
        const int r = st.cell / 9 + 1, c = st.cell % 9 + 1;
        NsMarginPoint p;
        p.cell = st.cell;
        p.digit = st.digit;
        const double correct = lens(encode_placement(r, c, st.digit));
        double best_other = -std::numeric_limits<double>::infinity();
        int rank = 1;
        for (int d = 1; d <= 9; ++d) {
            if (d == st.digit) continue;
            const double x = lens(encode_placement(r, c, d));
            best_other = std::max(best_other, x);
            if (x > correct) ++rank;
        }
        p.margin = correct - best_other;
        p.rank = rank;
        pts[i] = p;
    });
    NsMarginResult res;
    res.points = std::move(pts);
    if (!res.points.empty()) {
        long firsts = 0;
        for (const auto& p : res.points) firsts += p.rank == 1;
        res.frac_rank1 = static_cast<double>(firsts) / static_cast<double>(res.points.size());
    }
    return res;
}

// Replays traces and harvests every state whose next trace token places a
// naked single; `unique_only` keeps states whose board has exactly one NS.
inline std::vector<NsState> mine_ns_states(const std::vector<TraceRecord>& traces,
                                           bool unique_only = false, std::size_t cap = 0) {
    std::vector<NsState> out;
    for (const auto& rec : traces) {
        Board board;
        std::vector<Board> stack;
        std::vector<TokenId> prefix;
        prefix.reserve(rec.tokens.size());
        bool past_clues = false;
        for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
            const TokenId tok = rec.tokens[i];
            if (past_clues && tok < kNumPlacementTokens && i > 0) {
                const Placement pl = decode_placement(tok);
                const auto singles = find_naked_singles(board);
                const bool is_ns = [&] {
                    for (const auto& s : singles)
                        if (s.r == pl.r && s.c == pl.c && s.d == pl.d) return true;
                    return false;
                }();
                if (is_ns && (!unique_only || singles.size() == 1)) {
                    NsState st;
                    st.tokens = prefix;
                    st.pos = static_cast<int>(prefix.size()) - 1;
                    st.board = board;
                    st.cell = (pl.r - 1) * 9 + (pl.c - 1);
                    st.digit = pl.d;
                    out.push_back(std::move(st));
                    if (cap && out.size() >= cap) return out;
                }
            }
            // replay the token
            if (tok < kNumPlacementTokens) {
                const Placement pl = decode_placement(tok);
                board.set(pl.r, pl.c, pl.d);
            } else if (tok == kTokCluesEnd) {
                past_clues = true;
            } else if (tok == kTokPush) {
                stack.push_back(board);
            } else if (tok == kTokPop) {
                if (stack.empty()) break;
                board = stack.back();
                stack.pop_back();
            } else if (tok == kTokSuccess || tok == kTokPad) {
                break;
            }
            prefix.push_back(tok);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activation-gap neuron scan

// Streaming conditional means: for every (cell, candidate count 1..9) bucket,
// the mean final-MLP activation vector over the states seen so far.
class NeuronScanAccumulator {
  public:
    explicit NeuronScanAccumulator(int d_mlp) : d_mlp_(d_mlp) {
        sums_.assign(81 * 9, VecD::Zero(d_mlp));
        counts_.assign(81 * 9, 0);
    }

    void add(const Board& board, const VecF& mlp_row) {
        if (mlp_row.size() != d_mlp_) throw ConfigError("neuron scan row has wrong width");
        const CandidateGrid cands = compute_candidates(board);
        const VecD row = mlp_row.cast<double>();
        for (int cell = 0; cell < kGridCells; ++cell) {
            if (!board.empty_at(cell)) continue;
            const int count = cands.count(cell);
            if (count < 1) continue;  // contradiction, outside the scan's domain
            const std::size_t b = static_cast<std::size_t>(cell * 9 + count - 1);
            sums_[b] += row;
            counts_[b]++;
        }
    }

    void merge(const NeuronScanAccumulator& other) {
        for (std::size_t b = 0; b < sums_.size(); ++b) {
            sums_[b] += other.sums_[b];
            counts_[b] += other.counts_[b];
        }
    }

    int d_mlp() const { return d_mlp_; }
    long bucket_count(int cell, int count) const {
        return counts_[static_cast<std::size_t>(cell * 9 + count - 1)];
    }
    // Mean activation of `neuron` when `cell` has exactly `count` candidates.
    double bucket_mean(int cell, int count, int neuron) const {
        const std::size_t b = static_cast<std::size_t>(cell * 9 + count - 1);
        if (counts_[b] == 0) return std::numeric_limits<double>::quiet_NaN();
        return sums_[b](neuron) / static_cast<double>(counts_[b]);
    }

  private:
    int d_mlp_;
    std::vector<VecD> sums_;
    std::vector<long> counts_;
};

struct NeuronScanReport {
    MatD gap;  // 81 x d_mlp; NaN when a bucket is unobserved
    double threshold = 3.0;
    struct Detector {
        int cell = 0;
        int neuron = 0;
        double gap = 0.0;
    };
    std::vector<Detector> detectors;   // one entry per detector neuron
    std::array<int, 3> coverage{};     // cells with 0 / 1 / 2+ detectors
};

// Gap(cell, neuron) = mean activation at count==1 minus the maximum mean
// across counts 2..9. Each neuron is assigned to at most one cell: its
// largest-gap cell, kept when the gap clears the threshold.
inline NeuronScanReport neuron_scan(const NeuronScanAccumulator& acc, double threshold = 3.0) {
    const int d_mlp = acc.d_mlp();
    NeuronScanReport rep;
    rep.threshold = threshold;
    rep.gap = MatD::Constant(81, d_mlp, std::numeric_limits<double>::quiet_NaN());
    for (int cell = 0; cell < kGridCells; ++cell) {
        if (acc.bucket_count(cell, 1) == 0) continue;
        bool any_other = false;
        for (int k = 2; k <= 9 && !any_other; ++k) any_other = acc.bucket_count(cell, k) > 0;
        if (!any_other) continue;
        for (int j = 0; j < d_mlp; ++j) {
            const double at1 = acc.bucket_mean(cell, 1, j);
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 2; k <= 9; ++k) {
                if (acc.bucket_count(cell, k) == 0) continue;
                mx = std::max(mx, acc.bucket_mean(cell, k, j));
            }
            rep.gap(cell, j) = at1 - mx;
        }
    }
    std::array<int, 81> per_cell{};
    for (int j = 0; j < d_mlp; ++j) {
        int best_cell = -1;
        double best = -std::numeric_limits<double>::infinity();
        for (int cell = 0; cell < kGridCells; ++cell) {
            const double g = rep.gap(cell, j);
            if (std::isnan(g)) continue;
            if (g > best) {
                best = g;
                best_cell = cell;
            }
        }
        if (best_cell >= 0 && best >= threshold) {
            rep.detectors.push_back({best_cell, j, best});
            per_cell[static_cast<std::size_t>(best_cell)]++;
        }
    }
    for (int cell = 0; cell < kGridCells; ++cell) {
        const int k = per_cell[static_cast<std::size_t>(cell)];
        rep.coverage[static_cast<std::size_t>(k > 2 ? 2 : k)]++;
    }
    return rep;
}

// Runs the model over the states and accumulates final-MLP activations at
// each prediction position; block-parallel with a fixed accumulation order.
inline NeuronScanAccumulator scan_states(const Params<float>& params,
                                         const std::vector<NsState>& states) {
    const ModelConfig& cfg = params.config;
    NeuronScanAccumulator acc(cfg.d_mlp);
    const std::size_t block = 128;
    CaptureSpec cap;
    cap.mlp_post_act = true;
    std::vector<VecF> rows(std::min(block, states.size()));
    for (std::size_t start = 0; start < states.size(); start += block) {
        const std::size_t end = std::min(states.size(), start + block);
        parallel_for(end - start, [&](std::size_t k) {
            const NsState& st = states[start + k];
            const auto run = forward(params, st.tokens, cap);
            rows[k] = run.acts.mlp_post_act(cfg.n_layers).row(st.pos).transpose();
        });
        for (std::size_t k = 0; k < end - start; ++k) acc.add(states[start + k].board, rows[k]);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Neuron weight DLA

// Per-unit-activation logit contribution of one final-MLP neuron: its output
// weight row with the final-LN scale folded in, through the unembedding.
inline VecD neuron_weight_dla(const Params<float>& params, int neuron) {
    const ModelConfig& cfg = params.config;
    if (neuron < 0 || neuron >= cfg.d_mlp) throw ConfigError("neuron id outside d_mlp");
    const VecD w = params.layers[static_cast<std::size_t>(cfg.n_layers - 1)]
                       .w_out.row(neuron)
                       .transpose()
                       .cast<double>();
    const VecD folded = w.array() * params.lnf_g.cast<double>().array();
    return params.unembed.cast<double>().transpose() * folded;
}

struct NeuronDlaSummary {
    double target_mean = 0.0;  // over the 9 placement tokens of the cell
    double target_std = 0.0;   // population sigma across the 9 digits
    double other_mean = 0.0;   // over the 720 placement tokens of other cells
    double other_std = 0.0;
};

inline NeuronDlaSummary neuron_dla_summary(const VecD& contrib, int cell) {
    if (cell < 0 || cell >= kGridCells) throw ConfigError("summary cell out of range");
    NeuronDlaSummary s;
    std::vector<double> target, other;
    target.reserve(9);
    other.reserve(720);
    for (int c = 0; c < kGridCells; ++c)
        for (int d = 1; d <= 9; ++d) {
            const double x = contrib(encode_placement(c / 9 + 1, c % 9 + 1, d));
            (c == cell ? target : other).push_back(x);
        }
    auto stats = [](const std::vector<double>& xs, double& mean, double& sd) {
        double sum = 0.0;
        for (double x : xs) sum += x;
        mean = sum / static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / static_cast<double>(xs.size()));
    };
    stats(target, s.target_mean, s.target_std);
    stats(other, s.other_mean, s.other_std);
    return s;
}

// Linear-interpolation percentile over a copy of xs, p in [0,100].
inline double percentile(std::vector<double> xs, double p) {
    if (xs.empty()) throw ConfigError("percentile of an empty sample");
    std::sort(xs.begin(), xs.end());
    const double idx = p / 100.0 * static_cast<double>(xs.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    if (lo + 1 >= xs.size()) return xs.back();
    const double frac = idx - static_cast<double>(lo);
    return xs[lo] * (1.0 - frac) + xs[lo + 1] * frac;
}

// ---------------------------------------------------------------------------
// Unembedding cosine structure

struct CosineGroup {
    bool row = false, col = false, box = false, digit = false;
    double mean = 0.0;
    double stddev = 0.0;  // sample
    long count = 0;
};

// Pairwise cosine over the 729 placement-token unembedding vectors, grouped
// by which features the two tokens share. Distinct pairs only.
inline std::vector<CosineGroup> unembedding_cosine_analysis(const Params<float>& params) {
    MatD u(kNumPlacementTokens, params.config.d_model);
    for (int t = 0; t < kNumPlacementTokens; ++t) {
        VecD col = params.unembed.col(t).cast<double>();
        const double n = col.norm();
        if (n > 0) col /= n;
        u.row(t) = col.transpose();
    }
    const MatD cos = u * u.transpose();

    std::array<double, 16> sum{}, sumsq{};
    std::array<long, 16> cnt{};
    for (int a = 0; a < kNumPlacementTokens; ++a) {
        const Placement pa = decode_placement(static_cast<TokenId>(a));
        for (int b = a + 1; b < kNumPlacementTokens; ++b) {
            const Placement pb = decode_placement(static_cast<TokenId>(b));
            int key = 0;
            if (pa.r == pb.r) key |= 1;
            if (pa.c == pb.c) key |= 2;
            if (box_of(pa.r, pa.c) == box_of(pb.r, pb.c)) key |= 4;
            if (pa.d == pb.d) key |= 8;
            const auto k = static_cast<std::size_t>(key);
            const double x = cos(a, b);
            sum[k] += x;
            sumsq[k] += x * x;
            cnt[k]++;
        }
    }
    std::vector<CosineGroup> out;
    for (int key = 0; key < 16; ++key) {
        const auto k = static_cast<std::size_t>(key);
        if (cnt[k] == 0) continue;
        CosineGroup g;
        g.row = key & 1;
        g.col = key & 2;
        g.box = key & 4;
        g.digit = key & 8;
        g.count = cnt[k];
        g.mean = sum[k] / static_cast<double>(cnt[k]);
        if (cnt[k] > 1) {
            const double var =
                (sumsq[k] - sum[k] * sum[k] / static_cast<double>(cnt[k])) /
                static_cast<double>(cnt[k] - 1);
            g.stddev = std::sqrt(std::max(0.0, var));
        }
        out.push_back(g);
    }
    return out;
}

}  // namespace mechlab
