#pragma once

// Linear probes over residual-stream activations: the three concept families
// (cell state, cell candidates, substructure presence), Newton-fit logistic
// regression, grouped exact-match metrics, probe-direction geometry, and
// cross-layer / cross-position transfer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mechlab/checkpoint.hpp"
#include "mechlab/errors.hpp"
#include "mechlab/grid.hpp"
#include "mechlab/linalg.hpp"
#include "mechlab/parallel.hpp"

namespace mechlab {

enum class ProbeFamily { CellState, CellCandidate, SubstructurePresence };

inline const char* family_name(ProbeFamily f) {
    switch (f) {
        case ProbeFamily::CellState: return "cell_state";
        case ProbeFamily::CellCandidate: return "cell_candidate";
        case ProbeFamily::SubstructurePresence: return "substructure_presence";
    }
    return "?";
}

inline int family_targets(ProbeFamily f) {
    switch (f) {
        case ProbeFamily::CellState: return kGridCells;
        case ProbeFamily::CellCandidate: return kGridCells * kNumDigits;
        case ProbeFamily::SubstructurePresence: return kNumSubstructures * kNumDigits;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Labels

// Dense per-state label table. Entries are the class index (0..8 for the
// 9-class family, 0/1 for the binary families) or -1 where the target is
// undefined on that state (cell-state on empty cells, candidates on filled).
struct LabelTensor {
    ProbeFamily family = ProbeFamily::SubstructurePresence;
    int n_targets = 0;
    std::size_t n_states = 0;
    std::vector<std::int8_t> v;  // n_states x n_targets, row-major

    std::int8_t at(std::size_t state, int target) const {
        return v[state * static_cast<std::size_t>(n_targets) + static_cast<std::size_t>(target)];
    }
};

inline LabelTensor build_labels(ProbeFamily family, const std::vector<Board>& boards) {
    LabelTensor out;
    out.family = family;
    out.n_targets = family_targets(family);
    out.n_states = boards.size();
    out.v.resize(out.n_states * static_cast<std::size_t>(out.n_targets));
    for (std::size_t s = 0; s < boards.size(); ++s) {
        const Board& b = boards[s];
        std::int8_t* row = out.v.data() + s * static_cast<std::size_t>(out.n_targets);
        switch (family) {
            case ProbeFamily::CellState:
                for (int c = 0; c < kGridCells; ++c)
                    row[c] = b.empty_at(c) ? std::int8_t(-1)
                                           : static_cast<std::int8_t>(b.at_index(c) - 1);
                break;
            case ProbeFamily::CellCandidate: {
                const CandidateGrid cand = compute_candidates(b);
                for (int c = 0; c < kGridCells; ++c)
                    for (int d = 1; d <= kNumDigits; ++d)
                        row[c * 9 + d - 1] = b.empty_at(c)
                                                 ? static_cast<std::int8_t>(cand.has(c, d) ? 1 : 0)
                                                 : std::int8_t(-1);
                break;
            }
            case ProbeFamily::SubstructurePresence: {
                const PresenceMap pm = presence_map(b);
                for (int t = 0; t < out.n_targets; ++t)
                    row[t] = static_cast<std::int8_t>(pm[static_cast<std::size_t>(t)] ? 1 : 0);
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probes

struct LinearProbe {
    ProbeFamily family = ProbeFamily::SubstructurePresence;
    int target = 0;  // cell, cell*9+(d-1), or substructure*9+(d-1)
    int layer = 0;
    MatD weights;  // n_classes x d_model (1 row for binary, 9 for cell state)
    VecD bias;     // n_classes
    bool degenerate = false;  // single-class training labels

    int n_classes() const { return static_cast<int>(weights.rows()); }

    // Normalized weight rows; for binary probes row 0 is the concept direction.
    MatD unit_directions() const {
        MatD u = weights;
        for (Eigen::Index r = 0; r < u.rows(); ++r) {
            const double n = u.row(r).norm();
            if (n > 0) u.row(r) /= n;
        }
        return u;
    }
    VecD unit_direction() const { return unit_directions().row(0).transpose(); }

    // Class probabilities for one activation row.
    VecD predict(const VecD& x) const {
        VecD z = weights * x + bias;
        if (n_classes() == 1) {
            VecD p(1);
            p(0) = 1.0 / (1.0 + std::exp(-z(0)));
            return p;
        }
        const double mx = z.maxCoeff();
        VecD e = (z.array() - mx).exp();
        return e / e.sum();
    }
};

struct FitOptions {
    double l2 = 1e-3;      // on weights (mean-loss scale); bias gets a 1e-9 gauge ridge
    double tol = 1e-6;     // on the mean-gradient norm
    int max_iter = 100;
};

namespace detail {

// Full-batch Newton for binary logistic regression on the mean objective
//   L(w,b) = mean_i CE(sigma(w.x_i + b), y_i) + l2/2 ||w||^2.
inline void fit_binary(const MatD& x, const std::vector<std::int8_t>& y, const FitOptions& opt,
                       LinearProbe& probe) {
    const Eigen::Index n = x.rows(), d = x.cols();
    long pos = 0;
    for (auto v : y) pos += v;
    probe.weights = MatD::Zero(1, d);
    probe.bias = VecD::Zero(1);
    if (pos == 0 || pos == n) {
        // single-class labels: constant probe at the (clamped) base rate
        const double p = (static_cast<double>(pos) + 1.0) / (static_cast<double>(n) + 2.0);
        probe.bias(0) = std::log(p / (1.0 - p));
        probe.degenerate = true;
        return;
    }

    VecD w = VecD::Zero(d + 1);  // bias last
    VecD yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)];
    VecD p(n), g(d + 1);
    MatD h(d + 1, d + 1);
    const double inv_n = 1.0 / static_cast<double>(n);

    for (int it = 0; it < opt.max_iter; ++it) {
        VecD z = x * w.head(d);
        z.array() += w(d);
        p = (1.0 / (1.0 + (-z.array()).exp())).matrix();

        const VecD r = (p - yv) * inv_n;
        g.head(d) = x.transpose() * r + opt.l2 * w.head(d);
        g(d) = r.sum();
        if (g.norm() <= opt.tol) break;

        const VecD s = (p.array() * (1.0 - p.array()) * inv_n).matrix();
        const MatD xs = s.asDiagonal() * x;
        h.topLeftCorner(d, d) = x.transpose() * xs;
        h.topLeftCorner(d, d).diagonal().array() += opt.l2;
        h.topRightCorner(d, 1) = xs.colwise().sum().transpose();
        h.bottomLeftCorner(1, d) = xs.colwise().sum();
        h(d, d) = s.sum() + 1e-12;
        w -= h.ldlt().solve(g);
    }
    probe.weights.row(0) = w.head(d).transpose();
    probe.bias(0) = w(d);
}

// Full-batch Newton for the 9-class softmax probe. Parameters are stacked
// class-major as [w_0, b_0, ..., w_8, b_8]; the exact Hessian is
// blockdiag(X' P_k X) - Y' Y with Y_k = P_k X (X here includes the bias
// column), assembled with one big GEMM per iteration.
inline void fit_multiclass(const MatD& x, const std::vector<std::int8_t>& y, const FitOptions& opt,
                           LinearProbe& probe) {
    constexpr int K = kNumDigits;
    const Eigen::Index n = x.rows(), d = x.cols();
    const Eigen::Index da = d + 1;  // with bias column
    probe.weights = MatD::Zero(K, d);
    probe.bias = VecD::Zero(K);

    MatD xa(n, da);
    xa.leftCols(d) = x;
    xa.col(d).setOnes();
    MatD onehot = MatD::Zero(n, K);
    int classes_seen = 0;
    {
        std::array<bool, K> seen{};
        for (Eigen::Index i = 0; i < n; ++i) {
            onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;
            seen[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] = true;
        }
        for (bool b : seen) classes_seen += b;
    }
    if (classes_seen < 2) {
        probe.degenerate = true;
        if (n > 0) probe.bias(y[0]) = 1.0;  // constant argmax at the only class
        return;
    }

    MatD w = MatD::Zero(K, da);
    const double inv_n = 1.0 / static_cast<double>(n);
    MatD probs(n, K), grad(K, da);
    auto objective = [&](const MatD& wt) {
        MatD z = xa * wt.transpose();  // n x K
        double nll = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mx = z.row(i).maxCoeff();
            double lse = 0;
            for (int k = 0; k < K; ++k) lse += std::exp(z(i, k) - mx);
            nll += std::log(lse) + mx - z(i, y[static_cast<std::size_t>(i)]);
        }
        return nll * inv_n + 0.5 * opt.l2 * wt.leftCols(d).squaredNorm();
    };

    double obj = objective(w);
    for (int it = 0; it < opt.max_iter; ++it) {
        MatD z = xa * w.transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mx = z.row(i).maxCoeff();
            const auto e = (z.row(i).array() - mx).exp().eval();
            probs.row(i) = (e / e.sum()).matrix();
        }
        grad = (probs - onehot).transpose() * xa * inv_n;
        grad.leftCols(d) += opt.l2 * w.leftCols(d);
        if (grad.norm() <= opt.tol) break;

        // Hessian: KdxKd, class-major blocks
        MatD yk(n, K * da);
        for (int k = 0; k < K; ++k)
            yk.middleCols(k * da, da) = probs.col(k).asDiagonal() * xa;
        MatD h = -(yk.transpose() * yk) * inv_n;
        for (int k = 0; k < K; ++k)
            h.block(k * da, k * da, da, da) += xa.transpose() * yk.middleCols(k * da, da) * inv_n;
        for (int k = 0; k < K; ++k) {
            h.block(k * da, k * da, d, d).diagonal().array() += opt.l2;
            h(k * da + d, k * da + d) += 1e-9;  // fixes the softmax bias gauge
        }

        VecD gflat(K * da), step(K * da);
        for (int k = 0; k < K; ++k) gflat.segment(k * da, da) = grad.row(k).transpose();
        step = h.ldlt().solve(gflat);

        // damped update: halve until the objective stops increasing
        double scale = 1.0;
        MatD w_try = w;
        for (int half = 0; half < 30; ++half) {
            for (int k = 0; k < K; ++k)
                w_try.row(k) = w.row(k) - scale * step.segment(k * da, da).transpose();
            const double o = objective(w_try);
            if (o <= obj + 1e-12) {
                obj = o;
                break;
            }
            scale *= 0.5;
        }
        w = w_try;
    }
    probe.weights = w.leftCols(d);
    probe.bias = w.col(d);
}

}  // namespace detail

// Fits one probe on the rows of X whose label is defined (>= 0).
inline LinearProbe fit_probe(ProbeFamily family, int target, int layer, const MatD& x,
                             const std::vector<std::int8_t>& y, const FitOptions& opt = {}) {
    if (static_cast<std::size_t>(x.rows()) != y.size())
        throw ConfigError("probe features and labels disagree on row count");
    LinearProbe probe;
    probe.family = family;
    probe.target = target;
    probe.layer = layer;
    if (x.rows() == 0) {
        probe.weights = MatD::Zero(family == ProbeFamily::CellState ? kNumDigits : 1, x.cols());
        probe.bias = VecD::Zero(probe.weights.rows());
        probe.degenerate = true;
        return probe;
    }
    if (family == ProbeFamily::CellState)
        detail::fit_multiclass(x, y, opt, probe);
    else
        detail::fit_binary(x, y, opt, probe);
    return probe;
}

struct ProbeBank {
    ProbeFamily family = ProbeFamily::SubstructurePresence;
    int layer = 0;
    std::vector<LinearProbe> probes;  // indexed by target id
};

// Fits the whole family on activations X (states x d_model) at one layer,
// selecting per target the states where its label is defined.
inline ProbeBank fit_family(ProbeFamily family, int layer, const MatF& x, const LabelTensor& labels,
                            const FitOptions& opt = {}) {
    if (labels.family != family) throw ConfigError("label tensor family mismatch");
    if (labels.n_states != static_cast<std::size_t>(x.rows()))
        throw ConfigError("activations and labels disagree on state count");
    const MatD xd = x.cast<double>();
    ProbeBank bank;
    bank.family = family;
    bank.layer = layer;
    bank.probes.resize(static_cast<std::size_t>(labels.n_targets));
    parallel_for(static_cast<std::size_t>(labels.n_targets), [&](std::size_t t) {
        std::vector<Eigen::Index> rows;
        std::vector<std::int8_t> y;
        for (std::size_t s = 0; s < labels.n_states; ++s) {
            const std::int8_t lab = labels.at(s, static_cast<int>(t));
            if (lab < 0) continue;
            rows.push_back(static_cast<Eigen::Index>(s));
            y.push_back(lab);
        }
        MatD xs(static_cast<Eigen::Index>(rows.size()), xd.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) xs.row(static_cast<Eigen::Index>(i)) = xd.row(rows[i]);
        bank.probes[t] = fit_probe(family, static_cast<int>(t), layer, xs, y, opt);
    });
    return bank;
}

// ---------------------------------------------------------------------------
// Metrics

// Mann-Whitney AUC with average ranks for ties; NaN when one class is absent.
inline double rank_auc(const std::vector<double>& scores, const std::vector<std::int8_t>& labels) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_pos = 0;
    long n_pos = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]] > 0) {
                rank_pos += avg_rank;
                ++n_pos;
            }
        i = j;
    }
    const long n_neg = static_cast<long>(n) - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();
    return (rank_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

enum class Grouping {
    PerTarget,                    // each probe alone (cell-state top-1)
    PerCell,                      // candidate probes: 9 digits of one cell
    PerSubstructure,              // presence probes: 9 digits of one line/box
    PerDigitAcrossSubstructures,  // presence probes: one digit in all 27
};

inline std::vector<std::vector<int>> make_groups(ProbeFamily family, Grouping grouping) {
    const int n = family_targets(family);
    std::vector<std::vector<int>> groups;
    switch (grouping) {
        case Grouping::PerTarget:
            for (int t = 0; t < n; ++t) groups.push_back({t});
            break;
        case Grouping::PerCell:
            if (family != ProbeFamily::CellCandidate)
                throw ConfigError("per-cell grouping applies to the candidate family");
            for (int c = 0; c < kGridCells; ++c) {
                std::vector<int> g;
                for (int d = 0; d < kNumDigits; ++d) g.push_back(c * 9 + d);
                groups.push_back(std::move(g));
            }
            break;
        case Grouping::PerSubstructure:
            if (family != ProbeFamily::SubstructurePresence)
                throw ConfigError("per-substructure grouping applies to the presence family");
            for (int s = 0; s < kNumSubstructures; ++s) {
                std::vector<int> g;
                for (int d = 0; d < kNumDigits; ++d) g.push_back(s * 9 + d);
                groups.push_back(std::move(g));
            }
            break;
        case Grouping::PerDigitAcrossSubstructures:
            if (family != ProbeFamily::SubstructurePresence)
                throw ConfigError("per-digit grouping applies to the presence family");
            for (int d = 0; d < kNumDigits; ++d) {
                std::vector<int> g;
                for (int s = 0; s < kNumSubstructures; ++s) g.push_back(s * 9 + d);
                groups.push_back(std::move(g));
            }
            break;
    }
    return groups;
}

struct ProbeEvalResult {
    // per-target vectors (NaN where undefined on the eval states)
    std::vector<double> accuracy;
    std::vector<double> auc;
    std::vector<double> mse;
    // macro aggregates over defined targets
    double macro_accuracy = 0;
    double macro_auc = 0;
    double macro_mse = 0;
    // exact match for the requested grouping (mean over states and groups)
    double grouped_exact = 0;
    long grouped_states = 0;  // number of (state, group) pairs scored
};

// Evaluates a fitted bank on activations + labels from any layer/position.
inline ProbeEvalResult evaluate_probes(const ProbeBank& bank, const MatF& x,
                                       const LabelTensor& labels, Grouping grouping) {
    if (labels.n_targets != static_cast<int>(bank.probes.size()))
        throw ConfigError("probe bank and label tensor disagree on target count");
    if (labels.n_states != static_cast<std::size_t>(x.rows()))
        throw ConfigError("activations and labels disagree on state count");
    const std::size_t n_states = labels.n_states;
    const int n_targets = labels.n_targets;
    const MatD xd = x.cast<double>();

    ProbeEvalResult res;
    res.accuracy.assign(static_cast<std::size_t>(n_targets),
                        std::numeric_limits<double>::quiet_NaN());
    res.auc = res.accuracy;
    res.mse = res.accuracy;

    // correctness per (state, target) for grouped exact-match: 1 correct,
    // 0 wrong, -1 undefined
    std::vector<std::int8_t> correct(n_states * static_cast<std::size_t>(n_targets));

    parallel_for(static_cast<std::size_t>(n_targets), [&](std::size_t t) {
        const LinearProbe& probe = bank.probes[t];
        std::vector<double> scores;
        std::vector<std::int8_t> ybin;
        long n_def = 0, n_correct = 0;
        double se = 0;
        const bool multiclass = probe.n_classes() > 1;
        for (std::size_t s = 0; s < n_states; ++s) {
            const std::int8_t lab = labels.at(s, static_cast<int>(t));
            std::int8_t& cslot = correct[s * static_cast<std::size_t>(n_targets) + t];
            if (lab < 0) {
                cslot = -1;
                continue;
            }
            const VecD p = probe.predict(xd.row(static_cast<Eigen::Index>(s)).transpose());
            bool ok;
            if (multiclass) {
                Eigen::Index argmax;
                p.maxCoeff(&argmax);
                ok = static_cast<int>(argmax) == lab;
                for (int k = 0; k < probe.n_classes(); ++k) {
                    const double tgt = (k == lab) ? 1.0 : 0.0;
                    se += (p(k) - tgt) * (p(k) - tgt);
                }
            } else {
                ok = (p(0) > 0.5) == (lab > 0);
                se += (p(0) - lab) * (p(0) - lab);
                scores.push_back(p(0));
                ybin.push_back(lab);
            }
            cslot = ok ? 1 : 0;
            n_correct += ok;
            ++n_def;
        }
        if (n_def == 0) return;
        res.accuracy[t] = static_cast<double>(n_correct) / static_cast<double>(n_def);
        res.mse[t] = se / (static_cast<double>(n_def) * probe.n_classes());
        if (multiclass) {
            // one-vs-rest macro AUC within the probe
            double sum = 0;
            int kcnt = 0;
            for (int k = 0; k < probe.n_classes(); ++k) {
                std::vector<double> sc;
                std::vector<std::int8_t> yk;
                for (std::size_t s = 0; s < n_states; ++s) {
                    const std::int8_t lab = labels.at(s, static_cast<int>(t));
                    if (lab < 0) continue;
                    sc.push_back(
                        probe.predict(xd.row(static_cast<Eigen::Index>(s)).transpose())(k));
                    yk.push_back(lab == k ? 1 : 0);
                }
                const double a = rank_auc(sc, yk);
                if (!std::isnan(a)) {
                    sum += a;
                    ++kcnt;
                }
            }
            if (kcnt > 0) res.auc[t] = sum / kcnt;
        } else {
            res.auc[t] = rank_auc(scores, ybin);
        }
    });

    auto mean_skip_nan = [](const std::vector<double>& v) {
        double sum = 0;
        long cnt = 0;
        for (double x : v)
            if (!std::isnan(x)) {
                sum += x;
                ++cnt;
            }
        return cnt == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / cnt;
    };
    res.macro_accuracy = mean_skip_nan(res.accuracy);
    res.macro_auc = mean_skip_nan(res.auc);
    res.macro_mse = mean_skip_nan(res.mse);

    const auto groups = make_groups(bank.family, grouping);
    long hits = 0, total = 0;
    for (std::size_t s = 0; s < n_states; ++s) {
        for (const auto& g : groups) {
            bool any = false, all = true;
            for (int t : g) {
                const std::int8_t c =
                    correct[s * static_cast<std::size_t>(n_targets) + static_cast<std::size_t>(t)];
                if (c < 0) continue;
                any = true;
                if (c == 0) all = false;
            }
            if (!any) continue;
            ++total;
            hits += all;
        }
    }
    res.grouped_states = total;
    res.grouped_exact = total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
    return res;
}

// ---------------------------------------------------------------------------
// Probe geometry (candidate-probe cosine structure)

enum class PairCategory { RowAndBox, ColAndBox, RowNotBox, ColNotBox, Box, Stack, Band, None };

inline const char* pair_category_name(PairCategory c) {
    switch (c) {
        case PairCategory::RowAndBox: return "r_and_box";
        case PairCategory::ColAndBox: return "c_and_box";
        case PairCategory::RowNotBox: return "r_not_box";
        case PairCategory::ColNotBox: return "c_not_box";
        case PairCategory::Box: return "box";
        case PairCategory::Stack: return "stack";
        case PairCategory::Band: return "band";
        case PairCategory::None: return "none";
    }
    return "?";
}

// Relationship between two distinct cells, most specific shared structure
// first: same row (split by box), same column (split by box), same box only,
// then chute-level stack/band, else nothing shared.
inline PairCategory classify_cell_pair(int a, int b) {
    const int ra = a / 9, ca = a % 9, rb = b / 9, cb = b % 9;
    const bool row = ra == rb, col = ca == cb;
    const bool box = (ra / 3 == rb / 3) && (ca / 3 == cb / 3);
    if (row && box) return PairCategory::RowAndBox;
    if (col && box) return PairCategory::ColAndBox;
    if (row) return PairCategory::RowNotBox;
    if (col) return PairCategory::ColNotBox;
    if (box) return PairCategory::Box;
    if (ca / 3 == cb / 3) return PairCategory::Stack;
    if (ra / 3 == rb / 3) return PairCategory::Band;
    return PairCategory::None;
}

struct CosineStats {
    double mean = 0;
    double stddev = 0;
    long count = 0;
};

// Pairwise cosine of candidate-probe directions for same-digit cell pairs,
// pooled over the 9 digits and bucketed by the cells' shared substructures.
inline std::map<PairCategory, CosineStats> probe_cosine_structure(const ProbeBank& bank) {
    if (bank.family != ProbeFamily::CellCandidate)
        throw ConfigError("cosine structure is defined on the candidate family");
    std::map<PairCategory, std::vector<double>> buckets;
    for (int d = 0; d < kNumDigits; ++d) {
        std::vector<VecD> dirs(kGridCells);
        for (int c = 0; c < kGridCells; ++c)
            dirs[static_cast<std::size_t>(c)] =
                bank.probes[static_cast<std::size_t>(c * 9 + d)].unit_direction();
        for (int a = 0; a < kGridCells; ++a)
            for (int b = a + 1; b < kGridCells; ++b)
                buckets[classify_cell_pair(a, b)].push_back(
                    dirs[static_cast<std::size_t>(a)].dot(dirs[static_cast<std::size_t>(b)]));
    }
    std::map<PairCategory, CosineStats> out;
    for (auto& [cat, v] : buckets) {
        CosineStats st;
        st.count = static_cast<long>(v.size());
        for (double x : v) st.mean += x;
        st.mean /= static_cast<double>(v.size());
        for (double x : v) st.stddev += (x - st.mean) * (x - st.mean);
        st.stddev = v.size() > 1 ? std::sqrt(st.stddev / static_cast<double>(v.size() - 1)) : 0.0;
        out[cat] = st;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transfer

// Entry (i,j): grouped exact-match of banks[i] evaluated on acts[j].
inline MatD cross_layer_transfer(const std::vector<ProbeBank>& banks,
                                 const std::vector<MatF>& acts, const LabelTensor& labels,
                                 Grouping grouping) {
    if (banks.size() != acts.size())
        throw ConfigError("cross-layer transfer needs one activation set per bank");
    const auto n = static_cast<Eigen::Index>(banks.size());
    MatD m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            m(i, j) = evaluate_probes(banks[static_cast<std::size_t>(i)],
                                      acts[static_cast<std::size_t>(j)], labels, grouping)
                          .grouped_exact;
    return m;
}

struct PositionTransferPoint {
    int empty_cells = 0;
    double exact_match = 0;
    double mse = 0;
    double auc = 0;
    long states = 0;
};

// Frozen probes applied to later-position activations, bucketed by how many
// cells the replayed board still has empty; labels are rebuilt per state.
inline std::vector<PositionTransferPoint> cross_position_transfer(const ProbeBank& bank,
                                                                  const MatF& x,
                                                                  const std::vector<Board>& boards,
                                                                  Grouping grouping) {
    if (boards.size() != static_cast<std::size_t>(x.rows()))
        throw ConfigError("positional transfer needs one board per activation row");
    std::map<int, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < boards.size(); ++i)
        buckets[kGridCells - boards[i].filled_count()].push_back(i);

    std::vector<PositionTransferPoint> out;
    for (const auto& [empty, rows] : buckets) {
        MatF xs(static_cast<Eigen::Index>(rows.size()), x.cols());
        std::vector<Board> bs;
        bs.reserve(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            xs.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
            bs.push_back(boards[rows[i]]);
        }
        const LabelTensor labels = build_labels(bank.family, bs);
        const ProbeEvalResult ev = evaluate_probes(bank, xs, labels, grouping);
        PositionTransferPoint pt;
        pt.empty_cells = empty;
        pt.exact_match = ev.grouped_exact;
        pt.mse = ev.macro_mse;
        pt.auc = ev.macro_auc;
        pt.states = static_cast<long>(rows.size());
        out.push_back(pt);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization (checkpoint container format)

inline void save_probe_bank(const ProbeBank& bank, const std::string& path) {
    TensorContainer c;
    c.config = {{"kind", "probe_bank"},
                {"family", family_name(bank.family)},
                {"layer", bank.layer},
                {"n_targets", static_cast<int>(bank.probes.size())}};
    std::vector<int> degenerate;
    for (const auto& probe : bank.probes) {
        const std::string base =
            std::string(family_name(bank.family)) + "/L" + std::to_string(bank.layer) + "/t" +
            std::to_string(probe.target) + "/";
        const MatF w = probe.weights.cast<float>();
        const VecF b = probe.bias.cast<float>();
        c.add(base + "w",
              {static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols())}, w.data(),
              static_cast<std::size_t>(w.size()));
        c.add(base + "b", {static_cast<std::size_t>(b.size()), 1}, b.data(),
              static_cast<std::size_t>(b.size()));
        if (probe.degenerate) degenerate.push_back(probe.target);
    }
    c.config["degenerate"] = degenerate;
    save_container(c, path);
}

inline ProbeBank load_probe_bank(const std::string& path) {
    const TensorContainer c = load_container(path);
    if (c.config.value("kind", "") != "probe_bank")
        throw FormatError("'" + path + "' is not a probe bank");
    ProbeBank bank;
    const std::string fam = c.config.at("family");
    if (fam == "cell_state") bank.family = ProbeFamily::CellState;
    else if (fam == "cell_candidate") bank.family = ProbeFamily::CellCandidate;
    else if (fam == "substructure_presence") bank.family = ProbeFamily::SubstructurePresence;
    else throw FormatError("unknown probe family '" + fam + "'");
    bank.layer = c.config.at("layer").get<int>();
    const int n = c.config.at("n_targets").get<int>();
    std::vector<int> degenerate = c.config.value("degenerate", std::vector<int>{});
    bank.probes.resize(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
        const std::string base =
            fam + "/L" + std::to_string(bank.layer) + "/t" + std::to_string(t) + "/";
        const TensorEntry& w = c.at(base + "w");
        const TensorEntry& b = c.at(base + "b");
        LinearProbe& probe = bank.probes[static_cast<std::size_t>(t)];
        probe.family = bank.family;
        probe.target = t;
        probe.layer = bank.layer;
        probe.weights.resize(static_cast<Eigen::Index>(w.shape[0]),
                             static_cast<Eigen::Index>(w.shape[1]));
        for (std::size_t i = 0; i < w.data.size(); ++i)
            probe.weights.data()[i] = w.data[i];
        probe.bias.resize(static_cast<Eigen::Index>(b.shape[0]));
        for (std::size_t i = 0; i < b.data.size(); ++i) probe.bias.data()[i] = b.data[i];
        probe.degenerate =
            std::find(degenerate.begin(), degenerate.end(), t) != degenerate.end();
    }
    return bank;
}

}  // namespace mechlab
