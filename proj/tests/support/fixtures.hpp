#pragma once

// Test-only puzzle factory. Produces corpora in the same CSV schema as the
// public 3M-puzzle dump (id,puzzle,solution,clues,difficulty): a randomized
// solved grid, then clue digging with a uniqueness check after every
// removal. "Easy" targets 40-45 clues (pure single-chains, short traces);
// "hard" digs as far as a single random pass allows (usually 22-30 clues,
// traces with guesswork). Not a product feature: the toolkit consumes
// puzzle CSVs, it does not ship a generator.

#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "mechlab/grid.hpp"
#include "mechlab/puzzle_io.hpp"
#include "mechlab/rng.hpp"

namespace mechlab::fixtures {

namespace detail {

inline bool fill_rec(Board& b, Rng& rng) {
    const CandidateGrid cand = compute_candidates(b);
    int best = -1, best_count = 10;
    for (int idx = 0; idx < kGridCells; ++idx) {
        if (!b.empty_at(idx)) continue;
        const int n = cand.count(idx);
        if (n == 0) return false;
        if (n < best_count) {
            best = idx;
            best_count = n;
            if (n == 1) break;
        }
    }
    if (best < 0) return true;
    std::vector<int> digits;
    for (int d = 1; d <= 9; ++d)
        if (cand.has(best, d)) digits.push_back(d);
    rng.shuffle(digits);
    for (int d : digits) {
        b.set_index(best, d);
        if (fill_rec(b, rng)) return true;
        b.set_index(best, 0);
    }
    return false;
}

}  // namespace detail

inline Board make_solved_board(Rng& rng) {
    Board b;
    if (!detail::fill_rec(b, rng)) throw std::logic_error("grid fill failed");
    return b;
}

// Remove clues in random order while the solution stays unique; stop once
// `target_clues` is reached (0 = dig as deep as one pass allows).
inline Board dig_puzzle(const Board& solved, Rng& rng, int target_clues) {
    Board puzzle = solved;
    std::vector<int> order(kGridCells);
    for (int i = 0; i < kGridCells; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    int clues = kGridCells;
    for (int idx : order) {
        if (clues <= target_clues) break;
        const int d = puzzle.at_index(idx);
        puzzle.set_index(idx, 0);
        if (brute_force_solve(puzzle, 2).solution_count == 1) {
            --clues;
        } else {
            puzzle.set_index(idx, d);
        }
    }
    return puzzle;
}

struct CorpusOptions {
    int count = 100;
    std::uint64_t seed = 1;
    double hard_fraction = 0.2;  // hard = dug as deep as possible
    int easy_min_clues = 40;
    int easy_max_clues = 45;
};

inline std::vector<PuzzleRecord> make_corpus(const CorpusOptions& opt) {
    std::vector<PuzzleRecord> records;
    records.reserve(static_cast<std::size_t>(opt.count));
    for (int i = 0; i < opt.count; ++i) {
        Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(i)));
        const Board solved = make_solved_board(rng);
        const bool hard = rng.uniform() < opt.hard_fraction;
        const int span = opt.easy_max_clues - opt.easy_min_clues + 1;
        const int target =
            hard ? 0 : opt.easy_min_clues + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(span)));
        const Board puzzle = dig_puzzle(solved, rng, target);

        PuzzleRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "fix-%06d", i);
        rec.id = buf;
        rec.puzzle = to_text(puzzle);
        rec.solution = to_text(solved);
        rec.clues = puzzle.filled_count();
        rec.difficulty = hard ? 2.0 : 0.0;
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace mechlab::fixtures
