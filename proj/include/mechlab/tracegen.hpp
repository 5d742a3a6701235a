#pragma once

// Randomized trace generation: a backtracking solver whose every choice
// point is driven by the supplied Rng, emitting the token trace as it goes.
//
// Per step, in priority order:
//   1. board complete            -> Success
//   2. some empty cell has zero candidates -> contradiction (fail the line)
//   3. naked singles exist       -> place one uniformly at random
//   4. hidden singles exist      -> place one uniformly at random
//   5. otherwise guess: pick a random cell among those with the fewest
//      candidates, try its digits in random order; each attempt is
//      Push [RrCc=d] ... and a failed line closes with Pop.
//
// Deductions re-derive the candidate grid after every placement, so a
// hidden single that spawns fresh naked singles hands control back to rule
// 3 immediately: whenever a naked single exists in a consistent state, the
// next emitted token places a naked single.

#include <stdexcept>
#include <vector>

#include "mechlab/grid.hpp"
#include "mechlab/rng.hpp"
#include "mechlab/trace.hpp"

namespace mechlab {

struct TraceGenStats {
    int guesses = 0;
    int pops = 0;
    int naked_singles = 0;
    int hidden_singles = 0;
};

namespace detail {

inline bool trace_search(Board& board, Rng& rng, std::vector<TokenId>& out, TraceGenStats* stats) {
    for (;;) {
        if (board.complete()) {
            out.push_back(kTokSuccess);
            return true;
        }
        const CandidateGrid cand = compute_candidates(board);
        if (board_has_contradiction(board, cand)) return false;

        if (auto singles = find_naked_singles(board, cand); !singles.empty()) {
            const Placement p = singles[rng.bounded(singles.size())];
            out.push_back(encode_placement(p));
            board.set(p.r, p.c, p.d);
            if (stats) ++stats->naked_singles;
            continue;
        }
        if (auto singles = find_hidden_singles(board, cand); !singles.empty()) {
            const Placement p = singles[rng.bounded(singles.size())];
            out.push_back(encode_placement(p));
            board.set(p.r, p.c, p.d);
            if (stats) ++stats->hidden_singles;
            continue;
        }

        // Guess at a random minimum-candidate cell.
        int min_count = 10;
        for (int idx = 0; idx < kGridCells; ++idx)
            if (board.empty_at(idx) && cand.count(idx) < min_count) min_count = cand.count(idx);
        std::vector<int> pool;
        for (int idx = 0; idx < kGridCells; ++idx)
            if (board.empty_at(idx) && cand.count(idx) == min_count) pool.push_back(idx);
        const int cell_idx = pool[rng.bounded(pool.size())];
        const Cell cell = Cell::from_index(cell_idx);

        std::vector<int> digits;
        for (int d = 1; d <= 9; ++d)
            if (cand.has(cell_idx, d)) digits.push_back(d);
        rng.shuffle(digits);

        for (int d : digits) {
            out.push_back(kTokPush);
            const Board snapshot = board;
            out.push_back(encode_placement(cell.r, cell.c, d));
            board.set(cell.r, cell.c, d);
            if (stats) ++stats->guesses;
            if (trace_search(board, rng, out, stats)) return true;
            out.push_back(kTokPop);
            board = snapshot;
            if (stats) ++stats->pops;
        }
        return false;  // every candidate failed; the enclosing guess pops
    }
}

}  // namespace detail

// Clue tokens in random order, CluesEnd, then the solving body. Throws if
// the puzzle is inconsistent or unsolvable.
inline std::vector<TokenId> generate_trace(const Board& puzzle, Rng& rng,
                                           TraceGenStats* stats = nullptr) {
    if (!consistent(puzzle)) throw std::invalid_argument("puzzle has conflicting clues");

    std::vector<int> clue_cells;
    for (int idx = 0; idx < kGridCells; ++idx)
        if (!puzzle.empty_at(idx)) clue_cells.push_back(idx);
    rng.shuffle(clue_cells);

    std::vector<TokenId> out;
    out.reserve(192);
    for (int idx : clue_cells) {
        const Cell cell = Cell::from_index(idx);
        out.push_back(encode_placement(cell.r, cell.c, puzzle.at_index(idx)));
    }
    out.push_back(kTokCluesEnd);

    Board board = puzzle;
    if (!detail::trace_search(board, rng, out, stats))
        throw std::invalid_argument("puzzle is unsolvable");
    return out;
}

}  // namespace mechlab
