#pragma once

// Sudoku board algebra: cells, the 27 substructures (rows, columns, boxes),
// candidate sets, naked/hidden single detection, digit-presence maps, and a
// deterministic brute-force solver used as the ground-truth oracle in tests.
//
// Conventions (used everywhere downstream, including the token language):
//   rows r, columns c, digits d are 1-based in interfaces;
//   cell index = (r-1)*9 + (c-1) in [0, 81);
//   substructure index: rows 0-8, columns 9-17, boxes 18-26;
//   box k (1-based) = 3*(i-1) + j for band i, stack j, i.e. box index
//   follows row-major 3x3 order.

#include <array>
#include <bit>
#include <bitset>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mechlab {

inline constexpr int kGridCells = 81;
inline constexpr int kNumSubstructures = 27;
inline constexpr int kNumDigits = 9;

struct Cell {
    int r = 0;  // 1..9
    int c = 0;  // 1..9

    int index() const { return (r - 1) * 9 + (c - 1); }
    static Cell from_index(int idx) { return Cell{idx / 9 + 1, idx % 9 + 1}; }
    bool operator==(const Cell&) const = default;
};

struct Placement {
    int r = 0;
    int c = 0;
    int d = 0;  // 1..9

    Cell cell() const { return Cell{r, c}; }
    bool operator==(const Placement&) const = default;
};

// 1-based box number in [1,9] for a cell; band i = (r-1)/3 + 1, stack j = (c-1)/3 + 1.
inline int box_of(int r, int c) { return 3 * ((r - 1) / 3) + ((c - 1) / 3) + 1; }
inline int band_of(int r) { return (r - 1) / 3 + 1; }
inline int stack_of(int c) { return (c - 1) / 3 + 1; }

struct Substructures {
    int row;  // 0..8
    int col;  // 9..17
    int box;  // 18..26
};

inline Substructures substructures_of(Cell cell) {
    return Substructures{cell.r - 1, 9 + (cell.c - 1), 18 + (box_of(cell.r, cell.c) - 1)};
}

// Cell indices belonging to substructure s in [0,27).
inline const std::array<int, 9>& substructure_cells(int s) {
    static const auto table = [] {
        std::array<std::array<int, 9>, kNumSubstructures> t{};
        for (int r = 0; r < 9; ++r)
            for (int c = 0; c < 9; ++c) t[r][c] = r * 9 + c;
        for (int c = 0; c < 9; ++c)
            for (int r = 0; r < 9; ++r) t[9 + c][r] = r * 9 + c;
        for (int b = 0; b < 9; ++b) {
            const int r0 = (b / 3) * 3, c0 = (b % 3) * 3;
            for (int k = 0; k < 9; ++k) t[18 + b][k] = (r0 + k / 3) * 9 + (c0 + k % 3);
        }
        return t;
    }();
    return table[static_cast<std::size_t>(s)];
}

class Board {
public:
    Board() { cells_.fill(0); }

    int at(int r, int c) const { return cells_[static_cast<std::size_t>((r - 1) * 9 + (c - 1))]; }
    int at_index(int idx) const { return cells_[static_cast<std::size_t>(idx)]; }

    void set(int r, int c, int d) {
        cells_[static_cast<std::size_t>((r - 1) * 9 + (c - 1))] = static_cast<std::uint8_t>(d);
    }
    void set_index(int idx, int d) { cells_[static_cast<std::size_t>(idx)] = static_cast<std::uint8_t>(d); }
    void clear(int r, int c) { set(r, c, 0); }

    bool empty_at(int idx) const { return cells_[static_cast<std::size_t>(idx)] == 0; }

    int filled_count() const {
        int n = 0;
        for (auto v : cells_) n += (v != 0);
        return n;
    }
    bool complete() const { return filled_count() == kGridCells; }

    bool operator==(const Board&) const = default;

private:
    std::array<std::uint8_t, kGridCells> cells_;
};

// Accepts 81-char strings; '.' and '0' both denote an empty cell.
inline Board parse_grid(const std::string& text) {
    if (text.size() != kGridCells)
        throw std::invalid_argument("grid string must be 81 characters, got " +
                                    std::to_string(text.size()));
    Board b;
    for (int i = 0; i < kGridCells; ++i) {
        const char ch = text[static_cast<std::size_t>(i)];
        if (ch == '.' || ch == '0') continue;
        if (ch < '1' || ch > '9')
            throw std::invalid_argument(std::string("invalid grid character '") + ch + "' at index " +
                                        std::to_string(i));
        b.set_index(i, ch - '0');
    }
    return b;
}

// Canonical text form: digits, '.' for empty.
inline std::string to_text(const Board& b) {
    std::string s(kGridCells, '.');
    for (int i = 0; i < kGridCells; ++i)
        if (b.at_index(i) != 0) s[static_cast<std::size_t>(i)] = static_cast<char>('0' + b.at_index(i));
    return s;
}

// Candidate masks per cell: bit (d-1) set iff digit d is placeable.
// Filled cells carry an empty mask.
struct CandidateGrid {
    std::array<std::uint16_t, kGridCells> mask{};

    bool has(int idx, int d) const { return (mask[static_cast<std::size_t>(idx)] >> (d - 1)) & 1u; }
    int count(int idx) const {
        return std::popcount(static_cast<unsigned>(mask[static_cast<std::size_t>(idx)]));
    }
    int sole_digit(int idx) const {  // precondition: count(idx) == 1
        return std::countr_zero(static_cast<unsigned>(mask[static_cast<std::size_t>(idx)])) + 1;
    }
};

inline CandidateGrid compute_candidates(const Board& b) {
    std::array<std::uint16_t, 9> row_used{}, col_used{}, box_used{};
    for (int r = 1; r <= 9; ++r)
        for (int c = 1; c <= 9; ++c) {
            const int d = b.at(r, c);
            if (d == 0) continue;
            const std::uint16_t bit = static_cast<std::uint16_t>(1u << (d - 1));
            row_used[static_cast<std::size_t>(r - 1)] |= bit;
            col_used[static_cast<std::size_t>(c - 1)] |= bit;
            box_used[static_cast<std::size_t>(box_of(r, c) - 1)] |= bit;
        }
    CandidateGrid g;
    for (int r = 1; r <= 9; ++r)
        for (int c = 1; c <= 9; ++c) {
            const int idx = (r - 1) * 9 + (c - 1);
            if (b.at(r, c) != 0) {
                g.mask[static_cast<std::size_t>(idx)] = 0;
                continue;
            }
            const std::uint16_t used = static_cast<std::uint16_t>(
                row_used[static_cast<std::size_t>(r - 1)] | col_used[static_cast<std::size_t>(c - 1)] |
                box_used[static_cast<std::size_t>(box_of(r, c) - 1)]);
            g.mask[static_cast<std::size_t>(idx)] = static_cast<std::uint16_t>(~used & 0x1ffu);
        }
    return g;
}

// True iff the cell is empty and digit d conflicts with no peer.
inline bool is_valid_placement(const Board& b, int r, int c, int d) {
    if (d < 1 || d > 9 || r < 1 || r > 9 || c < 1 || c > 9) return false;
    if (b.at(r, c) != 0) return false;
    for (int k = 1; k <= 9; ++k) {
        if (b.at(r, k) == d || b.at(k, c) == d) return false;
    }
    const int r0 = ((r - 1) / 3) * 3 + 1, c0 = ((c - 1) / 3) * 3 + 1;
    for (int i = r0; i < r0 + 3; ++i)
        for (int j = c0; j < c0 + 3; ++j)
            if (b.at(i, j) == d) return false;
    return true;
}

// Empty cells whose candidate set is a singleton.
inline std::vector<Placement> find_naked_singles(const Board& b, const CandidateGrid& g) {
    std::vector<Placement> out;
    for (int idx = 0; idx < kGridCells; ++idx) {
        if (!b.empty_at(idx)) continue;
        if (g.count(idx) == 1) {
            const Cell cell = Cell::from_index(idx);
            out.push_back(Placement{cell.r, cell.c, g.sole_digit(idx)});
        }
    }
    return out;
}

inline std::vector<Placement> find_naked_singles(const Board& b) {
    return find_naked_singles(b, compute_candidates(b));
}

// (cell, digit) pairs where the digit is a candidate of exactly one empty
// cell within some substructure. Deduplicated across substructures; may
// overlap with naked singles (callers that care check those first).
inline std::vector<Placement> find_hidden_singles(const Board& b, const CandidateGrid& g) {
    std::array<std::uint16_t, kGridCells> seen{};  // digit bits already reported per cell
    std::vector<Placement> out;
    for (int s = 0; s < kNumSubstructures; ++s) {
        const auto& cells = substructure_cells(s);
        for (int d = 1; d <= 9; ++d) {
            int host = -1, n = 0;
            for (int idx : cells) {
                if (g.has(idx, d)) {
                    host = idx;
                    ++n;
                    if (n > 1) break;
                }
            }
            if (n != 1) continue;
            const std::uint16_t bit = static_cast<std::uint16_t>(1u << (d - 1));
            if (seen[static_cast<std::size_t>(host)] & bit) continue;
            seen[static_cast<std::size_t>(host)] |= bit;
            const Cell cell = Cell::from_index(host);
            out.push_back(Placement{cell.r, cell.c, d});
        }
    }
    return out;
}

inline std::vector<Placement> find_hidden_singles(const Board& b) {
    return find_hidden_singles(b, compute_candidates(b));
}

// Digit-presence over substructures: bit (s*9 + d-1) set iff digit d has
// been placed somewhere in substructure s. 243 bits total.
using PresenceMap = std::bitset<static_cast<std::size_t>(kNumSubstructures * kNumDigits)>;

inline PresenceMap presence_map(const Board& b) {
    PresenceMap m;
    for (int r = 1; r <= 9; ++r)
        for (int c = 1; c <= 9; ++c) {
            const int d = b.at(r, c);
            if (d == 0) continue;
            const auto sub = substructures_of(Cell{r, c});
            m.set(static_cast<std::size_t>(sub.row * 9 + (d - 1)));
            m.set(static_cast<std::size_t>(sub.col * 9 + (d - 1)));
            m.set(static_cast<std::size_t>(sub.box * 9 + (d - 1)));
        }
    return m;
}

// True iff no substructure contains a repeated digit (empties ignored).
inline bool consistent(const Board& b) {
    for (int s = 0; s < kNumSubstructures; ++s) {
        std::uint16_t used = 0;
        for (int idx : substructure_cells(s)) {
            const int d = b.at_index(idx);
            if (d == 0) continue;
            const std::uint16_t bit = static_cast<std::uint16_t>(1u << (d - 1));
            if (used & bit) return false;
            used |= bit;
        }
    }
    return true;
}

inline bool solved(const Board& b) { return b.complete() && consistent(b); }

struct SolveResult {
    int solution_count = 0;  // capped at the requested limit
    Board solution;          // first solution found (valid iff count > 0)
};

// Deterministic exhaustive solver: minimum-remaining-values cell choice
// (lowest index breaks ties), digits tried ascending. Counts solutions up
// to `limit`; the ground-truth oracle for generators and replay checks.
inline SolveResult brute_force_solve(const Board& start, int limit = 2) {
    SolveResult res;
    if (!consistent(start)) return res;
    Board b = start;

    struct Frame {
        std::array<std::uint16_t, 9> row{}, col{}, box{};
    } used;
    for (int r = 1; r <= 9; ++r)
        for (int c = 1; c <= 9; ++c) {
            const int d = b.at(r, c);
            if (d == 0) continue;
            const std::uint16_t bit = static_cast<std::uint16_t>(1u << (d - 1));
            used.row[static_cast<std::size_t>(r - 1)] |= bit;
            used.col[static_cast<std::size_t>(c - 1)] |= bit;
            used.box[static_cast<std::size_t>(box_of(r, c) - 1)] |= bit;
        }

    auto rec = [&](auto&& self) -> bool {  // returns true when limit reached
        int best = -1, best_count = 10;
        std::uint16_t best_mask = 0;
        for (int idx = 0; idx < kGridCells; ++idx) {
            if (!b.empty_at(idx)) continue;
            const int r = idx / 9, c = idx % 9, bx = 3 * (r / 3) + c / 3;
            const std::uint16_t mask = static_cast<std::uint16_t>(
                ~(used.row[static_cast<std::size_t>(r)] | used.col[static_cast<std::size_t>(c)] |
                  used.box[static_cast<std::size_t>(bx)]) &
                0x1ffu);
            const int n = std::popcount(static_cast<unsigned>(mask));
            if (n == 0) return false;
            if (n < best_count) {
                best = idx;
                best_count = n;
                best_mask = mask;
                if (n == 1) break;
            }
        }
        if (best < 0) {
            if (res.solution_count == 0) res.solution = b;
            ++res.solution_count;
            return res.solution_count >= limit;
        }
        const int r = best / 9, c = best % 9, bx = 3 * (r / 3) + c / 3;
        for (int d = 1; d <= 9; ++d) {
            const std::uint16_t bit = static_cast<std::uint16_t>(1u << (d - 1));
            if (!(best_mask & bit)) continue;
            b.set_index(best, d);
            used.row[static_cast<std::size_t>(r)] |= bit;
            used.col[static_cast<std::size_t>(c)] |= bit;
            used.box[static_cast<std::size_t>(bx)] |= bit;
            const bool done = self(self);
            b.set_index(best, 0);
            used.row[static_cast<std::size_t>(r)] &= static_cast<std::uint16_t>(~bit);
            used.col[static_cast<std::size_t>(c)] &= static_cast<std::uint16_t>(~bit);
            used.box[static_cast<std::size_t>(bx)] &= static_cast<std::uint16_t>(~bit);
            if (done) return true;
        }
        return false;
    };
    rec(rec);
    return res;
}

}  // namespace mechlab
