#pragma once

// Token language for solving traces and the replay validator.
//
// Vocabulary (734 ids):
//   0..728   placement tokens [RrCc=d], id = (r-1)*81 + (c-1)*9 + (d-1)
//   729      CluesEnd   separates the clue prefix from the solving body
//   730      Push       snapshot the board before a guess
//   731      Pop        restore the most recent un-restored snapshot
//   732      Success    terminal token, board must be solved
//   733      Pad        batch filler only; never valid inside a trace

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mechlab/grid.hpp"

namespace mechlab {

using TokenId = std::uint16_t;

inline constexpr TokenId kNumPlacementTokens = 729;
inline constexpr TokenId kTokCluesEnd = 729;
inline constexpr TokenId kTokPush = 730;
inline constexpr TokenId kTokPop = 731;
inline constexpr TokenId kTokSuccess = 732;
inline constexpr TokenId kTokPad = 733;
inline constexpr int kVocabSize = 734;

inline bool is_placement_token(TokenId t) { return t < kNumPlacementTokens; }

inline TokenId encode_placement(int r, int c, int d) {
    return static_cast<TokenId>((r - 1) * 81 + (c - 1) * 9 + (d - 1));
}
inline TokenId encode_placement(const Placement& p) { return encode_placement(p.r, p.c, p.d); }

inline Placement decode_placement(TokenId t) {
    const int v = t;
    return Placement{v / 81 + 1, (v % 81) / 9 + 1, v % 9 + 1};
}

inline std::string token_to_string(TokenId t) {
    switch (t) {
        case kTokCluesEnd: return "CluesEnd";
        case kTokPush: return "Push";
        case kTokPop: return "Pop";
        case kTokSuccess: return "Success";
        case kTokPad: return "Pad";
        default: break;
    }
    if (!is_placement_token(t)) throw std::invalid_argument("token id out of range: " + std::to_string(t));
    const Placement p = decode_placement(t);
    std::string s = "[R";
    s += static_cast<char>('0' + p.r);
    s += 'C';
    s += static_cast<char>('0' + p.c);
    s += '=';
    s += static_cast<char>('0' + p.d);
    s += ']';
    return s;
}

inline std::optional<TokenId> token_from_string(const std::string& s) {
    if (s == "CluesEnd") return kTokCluesEnd;
    if (s == "Push") return kTokPush;
    if (s == "Pop") return kTokPop;
    if (s == "Success") return kTokSuccess;
    if (s == "Pad") return kTokPad;
    // [RrCc=d]
    if (s.size() != 8 || s[0] != '[' || s[1] != 'R' || s[3] != 'C' || s[5] != '=' || s[7] != ']')
        return std::nullopt;
    const int r = s[2] - '0', c = s[4] - '0', d = s[6] - '0';
    if (r < 1 || r > 9 || c < 1 || c > 9 || d < 1 || d > 9) return std::nullopt;
    return encode_placement(r, c, d);
}

inline std::vector<std::string> tokens_to_strings(const std::vector<TokenId>& toks) {
    std::vector<std::string> out;
    out.reserve(toks.size());
    for (TokenId t : toks) out.push_back(token_to_string(t));
    return out;
}

inline std::vector<TokenId> tokens_from_strings(const std::vector<std::string>& strs) {
    std::vector<TokenId> out;
    out.reserve(strs.size());
    for (const auto& s : strs) {
        const auto t = token_from_string(s);
        if (!t) throw std::invalid_argument("unparseable token: " + s);
        out.push_back(*t);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Replay: execute a trace against board semantics and validate the grammar.

enum class ReplayStatus {
    Ok,
    Empty,
    PadInTrace,
    MissingCluesEnd,
    DuplicateCluesEnd,
    ControlBeforeCluesEnd,
    InvalidPlacement,     // occupied cell or peer conflict at apply time
    UnmatchedPop,
    TokenAfterSuccess,
    SuccessBoardUnsolved,
    MissingSuccess,
    NakedSinglePriority,  // pre-state had naked singles, token ignored them
};

inline const char* replay_status_name(ReplayStatus s) {
    switch (s) {
        case ReplayStatus::Ok: return "Ok";
        case ReplayStatus::Empty: return "Empty";
        case ReplayStatus::PadInTrace: return "PadInTrace";
        case ReplayStatus::MissingCluesEnd: return "MissingCluesEnd";
        case ReplayStatus::DuplicateCluesEnd: return "DuplicateCluesEnd";
        case ReplayStatus::ControlBeforeCluesEnd: return "ControlBeforeCluesEnd";
        case ReplayStatus::InvalidPlacement: return "InvalidPlacement";
        case ReplayStatus::UnmatchedPop: return "UnmatchedPop";
        case ReplayStatus::TokenAfterSuccess: return "TokenAfterSuccess";
        case ReplayStatus::SuccessBoardUnsolved: return "SuccessBoardUnsolved";
        case ReplayStatus::MissingSuccess: return "MissingSuccess";
        case ReplayStatus::NakedSinglePriority: return "NakedSinglePriority";
    }
    return "?";
}

struct ReplayOptions {
    // Enforce the deduction-order invariant: whenever the pre-token board is
    // non-contradictory and has at least one naked single, the next token
    // must place one of them. (Contradictory states are exempt: the only
    // legal move there is Pop.)
    bool check_naked_single_priority = true;
    // Require the trace to terminate in Success (off when replaying
    // truncated or in-progress model output).
    bool require_success = true;
};

struct ReplayResult {
    ReplayStatus status = ReplayStatus::Ok;
    int error_pos = -1;       // token index where validation failed
    Board final_board;        // state after the last applied token
    int clue_count = 0;
    int clues_end_pos = -1;
    int max_push_depth = 0;
    int pop_count = 0;

    bool ok() const { return status == ReplayStatus::Ok; }
};

inline bool board_has_contradiction(const Board& b, const CandidateGrid& g) {
    for (int idx = 0; idx < kGridCells; ++idx)
        if (b.empty_at(idx) && g.count(idx) == 0) return true;
    return false;
}

inline ReplayResult replay(const std::vector<TokenId>& trace, const ReplayOptions& opt = {}) {
    ReplayResult res;
    if (trace.empty()) {
        res.status = ReplayStatus::Empty;
        res.error_pos = 0;
        return res;
    }
    Board board;
    std::vector<Board> stack;
    bool seen_clues_end = false;
    bool seen_success = false;
    int depth = 0;

    for (std::size_t pos = 0; pos < trace.size(); ++pos) {
        const TokenId tok = trace[pos];
        auto fail = [&](ReplayStatus st) {
            res.status = st;
            res.error_pos = static_cast<int>(pos);
            res.final_board = board;
            return res;
        };
        if (seen_success) return fail(ReplayStatus::TokenAfterSuccess);
        if (tok == kTokPad) return fail(ReplayStatus::PadInTrace);

        if (!seen_clues_end) {
            if (tok == kTokCluesEnd) {
                seen_clues_end = true;
                res.clues_end_pos = static_cast<int>(pos);
                continue;
            }
            if (!is_placement_token(tok)) return fail(ReplayStatus::ControlBeforeCluesEnd);
            const Placement p = decode_placement(tok);
            if (!is_valid_placement(board, p.r, p.c, p.d)) return fail(ReplayStatus::InvalidPlacement);
            board.set(p.r, p.c, p.d);
            ++res.clue_count;
            continue;
        }

        if (tok == kTokCluesEnd) return fail(ReplayStatus::DuplicateCluesEnd);

        if (opt.check_naked_single_priority && (is_placement_token(tok) || tok == kTokPush || tok == kTokPop)) {
            const CandidateGrid g = compute_candidates(board);
            if (!board_has_contradiction(board, g)) {
                const auto singles = find_naked_singles(board, g);
                if (!singles.empty()) {
                    bool hit = false;
                    if (is_placement_token(tok)) {
                        const Placement p = decode_placement(tok);
                        for (const auto& ns : singles)
                            if (ns == p) {
                                hit = true;
                                break;
                            }
                    }
                    if (!hit) return fail(ReplayStatus::NakedSinglePriority);
                }
            }
        }

        if (is_placement_token(tok)) {
            const Placement p = decode_placement(tok);
            if (!is_valid_placement(board, p.r, p.c, p.d)) return fail(ReplayStatus::InvalidPlacement);
            board.set(p.r, p.c, p.d);
        } else if (tok == kTokPush) {
            stack.push_back(board);
            ++depth;
            if (depth > res.max_push_depth) res.max_push_depth = depth;
        } else if (tok == kTokPop) {
            if (stack.empty()) return fail(ReplayStatus::UnmatchedPop);
            board = stack.back();
            stack.pop_back();
            --depth;
            ++res.pop_count;
        } else if (tok == kTokSuccess) {
            if (!solved(board)) return fail(ReplayStatus::SuccessBoardUnsolved);
            seen_success = true;
        }
    }

    res.final_board = board;
    if (!seen_clues_end) {
        res.status = ReplayStatus::MissingCluesEnd;
        res.error_pos = static_cast<int>(trace.size()) - 1;
    } else if (opt.require_success && !seen_success) {
        res.status = ReplayStatus::MissingSuccess;
        res.error_pos = static_cast<int>(trace.size()) - 1;
    }
    return res;
}

}  // namespace mechlab
