#pragma once

// Puzzle corpus I/O. The on-disk shape follows the public sudoku-3m CSV:
//
//   id,puzzle,solution,clues,difficulty
//
// puzzle/solution are 81-char strings ('.' or '0' for empty; we emit '.').
// Column order is taken from the header row; unknown extra columns are
// ignored, and the numeric columns are optional (clues is derived from the
// puzzle string when absent).

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mechlab/grid.hpp"

namespace mechlab {

struct PuzzleRecord {
    std::string id;
    std::string puzzle;    // 81 chars
    std::string solution;  // 81 chars, may be empty if unknown
    int clues = 0;
    double difficulty = 0.0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            out.push_back(field);
            field.clear();
        } else if (ch != '\r') {
            field += ch;
        }
    }
    out.push_back(field);
    return out;
}

}  // namespace detail

inline std::vector<PuzzleRecord> load_puzzle_csv(const std::string& path, std::size_t max_records = 0) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open puzzle csv: " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty puzzle csv: " + path);
    const auto header = detail::split_csv_line(line);
    int col_id = -1, col_puzzle = -1, col_solution = -1, col_clues = -1, col_difficulty = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const std::string& name = header[i];
        if (name == "id") col_id = static_cast<int>(i);
        else if (name == "puzzle") col_puzzle = static_cast<int>(i);
        else if (name == "solution") col_solution = static_cast<int>(i);
        else if (name == "clues") col_clues = static_cast<int>(i);
        else if (name == "difficulty") col_difficulty = static_cast<int>(i);
        // anything else: ignored
    }
    if (col_id < 0 || col_puzzle < 0)
        throw std::runtime_error("puzzle csv missing required columns id,puzzle: " + path);

    std::vector<PuzzleRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        auto field = [&](int col) -> std::string {
            return (col >= 0 && static_cast<std::size_t>(col) < fields.size())
                       ? fields[static_cast<std::size_t>(col)]
                       : std::string{};
        };
        PuzzleRecord rec;
        rec.id = field(col_id);
        rec.puzzle = field(col_puzzle);
        rec.solution = field(col_solution);
        if (rec.puzzle.size() != kGridCells)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": puzzle string must be 81 characters");
        if (!rec.solution.empty() && rec.solution.size() != kGridCells)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": solution string must be 81 characters");
        const std::string clues_str = field(col_clues);
        if (!clues_str.empty()) {
            rec.clues = std::stoi(clues_str);
        } else {
            for (char ch : rec.puzzle) rec.clues += (ch != '.' && ch != '0');
        }
        const std::string diff_str = field(col_difficulty);
        if (!diff_str.empty()) rec.difficulty = std::stod(diff_str);
        records.push_back(std::move(rec));
        if (max_records != 0 && records.size() >= max_records) break;
    }
    return records;
}

inline void write_puzzle_csv(const std::string& path, const std::vector<PuzzleRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write puzzle csv: " + path);
    out << "id,puzzle,solution,clues,difficulty\n";
    for (const auto& rec : records) {
        out << rec.id << ',' << rec.puzzle << ',' << rec.solution << ',' << rec.clues << ','
            << rec.difficulty << '\n';
    }
    if (!out) throw std::runtime_error("short write to puzzle csv: " + path);
}

}  // namespace mechlab
